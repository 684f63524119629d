"""LMMSE estimation of basis-expansion coefficients and DPSS prediction.

Each active delay-Doppler point ``(l, q)`` carries ``Q_BEM`` coefficients
``beta[(l, q), b]``; its trajectory over the receive window is
``exp(i 2 pi q n / N) * sum_b beta_b u_b[n]``.  Coefficient vectors are
stacked point by point in ``SupportMask.points()`` order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.signal import fftconvolve

from .channel import SupportMask
from .dpss import LAMBDA_FLOOR, DpssBasis, extend_dpss, prolate_entry, prolate_matrix
from .sensing import MeasurementMatrix


@dataclass
class EstimationResult:
    beta: np.ndarray
    h_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class PredictionResult:
    h_ext: np.ndarray
    start: int
    horizon: int
    excluded: list = field(default_factory=list)

    def mse(self, h_true: np.ndarray) -> float:
        """Mean over the horizon of the squared error summed over taps."""
        if self.horizon == 0:
            return 0.0
        return float(np.sum(np.abs(self.h_ext - h_true) ** 2) / self.horizon)


def beta_prior_variance(basis: DpssBasis, n_points: int, var_alpha: float, N_D: int, N: int,
                        mode: str = "exact") -> np.ndarray:
    """Prior variance of every stacked coefficient.

    A point with ``N_D`` paths of variance ``var_alpha`` and Doppler offsets
    uniform over one bin has covariance ``N_D var_alpha N C`` (``C`` the
    prolate matrix at ``W = 1/(2N)``), so its coefficients are independent
    with variances ``N N_D var_alpha lambda_b``.  ``"isotropic"`` replaces
    the ``lambda_b`` by their mean.
    """
    lam = basis.lam
    if mode == "exact":
        per = N * N_D * var_alpha * lam
    elif mode == "isotropic":
        per = np.full(basis.Q, N * N_D * var_alpha * lam.mean())
    else:
        raise ValueError(f"unknown prior mode {mode!r}")
    return np.tile(per, n_points)


def _as_array(M):
    if isinstance(M, MeasurementMatrix):
        return M.A, M.noise_scale
    A = np.asarray(M)
    return A, np.ones(A.shape[0])


def lmmse_beta(M, y: np.ndarray, prior_var, noise_var: float, form: str = "auto"):
    """Linear MMSE estimate of ``beta`` from ``y = M beta + w``.

    ``prior_var`` is a scalar or per-coefficient vector, ``noise_var`` the
    per-sample noise variance (multiplied row-wise by the matrix's
    ``noise_scale`` for folded rows).  ``form`` picks the Gram
    (``D x D``) or covariance (``rows x rows``) system; ``"auto"`` takes the
    smaller.  With ``noise_var == 0`` the prior-weighted minimum-norm
    solution is returned.

    Returns ``(beta_hat, diagnostics)``.
    """
    A, scale = _as_array(M)
    rows, D = A.shape
    g = np.broadcast_to(np.asarray(prior_var, float), (D,)).copy()
    if np.any(g < 0) or noise_var < 0:
        raise ValueError("variances must be nonnegative")
    sg = np.sqrt(g)
    Aw = A * sg[None, :]
    diag = {"rows": rows, "cols": D}
    if noise_var == 0:
        z, _, rank, sv = sla.lstsq(Aw, y, lapack_driver="gelsd")
        diag.update(rank=int(rank), rank_deficient=bool(rank < D), form="noiseless",
                    cond=float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf)
        return sg * z, diag
    s = noise_var * scale
    if form == "auto":
        form = "gram" if D <= rows else "covariance"
    if form == "gram":
        # whitened normal equations: (Aw^H S^-1 Aw + I) z = Aw^H S^-1 y
        As = Aw / s[:, None]
        G = Aw.conj().T @ As + np.eye(D)
        c, low = sla.cho_factor(G, lower=True)
        z = sla.cho_solve((c, low), As.conj().T @ y)
        beta = sg * z
    elif form == "covariance":
        K = Aw @ Aw.conj().T + np.diag(s)
        c, low = sla.cho_factor(K, lower=True)
        beta = g * (A.conj().T @ sla.cho_solve((c, low), y))
    else:
        raise ValueError(f"unknown form {form!r}")
    diag["form"] = form
    diag["residual"] = float(np.linalg.norm(y - A @ beta))
    return beta, diag


def reconstruct(beta: np.ndarray, support: SupportMask, basis: DpssBasis, N: int) -> np.ndarray:
    """Tap trajectories ``(L, basis.N)`` from stacked coefficients."""
    pts = support.points()
    B = np.asarray(beta).reshape(len(pts), basis.Q)
    n = np.arange(basis.N)
    h = np.zeros((support.L, basis.N), complex)
    for (l, q), b in zip(pts, B):
        h[l] += np.exp(2j * np.pi * q * n / N) * (basis.U @ b)
    return h


def predict(beta: np.ndarray, support: SupportMask, basis: DpssBasis, N_ext: int, N: int,
            floor: float = LAMBDA_FLOOR) -> PredictionResult:
    """Extrapolate the estimated taps to ``n = basis.N .. basis.N + N_ext - 1``."""
    if N_ext < 0:
        raise ValueError("negative horizon")
    start = basis.N
    pts = support.points()
    if N_ext == 0:
        return PredictionResult(np.zeros((support.L, 0), complex), start, 0)
    U_ext, excluded = extend_dpss(basis, start, start + N_ext, floor)
    B = np.asarray(beta).reshape(len(pts), basis.Q)
    n = np.arange(start, start + N_ext)
    h = np.zeros((support.L, N_ext), complex)
    for (l, q), b in zip(pts, B):
        h[l] += np.exp(2j * np.pi * q * n / N) * (U_ext @ b)
    return PredictionResult(h, start, N_ext, excluded)


def leading_coefficients(beta: np.ndarray, n_points: int, q_keep: int) -> np.ndarray:
    """Keep the first ``q_keep`` coefficients of every point."""
    B = np.asarray(beta).reshape(n_points, -1)
    return B[:, :q_keep].ravel()


def estimate_channel(M: MeasurementMatrix, y, support: SupportMask, basis: DpssBasis, N: int,
                     var_alpha: float, N_D: int, noise_var: float, prior: str = "exact",
                     Q_BEM: int | None = None) -> EstimationResult:
    """LMMSE estimate on ``basis``, reported on its first ``Q_BEM`` vectors.

    When ``basis`` holds more vectors than ``Q_BEM`` the extra (guard)
    vectors absorb the part of the channel the truncated expansion cannot
    represent.  Under the off-grid prior those components are uncorrelated
    with the leading coefficients, so this is the linear MMSE estimate of the
    truncated coefficients themselves rather than of a mismatched model.
    """
    g = beta_prior_variance(basis, len(support), var_alpha, N_D, N, prior)
    beta, diag = lmmse_beta(M, y, g, noise_var)
    Q_BEM = basis.Q if Q_BEM is None else Q_BEM
    if Q_BEM < basis.Q:
        beta = leading_coefficients(beta, len(support), Q_BEM)
        basis = basis.truncate(Q_BEM)
    return EstimationResult(beta, reconstruct(beta, support, basis, N), diag)


# reduced-rank MMSE oracle ---------------------------------------------------

def reduced_rank_mmse(h_lq: np.ndarray, q: int, basis: DpssBasis, rank: int, n_target, N: int | None = None,
                      floor: float = LAMBDA_FLOOR):
    """Rank-``rank`` MMSE prediction of one point's trajectory at ``n_target``.

    Builds ``f = E U diag(1/lambda) U^H E^H rho^H`` with ``rho[m] =
    exp(-i 2 pi m q / N) C(n, m)`` and returns ``exp(i 2 pi n q / N) f^H h``.
    The leading phase restores the Doppler rotation of the target sample.
    """
    Nw = basis.N
    N = Nw if N is None else N
    if not 1 <= rank <= basis.Q:
        raise ValueError(f"rank must be within 1..{basis.Q}")
    lam = basis.lam[:rank]
    if np.any(lam < floor):
        raise ValueError("requested rank uses eigenvalues below the floor")
    U = basis.U[:, :rank]
    m = np.arange(Nw)
    e = np.exp(2j * np.pi * q * m / N)
    n_target = np.atleast_1d(np.asarray(n_target))
    rho = np.conj(e)[None, :] * prolate_entry(n_target[:, None], m[None, :], basis.W)
    # f for each target as columns
    F = (e[:, None] * U) @ ((U.T @ (np.conj(e)[:, None] * rho.conj().T)) / lam[:, None])
    out = np.exp(2j * np.pi * q * n_target / N) * (F.conj().T @ h_lq)
    return out if out.size > 1 else out[0]


def full_mmse_predict(h_lq: np.ndarray, q: int, W: float, n_target, N: int | None = None):
    """Unconstrained MMSE predictor with the dense prolate covariance (small windows)."""
    Nw = len(h_lq)
    N = Nw if N is None else N
    m = np.arange(Nw)
    C = prolate_matrix(Nw, W)
    n_target = np.atleast_1d(np.asarray(n_target))
    rho = prolate_entry(n_target[:, None], m[None, :], W)
    e = np.exp(2j * np.pi * q * m / N)
    out = np.exp(2j * np.pi * q * n_target / N) * (rho @ np.linalg.solve(C, np.conj(e) * h_lq))
    return out if out.size > 1 else out[0]


# multi-band single-BEM baseline -----------------------------------------------

def multiband_column(qs, W: float, N: int, lags: np.ndarray) -> np.ndarray:
    """``K[n, k] = c(n - k)`` with ``c(d) = sum_q exp(i 2 pi q d / N) sin(2 pi W d) / (pi d)``."""
    lags = np.asarray(lags)
    base = prolate_entry(lags, 0, W)
    rot = np.zeros(lags.shape, complex)
    for q in qs:
        rot += np.exp(2j * np.pi * q * lags / N)
    return rot * base


def multiband_matrix(qs, W: float, N: int, window: int | None = None) -> np.ndarray:
    """Dense multi-band prolate matrix over ``window`` samples (default ``N``)."""
    n = np.arange(N if window is None else window)
    return multiband_column(qs, W, N, n[:, None] - n[None, :])


def _multiband_matvec(qs, W, N, X):
    c = multiband_column(qs, W, N, np.arange(X.shape[0]))
    return sla.matmul_toeplitz((c, np.conj(c)), X)


@dataclass
class SingleBemBasis:
    qs: tuple
    V: np.ndarray
    lam: np.ndarray
    W: float
    N: int  # Doppler grid size

    @property
    def Q(self):
        return self.V.shape[1]

    def extend(self, start: int, stop: int, floor: float = LAMBDA_FLOOR):
        Nw = self.V.shape[0]
        lags = np.arange(start - (Nw - 1), stop)
        c = multiband_column(self.qs, self.W, self.N, lags)
        out = np.empty((stop - start, self.Q), complex)
        for b in range(self.Q):
            out[:, b] = fftconvolve(c, self.V[:, b], mode="valid")
        keep = self.lam >= floor
        out[:, keep] /= self.lam[keep]
        out[:, ~keep] = 0
        return out, [int(b) for b in np.flatnonzero(~keep)]


def singlebem_basis(qs, Q_check: int, window: int, N: int, W: float | None = None,
                    method: str = "ritz", shifted: DpssBasis | None = None) -> SingleBemBasis:
    """Leading eigenvectors of the multi-band prolate matrix for Doppler bins ``qs``.

    ``method="ritz"`` restricts the problem to the span of the shifted
    elementary DPSS vectors (a few more per band than needed), where all the
    band energy lives; ``"dense"`` diagonalises the full matrix.
    """
    qs = tuple(int(q) for q in qs)
    W = 1.0 / (2 * N) if W is None else W
    if method == "dense":
        K = multiband_matrix(qs, W, N, window)
        w, V = np.linalg.eigh(K)
        order = np.argsort(w)[::-1][:Q_check]
        return SingleBemBasis(qs, V[:, order], w[order], W, N)
    per = min(window, math.ceil(Q_check / len(qs)) + 4)
    if shifted is None or shifted.Q < per:
        from .dpss import ProlateSpec, compute_dpss
        shifted = compute_dpss(ProlateSpec(window, per, W))
    n = np.arange(window)
    S = np.concatenate([np.exp(2j * np.pi * q * n / N)[:, None] * shifted.U[:, :per] for q in qs], axis=1)
    Qm, _ = np.linalg.qr(S)
    KQ = _multiband_matvec(qs, W, N, Qm)
    H = Qm.conj().T @ KQ
    H = (H + H.conj().T) / 2
    w, Y = np.linalg.eigh(H)
    order = np.argsort(w)[::-1][:Q_check]
    V = Qm @ Y[:, order]
    # fix the global phase so the largest entry is real positive
    for b in range(V.shape[1]):
        i = np.argmax(np.abs(V[:, b]))
        V[:, b] *= np.exp(-1j * np.angle(V[i, b]))
    return SingleBemBasis(qs, V, w[order], W, N)


class SingleBemCache:
    """Bases keyed by the Doppler support pattern of a tap.

    With ``per_bin`` the basis size is ``Q_check`` times the number of
    active bins in the pattern, otherwise it is ``Q_check``.
    """

    def __init__(self, Q_check: int, window: int, N: int, W: float | None = None, method: str = "ritz",
                 per_bin: bool = False):
        self.Q_check, self.window, self.N = Q_check, window, N
        self.W = 1.0 / (2 * N) if W is None else W
        self.method = method
        self.per_bin = per_bin
        self._store: dict[tuple, SingleBemBasis] = {}
        self._shifted = None

    def size_for(self, qs) -> int:
        return self.Q_check * len(qs) if self.per_bin else self.Q_check

    def get(self, qs) -> SingleBemBasis:
        key = tuple(sorted(int(q) for q in qs))
        if key not in self._store:
            size = self.size_for(key)
            if self.method == "ritz" and (self._shifted is None
                                          or self._shifted.Q < min(self.window, size + 4)):
                from .dpss import ProlateSpec, compute_dpss
                per = min(self.window, size + 4)
                self._shifted = compute_dpss(ProlateSpec(self.window, per, self.W))
            self._store[key] = singlebem_basis(key, size, self.window, self.N, self.W,
                                               self.method, self._shifted)
        return self._store[key]

    @property
    def n_bases(self) -> int:
        return len(self._store)

    @property
    def entries(self) -> int:
        """Stored basis vectors."""
        return sum(b.Q for b in self._store.values())


def singlebem_baseline(h: np.ndarray, qs, Q_check: int, N_ext: int = 0, N: int | None = None,
                       cache: SingleBemCache | None = None):
    """Project one tap trajectory on its multi-band basis and extrapolate.

    Returns ``(coefficients, reconstruction, prediction)``.
    """
    window = len(h)
    N = window if N is None else N
    basis = cache.get(qs) if cache is not None else singlebem_basis(qs, Q_check, window, N)
    c = basis.V.conj().T @ h
    rec = basis.V @ c
    pred = np.zeros(0, complex)
    if N_ext:
        ext, _ = basis.extend(window, window + N_ext)
        pred = ext @ c
    return c, rec, pred


def singlebem_prior_variance(bases: list, var_alpha: float, N_D: int, N: int) -> np.ndarray:
    return np.concatenate([N * N_D * var_alpha * np.clip(b.lam, 0, None) for b in bases])


def codebook_multi(L: int, Q: int, Q_BEM: int) -> int:
    """Vectors needed by the shifted elementary bases (one per delay, bin and order)."""
    return Q_BEM * L * (2 * Q + 1)


def codebook_single(L: int, Q: int, Q_check: int) -> int:
    """Vectors needed if every nonempty Doppler pattern of every tap gets its own basis."""
    return L * Q_check * (2 ** (2 * Q + 1) - 1)
