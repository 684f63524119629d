"""Discrete prolate spheroidal sequences and the per-(l, q) basis expansion.

The basis for a window of ``N`` samples and half-bandwidth ``W`` is the set of
leading eigenvectors of the prolate matrix ``C[n, m] = sin(2 pi W (n - m)) /
(pi (n - m))``.  They are computed from the commuting symmetric tridiagonal
matrix, which keeps the cost at O(N Q) and avoids forming ``C``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal, matmul_toeplitz
from scipy.signal import fftconvolve

# eigenvalues below this are not used for extrapolation (1 / lambda blows up)
LAMBDA_FLOOR = 1e-12

# dense matrices are only built below this window length
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class ProlateSpec:
    """Window length, number of basis vectors and half-bandwidth.

    ``W`` defaults to ``1 / (2 N)``, one Doppler bin.  For windows that are
    longer than the nominal frame (OFDM with cyclic prefixes) pass the
    bandwidth of the nominal frame explicitly.
    """

    N: int
    Q_BEM: int
    W: float | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("window length must be positive")
        if not 1 <= self.Q_BEM <= self.N:
            raise ValueError(f"need 1 <= Q_BEM <= N, got Q_BEM={self.Q_BEM}, N={self.N}")
        if not 0.0 < self.bandwidth < 0.5:
            raise ValueError(f"half-bandwidth must lie in (0, 1/2), got {self.bandwidth}")

    @property
    def bandwidth(self) -> float:
        return 1.0 / (2 * self.N) if self.W is None else float(self.W)


@dataclass
class DpssBasis:
    """Orthonormal DPSS vectors (columns of ``U``) and their concentrations."""

    U: np.ndarray
    lam: np.ndarray
    W: float
    info: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def Q(self) -> int:
        return self.U.shape[1]

    def truncate(self, Q: int) -> "DpssBasis":
        if Q > self.Q:
            raise ValueError(f"basis holds only {self.Q} vectors")
        return DpssBasis(self.U[:, :Q].copy(), self.lam[:Q].copy(), self.W, dict(self.info))


def prolate_entry(n, m, W):
    """Entry of the prolate matrix, vectorised.  The diagonal is ``2 W``."""
    d = np.asarray(n, dtype=float) - np.asarray(m, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sin(2 * np.pi * W * d) / (np.pi * d)
    return np.where(d == 0, 2.0 * W, out)


def prolate_column(N: int, W: float, start: int = 0) -> np.ndarray:
    """First column of the Toeplitz prolate matrix for lags start..start+N-1."""
    return prolate_entry(np.arange(start, start + N), 0, W)


def prolate_matvec(x: np.ndarray, W: float) -> np.ndarray:
    """``C @ x`` without forming ``C`` (FFT-based Toeplitz product)."""
    c = prolate_column(x.shape[0], W)
    return matmul_toeplitz(c, x)


def prolate_matrix(N: int, W: float) -> np.ndarray:
    """Dense prolate matrix.  Only meant for checks on small windows."""
    if N > DENSE_LIMIT:
        raise MemoryError(f"refusing to build a dense {N}x{N} prolate matrix")
    n = np.arange(N)
    return prolate_entry(n[:, None], n[None, :], W)


def _tridiagonal(N: int, W: float):
    n = np.arange(N)
    d = ((N - 1 - 2 * n) / 2.0) ** 2 * np.cos(2 * np.pi * W)
    e = np.arange(1, N) * (N - np.arange(1, N)) / 2.0
    return d, e


def _fix_sign(U: np.ndarray) -> np.ndarray:
    # first entry that is clearly nonzero gets a positive sign
    for b in range(U.shape[1]):
        col = U[:, b]
        idx = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())[0]
        if col[idx] < 0:
            U[:, b] = -col
    return U


def concentration(U: np.ndarray, W: float, nodes: int | None = None) -> np.ndarray:
    """In-band energy fraction of each column of ``U``.

    Evaluates ``u^T C u`` as the integral of ``|U(f)|^2`` over ``[-W, W]``
    with Gauss-Legendre quadrature.  This keeps full relative precision for
    tiny concentrations, where the plain Rayleigh quotient bottoms out at
    round-off.
    """
    N = U.shape[0]
    if nodes is None:
        # the integrand oscillates about 2 N W times over the band
        nodes = int(64 + 6 * N * W)
    x, w = np.polynomial.legendre.leggauss(nodes)
    f = W * x
    t = np.arange(N) - (N - 1) / 2.0
    lam = np.empty(U.shape[1])
    chunk = max(1, int(4e6 // (N * nodes)))
    for s in range(0, U.shape[1], chunk):
        block = U[:, s:s + chunk]
        E = np.exp(-2j * np.pi * np.outer(f, t))
        spec = np.abs(E @ block) ** 2
        lam[s:s + chunk] = W * (w @ spec)
    return lam


def compute_dpss(spec: ProlateSpec) -> DpssBasis:
    """Leading ``spec.Q_BEM`` DPSS vectors, ordered by decreasing concentration."""
    N, Q, W = spec.N, spec.Q_BEM, spec.bandwidth
    if N == 1:
        return DpssBasis(np.ones((1, 1)), np.array([2 * W]), W)
    d, e = _tridiagonal(N, W)
    theta, V = eigh_tridiagonal(d, e, select="i", select_range=(N - Q, N - 1))
    V = V[:, ::-1].copy()
    U = _fix_sign(V)
    lam = concentration(U, W)
    info = {"tridiagonal_eigenvalues": theta[::-1].tolist()}
    if np.any(np.diff(lam) > 1e-9):
        # the tridiagonal ordering and the concentration ordering always agree
        # in exact arithmetic; flag it if round-off says otherwise
        info["order_warning"] = True
    return DpssBasis(U, lam, W, info)


def _delay_phase(q: int, n: np.ndarray, N: int) -> np.ndarray:
    return np.exp(2j * np.pi * q * n / N)


def bem_project(h: np.ndarray, q: int, basis: DpssBasis, N: int | None = None) -> np.ndarray:
    """Coefficients of a trajectory in the Doppler-shifted DPSS basis.

    ``N`` is the Doppler grid size (frame length); it defaults to the window
    length.  The shift uses the window sample index ``n``.
    """
    N = basis.N if N is None else N
    n = np.arange(basis.N)
    return basis.U.T @ (np.conj(_delay_phase(q, n, N)) * h)


def bem_reconstruct(beta: np.ndarray, q: int, basis: DpssBasis, N: int | None = None) -> np.ndarray:
    N = basis.N if N is None else N
    n = np.arange(basis.N)
    return _delay_phase(q, n, N) * (basis.U @ beta)


def build_B(N: int, Q: int, basis: DpssBasis) -> np.ndarray:
    """Delay-Doppler representation of all Doppler-shifted bases.

    Returns the ``N x (2Q+1) Q_BEM`` matrix ``[B_{-Q}, ..., B_Q]`` with
    ``B_q[k, b] = Ut[b, (k - q) mod N] / sqrt(N)`` and ``Ut`` the unitary DFT
    of the basis vectors.  Only for small ``N``.
    """
    if N > DENSE_LIMIT:
        raise MemoryError(f"B would be {N} x {(2 * Q + 1) * basis.Q}; refusing")
    if basis.N != N:
        raise ValueError("basis window must equal N")
    Ut = np.fft.fft(basis.U, axis=0, norm="ortho")
    blocks = [np.roll(Ut, q, axis=0) / np.sqrt(N) for q in range(-Q, Q + 1)]
    return np.concatenate(blocks, axis=1)


def extend_dpss(basis: DpssBasis, start: int, stop: int, floor: float = LAMBDA_FLOOR):
    """Evaluate the DPSS vectors on sample indices ``start .. stop-1``.

    Uses ``u_b(n) = (1 / lambda_b) sum_k C(k, n) u_b(k)``, which reproduces the
    vectors inside the window and band-limits them outside.  Columns whose
    concentration falls below ``floor`` are set to zero and reported.

    Returns ``(samples, excluded)`` with ``samples`` of shape
    ``(stop - start, Q)`` and ``excluded`` a list of column indices.
    """
    if stop <= start:
        return np.zeros((0, basis.Q)), []
    N = basis.N
    # lags needed: n - k for n in [start, stop), k in [0, N)
    lags = np.arange(start - (N - 1), stop)
    c = prolate_entry(lags, 0, basis.W)
    out = np.empty((stop - start, basis.Q))
    for b in range(basis.Q):
        out[:, b] = fftconvolve(c, basis.U[:, b], mode="valid")
    excluded = [b for b in range(basis.Q) if basis.lam[b] < floor]
    keep = np.ones(basis.Q, bool)
    keep[excluded] = False
    out[:, keep] /= basis.lam[keep]
    out[:, ~keep] = 0.0
    if excluded:
        warnings.warn(f"DPSS columns {excluded} have concentration below {floor:g}; "
                      "dropped from the extension", RuntimeWarning, stacklevel=2)
    return out, excluded


def expected_truncation_nmse(basis: DpssBasis, Q_BEM: int) -> float:
    """Expected NMSE of projecting a flat-spectrum band-limited process onto
    the first ``Q_BEM`` vectors: discarded concentration over ``2 N W``.

    ``basis`` must hold enough vectors that the ones it omits are negligible.
    """
    return float(basis.lam[Q_BEM:].sum() / (2 * basis.N * basis.W))


def save_basis(basis: DpssBasis, path) -> None:
    path = Path(path)
    np.savez(path, U=basis.U, lam=basis.lam, W=basis.W)


def load_basis(path) -> DpssBasis:
    with np.load(Path(path)) as z:
        return DpssBasis(z["U"], z["lam"], float(z["W"]))


def basis_to_json(basis: DpssBasis) -> str:
    return json.dumps({"N": basis.N, "Q": basis.Q, "W": basis.W,
                       "lam": [float(v) for v in basis.lam]})
