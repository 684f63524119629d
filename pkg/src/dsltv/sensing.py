"""Measurement matrices, hierarchical thresholding and HiHTP.

A measurement matrix maps channel unknowns to the received pilot samples
``y_p``.  Its columns are obtained by pushing the pilot frame through a
single path (delay ``l``, time-varying gain ``g[n]``) and demodulating, so
they are exact for the simulated waveform, including any inter-carrier
leakage within the pilot frame.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .channel import GridDims, SupportMask
from .dpss import DpssBasis
from .waveform import PilotPlan, WaveformConfig, channel_input, demodulate, modulate

_CHUNK = 128


@dataclass
class MeasurementMatrix:
    """``A`` (rows x D) together with how rows and columns are labelled.

    ``columns[j]`` is ``(l, q)`` on-grid or ``(l, q, b)`` off-grid.
    ``row_groups[i]`` lists the demodulated indices summed into row ``i``
    (a single index unless AFDM folding is on); ``noise_scale[i]`` is the
    resulting noise-variance multiplier.
    """

    A: np.ndarray
    columns: list
    row_groups: list
    noise_scale: np.ndarray
    block_size: int
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.A.shape

    @property
    def blocks(self) -> np.ndarray:
        return np.array([c[0] for c in self.columns])

    def observe(self, y: np.ndarray) -> np.ndarray:
        """Pick (and fold) the sensing rows from a demodulated frame."""
        if all(len(g) == 1 for g in self.row_groups):
            return y[..., [g[0] for g in self.row_groups]]
        return np.stack([y[..., g].sum(axis=-1) for g in self.row_groups], axis=-1)


def pilot_stream(cfg: WaveformConfig, plan: PilotPlan) -> np.ndarray:
    """Pilot-only transmit stream aligned for the channel (``L - 1`` history)."""
    return channel_input(cfg, modulate(cfg, plan.frame(cfg.N)))


def path_responses(cfg: WaveformConfig, s: np.ndarray, delays, gains) -> np.ndarray:
    """Demodulated response of ``s`` to single paths.

    ``delays`` has one entry per path and ``gains`` is ``(n_paths, rx_len)``;
    path ``j`` produces ``r[n] = gains[j, n] * s(n - delays[j])``.
    Returns ``(n_paths, N)``.
    """
    L, n_rx = cfg.L, cfg.rx_len
    delays = np.asarray(delays)
    out = np.empty((len(delays), cfg.N), complex)
    for a in range(0, len(delays), _CHUNK):
        d = delays[a:a + _CHUNK]
        idx = (L - 1 - d)[:, None] + np.arange(n_rx)[None, :]
        R = gains[a:a + _CHUNK] * s[idx]
        out[a:a + _CHUNK] = demodulate(cfg, R)
    return out


def _row_groups(cfg: WaveformConfig, plan: PilotPlan, fold: bool):
    N = cfg.N
    if not fold:
        return [[int(k)] for k in plan.P], np.ones(len(plan.P))
    if cfg.kind != "afdm":
        raise ValueError("folding is only defined for AFDM pilot regions")
    Q = cfg.Q
    core = cfg.P_afdm * (cfg.L - 1) + 1
    if Q > core:
        raise ValueError("edge guards longer than the core region; cannot fold once")
    groups = []
    for a, b in plan.regions:
        start = a + Q
        for j in range(core):
            g = [start + j]
            if j >= core - Q:
                g.append(start + j - core)  # left edge wraps onto the top
            if j < Q:
                g.append(start + j + core)  # right edge wraps onto the bottom
            groups.append([int(k) % N for k in g])
    scale = np.array([len(g) for g in groups], float)
    return groups, scale


def _assemble(cfg, plan, delays, gains, columns, block_size, fold, meta):
    s = pilot_stream(cfg, plan)
    Y = path_responses(cfg, s, delays, gains)
    groups, scale = _row_groups(cfg, plan, fold)
    mm = MeasurementMatrix(np.empty((len(groups), len(columns)), complex), columns, groups, scale,
                           block_size, meta)
    mm.A = mm.observe(Y).T.copy()
    return mm


def doppler_gains(q, n: np.ndarray, N: int) -> np.ndarray:
    return np.exp(2j * np.pi * np.outer(q, n) / N)


def build_measurement_ongrid(cfg: WaveformConfig, plan: PilotPlan, dims: GridDims,
                             fold: bool = False) -> MeasurementMatrix:
    """Columns ordered ``l (2Q+1) + (q + Q)``, blocks are delay taps."""
    L, Q, N = dims.L, dims.Q, dims.N
    cols = [(l, q) for l in range(L) for q in range(-Q, Q + 1)]
    n = np.arange(cfg.rx_len)
    delays = np.repeat(np.arange(L), 2 * Q + 1)
    gains = np.tile(doppler_gains(np.arange(-Q, Q + 1), n, N), (L, 1))
    return _assemble(cfg, plan, delays, gains, cols, 2 * Q + 1, fold,
                     {"model": "ongrid", "waveform": cfg.to_dict(), "fold": fold})


def build_measurement_offgrid(cfg: WaveformConfig, plan: PilotPlan, support: SupportMask,
                              basis: DpssBasis, fold: bool = False) -> MeasurementMatrix:
    """Columns ``(l, q, b)``: Doppler-shifted DPSS vector ``b`` on path ``(l, q)``.

    ``basis`` must span the receive window (``cfg.rx_len`` samples); its
    Doppler shifts use the frame length ``cfg.N``.
    """
    pts = support.points()
    if not pts:
        raise ValueError("empty support")
    if basis.N != cfg.rx_len:
        raise ValueError(f"basis window {basis.N} != receive window {cfg.rx_len}")
    Qb = basis.Q
    n = np.arange(cfg.rx_len)
    cols = [(l, q, b) for l, q in pts for b in range(Qb)]
    delays = np.repeat([p[0] for p in pts], Qb)
    ph = doppler_gains([p[1] for p in pts], n, cfg.N)  # (n_pts, rx_len)
    gains = (ph[:, None, :] * basis.U.T[None, :, :]).reshape(-1, cfg.rx_len)
    return _assemble(cfg, plan, delays, gains, cols, Qb, fold,
                     {"model": "offgrid", "waveform": cfg.to_dict(), "fold": fold})


def build_measurement_paths(cfg: WaveformConfig, plan: PilotPlan, delays, gains, columns,
                            block_size: int = 1, fold: bool = False) -> MeasurementMatrix:
    """Measurement matrix for arbitrary per-column delay and gain sequences."""
    return _assemble(cfg, plan, np.asarray(delays), np.asarray(gains), list(columns), block_size,
                     fold, {"model": "custom", "waveform": cfg.to_dict(), "fold": fold})


# hierarchical thresholding --------------------------------------------------

@dataclass
class HierSupport:
    mask: np.ndarray  # (n_blocks, block_size) bool

    @property
    def blocks(self) -> list[int]:
        return [int(b) for b in np.flatnonzero(self.mask.any(axis=1))]

    def entries(self, block: int) -> list[int]:
        return [int(e) for e in np.flatnonzero(self.mask[block])]

    def flat(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    def __eq__(self, other):
        return isinstance(other, HierSupport) and np.array_equal(self.mask, other.mask)


def hier_threshold(x: np.ndarray, s_d: int, s_D: int, block_size: int | None = None) -> HierSupport:
    """Keep the ``s_D`` largest entries of each block, then the ``s_d`` blocks
    with largest remaining norm.  Ties go to the lower index."""
    x = np.asarray(x)
    if x.ndim == 1:
        if block_size is None:
            raise ValueError("flat input needs block_size")
        x = x.reshape(-1, block_size)
    nb, bs = x.shape
    if not (1 <= s_d <= nb and 1 <= s_D <= bs):
        raise ValueError(f"sparsity ({s_d}, {s_D}) outside grid ({nb}, {bs})")
    mag = np.abs(x)
    order = np.argsort(-mag, axis=1, kind="stable")[:, :s_D]
    mask = np.zeros((nb, bs), bool)
    np.put_along_axis(mask, order, True, axis=1)
    energy = np.where(mask, mag ** 2, 0.0).sum(axis=1)
    keep = np.argsort(-energy, kind="stable")[:s_d]
    out = np.zeros_like(mask)
    out[keep] = mask[keep]
    return HierSupport(out)


@dataclass
class HihtpResult:
    alpha: np.ndarray
    support: HierSupport
    iterations: int
    converged: bool
    rank_deficient: bool
    history: list = field(default_factory=list)


# singular values below this fraction of the largest are treated as zero
LS_RCOND = 1e-9


def _restricted_ls(A, y, idx):
    sub = A[:, idx]
    z, _, rank, _ = sla.lstsq(sub, y, cond=LS_RCOND, lapack_driver="gelsd")
    return z, rank < len(idx)


def hihtp(M, y: np.ndarray, s_d: int, s_D: int, k_max: int = 20, block_size: int | None = None,
          normalize: bool = True, truth: np.ndarray | None = None, gram: np.ndarray | None = None,
          quiet: bool = False) -> HihtpResult:
    """Hierarchical hard thresholding pursuit.

    ``M`` is a :class:`MeasurementMatrix` or a plain array (then pass
    ``block_size``).  With ``normalize`` the gradient step is scaled by the
    inverse mean column energy, which makes the step size independent of the
    pilot power; the least-squares step is unaffected.  If ``truth`` is given
    the error of each iterate is logged in ``history``.  ``gram`` may carry a
    precomputed ``A^H A`` when the same matrix is reused.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if isinstance(M, MeasurementMatrix):
        A, block_size = M.A, M.block_size
    else:
        A = np.asarray(M)
    if block_size is None:
        raise ValueError("block_size required")
    D = A.shape[1]
    G = A.conj().T @ A if gram is None else gram
    b = A.conj().T @ y
    mu = 1.0
    if normalize:
        e = np.real(np.trace(G)) / D
        mu = 1.0 / e if e > 0 else 1.0
    alpha = np.zeros(D, complex)
    idx = np.zeros(0, int)
    z = np.zeros(0, complex)
    omega = None
    flagged = False
    history = []
    converged = False
    k = 0
    for k in range(1, k_max + 1):
        proxy = alpha + mu * (b - G[:, idx] @ z)
        new = hier_threshold(proxy, s_d, s_D, block_size)
        idx = new.flat()
        z, deficient = _restricted_ls(A, y, idx)
        flagged |= deficient
        alpha = np.zeros(D, complex)
        alpha[idx] = z
        rec = {"iteration": k, "residual": float(np.linalg.norm(y - A[:, idx] @ z))}
        if truth is not None:
            rec["error"] = float(np.linalg.norm(alpha - truth))
        history.append(rec)
        if omega is not None and new == omega:
            converged = True
            omega = new
            break
        omega = new
    if flagged and not quiet:
        warnings.warn("rank-deficient restricted least squares; used minimum-norm solution",
                      RuntimeWarning, stacklevel=2)
    return HihtpResult(alpha, omega, k, converged, flagged, history)


@dataclass
class AutoLevelResult:
    result: HihtpResult
    s_d: int
    s_D: int
    tried: int


def hihtp_auto(M, y: np.ndarray, noise_var: float, k_max: int = 20, max_levels=None,
               tau: float = 2.0, block_size: int | None = None) -> AutoLevelResult:
    """HiHTP with sparsity levels picked from the data.

    Candidate levels are tried in order of increasing ``s_d * s_D`` (then
    ``s_d``); the first whose residual energy drops to the noise level,
    ``noise_var * (m - K + tau * sqrt(m - K))`` for ``m`` rows and ``K``
    unknowns, is kept.  Only the noise variance has to be known.
    """
    if isinstance(M, MeasurementMatrix):
        A, block_size, scale = M.A, M.block_size, M.noise_scale
    else:
        A = np.asarray(M)
        scale = np.ones(A.shape[0])
    nb = A.shape[1] // block_size
    max_d, max_D = (nb, block_size) if max_levels is None else max_levels
    m = A.shape[0]
    sig = noise_var * scale.mean()
    y_energy = float(np.vdot(y, y).real)
    cands = sorted((a * b, a, b) for a in range(1, max_d + 1) for b in range(1, max_D + 1))
    G = A.conj().T @ A
    res = None
    for i, (K, a, b) in enumerate(cands, 1):
        if K >= m:
            break
        res = hihtp(A, y, a, b, k_max=k_max, block_size=block_size, gram=G, quiet=True)
        r2 = res.history[-1]["residual"] ** 2
        if noise_var > 0:
            ok = r2 <= sig * ((m - K) + tau * np.sqrt(m - K))
        else:
            ok = r2 <= 1e-20 * max(y_energy, 1e-300)
        if ok:
            return AutoLevelResult(res, a, b, i)
    if res is None:
        res = hihtp(A, y, 1, 1, k_max=k_max, block_size=block_size, gram=G, quiet=True)
        a = b = 1
    return AutoLevelResult(res, a, b, len(cands))


def hier_supports(n_blocks: int, block_size: int, s_d: int, s_D: int):
    """Every support with exactly ``s_d`` blocks of ``s_D`` entries."""
    inner = list(itertools.combinations(range(block_size), s_D))
    for blocks in itertools.combinations(range(n_blocks), s_d):
        for choice in itertools.product(inner, repeat=s_d):
            yield np.array([b * block_size + e for b, ent in zip(blocks, choice) for e in ent])


def exhaustive_hier_ls(A: np.ndarray, y: np.ndarray, block_size: int, s_d: int, s_D: int):
    """Brute-force best hierarchically sparse least-squares fit (tiny problems)."""
    nb = A.shape[1] // block_size
    best, best_res = None, np.inf
    for idx in hier_supports(nb, block_size, s_d, s_D):
        z, _ = _restricted_ls(A, y, idx)
        res = np.linalg.norm(y - A[:, idx] @ z)
        if res < best_res - 1e-12:
            best_res = res
            best = np.zeros(A.shape[1], complex)
            best[idx] = z
    return best, best_res


# HiRIP probe ----------------------------------------------------------------

def _normalized(A: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(np.sum(np.abs(A) ** 2, axis=0)))
    return A / scale if scale > 0 else A


def _support_delta(A: np.ndarray, idx) -> float:
    G = A[:, idx].conj().T @ A[:, idx]
    w = np.linalg.eigvalsh(G)
    return float(max(w[-1] - 1.0, 1.0 - w[0]))


def hirip_probe(M, s_d: int, s_D: int, trials: int, rng: np.random.Generator,
                block_size: int | None = None, exhaustive: bool = False) -> np.ndarray:
    """Empirical lower bound on the hierarchical RIP constant.

    For each sampled support with ``s_d`` blocks of ``s_D`` entries the
    worst isometry defect is taken from the extreme eigenvalues of the
    restricted Gram matrix (columns scaled to unit mean energy).  Returns
    the per-support defects; their maximum is the estimate.  This can only
    under-estimate the true constant unless ``exhaustive`` is set.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if isinstance(M, MeasurementMatrix):
        A, block_size = M.A, M.block_size
    else:
        A = np.asarray(M)
    A = _normalized(A)
    nb = A.shape[1] // block_size
    if exhaustive:
        return np.array([_support_delta(A, idx) for idx in hier_supports(nb, block_size, s_d, s_D)])
    out = np.empty(trials)
    for t in range(trials):
        blocks = rng.choice(nb, s_d, replace=False)
        idx = np.concatenate([b * block_size + rng.choice(block_size, s_D, replace=False) for b in blocks])
        out[t] = _support_delta(A, np.sort(idx))
    return out
