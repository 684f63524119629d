"""Sparse doubly-selective (delay-Doppler) channel models.

A channel on ``N`` samples has ``L`` delay taps and Doppler bins
``q = -Q..Q``.  Gains live on a boolean support mask of shape
``(L, 2Q+1)``; column ``j`` holds Doppler bin ``q = j - Q``.

Tap trajectories are stored as ``h[l, n]``.  The received sample at time
``n`` is ``r[n] = sum_l h[l, n] s[n - l] + w[n]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridDims:
    N: int
    L: int
    Q: int

    def __post_init__(self):
        if self.L < 1 or self.Q < 0:
            raise ValueError("need L >= 1 and Q >= 0")
        if self.N <= self.L:
            raise ValueError(f"frame length N={self.N} must exceed the delay spread L={self.L}")
        if 2 * self.Q + 1 > self.N:
            raise ValueError("Doppler grid larger than the frame")

    @property
    def n_doppler(self) -> int:
        return 2 * self.Q + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.L, 2 * self.Q + 1)

    def doppler_bins(self) -> np.ndarray:
        return np.arange(-self.Q, self.Q + 1)


@dataclass(frozen=True)
class SparsityProfile:
    """Activity probabilities and support type (1, 2 or 3).

    ``p_d`` is the chance that a delay tap is active, ``p_D`` the chance that
    a Doppler bin is active.  Type 1 shares one Doppler pattern across active
    delays, type 2 draws Doppler bins per delay, type 3 draws one contiguous
    (non-wrapping) cluster per delay of ``cluster_len`` bins.
    """

    p_d: float
    p_D: float
    type: int = 1
    cluster_len: int | None = None

    def __post_init__(self):
        if not (0 < self.p_d <= 1 and 0 < self.p_D <= 1):
            raise ValueError("activity probabilities must be in (0, 1]")
        if self.type not in (1, 2, 3):
            raise ValueError(f"unknown support type {self.type}")

    def cluster(self, dims: GridDims) -> int:
        c = self.cluster_len
        if c is None:
            c = math.ceil(dims.n_doppler * self.p_D)
        if not 1 <= c <= dims.n_doppler:
            raise ValueError(f"cluster length {c} does not fit {dims.n_doppler} Doppler bins")
        return c

    def expected_points(self, dims: GridDims) -> float:
        """Expected number of active delay-Doppler points."""
        if self.type == 3:
            return dims.L * self.p_d * self.cluster(dims)
        return dims.L * self.p_d * dims.n_doppler * self.p_D


def sparsity_levels(dims: GridDims, profile: SparsityProfile) -> tuple[int, int]:
    """Expected hierarchical sparsity ``(s_d, s_D)`` rounded up."""
    s_d = math.ceil(dims.L * profile.p_d - 1e-12)
    if profile.type == 3:
        s_D = profile.cluster(dims)
    else:
        s_D = math.ceil(dims.n_doppler * profile.p_D - 1e-12)
    return max(s_d, 1), max(s_D, 1)


@dataclass
class SupportMask:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def L(self) -> int:
        return self.mask.shape[0]

    @property
    def Q(self) -> int:
        return (self.mask.shape[1] - 1) // 2

    def points(self) -> list[tuple[int, int]]:
        """Active ``(l, q)`` pairs, delay-major then Doppler ascending."""
        ls, js = np.nonzero(self.mask)
        return [(int(l), int(j) - self.Q) for l, j in zip(ls, js)]

    def active_delays(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def per_delay_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def s_d(self) -> int:
        return int(self.mask.any(axis=1).sum())

    @property
    def s_D(self) -> int:
        return int(self.per_delay_counts().max(initial=0))

    def __len__(self):
        return int(self.mask.sum())


def sample_support(dims: GridDims, profile: SparsityProfile, rng: np.random.Generator) -> SupportMask:
    L, D = dims.shape
    delay_on = rng.random(L) < profile.p_d
    if profile.type == 1:
        row = rng.random(D) < profile.p_D
        mask = np.outer(delay_on, row)
    elif profile.type == 2:
        mask = delay_on[:, None] & (rng.random((L, D)) < profile.p_D)
    else:
        c = profile.cluster(dims)
        starts = rng.integers(0, D - c + 1, size=L)
        cols = np.arange(D)
        mask = (cols[None, :] >= starts[:, None]) & (cols[None, :] < starts[:, None] + c)
        mask &= delay_on[:, None]
    return SupportMask(mask)


def _cgauss(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    return np.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass
class OnGridChannel:
    dims: GridDims
    support: SupportMask
    alpha: np.ndarray  # (L, 2Q+1) complex, zero off the support
    var: float

    def coefficients(self) -> np.ndarray:
        return self.alpha

    def trajectories(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """``h[l, n]`` for ``n`` in ``[start, stop)``; defaults to the frame."""
        N = self.dims.N
        stop = N if stop is None else stop
        n = np.arange(start, stop)
        q = self.dims.doppler_bins()
        return self.alpha @ np.exp(2j * np.pi * np.outer(q, n) / N)


@dataclass
class OffGridChannel:
    """Channel with ``N_D`` paths per active grid point, each with its own
    fractional Doppler offset ``kappa`` in ``(-1/2, 1/2]`` bins."""

    dims: GridDims
    support: SupportMask
    gains: np.ndarray  # (n_active, N_D) complex
    kappa: np.ndarray  # (n_active, N_D) real
    var: float
    N_D: int = field(init=False)

    def __post_init__(self):
        self.N_D = self.gains.shape[1]

    def point_trajectories(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Trajectory of each active point, shape ``(n_active, stop - start)``."""
        N = self.dims.N
        stop = N if stop is None else stop
        n = np.arange(start, stop)
        q = np.array([p[1] for p in self.support.points()], dtype=float)
        if len(q) == 0:
            return np.zeros((0, stop - start), complex)
        nu = (q[:, None] + self.kappa) / N  # (n_active, N_D)
        ph = np.exp(2j * np.pi * nu[:, :, None] * n[None, None, :])
        return np.einsum("pi,pin->pn", self.gains, ph)

    def trajectories(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        N = self.dims.N
        stop = N if stop is None else stop
        pts = self.point_trajectories(start, stop)
        h = np.zeros((self.dims.L, stop - start), complex)
        for (l, _), traj in zip(self.support.points(), pts):
            h[l] += traj
        return h


def gen_ongrid(dims: GridDims, profile: SparsityProfile, rng: np.random.Generator,
               support: SupportMask | None = None) -> OnGridChannel:
    """Draw an on-grid channel.  Gain variance is set so that the expected
    total channel power is one."""
    if support is None:
        support = sample_support(dims, profile, rng)
    var = 1.0 / profile.expected_points(dims)
    alpha = np.zeros(dims.shape, complex)
    alpha[support.mask] = _cgauss(rng, len(support), var)
    return OnGridChannel(dims, support, alpha, var)


def gen_offgrid(dims: GridDims, profile: SparsityProfile, N_D: int, rng: np.random.Generator,
                support: SupportMask | None = None) -> OffGridChannel:
    if N_D < 1:
        raise ValueError("need at least one path per grid point")
    if support is None:
        support = sample_support(dims, profile, rng)
    var = 1.0 / (N_D * profile.expected_points(dims))
    k = len(support)
    gains = _cgauss(rng, (k, N_D), var)
    # uniform on (-1/2, 1/2]
    kappa = 0.5 - rng.random((k, N_D))
    return OffGridChannel(dims, support, gains, kappa, var)


def apply_channel(h: np.ndarray, s: np.ndarray, noise_var: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Pass ``s`` through the time-varying taps ``h`` (shape ``(L, n_rx)``).

    ``s`` must carry ``L - 1`` samples of history in front: ``s[k]`` is the
    transmit sample at time ``k - (L - 1)``, so ``len(s) == n_rx + L - 1``.
    """
    L, n_rx = h.shape
    if s.shape[-1] != n_rx + L - 1:
        raise ValueError(f"expected {n_rx + L - 1} input samples, got {s.shape[-1]}")
    r = np.zeros(n_rx, complex)
    for l in range(L):
        r += h[l] * s[L - 1 - l:L - 1 - l + n_rx]
    if noise_var > 0:
        if rng is None:
            raise ValueError("noise requested without a generator")
        r += _cgauss(rng, n_rx, noise_var)
    return r


def channel_to_dict(ch, seed=None) -> dict:
    d = ch.dims
    out = {
        "schema": 1,
        "model": "ongrid" if isinstance(ch, OnGridChannel) else "offgrid",
        "dims": {"N": d.N, "L": d.L, "Q": d.Q},
        "var": ch.var,
        "support": [[int(l), int(q)] for l, q in ch.support.points()],
        "seed": seed,
    }
    if isinstance(ch, OnGridChannel):
        g = ch.alpha[ch.support.mask]
        out["gains"] = [[float(z.real), float(z.imag)] for z in g]
    else:
        out["N_D"] = ch.N_D
        out["gains"] = [[[float(z.real), float(z.imag)] for z in row] for row in ch.gains]
        out["kappa"] = [[float(k) for k in row] for row in ch.kappa]
    return out


def channel_from_dict(obj: dict):
    dims = GridDims(**obj["dims"])
    mask = np.zeros(dims.shape, bool)
    for l, q in obj["support"]:
        mask[l, q + dims.Q] = True
    support = SupportMask(mask)
    g = np.asarray(obj["gains"], float)
    if obj["model"] == "ongrid":
        g = g.reshape(-1, 2)
        alpha = np.zeros(dims.shape, complex)
        alpha[mask] = g[:, 0] + 1j * g[:, 1]
        return OnGridChannel(dims, support, alpha, obj["var"])
    g = g.reshape(len(support), obj["N_D"], 2)
    gains = g[..., 0] + 1j * g[..., 1]
    kappa = np.asarray(obj["kappa"], float).reshape(gains.shape)
    return OffGridChannel(dims, support, gains, kappa, obj["var"])


def save_channel(ch, path, seed=None) -> None:
    with open(path, "w") as f:
        json.dump(channel_to_dict(ch, seed), f, indent=1)


def load_channel(path):
    with open(path) as f:
        return channel_from_dict(json.load(f))


def trajectories_csv(h: np.ndarray) -> str:
    """CSV with one row per sample: ``n, re_0, im_0, re_1, im_1, ...``."""
    L, n = h.shape
    head = ["n"] + [f"{p}_{l}" for l in range(L) for p in ("re", "im")]
    lines = [",".join(head)]
    inter = np.empty((n, 2 * L))
    inter[:, 0::2] = h.real.T
    inter[:, 1::2] = h.imag.T
    for i in range(n):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in inter[i]]))
    return "\n".join(lines) + "\n"
