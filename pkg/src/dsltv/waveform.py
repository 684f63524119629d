"""Modulation / demodulation pairs, embedded pilot plans and overhead counts.

Four waveforms share one convention.  ``modulate`` maps ``N`` transform
domain symbols to a transmit stream that starts with a prefix of
``prefix_len`` samples; channel time ``n = 0`` is the first sample after the
prefix.  ``demodulate`` takes the ``rx_len`` received samples that follow
(or a whole transmit-length buffer, in which case the prefix is dropped) and
returns ``N`` transform-domain samples.  Both accept stacked inputs along
leading axes.

AFDM uses the time-domain chirp ``exp(i 2 pi c1 n^2)`` with
``c1 = sign * P_afdm / (2N)`` and the symbol-domain chirp ``c2``.  A path
with delay ``l`` and Doppler bin ``q`` then moves symbol ``m`` to received
index ``k`` with ``m = (k - q + 2 N c1 l) mod N``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("scm", "ofdm", "afdm", "otfs")


@dataclass(frozen=True)
class WaveformConfig:
    kind: str
    N: int
    L: int
    Q: int
    # AFDM
    P_afdm: int = 1
    c1_sign: int = 1
    c2: float = 0.0
    # OFDM
    N_fft: int | None = None
    N_cp: int | None = None
    # OTFS
    N_otfs: int | None = None
    M_otfs: int | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown waveform {self.kind!r}")
        if self.L < 1 or self.N <= self.L:
            raise ValueError("need 1 <= L < N")
        if kind == "afdm":
            if self.P_afdm < 1:
                raise ValueError("P_afdm must be >= 1")
            if self.c1_sign not in (1, -1):
                raise ValueError("c1_sign must be +1 or -1")
        if kind == "ofdm":
            if self.N_fft is None or self.N % self.N_fft:
                raise ValueError("OFDM needs N_fft dividing N")
            if self.N_cp is None:
                object.__setattr__(self, "N_cp", self.L - 1)
            if self.N_cp < 0:
                raise ValueError("negative cyclic prefix")
        if kind == "otfs":
            if self.N_otfs is None and self.M_otfs is None:
                raise ValueError("OTFS needs N_otfs or M_otfs")
            n_otfs = self.N_otfs if self.N_otfs is not None else self.N // self.M_otfs
            m_otfs = self.M_otfs if self.M_otfs is not None else self.N // n_otfs
            if n_otfs * m_otfs != self.N:
                raise ValueError("N_otfs * M_otfs must equal N")
            object.__setattr__(self, "N_otfs", n_otfs)
            object.__setattr__(self, "M_otfs", m_otfs)

    # geometry -----------------------------------------------------------

    @property
    def c1(self) -> float:
        return self.c1_sign * self.P_afdm / (2.0 * self.N)

    @property
    def n_symb(self) -> int:
        return self.N // self.N_fft if self.kind == "ofdm" else 1

    @property
    def prefix_len(self) -> int:
        return self.N_cp if self.kind == "ofdm" else self.L - 1

    @property
    def tx_length(self) -> int:
        if self.kind == "ofdm":
            return self.n_symb * (self.N_fft + self.N_cp)
        return self.N + self.L - 1

    @property
    def rx_len(self) -> int:
        """Samples the receiver looks at, counted from channel time 0."""
        return self.tx_length - self.prefix_len

    def ofdm_symbol_starts(self) -> np.ndarray:
        """Channel-time index of the first useful sample of each OFDM symbol."""
        return np.arange(self.n_symb) * (self.N_fft + self.N_cp)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "N": self.N, "L": self.L, "Q": self.Q}
        if self.kind == "afdm":
            d.update(P_afdm=self.P_afdm, c1_sign=self.c1_sign, c2=self.c2)
        elif self.kind == "ofdm":
            d.update(N_fft=self.N_fft, N_cp=self.N_cp)
        elif self.kind == "otfs":
            d.update(N_otfs=self.N_otfs, M_otfs=self.M_otfs)
        return d


def _chirp(c: float, N: int) -> np.ndarray:
    n = np.arange(N, dtype=float)
    # n^2 mod 2N keeps the phase argument small for large N when c = P/(2N)
    return np.exp(2j * np.pi * c * n * n)


def modulate(cfg: WaveformConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != cfg.N:
        raise ValueError(f"expected {cfg.N} symbols, got {x.shape[-1]}")
    N, lead = cfg.N, cfg.prefix_len
    if cfg.kind == "scm":
        core = x
    elif cfg.kind == "afdm":
        core = np.fft.ifft(x * _chirp(cfg.c2, N), axis=-1, norm="ortho") * _chirp(cfg.c1, N)
    elif cfg.kind == "otfs":
        grid = x.reshape(x.shape[:-1] + (cfg.N_otfs, cfg.M_otfs))
        core = np.fft.ifft(grid, axis=-2, norm="ortho").reshape(x.shape)
    else:
        grid = x.reshape(x.shape[:-1] + (cfg.n_symb, cfg.N_fft))
        t = np.fft.ifft(grid, axis=-1, norm="ortho")
        if cfg.N_cp:
            t = np.concatenate([t[..., -cfg.N_cp:], t], axis=-1)
        return t.reshape(x.shape[:-1] + (cfg.tx_length,))

    if lead == 0:
        return core
    pre = core[..., N - lead:]
    if cfg.kind == "afdm":
        # chirp-periodic prefix: s[-j] = s[N - j] exp(-i 2 pi c1 (N^2 - 2 N j))
        j = np.arange(lead, 0, -1)
        pre = pre * np.exp(-2j * np.pi * cfg.c1 * (N * N - 2.0 * N * j))
    return np.concatenate([pre, core], axis=-1)


def demodulate(cfg: WaveformConfig, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=complex)
    n = r.shape[-1]
    if n == cfg.tx_length:
        r = r[..., cfg.prefix_len:]
    elif n != cfg.rx_len:
        raise ValueError(f"expected {cfg.rx_len} (or {cfg.tx_length}) samples, got {n}")
    N = cfg.N
    if cfg.kind == "scm":
        return r.copy()
    if cfg.kind == "afdm":
        return np.fft.fft(r * np.conj(_chirp(cfg.c1, N)), axis=-1, norm="ortho") * np.conj(_chirp(cfg.c2, N))
    if cfg.kind == "otfs":
        grid = r.reshape(r.shape[:-1] + (cfg.N_otfs, cfg.M_otfs))
        return np.fft.fft(grid, axis=-2, norm="ortho").reshape(r.shape)
    # OFDM: re-insert a dummy leading prefix so every symbol has the same stride
    stride = cfg.N_fft + cfg.N_cp
    pad = np.zeros(r.shape[:-1] + (cfg.N_cp,), complex)
    grid = np.concatenate([pad, r], axis=-1).reshape(r.shape[:-1] + (cfg.n_symb, stride))
    y = np.fft.fft(grid[..., cfg.N_cp:], axis=-1, norm="ortho")
    return y.reshape(r.shape[:-1] + (N,))


def channel_input(cfg: WaveformConfig, s: np.ndarray) -> np.ndarray:
    """Slice (or zero-pad) a transmit stream so it starts ``L - 1`` samples
    before channel time 0, as ``channel.apply_channel`` expects."""
    need = cfg.L - 1
    lead = cfg.prefix_len
    if lead >= need:
        return s[..., lead - need:]
    pad = np.zeros(s.shape[:-1] + (need - lead,), complex)
    return np.concatenate([pad, s], axis=-1)


def daft_index(k, l, q, cfg: WaveformConfig):
    """Transmit DAFT index that lands on received index ``k`` for path (l, q)."""
    shift = round(2 * cfg.N * cfg.c1)
    return (np.asarray(k) - q + shift * np.asarray(l)) % cfg.N


def afdm_path_phase(k, l, q, cfg: WaveformConfig):
    """Phase of the single-path DAFT response at received index ``k``."""
    m = daft_index(k, l, q, cfg)
    N = cfg.N
    k = np.asarray(k, dtype=float)
    return np.exp(2j * np.pi * (cfg.c1 * l * l - l * m / N + cfg.c2 * (m * m - k * k)))


# dense oracles (small N only) --------------------------------------------

def dense_tx(cfg: WaveformConfig) -> np.ndarray:
    """Explicit modulation matrix from textbook formulas, for checks."""
    if cfg.N > 1024:
        raise MemoryError("dense operators only for small frames")
    N = cfg.N
    if cfg.kind == "scm":
        core = np.eye(N, dtype=complex)
    elif cfg.kind == "afdm":
        n = np.arange(N)
        Fh = np.exp(2j * np.pi * np.outer(n, n) / N) / np.sqrt(N)
        core = np.diag(np.exp(2j * np.pi * cfg.c1 * n ** 2)) @ Fh @ np.diag(np.exp(2j * np.pi * cfg.c2 * n ** 2))
    elif cfg.kind == "otfs":
        k = np.arange(cfg.N_otfs)
        Fh = np.exp(2j * np.pi * np.outer(k, k) / cfg.N_otfs) / np.sqrt(cfg.N_otfs)
        core = np.kron(Fh, np.eye(cfg.M_otfs))
    else:
        f = np.arange(cfg.N_fft)
        Fh = np.exp(2j * np.pi * np.outer(f, f) / cfg.N_fft) / np.sqrt(cfg.N_fft)
        Tcp = np.vstack([np.eye(cfg.N_fft)[cfg.N_fft - cfg.N_cp:], np.eye(cfg.N_fft)])
        blk = Tcp @ Fh
        out = np.zeros((cfg.tx_length, N), complex)
        for t in range(cfg.n_symb):
            out[t * blk.shape[0]:(t + 1) * blk.shape[0], t * cfg.N_fft:(t + 1) * cfg.N_fft] = blk
        return out
    lead = cfg.prefix_len
    rows = [core[N - j] * (np.exp(-2j * np.pi * cfg.c1 * (N * N - 2 * N * j)) if cfg.kind == "afdm" else 1)
            for j in range(lead, 0, -1)]
    return np.vstack(rows + [core]) if rows else core


def dense_rx(cfg: WaveformConfig) -> np.ndarray:
    """Explicit demodulation matrix acting on the ``rx_len`` window."""
    if cfg.kind == "ofdm":
        f = np.arange(cfg.N_fft)
        F = np.exp(-2j * np.pi * np.outer(f, f) / cfg.N_fft) / np.sqrt(cfg.N_fft)
        out = np.zeros((cfg.N, cfg.rx_len), complex)
        for t, start in enumerate(cfg.ofdm_symbol_starts()):
            out[t * cfg.N_fft:(t + 1) * cfg.N_fft, start:start + cfg.N_fft] = F
        return out
    T = dense_tx(cfg)[cfg.prefix_len:]
    return np.conj(T.T)


# pilots -------------------------------------------------------------------

@dataclass
class PilotPlan:
    """Embedded pilots for one frame.

    ``positions`` are transform-domain indices carrying ``values``;
    ``P`` is the sorted array of received transform-domain indices used for
    sensing; ``regions`` lists, per pilot, the received index ranges it
    occupies; ``reserved`` marks transform-domain indices that must not carry
    data (pilots plus guards).
    """

    kind: str
    positions: np.ndarray
    values: np.ndarray
    P: np.ndarray
    regions: list
    reserved: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_pilots(self) -> int:
        return len(self.positions)

    def frame(self, N: int) -> np.ndarray:
        x = np.zeros(N, complex)
        x[self.positions] = self.values
        return x

    def data_positions(self, N: int) -> np.ndarray:
        return np.flatnonzero(~self.reserved)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "positions": [int(p) for p in self.positions],
            "values": [[float(v.real), float(v.imag)] for v in self.values],
            "P": [int(k) for k in self.P],
            "regions": [[int(a), int(b)] for a, b in self.regions],
            "meta": self.meta,
        }


def _random_starts(rng, lo: int, hi: int, n: int, width: int) -> np.ndarray:
    """``n`` non-overlapping windows of ``width`` inside ``[lo, hi)``, uniformly
    over all such arrangements."""
    free = (hi - lo) - n * width
    if free < 0:
        raise ValueError(f"{n} pilot regions of width {width} do not fit in {hi - lo} samples")
    gaps = np.sort(rng.choice(free + n, size=n, replace=False)) - np.arange(n)
    return lo + gaps + np.arange(n) * width


def _uniform_starts(lo: int, hi: int, n: int, width: int) -> np.ndarray:
    free = (hi - lo) - n * width
    if free < 0:
        raise ValueError(f"{n} pilot regions of width {width} do not fit in {hi - lo} samples")
    step = (hi - lo) / n
    starts = lo + np.floor(np.arange(n) * step + (step - width) / 2).astype(int)
    return starts


def _pilot_values(rng, n: int, amp: float) -> np.ndarray:
    return amp * np.exp(2j * np.pi * rng.random(n))


def _amplitude(N: int, n: int, power: str) -> float:
    if power == "frame":
        # whole frame energy N, so one unit of power per sample on average
        return math.sqrt(N / n)
    if power == "unit":
        return 1.0
    raise ValueError(f"unknown pilot power mode {power!r}")


def afdm_lattice_size(cfg: WaveformConfig) -> int:
    return 2 * math.ceil(cfg.Q / cfg.P_afdm) + 1


def afdm_region(cfg: WaveformConfig, m_p: int) -> tuple[int, int]:
    """Inclusive received-index range of a pilot at DAFT index ``m_p``
    (may run past the frame edges; callers reduce mod N)."""
    span = cfg.P_afdm * (cfg.L - 1)
    if cfg.c1_sign > 0:
        return m_p - span - cfg.Q, m_p + cfg.Q
    return m_p - cfg.Q, m_p + span + cfg.Q


def plan_pilots(cfg: WaveformConfig, n_pilots=1, rng: np.random.Generator | None = None,
                placement: str = "random", power: str = "frame", positions=None) -> PilotPlan:
    """Place embedded pilots.

    ``n_pilots`` is an int, or ``(N_p_t, N_p_f)`` for OFDM.  ``placement`` is
    ``"random"`` (uniform over non-overlapping arrangements), ``"uniform"``
    (evenly spread) or ``"lattice"`` (AFDM/SCM: a subset of the grid
    ``round(j N / K)``).  Explicit ``positions`` override the placement.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    N, L, Q = cfg.N, cfg.L, cfg.Q
    reserved = np.zeros(N, bool)
    meta = {"placement": placement, "power": power}

    if cfg.kind == "ofdm":
        if np.ndim(n_pilots) == 0:
            raise ValueError("OFDM needs (N_p_t, N_p_f)")
        n_t, n_f = (int(v) for v in n_pilots)
        if not (1 <= n_t <= cfg.n_symb and 1 <= n_f <= cfg.N_fft):
            raise ValueError("OFDM pilot lattice exceeds the grid")
        if positions is not None:
            sym, sub = (np.asarray(v) for v in positions)
        elif placement == "random":
            sym = np.sort(rng.choice(cfg.n_symb, n_t, replace=False))
            sub = np.sort(rng.choice(cfg.N_fft, n_f, replace=False))
        else:
            sym = np.floor((np.arange(n_t) + 0.5) * cfg.n_symb / n_t).astype(int)
            sub = np.floor(np.arange(n_f) * cfg.N_fft / n_f).astype(int)
        pos = (sym[:, None] * cfg.N_fft + sub[None, :]).ravel()
        vals = _pilot_values(rng, len(pos), _amplitude(N, len(pos), power))
        reserved[pos] = True
        meta.update(symbols=[int(v) for v in sym], subcarriers=[int(v) for v in sub])
        return PilotPlan("ofdm", pos, vals, np.sort(pos), [(int(p), int(p)) for p in pos], reserved, meta)

    if cfg.kind == "otfs":
        # one pilot in the delay-Doppler grid with a full guard block
        M, Nd = cfg.M_otfs, cfg.N_otfs
        m_p, k_p = (L - 1, Nd // 2) if positions is None else positions
        dop = (k_p + np.arange(-2 * Q, 2 * Q + 1)) % Nd if 4 * Q + 1 < Nd else np.arange(Nd)
        dly = (m_p + np.arange(-(L - 1), L)) % M if 2 * L - 1 < M else np.arange(M)
        for k in dop:
            reserved[k * M + dly] = True
        rx_dop = (k_p + np.arange(-Q, Q + 1)) % Nd if 2 * Q + 1 < Nd else np.arange(Nd)
        rx_dly = (m_p + np.arange(L)) % M
        P = np.sort((rx_dop[:, None] * M + rx_dly[None, :]).ravel())
        pos = np.array([k_p * M + m_p])
        vals = _pilot_values(rng, 1, _amplitude(N, 1, power))
        meta.update(delay=int(m_p), doppler=int(k_p))
        return PilotPlan("otfs", pos, vals, np.unique(P), [(int(P[0]), int(P[-1]))], reserved, meta)

    n_p = int(n_pilots)
    if n_p < 1:
        raise ValueError("need at least one pilot")

    if cfg.kind == "scm":
        # pilot sample with L-1 zeros on both sides; receiver reads L samples
        width = 2 * L - 1
        if positions is not None:
            pos = np.sort(np.asarray(positions, int))
        elif placement == "lattice":
            K = 2 * Q + 1
            grid = np.round(np.arange(K) * N / K).astype(int)
            if n_p > K:
                raise ValueError(f"lattice holds only {K} pilots")
            pos = np.sort(rng.choice(grid, n_p, replace=False))
        else:
            starts = (_random_starts(rng, 0, N, n_p, width) if placement == "random"
                      else _uniform_starts(0, N, n_p, width))
            pos = starts + L - 1
        regions = [(int(p), int(p) + L - 1) for p in pos]
        P = np.concatenate([(np.arange(a, b + 1)) % N for a, b in regions])
        for p in pos:
            reserved[np.arange(p - (L - 1), p + L) % N] = True
        if len(np.unique(P)) != len(P):
            raise ValueError("SCM pilot regions overlap")
        vals = _pilot_values(rng, n_p, _amplitude(N, n_p, power))
        return PilotPlan("scm", pos, vals, np.sort(P), regions, reserved, meta)

    # AFDM
    width = cfg.P_afdm * (L - 1) + 2 * Q + 1
    if positions is not None:
        pos = np.sort(np.asarray(positions, int))
    elif placement == "lattice":
        K = afdm_lattice_size(cfg)
        if n_p > K:
            raise ValueError(f"lattice holds only {K} pilots")
        grid = np.round(np.arange(K) * N / K).astype(int)
        pos = np.sort(rng.choice(grid, n_p, replace=False)) if n_p < K else grid
    else:
        starts = (_random_starts(rng, 0, N, n_p, width) if placement == "random"
                  else _uniform_starts(0, N, n_p, width))
        # map region start back to the pilot index
        pos = starts + (width - 1 - Q if cfg.c1_sign > 0 else Q)
    regions = [afdm_region(cfg, int(p)) for p in pos]
    P = np.concatenate([np.arange(a, b + 1) % N for a, b in regions])
    if len(np.unique(P)) != len(P):
        raise ValueError("AFDM pilot regions overlap")
    span = cfg.P_afdm * (L - 1) + 2 * Q
    for p in pos:
        # data at m spreads over the same range as a pilot would; keep it
        # clear of every pilot region
        reserved[np.arange(p - span, p + span + 1) % N] = True
    vals = _pilot_values(rng, n_p, _amplitude(N, n_p, power))
    meta["lattice_size"] = afdm_lattice_size(cfg)
    return PilotPlan("afdm", pos, vals, np.sort(P), regions, reserved, meta)


# overhead -----------------------------------------------------------------

def overhead_scm(L: int, n_p_t: int) -> int:
    return L - 1 + (2 * L - 1) * n_p_t


def overhead_ofdm(L: int, n_p_t: int, n_p_f: int) -> int:
    return (L - 1 + n_p_f) * n_p_t


def overhead_ofdm_frame(n_symb: int, N_cp: int, n_p_t: int, n_p_f: int) -> int:
    """Every cyclic prefix of the frame plus the pilot subcarriers."""
    return n_symb * N_cp + n_p_t * n_p_f


def overhead_afdm(L: int, Q: int, P_afdm: int, n_p: int) -> int:
    return L - 2 + (n_p + 1) * ((L - 1) * P_afdm + 2 * Q + 1)


def overhead_otfs(L: int, Q: int, N_otfs: int, M_otfs: int) -> int:
    return L - 1 + min(4 * Q + 1, N_otfs) * min(2 * L - 1, M_otfs)


@dataclass
class OverheadReport:
    counts: dict

    def ordering(self) -> list[str]:
        return sorted(self.counts, key=lambda k: self.counts[k])

    def csv(self) -> str:
        lines = ["waveform,overhead"]
        lines += [f"{k},{v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"


def overhead(cfg: WaveformConfig, n_pilots=None) -> int:
    """Pilot + guard + prefix samples for one frame."""
    if cfg.kind == "scm":
        return overhead_scm(cfg.L, int(n_pilots))
    if cfg.kind == "ofdm":
        n_t, n_f = n_pilots
        return overhead_ofdm(cfg.L, n_t, n_f)
    if cfg.kind == "afdm":
        return overhead_afdm(cfg.L, cfg.Q, cfg.P_afdm, int(n_pilots))
    return overhead_otfs(cfg.L, cfg.Q, cfg.N_otfs, cfg.M_otfs)


def overhead_table(L: int, Q: int, *, scm=None, ofdm=None, afdm=None, otfs=None, P_afdm: int = 1) -> OverheadReport:
    """Closed-form overheads for whichever waveforms are given.

    ``scm=N_p_t``, ``ofdm=(N_p_t, N_p_f)``, ``afdm=N_p``, ``otfs=(N_otfs, M_otfs)``.
    """
    out = {}
    if scm is not None:
        out["scm"] = overhead_scm(L, scm)
    if ofdm is not None:
        out["ofdm"] = overhead_ofdm(L, *ofdm)
    if afdm is not None:
        out["afdm"] = overhead_afdm(L, Q, P_afdm, afdm)
    if otfs is not None:
        out["otfs"] = overhead_otfs(L, Q, *otfs)
    return OverheadReport(out)
