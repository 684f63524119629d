"""Monte Carlo experiment runner.

An experiment is described by :class:`ExperimentConfig` (JSON friendly).
Every trial draws its channel and noise from counter-based seeds derived
from the master seed and the trial index, so results do not depend on the
number of workers or the order in which trials finish.  The same channel
and unit-variance noise are reused across waveforms and SNR points.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import channel as chmod
from .channel import GridDims, SparsityProfile, SupportMask, apply_channel, sparsity_levels
from .dpss import ProlateSpec, bem_project, compute_dpss
from .estimate import (SingleBemCache, beta_prior_variance, leading_coefficients, lmmse_beta, predict,
                       reconstruct, reduced_rank_mmse, singlebem_prior_variance)
from .sensing import (build_measurement_offgrid, build_measurement_ongrid, build_measurement_paths,
                      hihtp, hihtp_auto, hirip_probe, pilot_stream)
from .waveform import (WaveformConfig, demodulate, overhead, overhead_ofdm_frame, plan_pilots)

SCHEMA_VERSION = 1
MODES = ("ongrid-hihtp", "offgrid-lmmse", "predict", "overhead", "hirip-probe", "dpss-dump")

CSV_FIELDS = [
    "mode", "waveform", "estimator", "snr_db", "n_ext", "overhead", "trials", "excluded",
    "coef_mse", "coef_mse_ci95", "channel_mse", "channel_mse_ci95",
    "channel_nmse", "channel_nmse_ci95", "rr_gap", "rr_gap_ci95", "rr_gap_rel",
]

# seed streams
_CHANNEL, _NOISE, _PLAN = 0, 1, 2


@dataclass
class ExperimentConfig:
    mode: str = "ongrid-hihtp"
    N: int = 2048
    L: int = 20
    Q: int = 7
    profile: dict = field(default_factory=lambda: {"p_d": 0.2, "p_D": 0.2, "type": 1})
    waveforms: list = field(default_factory=list)
    snr_db: list = field(default_factory=lambda: [20.0])
    trials: int = 100
    seed: int = 0
    Q_BEM: int = 4
    n_guard: int = 4
    N_D: int = 3
    N_ext: list = field(default_factory=list)
    sparsity: object = "auto"
    k_max: int = 30
    prior: str = "exact"
    estimators: list = field(default_factory=lambda: ["multi"])
    Q_check: int | None = None
    channel: str = "random"
    max_excluded_fraction: float = 0.05
    probe_trials: int = 200
    out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        self.snr_db = [_parse_snr(v) for v in self.snr_db]
        if self.trials < 0:
            raise ValueError("trials must be >= 0")
        GridDims(self.N, self.L, self.Q)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = ["inf" if math.isinf(v) else v for v in self.snr_db]
        return d

    @property
    def dims(self) -> GridDims:
        return GridDims(self.N, self.L, self.Q)

    @property
    def sparsity_profile(self) -> SparsityProfile:
        return SparsityProfile(**self.profile)


def _parse_snr(v) -> float:
    if isinstance(v, str):
        if v.lower() in ("inf", "+inf", "infinity"):
            return math.inf
        return float(v)
    return float(v)


def noise_variance(snr_db: float) -> float:
    """Per-sample noise variance; transmit power is one per sample."""
    return 0.0 if math.isinf(snr_db) else 10.0 ** (-snr_db / 10.0)


def trial_rng(master: int, stream: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(stream,) + tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def _wf_label(spec: dict, i: int) -> str:
    return spec.get("label") or f"{spec['kind']}{i}"


def _wf_config(cfg: ExperimentConfig, spec: dict) -> WaveformConfig:
    keys = {"P_afdm", "c1_sign", "c2", "N_fft", "N_cp", "N_otfs", "M_otfs"}
    return WaveformConfig(spec["kind"], cfg.N, cfg.L, cfg.Q, **{k: spec[k] for k in keys if k in spec})


def _wf_pilots(spec: dict):
    p = spec.get("pilots", 1)
    return tuple(p) if isinstance(p, (list, tuple)) else p


def _wf_overhead(wcfg: WaveformConfig, spec: dict) -> int:
    pilots = _wf_pilots(spec)
    if wcfg.kind == "ofdm" and spec.get("overhead_mode") == "frame":
        return overhead_ofdm_frame(wcfg.n_symb, wcfg.N_cp, *pilots)
    return overhead(wcfg, pilots)


# experiment context ---------------------------------------------------------

class _Context:
    """Everything that stays fixed across trials: pilot plans, on-grid
    matrices, DPSS bases."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dims = cfg.dims
        self.profile = cfg.sparsity_profile
        self.wf = []
        for i, spec in enumerate(cfg.waveforms):
            wcfg = _wf_config(cfg, spec)
            rng = trial_rng(cfg.seed, _PLAN, i)
            plan = plan_pilots(wcfg, _wf_pilots(spec), rng, placement=spec.get("placement", "random"),
                               power=spec.get("pilot_power", "frame"))
            entry = {"label": _wf_label(spec, i), "cfg": wcfg, "plan": plan, "spec": spec,
                     "stream": pilot_stream(wcfg, plan), "overhead": _wf_overhead(wcfg, spec),
                     "fold": bool(spec.get("fold", False))}
            if cfg.mode == "ongrid-hihtp":
                mm = build_measurement_ongrid(wcfg, plan, self.dims, fold=entry["fold"])
                entry["mm"] = mm
                entry["gram"] = mm.A.conj().T @ mm.A
            if cfg.mode in ("offgrid-lmmse", "predict"):
                entry["basis"] = _basis(wcfg.rx_len, cfg.Q_BEM, cfg.N)
                entry["est_basis"] = _basis(wcfg.rx_len, cfg.Q_BEM + cfg.n_guard, cfg.N)
                if "single" in cfg.estimators:
                    entry["single_cache"] = None
                    entry["Q_check"] = cfg.Q_check
            self.wf.append(entry)


_BASES: dict = {}


def _basis(window: int, Q_BEM: int, N: int):
    key = (window, Q_BEM, N)
    if key not in _BASES:
        _BASES[key] = compute_dpss(ProlateSpec(window, Q_BEM, 1.0 / (2 * N)))
    return _BASES[key]


_CTX: dict = {}


def _context(cfg: ExperimentConfig) -> _Context:
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _CTX:
        _CTX.clear()
        _CTX[key] = _Context(cfg)
    return _CTX[key]


# single trial ---------------------------------------------------------------

def _draw_channel(cfg: ExperimentConfig, ctx: _Context, rng):
    dims = ctx.dims
    if cfg.channel == "identity":
        mask = np.zeros(dims.shape, bool)
        mask[0, dims.Q] = True
        sup = SupportMask(mask)
        if cfg.mode == "ongrid-hihtp":
            alpha = np.zeros(dims.shape, complex)
            alpha[0, dims.Q] = 1.0
            return chmod.OnGridChannel(dims, sup, alpha, 1.0)
        return chmod.OffGridChannel(dims, sup, np.ones((1, 1), complex), np.zeros((1, 1)), 1.0)
    if cfg.mode == "ongrid-hihtp":
        return chmod.gen_ongrid(dims, ctx.profile, rng)
    return chmod.gen_offgrid(dims, ctx.profile, cfg.N_D, rng)


def _levels(cfg: ExperimentConfig, ctx: _Context, ch):
    sp = cfg.sparsity
    if isinstance(sp, (list, tuple)):
        return int(sp[0]), int(sp[1])
    if sp == "expected":
        return sparsity_levels(ctx.dims, ctx.profile)
    if sp == "oracle":
        return max(ch.support.s_d, 1), max(ch.support.s_D, 1)
    if sp == "auto":
        return None
    raise ValueError(f"unknown sparsity rule {sp!r}")


def mse_channel(h_true: np.ndarray, h_hat: np.ndarray, N: int | None = None) -> float:
    """Squared error summed over taps and averaged over ``N`` samples (default: all columns)."""
    h_true, h_hat = np.asarray(h_true), np.asarray(h_hat)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h_true.shape} vs {h_hat.shape}")
    n = h_true.shape[-1] if N is None else N
    return float(np.sum(np.abs(h_true - h_hat) ** 2) / n)


def _received(entry, h_rx, rng_noise):
    wcfg = entry["cfg"]
    y_clean = demodulate(wcfg, apply_channel(h_rx, entry["stream"]))
    w = np.sqrt(0.5) * (rng_noise.standard_normal(wcfg.rx_len) + 1j * rng_noise.standard_normal(wcfg.rx_len))
    return y_clean, demodulate(wcfg, w)


def run_trial(cfg: ExperimentConfig, k: int) -> dict:
    """Metrics of trial ``k`` keyed by ``(waveform, estimator, snr, n_ext)``."""
    ctx = _context(cfg)
    rng_ch = trial_rng(cfg.seed, _CHANNEL, k)
    ch = _draw_channel(cfg, ctx, rng_ch)
    out = {}
    if cfg.mode == "ongrid-hihtp":
        levels = _levels(cfg, ctx, ch)
        truth = ch.alpha.ravel()
        for i, e in enumerate(ctx.wf):
            wcfg, mm = e["cfg"], e["mm"]
            y_clean, y_noise = _received(e, ch.trajectories(0, wcfg.rx_len), trial_rng(cfg.seed, _NOISE, k, i))
            yc, yn = mm.observe(y_clean), mm.observe(y_noise)
            for snr in cfg.snr_db:
                nv = noise_variance(snr)
                y = yc + math.sqrt(nv) * yn
                if levels is None:
                    a = hihtp_auto(mm, y, nv, k_max=cfg.k_max).result.alpha
                else:
                    a = hihtp(mm, y, levels[0], levels[1], k_max=cfg.k_max, gram=e["gram"], quiet=True).alpha
                err = float(np.sum(np.abs(a - truth) ** 2))
                power = float(np.sum(np.abs(truth) ** 2))
                out[(e["label"], "hihtp", snr, 0)] = {
                    "coef_mse": err, "channel_mse": err,
                    "channel_nmse": err / power if power > 0 else math.nan}
        return out

    # off-grid: support known at the receiver
    sup = ch.support
    if len(sup) == 0:
        # nothing to estimate; every error is zero
        for e in ctx.wf:
            for est in cfg.estimators:
                for snr in cfg.snr_db:
                    for n_ext in [0] + list(cfg.N_ext if cfg.mode == "predict" else []):
                        out[(e["label"], est, snr, n_ext)] = {"coef_mse": 0.0, "channel_mse": 0.0,
                                                              "channel_nmse": math.nan, "rr_gap": 0.0,
                                                              "horizon_power": 0.0}
        return out
    horizons = list(cfg.N_ext) if cfg.mode == "predict" else []
    for i, e in enumerate(ctx.wf):
        wcfg, basis = e["cfg"], e["basis"]
        n_rx = wcfg.rx_len
        stop = n_rx + max(horizons, default=0)
        pts_traj = ch.point_trajectories(0, stop)
        h_all = np.zeros((cfg.L, stop), complex)
        for (l, _), tr in zip(sup.points(), pts_traj):
            h_all[l] += tr
        h_rx = h_all[:, :n_rx]
        y_clean, y_noise = _received(e, h_rx, trial_rng(cfg.seed, _NOISE, k, i))
        power = float(np.sum(np.abs(h_rx) ** 2) / n_rx)
        beta_true = np.concatenate([bem_project(tr[:n_rx], q, basis, cfg.N)
                                    for (l, q), tr in zip(sup.points(), pts_traj)])
        # reduced-rank MMSE predictions from the true trajectories (noise free)
        rr = {}
        for n_ext in horizons:
            tgt = np.arange(n_rx, n_rx + n_ext)
            acc = np.zeros((cfg.L, n_ext), complex)
            for (l, q), tr in zip(sup.points(), pts_traj):
                acc[l] += reduced_rank_mmse(tr[:n_rx], q, basis, cfg.Q_BEM, tgt, cfg.N)
            rr[n_ext] = acc
        for est in cfg.estimators:
            if est == "multi":
                eb = e["est_basis"]
                mm = build_measurement_offgrid(wcfg, e["plan"], sup, eb, fold=e["fold"])
                g = beta_prior_variance(eb, len(sup), ch.var, cfg.N_D, cfg.N, cfg.prior)
            elif est == "single":
                mm, bases = _single_measurement(cfg, e, sup)
                g = singlebem_prior_variance([b for _, b in bases], ch.var, cfg.N_D, cfg.N)
            else:
                raise ValueError(f"unknown estimator {est!r}")
            yc, yn = mm.observe(y_clean), mm.observe(y_noise)
            for snr in cfg.snr_db:
                nv = noise_variance(snr)
                beta, _ = lmmse_beta(mm, yc + math.sqrt(nv) * yn, g, nv)
                if est == "multi":
                    beta = leading_coefficients(beta, len(sup), cfg.Q_BEM)
                    h_hat = reconstruct(beta, sup, basis, cfg.N)
                    coef = float(np.sum(np.abs(beta - beta_true) ** 2))
                else:
                    h_hat = _single_reconstruct(beta, bases, cfg.L, n_rx)
                    coef = math.nan
                ch_err = mse_channel(h_rx, h_hat)
                out[(e["label"], est, snr, 0)] = {
                    "coef_mse": coef, "channel_mse": ch_err,
                    "channel_nmse": ch_err / power if power > 0 else math.nan}
                for n_ext in horizons:
                    if est == "multi":
                        pred = predict(beta, sup, basis, n_ext, cfg.N).h_ext
                    else:
                        pred = _single_predict(beta, bases, cfg.L, n_rx, n_ext)
                    h_true = h_all[:, n_rx:n_rx + n_ext]
                    p_err = mse_channel(h_true, pred)
                    p_pow = float(np.sum(np.abs(h_true) ** 2) / n_ext)
                    gap = mse_channel(rr[n_ext], pred)
                    out[(e["label"], est, snr, n_ext)] = {
                        "coef_mse": coef, "channel_mse": p_err,
                        "channel_nmse": p_err / p_pow if p_pow > 0 else math.nan,
                        "rr_gap": gap, "horizon_power": p_pow}
    return out


def _single_bases(cfg, entry, sup: SupportMask):
    wcfg = entry["cfg"]
    bases = []
    delays = []
    if entry["single_cache"] is None:
        qc = entry["Q_check"]
        # by default the basis grows with the number of active bins, Q_BEM per bin
        entry["single_cache"] = SingleBemCache(qc or cfg.Q_BEM, wcfg.rx_len, cfg.N, per_bin=qc is None)
    cache = entry["single_cache"]
    for l in sup.active_delays():
        qs = tuple(int(j) - cfg.Q for j in np.flatnonzero(sup.mask[l]))
        bases.append(cache.get(qs))
        delays.append(int(l))
    return delays, bases


def _single_measurement(cfg, entry, sup):
    delays, bases = _single_bases(cfg, entry, sup)
    cols, dl, gains = [], [], []
    for l, b in zip(delays, bases):
        for j in range(b.Q):
            cols.append((l, j))
            dl.append(l)
            gains.append(b.V[:, j])
    mm = build_measurement_paths(entry["cfg"], entry["plan"], dl, np.array(gains), cols, fold=entry["fold"])
    mm.meta["delays"] = delays
    return mm, list(zip(delays, bases))


def _single_reconstruct(beta, bases, L, n_rx):
    h = np.zeros((L, n_rx), complex)
    pos = 0
    for l, b in bases:
        h[l] += b.V @ beta[pos:pos + b.Q]
        pos += b.Q
    return h


def _single_predict(beta, bases, L, n_rx, n_ext):
    h = np.zeros((L, n_ext), complex)
    pos = 0
    for l, b in bases:
        ext, _ = b.extend(n_rx, n_rx + n_ext)
        h[l] += ext @ beta[pos:pos + b.Q]
        pos += b.Q
    return h


def _safe_trial(args):
    cfg_dict, k = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return k, run_trial(cfg, k), None
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return k, None, f"{type(exc).__name__}: {exc}"


# reduction and reporting ----------------------------------------------------------

@dataclass
class MetricsReport:
    config: dict
    rows: list
    excluded: int
    trials: int
    errors: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def excluded_fraction(self) -> float:
        return self.excluded / self.trials if self.trials else 0.0

    def row(self, waveform=None, estimator=None, snr_db=None, n_ext=None) -> dict:
        for r in self.rows:
            if ((waveform is None or r["waveform"] == waveform)
                    and (estimator is None or r["estimator"] == estimator)
                    and (snr_db is None or r["snr_db"] == snr_db)
                    and (n_ext is None or r["n_ext"] == n_ext)):
                return r
        raise KeyError((waveform, estimator, snr_db, n_ext))

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(r.get(k)) for k in CSV_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {"schema_version": SCHEMA_VERSION, "config": self.config, "trials": self.trials,
               "excluded": self.excluded, "errors": self.errors,
               "rows": [{k: _json_val(r.get(k)) for k in CSV_FIELDS} for r in self.rows]}
        return json.dumps(obj, indent=1, sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_val(v):
    if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _mean_ci(vals):
    v = np.array([x for x in vals if not math.isnan(x)], float)
    if v.size == 0:
        return math.nan, math.nan
    m = float(v.mean())
    ci = float(1.96 * v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return m, ci


def reduce_trials(cfg: ExperimentConfig, results: list, overheads: dict, excluded: int = 0) -> list:
    keys = []
    for res in results:
        for key in res:
            if key not in keys:
                keys.append(key)
    rows = []
    for key in keys:
        label, est, snr, n_ext = key
        per = [res[key] for res in results if key in res]
        row = {"mode": cfg.mode, "waveform": label, "estimator": est, "snr_db": snr, "n_ext": n_ext,
               "overhead": overheads.get(label), "trials": len(per), "excluded": excluded}
        for metric in ("coef_mse", "channel_mse", "channel_nmse", "rr_gap"):
            vals = [p.get(metric, math.nan) for p in per]
            if all(math.isnan(x) for x in vals):
                continue
            m, ci = _mean_ci(vals)
            row[metric] = m
            row[metric + "_ci95"] = ci
        if n_ext > 0:
            pw = float(np.mean([p.get("horizon_power", 0.0) for p in per]))
            row["rr_gap_rel"] = row["rr_gap"] / pw if pw > 0 else math.nan
        rows.append(row)
    return rows


def _run_static(cfg: ExperimentConfig) -> MetricsReport:
    rows = []
    if cfg.mode == "overhead":
        for i, spec in enumerate(cfg.waveforms):
            wcfg = _wf_config(cfg, spec)
            rows.append({"mode": cfg.mode, "waveform": _wf_label(spec, i), "estimator": "",
                         "overhead": _wf_overhead(wcfg, spec)})
    elif cfg.mode == "dpss-dump":
        basis = compute_dpss(ProlateSpec(cfg.N, cfg.Q_BEM))
        for b, lam in enumerate(basis.lam):
            rows.append({"mode": cfg.mode, "waveform": f"dpss{b}", "estimator": "", "coef_mse": float(lam)})
    elif cfg.mode == "hirip-probe":
        ctx = _Context(ExperimentConfig(**{**cfg.to_dict(), "mode": "ongrid-hihtp"}))
        s_d, s_D = (sparsity_levels(ctx.dims, ctx.profile) if not isinstance(cfg.sparsity, (list, tuple))
                    else cfg.sparsity)
        for i, e in enumerate(ctx.wf):
            d = hirip_probe(e["mm"], s_d, s_D, cfg.probe_trials, trial_rng(cfg.seed, 3, i))
            rows.append({"mode": cfg.mode, "waveform": e["label"], "estimator": "probe",
                         "overhead": e["overhead"], "trials": cfg.probe_trials,
                         "coef_mse": float(d.max()), "channel_mse": float(np.median(d))})
    return MetricsReport(cfg.to_dict(), rows, 0, 0)


def run(cfg: ExperimentConfig, workers: int = 1, progress=None) -> MetricsReport:
    """Run all trials and reduce them in trial order."""
    t0 = time.perf_counter()
    if cfg.mode in ("overhead", "dpss-dump", "hirip-probe"):
        rep = _run_static(cfg)
        rep.elapsed = time.perf_counter() - t0
        return rep
    ctx = _context(cfg)
    overheads = {e["label"]: e["overhead"] for e in ctx.wf}
    jobs = [(cfg.to_dict(), k) for k in range(cfg.trials)]
    if workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_safe_trial, jobs, chunksize=max(1, cfg.trials // (4 * workers))))
    else:
        done = []
        for j in jobs:
            done.append(_safe_trial(j))
            if progress:
                progress(j[1])
    done.sort(key=lambda t: t[0])
    results = [r for _, r, err in done if r is not None]
    errors = [f"trial {k}: {err}" for k, _, err in done if err is not None]
    rows = reduce_trials(cfg, results, overheads, len(errors))
    rep = MetricsReport(cfg.to_dict(), rows, len(errors), cfg.trials, errors)
    rep.elapsed = time.perf_counter() - t0
    return rep


def emit(report: MetricsReport, out) -> tuple[Path, Path]:
    """Write ``<out>.csv`` and ``<out>.json``."""
    out = Path(out)
    if out.suffix in (".csv", ".json"):
        out = out.with_suffix("")
    out.parent.mkdir(parents=True, exist_ok=True)
    c, j = out.with_suffix(".csv"), out.with_suffix(".json")
    c.write_text(report.csv())
    j.write_text(report.to_json() + "\n")
    return c, j


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
