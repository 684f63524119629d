"""Command line entry point (``dsltv``)."""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import channel as chmod
from .dpss import ProlateSpec, compute_dpss
from .estimate import estimate_channel, predict as predict_taps
from .harness import ExperimentConfig, emit, noise_variance, run, trial_rng
from .sensing import (build_measurement_offgrid, build_measurement_ongrid, hihtp_auto, hirip_probe,
                      pilot_stream)
from .waveform import WaveformConfig, demodulate, overhead_table, plan_pilots


def _write(text: str, out: str | None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.out or "results/run"
    rep = run(cfg, workers=args.workers)
    csv_path, json_path = emit(rep, out)
    print(f"wrote {csv_path} and {json_path} ({rep.trials - rep.excluded}/{rep.trials} trials, "
          f"{rep.elapsed:.1f} s)", file=sys.stderr)
    if rep.excluded_fraction > cfg.max_excluded_fraction:
        print(f"excluded-trial rate {rep.excluded_fraction:.3f} above {cfg.max_excluded_fraction}",
              file=sys.stderr)
        return 3
    return 0


def cmd_overhead(args) -> int:
    rep = overhead_table(args.L, args.Q, scm=args.scm, ofdm=args.ofdm, afdm=args.afdm,
                         otfs=args.otfs, P_afdm=args.P_afdm)
    _write(rep.csv(), args.out)
    return 0


def cmd_dpss(args) -> int:
    w = args.w if args.w is not None else 1.0 / (2 * args.n)
    basis = compute_dpss(ProlateSpec(args.n, args.count, w))
    lines = ["index," + ",".join(f"u{b}" for b in range(basis.Q))]
    lines.append("lambda," + ",".join(repr(float(v)) for v in basis.lam))
    for n in range(basis.N):
        lines.append(f"{n}," + ",".join(repr(float(v)) for v in basis.U[n]))
    _write("\n".join(lines) + "\n", args.out)
    return 0


def _waveform_from_args(args, N, L, Q) -> WaveformConfig:
    return WaveformConfig(args.waveform, N, L, Q, P_afdm=args.P_afdm, N_fft=args.N_fft,
                          N_cp=args.N_cp, N_otfs=args.N_otfs, M_otfs=args.M_otfs)


def cmd_hirip(args) -> int:
    dims = chmod.GridDims(args.N, args.L, args.Q)
    wcfg = _waveform_from_args(args, args.N, args.L, args.Q)
    rng = np.random.default_rng(args.seed)
    pilots = tuple(args.pilots) if len(args.pilots) > 1 else args.pilots[0]
    plan = plan_pilots(wcfg, pilots, rng, placement=args.placement)
    mm = build_measurement_ongrid(wcfg, plan, dims)
    deltas = hirip_probe(mm, args.s_d, args.s_D, args.trials, rng)
    lines = ["trial,delta"] + [f"{i},{d!r}" for i, d in enumerate(deltas.tolist())]
    _write("\n".join(lines) + "\n", args.out)
    print(f"max {deltas.max():.4f} median {np.median(deltas):.4f} (lower bound on the HiRIP constant)",
          file=sys.stderr)
    return 0


def cmd_gen_channel(args) -> int:
    dims = chmod.GridDims(args.N, args.L, args.Q)
    prof = chmod.SparsityProfile(args.p_d, args.p_D, args.type)
    rng = np.random.default_rng(args.seed)
    if args.model == "ongrid":
        ch = chmod.gen_ongrid(dims, prof, rng)
    else:
        ch = chmod.gen_offgrid(dims, prof, args.N_D, rng)
    chmod.save_channel(ch, args.out, seed=args.seed)
    if args.trajectories:
        Path(args.trajectories).write_text(chmod.trajectories_csv(ch.trajectories()))
    return 0


def _load_waveform(path, dims) -> tuple[WaveformConfig, dict]:
    with open(path) as f:
        spec = json.load(f)
    keys = {"P_afdm", "c1_sign", "c2", "N_fft", "N_cp", "N_otfs", "M_otfs"}
    wcfg = WaveformConfig(spec["kind"], dims.N, dims.L, dims.Q, **{k: spec[k] for k in keys if k in spec})
    return wcfg, spec


def _estimate(args):
    ch = chmod.load_channel(args.channel)
    dims = ch.dims
    wcfg, spec = _load_waveform(args.waveform, dims)
    p = spec.get("pilots", 1)
    pilots = tuple(p) if isinstance(p, list) else p
    plan = plan_pilots(wcfg, pilots, trial_rng(args.seed, 2, 0), placement=spec.get("placement", "random"))
    s = pilot_stream(wcfg, plan)
    n_ext = getattr(args, "n_ext", 0) or 0
    h_all = ch.trajectories(0, wcfg.rx_len + n_ext)
    h_rx = h_all[:, :wcfg.rx_len]
    nv = noise_variance(args.snr)
    r = chmod.apply_channel(h_rx, s, nv, trial_rng(args.seed, 1, 0, 0))
    y = demodulate(wcfg, r)
    if isinstance(ch, chmod.OnGridChannel):
        mm = build_measurement_ongrid(wcfg, plan, dims)
        res = hihtp_auto(mm, mm.observe(y), nv)
        alpha = res.result.alpha.reshape(dims.shape)
        est = chmod.OnGridChannel(dims, chmod.SupportMask(alpha != 0), alpha, ch.var)
        h_hat = est.trajectories(0, wcfg.rx_len + n_ext)
        return ch, wcfg, h_all, h_hat, wcfg.rx_len
    if len(ch.support) == 0:
        return ch, wcfg, h_all, np.zeros_like(h_all), wcfg.rx_len
    eb = compute_dpss(ProlateSpec(wcfg.rx_len, args.Q_BEM + args.n_guard, 1.0 / (2 * dims.N)))
    basis = eb.truncate(args.Q_BEM)
    mm = build_measurement_offgrid(wcfg, plan, ch.support, eb)
    res = estimate_channel(mm, mm.observe(y), ch.support, eb, dims.N, ch.var, ch.N_D, nv, Q_BEM=args.Q_BEM)
    beta, h_hat = res.beta, res.h_hat
    if n_ext:
        h_hat = np.concatenate([h_hat, predict_taps(beta, ch.support, basis, n_ext, dims.N).h_ext], axis=1)
    return ch, wcfg, h_all, h_hat, wcfg.rx_len


def _per_tap_csv(h_true, h_hat, start, stop) -> str:
    n = stop - start
    lines = ["tap,mse,power"]
    for l in range(h_true.shape[0]):
        d = np.sum(np.abs(h_true[l, start:stop] - h_hat[l, start:stop]) ** 2) / n
        pw = np.sum(np.abs(h_true[l, start:stop]) ** 2) / n
        lines.append(f"{l},{float(d)!r},{float(pw)!r}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    ch, wcfg, h_true, h_hat, n_rx = _estimate(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tap_mse.csv").write_text(_per_tap_csv(h_true, h_hat, 0, n_rx))
    (out / "trajectories.csv").write_text(chmod.trajectories_csv(h_hat[:, :n_rx]))
    total = float(np.sum(np.abs(h_true - h_hat) ** 2) / n_rx)
    print(f"channel mse {total:.4e}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    ch, wcfg, h_true, h_hat, n_rx = _estimate(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stop = n_rx + args.n_ext
    (out / "tap_mse.csv").write_text(_per_tap_csv(h_true, h_hat, n_rx, stop))
    (out / "trajectories.csv").write_text(chmod.trajectories_csv(h_hat[:, n_rx:stop]))
    total = float(np.sum(np.abs(h_true[:, n_rx:stop] - h_hat[:, n_rx:stop]) ** 2) / max(args.n_ext, 1))
    print(f"prediction mse over {args.n_ext} samples {total:.4e}", file=sys.stderr)
    return 0


def _add_waveform_args(p):
    p.add_argument("--waveform", choices=["scm", "ofdm", "afdm", "otfs"], default="afdm")
    p.add_argument("--P-afdm", dest="P_afdm", type=int, default=1)
    p.add_argument("--N-fft", dest="N_fft", type=int)
    p.add_argument("--N-cp", dest="N_cp", type=int)
    p.add_argument("--N-otfs", dest="N_otfs", type=int)
    p.add_argument("--M-otfs", dest="M_otfs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsltv", description="Sparse doubly-selective channel simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("overhead", help="pilot overhead table as CSV")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--Q", type=int, required=True)
    p.add_argument("--scm", type=int, metavar="N_P_T")
    p.add_argument("--ofdm", type=int, nargs=2, metavar=("N_P_T", "N_P_F"))
    p.add_argument("--afdm", type=int, metavar="N_P")
    p.add_argument("--P-afdm", dest="P_afdm", type=int, default=1)
    p.add_argument("--otfs", type=int, nargs=2, metavar=("N_OTFS", "M_OTFS"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("dpss", help="DPSS eigenvalues and vectors as CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--w", type=float, help="half-bandwidth, default 1/(2n)")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dpss)

    p = sub.add_parser("hirip-probe", help="empirical HiRIP lower bound")
    _add_waveform_args(p)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--Q", type=int, required=True)
    p.add_argument("--pilots", type=int, nargs="+", default=[1])
    p.add_argument("--placement", default="random")
    p.add_argument("--s-d", dest="s_d", type=int, required=True)
    p.add_argument("--s-D", dest="s_D", type=int, required=True)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hirip)

    p = sub.add_parser("gen-channel", help="draw a channel realization as JSON")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--Q", type=int, required=True)
    p.add_argument("--p-d", dest="p_d", type=float, default=0.2)
    p.add_argument("--p-D", dest="p_D", type=float, default=0.2)
    p.add_argument("--type", type=int, default=1)
    p.add_argument("--model", choices=["ongrid", "offgrid"], default="offgrid")
    p.add_argument("--N-D", dest="N_D", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", help="also write tap trajectories as CSV")
    p.set_defaults(func=cmd_gen_channel)

    for name, fn in (("estimate", cmd_estimate), ("predict", cmd_predict)):
        p = sub.add_parser(name, help=f"{name} a stored channel from embedded pilots")
        p.add_argument("--channel", required=True)
        p.add_argument("--waveform", required=True, help="waveform JSON (kind, pilots, ...)")
        p.add_argument("--snr", type=float, default=20.0)
        p.add_argument("--Q-BEM", dest="Q_BEM", type=int, default=4)
        p.add_argument("--n-guard", dest="n_guard", type=int, default=4,
                       help="extra DPSS vectors used during estimation only")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if name == "predict":
            p.add_argument("--n-ext", dest="n_ext", type=int, required=True)
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
