"""Pilot overhead of the four waveforms, and what a handful of AFDM
pilots buys on a sparse on-grid channel.

    python demos/waveform_overheads.py
"""
import numpy as np

from dsltv.harness import ExperimentConfig, run
from dsltv.waveform import overhead_afdm, overhead_otfs, overhead_table

L, Q = 30, 7

# OTFS pays for the full delay-Doppler guard no matter how sparse the channel is
print("OTFS guard region:", overhead_otfs(L, Q, 16, 256), "samples")
print("AFDM per extra pilot:", overhead_afdm(L, Q, 1, 2) - overhead_afdm(L, Q, 1, 1), "samples")
print()
# pilot settings that reach the same on-grid MSE at full scale
print(overhead_table(L, Q, afdm=8, ofdm=(12, 28), otfs=(16, 256)).csv())

# a smaller frame keeps this quick; the full-size search lives in the acceptance tests
cfg = ExperimentConfig.from_json("demos/configs/ongrid_small.json")
rep = run(cfg)
print(f"{'waveform':8s} {'overhead':>8s} " + " ".join(f"{s:>9g}dB" for s in cfg.snr_db))
for wf in ("AFDM", "SCM", "OFDM"):
    rows = [rep.row(wf, snr_db=float(s)) for s in cfg.snr_db]
    print(f"{wf:8s} {rows[0]['overhead']:8d} " + " ".join(f"{r['coef_mse']:11.2e}" for r in rows))
print(f"\n{rep.trials} trials, {rep.excluded} excluded, {rep.elapsed:.1f}s")
