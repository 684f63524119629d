"""Estimate an off-grid channel from AFDM pilots and predict it forward.

Runs the estimate and predict steps on one drawn channel, then compares the
prediction against the reduced-rank oracle that sees the noise-free taps.

    python demos/offgrid_prediction.py [snr_db]
"""
import sys

import numpy as np

from dsltv.channel import GridDims, SparsityProfile, apply_channel, gen_offgrid
from dsltv.dpss import ProlateSpec, compute_dpss
from dsltv.estimate import estimate_channel, predict, reduced_rank_mmse
from dsltv.harness import noise_variance
from dsltv.sensing import build_measurement_offgrid, pilot_stream
from dsltv.waveform import WaveformConfig, demodulate, plan_pilots

snr = float(sys.argv[1]) if len(sys.argv) > 1 else 30.0
N, L, Q, Qb, guard = 2048, 20, 7, 4, 4
cfg = WaveformConfig("afdm", N, L, Q)
rng = np.random.default_rng(3)
ch = gen_offgrid(GridDims(N, L, Q), SparsityProfile(0.2, 0.2), 3, rng)
while len(ch.support) == 0:
    ch = gen_offgrid(GridDims(N, L, Q), SparsityProfile(0.2, 0.2), 3, rng)
print(f"{ch.support.s_d} active taps, {len(ch.support)} delay-Doppler points")

plan = plan_pilots(cfg, 46, rng)
full = compute_dpss(ProlateSpec(N, Qb + guard))
basis = full.truncate(Qb)
mm = build_measurement_offgrid(cfg, plan, ch.support, full)

H = 1000
h = ch.trajectories(0, N + H)
nv = noise_variance(snr)
y = demodulate(cfg, apply_channel(h[:, :N], pilot_stream(cfg, plan), nv, rng))
est = estimate_channel(mm, mm.observe(y), ch.support, full, N, ch.var, 3, nv, Q_BEM=Qb)
print(f"SNR {snr:g} dB: in-frame channel MSE {np.sum(np.abs(est.h_hat - h[:, :N]) ** 2) / N:.2e}")

pred = predict(est.beta, ch.support, basis, H, N).h_ext
tgt = np.arange(N, N + H)
oracle = np.zeros((L, H), complex)
for (l, q), tr in zip(ch.support.points(), ch.point_trajectories(0, N)):
    oracle[l] += reduced_rank_mmse(tr, q, basis, Qb, tgt, N)
for k in (100, 250, 500, 1000):
    p = np.sum(np.abs(h[:, N:N + k]) ** 2)
    e = np.sum(np.abs(pred[:, :k] - h[:, N:N + k]) ** 2)
    g = np.sum(np.abs(pred[:, :k] - oracle[:, :k]) ** 2)
    print(f"  horizon {k:4d}: prediction NMSE {e / p:.2e}, gap to oracle {g / p:.2%}")
