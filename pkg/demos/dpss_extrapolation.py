"""Slepian basis of one Doppler bin and how far it extrapolates.

A tap with three paths spread inside one Doppler bin is projected onto a
few shifted DPSS vectors, then extended past the frame.  The error grows
with the horizon and with the number of vectors used.

    python demos/dpss_extrapolation.py
"""
import numpy as np

from dsltv.dpss import ProlateSpec, bem_project, compute_dpss, extend_dpss

N, q = 2048, 3
basis = compute_dpss(ProlateSpec(N, 6))
print("concentrations:", " ".join(f"{v:.2e}" for v in basis.lam))

rng = np.random.default_rng(0)
kappa = rng.uniform(-0.5, 0.5, 3)
gain = (rng.standard_normal(3) + 1j * rng.standard_normal(3)) / np.sqrt(6)
n = np.arange(N + 1000)
h = (gain[:, None] * np.exp(2j * np.pi * (q + kappa[:, None]) * n / N)).sum(axis=0)
power = np.mean(np.abs(h[:N]) ** 2)

print(f"\n{'Q_BEM':>5s} {'in-window':>10s} {'+250':>10s} {'+500':>10s} {'+1000':>10s}")
for Qb in range(1, 7):
    b = basis.truncate(Qb)
    c = bem_project(h[:N], q, b, N)
    ext, _ = extend_dpss(b, N, N + 1000)
    full = np.concatenate([b.U, ext]) @ c * np.exp(2j * np.pi * q * n / N)
    err = np.abs(full - h) ** 2 / power
    cells = [err[:N].mean()] + [err[N:N + k].mean() for k in (250, 500, 1000)]
    print(f"{Qb:5d} " + " ".join(f"{v:10.2e}" for v in cells))
