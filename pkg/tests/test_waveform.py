import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsltv.channel import apply_channel
from dsltv.waveform import (WaveformConfig, afdm_lattice_size, afdm_path_phase, channel_input, daft_index,
                            demodulate, dense_rx, dense_tx, modulate, overhead, overhead_afdm,
                            overhead_ofdm, overhead_ofdm_frame, overhead_otfs, overhead_scm, overhead_table,
                            plan_pilots)

CONFIGS = [
    WaveformConfig("scm", 64, 4, 1),
    WaveformConfig("afdm", 64, 4, 1),
    WaveformConfig("afdm", 64, 4, 2, P_afdm=2, c1_sign=-1, c2=0.013),
    WaveformConfig("ofdm", 64, 4, 1, N_fft=16),
    WaveformConfig("ofdm", 64, 4, 1, N_fft=16, N_cp=6),
    WaveformConfig("otfs", 64, 4, 1, N_otfs=8),
]


def _cn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.kind}-{c.c1_sign}-{c.N_cp}")
def test_fft_paths_match_dense_operators(cfg):
    rng = np.random.default_rng(0)
    x = _cn(rng, 3, cfg.N)
    np.testing.assert_allclose(modulate(cfg, x), x @ dense_tx(cfg).T, atol=1e-12)
    r = _cn(rng, 3, cfg.rx_len)
    np.testing.assert_allclose(demodulate(cfg, r), r @ dense_rx(cfg).T, atol=1e-12)


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: c.kind)
def test_roundtrip_through_ideal_channel(cfg):
    x = _cn(np.random.default_rng(1), cfg.N)
    s = modulate(cfg, x)
    assert s.shape[-1] == cfg.tx_length
    np.testing.assert_allclose(demodulate(cfg, s), x, atol=1e-12)
    h = np.zeros((cfg.L, cfg.rx_len), complex)
    h[0] = 1
    np.testing.assert_allclose(demodulate(cfg, apply_channel(h, channel_input(cfg, s))), x, atol=1e-12)


@pytest.mark.parametrize("sign", [1, -1])
@pytest.mark.parametrize("P", [1, 2])
def test_afdm_single_path_is_a_phased_permutation(sign, P):
    cfg = WaveformConfig("afdm", 128, 6, 3, P_afdm=P, c1_sign=sign, c2=0.0071)
    rng = np.random.default_rng(2)
    x = _cn(rng, cfg.N)
    s = channel_input(cfg, modulate(cfg, x))
    n = np.arange(cfg.rx_len)
    k = np.arange(cfg.N)
    for l, q in [(0, 0), (3, -2), (5, 3)]:
        h = np.zeros((cfg.L, cfg.rx_len), complex)
        h[l] = np.exp(2j * np.pi * q * n / cfg.N)
        y = demodulate(cfg, apply_channel(h, s))
        ref = afdm_path_phase(k, l, q, cfg) * x[daft_index(k, l, q, cfg)]
        np.testing.assert_allclose(y, ref, atol=1e-10)


def test_ofdm_lti_channel_is_diagonal():
    cfg = WaveformConfig("ofdm", 128, 5, 0, N_fft=32)
    rng = np.random.default_rng(3)
    x = _cn(rng, cfg.N)
    taps = _cn(rng, cfg.L)
    h = np.repeat(taps[:, None], cfg.rx_len, axis=1)
    y = demodulate(cfg, apply_channel(h, channel_input(cfg, modulate(cfg, x))))
    H = np.fft.fft(taps, cfg.N_fft)
    np.testing.assert_allclose(y, x * np.tile(H, cfg.n_symb), atol=1e-10)


def test_otfs_single_path_is_a_shift():
    cfg = WaveformConfig("otfs", 128, 5, 1, N_otfs=8)
    x = np.zeros(cfg.N, complex)
    k_p, m_p = 3, 7
    x[k_p * cfg.M_otfs + m_p] = 1
    s = channel_input(cfg, modulate(cfg, x))
    h = np.zeros((cfg.L, cfg.rx_len), complex)
    h[2] = 1
    y = demodulate(cfg, apply_channel(h, s)).reshape(cfg.N_otfs, cfg.M_otfs)
    assert abs(y[k_p, m_p + 2]) == pytest.approx(1)
    assert np.sum(np.abs(y) ** 2) == pytest.approx(1)


def test_geometry():
    c = WaveformConfig("ofdm", 2048, 20, 7, N_fft=64)
    assert c.N_cp == 19 and c.n_symb == 32
    assert c.tx_length == 32 * 83 and c.rx_len == 32 * 83 - 19
    a = WaveformConfig("afdm", 2048, 20, 7)
    assert a.rx_len == 2048 and a.tx_length == 2067 and a.c1 == pytest.approx(1 / 4096)
    o = WaveformConfig("otfs", 4096, 30, 7, N_otfs=16, M_otfs=256)
    assert o.N_otfs * o.M_otfs == 4096
    with pytest.raises(ValueError):
        WaveformConfig("ofdm", 100, 4, 1, N_fft=33)
    with pytest.raises(ValueError):
        WaveformConfig("fbmc", 100, 4, 1)


def test_overhead_closed_forms():
    assert overhead_otfs(30, 7, 16, 256) == 973
    assert overhead_afdm(20, 7, 1, 21) == 766
    assert overhead_scm(30, 5) == 324
    assert overhead_ofdm(30, 16, 40) == (29 + 40) * 16
    assert overhead_ofdm_frame(32, 19, 12, 15) == 788
    rep = overhead_table(30, 7, afdm=6, ofdm=(16, 40), otfs=(16, 256))
    assert rep.ordering() == ["afdm", "otfs", "ofdm"]
    assert rep.csv().splitlines()[0] == "waveform,overhead"
    cfg = WaveformConfig("afdm", 4096, 30, 7, P_afdm=2)
    assert overhead(cfg, 3) == 28 + 4 * (58 + 15)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(2, 40), Q=st.integers(0, 10), n=st.integers(1, 30), P=st.integers(1, 3),
       Nt=st.integers(1, 16), M=st.integers(1, 512))
def test_overheads_monotone_in_pilots(L, Q, n, P, Nt, M):
    assert overhead_afdm(L, Q, P, n + 1) - overhead_afdm(L, Q, P, n) == (L - 1) * P + 2 * Q + 1
    assert overhead_scm(L, n + 1) - overhead_scm(L, n) == 2 * L - 1
    assert overhead_otfs(L, Q, Nt, M) <= L - 1 + Nt * M


@pytest.mark.parametrize("kind,pilots", [("scm", 7), ("afdm", 9), ("ofdm", (4, 10)), ("otfs", 1)])
@pytest.mark.parametrize("placement", ["random", "uniform"])
def test_pilot_plans(kind, pilots, placement):
    extra = {"N_fft": 64} if kind == "ofdm" else {"N_otfs": 16} if kind == "otfs" else {}
    cfg = WaveformConfig(kind, 1024, 10, 3, **extra)
    plan = plan_pilots(cfg, pilots, np.random.default_rng(4), placement=placement)
    x = plan.frame(cfg.N)
    assert np.sum(np.abs(x) ** 2) == pytest.approx(cfg.N)
    assert len(np.unique(plan.P)) == len(plan.P)
    assert np.all(plan.reserved[plan.positions])
    assert len(plan.data_positions(cfg.N)) == cfg.N - plan.reserved.sum()


def test_afdm_regions_hold_all_pilot_energy():
    cfg = WaveformConfig("afdm", 512, 6, 2)
    plan = plan_pilots(cfg, 5, np.random.default_rng(5))
    s = channel_input(cfg, modulate(cfg, plan.frame(cfg.N)))
    rng = np.random.default_rng(6)
    n = np.arange(cfg.rx_len)
    h = np.zeros((cfg.L, cfg.rx_len), complex)
    for l in range(cfg.L):
        for q in range(-2, 3):
            h[l] += rng.standard_normal() * np.exp(2j * np.pi * q * n / cfg.N)
    y = demodulate(cfg, apply_channel(h, s))
    outside = np.ones(cfg.N, bool)
    outside[plan.P] = False
    assert np.max(np.abs(y[outside])) < 1e-9


def test_afdm_lattice_limits():
    cfg = WaveformConfig("afdm", 2048, 20, 7)
    assert afdm_lattice_size(cfg) == 15
    plan = plan_pilots(cfg, 15, np.random.default_rng(0), placement="lattice")
    assert plan.n_pilots == 15
    with pytest.raises(ValueError):
        plan_pilots(cfg, 16, np.random.default_rng(0), placement="lattice")
    with pytest.raises(ValueError):
        plan_pilots(cfg, 70, np.random.default_rng(0))
