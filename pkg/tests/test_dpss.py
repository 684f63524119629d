import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal.windows import dpss as scipy_dpss

from dsltv.dpss import (DpssBasis, ProlateSpec, bem_project, bem_reconstruct, build_B, compute_dpss,
                        concentration, expected_truncation_nmse, extend_dpss, load_basis,
                        prolate_matrix, prolate_matvec, save_basis)


def _align(U, V):
    s = np.sign(np.sum(U * V, axis=0))
    return V * s


@pytest.mark.parametrize("N,NW,K", [(64, 2.0, 5), (256, 0.5, 4), (1000, 4.0, 8)])
def test_matches_scipy(N, NW, K):
    b = compute_dpss(ProlateSpec(N, K, NW / N))
    ref, ratios = scipy_dpss(N, NW, Kmax=K, return_ratios=True)
    ref = _align(b.U, ref.T)
    assert np.max(np.abs(b.U - ref)) < 1e-9
    big = ratios > 1e-6
    np.testing.assert_allclose(b.lam[big], ratios[big], rtol=1e-8)


def test_small_concentrations_are_accurate():
    # quadrature keeps relative accuracy where u^T C u hits round-off
    N, W = 64, 1 / 128
    b = compute_dpss(ProlateSpec(N, 6, W))
    C = prolate_matrix(N, W)
    w = np.sort(np.linalg.eigvalsh(C))[::-1][:6]
    np.testing.assert_allclose(b.lam[:4], w[:4], rtol=1e-6)
    assert np.all(np.diff(b.lam) < 0)
    assert b.lam[-1] > 0


def test_default_bandwidth_is_one_bin():
    assert ProlateSpec(100, 3).bandwidth == pytest.approx(1 / 200)
    with pytest.raises(ValueError):
        ProlateSpec(10, 11)
    with pytest.raises(ValueError):
        ProlateSpec(10, 2, 0.5)


@settings(max_examples=25, deadline=None)
@given(N=st.integers(8, 300), nw=st.floats(0.3, 4.0), K=st.integers(1, 6))
def test_orthonormal_and_ordered(N, nw, K):
    K = min(K, N)
    W = min(nw / N, 0.45)
    b = compute_dpss(ProlateSpec(N, K, W))
    assert np.max(np.abs(b.U.T @ b.U - np.eye(K))) < 1e-10
    assert np.all(b.lam > 0) and np.all(b.lam < 1 + 1e-12)
    assert np.all(np.diff(b.lam) <= 1e-12)
    # sign rule: first clearly nonzero entry positive
    for col in b.U.T:
        i = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())[0]
        assert col[i] > 0


@settings(max_examples=20, deadline=None)
@given(N=st.integers(16, 400), K=st.integers(1, 5))
def test_eigen_residual(N, K):
    W = 1 / (2 * N)
    b = compute_dpss(ProlateSpec(N, K, W))
    for j in range(K):
        r = prolate_matvec(b.U[:, j], W) - b.lam[j] * b.U[:, j]
        assert np.linalg.norm(r) < 1e-10


def test_trace_identity():
    N = 300
    b = compute_dpss(ProlateSpec(N, N))
    assert abs(b.lam.sum() - 1.0) < 1e-6


def test_prolate_matvec_matches_dense():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(97)
    W = 0.07
    np.testing.assert_allclose(prolate_matvec(x, W), prolate_matrix(97, W) @ x, atol=1e-12)


def test_concentration_matches_rayleigh_quotient():
    rng = np.random.default_rng(1)
    U = np.linalg.qr(rng.standard_normal((80, 3)))[0]
    W = 0.1
    C = prolate_matrix(80, W)
    ref = np.einsum("ij,ij->j", U, C @ U)
    np.testing.assert_allclose(concentration(U, W), ref, rtol=1e-10)


def test_extension_reproduces_window_for_concentrated_vectors():
    b = compute_dpss(ProlateSpec(2048, 6))
    ext, excluded = extend_dpss(b, 0, 2048)
    assert excluded == []
    for j in range(4):
        assert np.max(np.abs(ext[:, j] - b.U[:, j])) < 1e-8


def test_extension_is_continuous_across_the_edge():
    b = compute_dpss(ProlateSpec(512, 3))
    ext, _ = extend_dpss(b, 500, 530)
    inside = b.U[500:512, 0]
    np.testing.assert_allclose(ext[:12, 0], inside, atol=1e-9)
    # no jump at the boundary sample
    assert abs(ext[12, 0] - ext[11, 0]) < 5 * abs(ext[11, 0] - ext[10, 0]) + 1e-12


def test_extension_floor_excludes_and_warns():
    b = compute_dpss(ProlateSpec(64, 8))
    with pytest.warns(RuntimeWarning):
        ext, excluded = extend_dpss(b, 64, 80, floor=1e-3)
    assert excluded and np.all(ext[:, excluded] == 0)
    assert extend_dpss(b, 5, 5)[0].shape == (0, 8)


@settings(max_examples=20, deadline=None)
@given(q=st.integers(-5, 5), seed=st.integers(0, 1000))
def test_bem_roundtrip(q, seed):
    b = compute_dpss(ProlateSpec(128, 4))
    beta = np.random.default_rng(seed).standard_normal(4) + 0j
    h = bem_reconstruct(beta, q, b, 256)
    np.testing.assert_allclose(bem_project(h, q, b, 256), beta, atol=1e-12)


def test_build_B_is_frequency_domain_of_shifted_vectors():
    N, Q = 32, 2
    b = compute_dpss(ProlateSpec(N, 3))
    B = build_B(N, Q, b)
    assert B.shape == (N, (2 * Q + 1) * 3)
    n = np.arange(N)
    for qi, q in enumerate(range(-Q, Q + 1)):
        for j in range(3):
            v = np.exp(2j * np.pi * q * n / N) * b.U[:, j]
            ref = np.fft.fft(v, norm="ortho") / np.sqrt(N)
            np.testing.assert_allclose(B[:, qi * 3 + j], ref, atol=1e-12)


def test_truncation_nmse_matches_monte_carlo():
    # flat-spectrum process over one bin, projected on 2 vectors
    N, W = 256, 1 / 512
    full = compute_dpss(ProlateSpec(N, 12, W))
    pred = expected_truncation_nmse(full, 2)
    rng = np.random.default_rng(5)
    n = np.arange(N)
    U = full.U[:, :2]
    errs, pw = 0.0, 0.0
    for _ in range(4000):
        h = np.exp(2j * np.pi * rng.uniform(-W, W) * n)
        r = h - U @ (U.T @ h)
        errs += np.vdot(r, r).real
        pw += np.vdot(h, h).real
    assert errs / pw == pytest.approx(pred, rel=0.1)


def test_save_load(tmp_path):
    b = compute_dpss(ProlateSpec(50, 3))
    save_basis(b, tmp_path / "b.npz")
    c = load_basis(tmp_path / "b.npz")
    assert isinstance(c, DpssBasis)
    np.testing.assert_array_equal(b.U, c.U)
    np.testing.assert_array_equal(b.lam, c.lam)
    assert b.truncate(2).Q == 2
