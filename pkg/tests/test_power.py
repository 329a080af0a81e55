import itertools
import json
import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpca import model as M
from tpca import power_iter as pw
from tpca import tensor_core as tc
from tpca.evaluation import align_factors, sin_theta


def random_model(rng, dims, latent, sigma2=1.0):
    return M.new_model([rng.standard_normal((n, m)) for n, m in zip(dims, latent)], None, sigma2)


def unit_true(model):
    return [B / np.linalg.norm(B) for B in model.outer_grams()]


def brute_force_truncation(S, m):
    """Best rank-≤m PSD approximation by searching every eigenvalue subset."""
    lam, U = np.linalg.eigh(S)
    best, best_err = None, np.inf
    for size in range(1, m + 1):
        for subset in itertools.combinations(range(len(lam)), size):
            idx = list(subset)
            if np.any(lam[idx] < 0):
                continue
            P = (U[:, idx] * lam[idx]) @ U[:, idx].T
            err = np.linalg.norm(S - P)
            if err < best_err:
                best, best_err = P, err
    return best / np.linalg.norm(best)


def test_config_validation():
    with pytest.raises(ValueError):
        pw.PowerConfig(iterations=0)
    with pytest.raises(ValueError):
        pw.PowerConfig(init="bogus")
    with pytest.raises(ValueError):
        pw.PowerConfig(path="bogus")
    with pytest.raises(ValueError):
        pw.PowerConfig(init="provided")


def test_random_init_unit_psd_and_reproducible():
    cfg = pw.PowerConfig(seed=3)
    a = pw.init_power((5, 4, 6), (2, 3, 1), cfg)
    b = pw.init_power((5, 4, 6), (2, 3, 1), cfg)
    for A, B, m in zip(a.matrices, b.matrices, (2, 3, 1)):
        assert np.array_equal(A, B)
        assert abs(np.linalg.norm(A) - 1) < 1e-14
        lam = np.linalg.eigvalsh(A)
        assert lam[0] > -1e-12
        assert np.sum(lam > 1e-10) <= m


def test_hosvd_init():
    rng = np.random.default_rng(0)
    d = M.sample(random_model(rng, (5, 4, 3), (2, 2, 1), 0.0), 6, 1)
    st_ = pw.init_power(d, (2, 2, 1), pw.PowerConfig(init="hosvd"))
    for B, m in zip(st_.matrices, (2, 2, 1)):
        assert np.linalg.norm(B) == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(B))[-m:], 1 / math.sqrt(m),
                                   atol=1e-12)


def test_psd_truncate_examples():
    np.testing.assert_allclose(pw.psd_truncate_normalize(np.diag([4.0, 1.0, 0.01]), 1),
                               np.diag([1.0, 0.0, 0.0]), atol=1e-15)
    rng = np.random.default_rng(1)
    G = rng.standard_normal((5, 2))
    P = G @ G.T
    P /= np.linalg.norm(P)
    np.testing.assert_allclose(pw.psd_truncate_normalize(P, 2), P, atol=1e-12)
    with pytest.raises(pw.PowerError, match="degenerate"):
        pw.psd_truncate_normalize(np.zeros((3, 3)), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_psd_truncate_matches_brute_force(n, m, seed):
    m = min(m, n)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    S = G @ G.T
    np.testing.assert_allclose(pw.psd_truncate_normalize(S, m), brute_force_truncation(S, m),
                               atol=1e-10)


def test_tilde_is_psd():
    rng = np.random.default_rng(2)
    d = M.sample(random_model(rng, (4, 3, 3), (2, 2, 1)), 10, 3)
    st_ = pw.init_power(d, (2, 2, 1), pw.PowerConfig(seed=1))
    for k in range(3):
        T = pw.power_step_tilde(d, st_, k)
        u = rng.standard_normal((100, T.shape[0]))
        assert np.all(np.einsum("ij,jk,ik->i", u, T, u) >= -1e-12)


def test_tilde_isotropic_noise_direction():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((4, 3, 3, 40_000))
    mats = [np.eye(n) / math.sqrt(n) for n in (4, 3, 3)]
    st_ = pw.PowerState(mats, (4, 3, 3))
    T = pw.power_step_tilde(X, st_, 0)
    scale = np.trace(T) / 4
    assert np.linalg.norm(T - scale * np.eye(4)) / np.linalg.norm(T) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_fast_and_naive_paths_agree(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(2, 4))
    dims = tuple(int(x) for x in rng.integers(2, 4, size=r))
    latent = tuple(int(rng.integers(1, n + 1)) for n in dims)
    X = rng.standard_normal(dims + (5,))
    st_ = pw.init_power(dims, latent, pw.PowerConfig(seed=seed))
    for k in range(r):
        fast = pw.power_step_tilde(X, st_, k, "fast")
        naive = pw.power_step_tilde(X, st_, k, "naive")
        assert np.linalg.norm(fast - naive) <= 1e-10 * np.linalg.norm(naive)
        pw.power_step_tilde(X, st_, k, "both")
    o_fast = pw.estimate_omega(X, st_)
    o_naive = pw.estimate_omega(X, st_, "naive")
    assert o_fast == pytest.approx(o_naive, rel=1e-10)


def test_naive_cap():
    X = np.ones((4, 4, 4, 2))
    st_ = pw.init_power((4, 4, 4), (1, 1, 1), pw.PowerConfig())
    with pytest.raises(ValueError):
        pw.power_step_tilde(X, st_, 0, "naive", cap=100)


def test_population_fixed_point():
    rng = np.random.default_rng(5)
    for sigma2 in (0.0, 0.3):
        truth = random_model(rng, (4, 3, 3), (2, 2, 1), sigma2)
        dims = truth.dims
        Sigma = tc.matrix_to_operator(M.covariance_dense(truth), dims, dims)
        b = unit_true(truth)
        for k, m in enumerate((2, 2, 1)):
            step = pw.psd_truncate_normalize(pw.tilde_from_operator(Sigma, b, k), m)
            if sigma2 == 0.0:
                np.testing.assert_allclose(step, b[k], atol=1e-12)
            else:
                # noise shifts the spectrum by a constant but keeps the subspace
                P = b[k] @ np.linalg.pinv(b[k])
                np.testing.assert_allclose(P @ step @ P, step, atol=1e-12)


def test_single_iteration_composition():
    rng = np.random.default_rng(7)
    d = M.sample(random_model(rng, (4, 4, 3), (2, 2, 2)), 30, 1)
    cfg = pw.PowerConfig(iterations=1, seed=9)
    state, est = pw.run_power(d, (2, 2, 2), cfg)
    init = pw.init_power(d, (2, 2, 2), cfg)
    manual = [pw.psd_truncate_normalize(pw.power_step_tilde(d, init, k), m)
              for k, m in enumerate((2, 2, 2))]
    for B, C in zip(state.matrices, manual):
        assert np.array_equal(B, C)
    again = pw.run_power(d, (2, 2, 2), cfg)[1]
    assert again.omega_hat == est.omega_hat and again.sigma2_hat == est.sigma2_hat


def test_gauss_seidel_differs_but_stays_feasible():
    rng = np.random.default_rng(8)
    d = M.sample(random_model(rng, (4, 4, 3), (2, 2, 2)), 30, 2)
    j = pw.run_power(d, (2, 2, 2), pw.PowerConfig(iterations=1, seed=1))[0]
    g = pw.run_power(d, (2, 2, 2), pw.PowerConfig(iterations=1, seed=1, gauss_seidel=True))[0]
    np.testing.assert_array_equal(j.matrices[0], g.matrices[0])
    assert not np.allclose(j.matrices[2], g.matrices[2])


def test_trace_records_sin_theta():
    rng = np.random.default_rng(9)
    truth = random_model(rng, (6, 5, 4), (2, 2, 2), 0.1)
    d = M.sample(truth, 200, 3)
    state, _ = pw.run_power(d, (2, 2, 2), pw.PowerConfig(iterations=3), truth=truth)
    assert len(state.trace) == 4 * 3
    last = [row[2] for row in state.trace if row[0] == 3]
    first = [row[2] for row in state.trace if row[0] == 0]
    assert max(last) < min(first)
    assert len(state.history) == 4


def test_estimate_omega_and_sigma2_trivial():
    X = np.zeros((3, 2, 4))
    mats = [np.eye(3) / math.sqrt(3), np.eye(2) / math.sqrt(2)]
    assert pw.estimate_omega(X, mats) == 0.0
    assert pw.estimate_sigma2(X, [np.zeros((3, 3)), np.zeros((2, 2))]) == 0.0
    rng = np.random.default_rng(10)
    Y = rng.standard_normal((3, 2, 4))
    assert pw.estimate_sigma2(Y, [np.zeros((3, 3)), np.zeros((2, 2))]) == pytest.approx(
        float(np.mean(Y**2)))


def test_population_limits():
    rng = np.random.default_rng(11)
    truth = random_model(rng, (3, 3, 2), (2, 1, 1), 0.4)
    dims = truth.dims
    Sigma = tc.matrix_to_operator(M.covariance_dense(truth), dims, dims)
    b = unit_true(truth)
    omega = float(np.prod([np.linalg.norm(B) for B in truth.outer_grams()]))
    expect = omega + truth.sigma2 * np.prod([np.trace(B) for B in b])
    assert pw.omega_from_operator(Sigma, b) == pytest.approx(expect, rel=1e-12)
    assert pw.omega_from_operator(Sigma, b) >= omega
    # σ² formula with the true B̂ and tr(S_N) replaced by tr(Σ)
    n = truth.n
    s2 = (np.trace(M.covariance_dense(truth)) - np.prod(
        [np.trace(B) for B in truth.outer_grams()])) / n
    assert s2 == pytest.approx(truth.sigma2, rel=1e-12)


def test_estimate_factors():
    A, B = pw.estimate_factors(1.0, [np.diag([1.0, 0.0])], (1,))
    np.testing.assert_allclose(A[0], [[1.0], [0.0]])
    rng = np.random.default_rng(12)
    st_ = pw.init_power((5, 4), (2, 3), pw.PowerConfig(seed=2))
    A, B = pw.estimate_factors(7.5, st_)
    for Ak, Bk in zip(A, B):
        np.testing.assert_allclose(Ak @ Ak.T, Bk, atol=1e-12)
    with pytest.raises(ValueError):
        pw.estimate_factors(-1.0, st_)


def test_noise_free_rank_one_exact_recovery():
    rng = np.random.default_rng(13)
    truth = random_model(rng, (5, 4, 3), (1, 1, 1), 0.0)
    d = M.sample(truth, 30, 1)
    state, est = pw.run_power(d, (1, 1, 1), pw.PowerConfig(iterations=1))
    for B, b in zip(state.matrices, unit_true(truth)):
        assert sin_theta(B, b) < 1e-8
    # rank one: ‖X_i‖² = z_i² Π‖a_k‖², so ω̂ is the mean squared norm
    norms = np.sum(d.samples.reshape(-1, 30, order="F") ** 2, axis=0)
    assert est.omega_hat == pytest.approx(norms.mean(), rel=1e-10)
    assert abs(est.sigma2_hat) < 1e-10


def test_exact_recovery_with_population_moment():
    rng = np.random.default_rng(14)
    truth = M.normalize_model(random_model(rng, (4, 3, 3), (2, 2, 1), 0.0))
    dims = truth.dims
    Sigma = tc.matrix_to_operator(M.covariance_dense(truth), dims, dims)
    b = [tc.contract_operator_modes(Sigma, unit_true(truth), skip=(k,)) for k in range(3)]
    mats = [pw.psd_truncate_normalize(t, m) for t, m in zip(b, (2, 2, 1))]
    omega = pw.omega_from_operator(Sigma, mats)
    A_hat, _ = pw.estimate_factors(omega, mats, (2, 2, 1))
    rep = align_factors(A_hat, truth.factors)
    assert max(rep.errors) < 1e-8


def test_estimates_json_roundtrip():
    rng = np.random.default_rng(15)
    d = M.sample(random_model(rng, (4, 3, 3), (2, 1, 2)), 20, 0)
    _, est = pw.run_power(d, (2, 1, 2))
    doc = json.loads(json.dumps(est.to_dict()))
    back = pw.PowerEstimates.from_dict(doc)
    assert back.omega_hat == est.omega_hat
    assert back.sigma2_hat == est.sigma2_hat
    for A, B in zip(back.A_hat, est.A_hat):
        np.testing.assert_array_equal(A, B)
    assert est.to_model().sigma2 == max(est.sigma2_hat, 0.0)


def test_negative_sigma2_flagged():
    est = pw.PowerEstimates(1.0, [np.eye(2)], [np.eye(2)], -0.5)
    assert est.sigma2_negative
    assert est.to_model().sigma2 == 0.0


def test_fast_path_memory_audit():
    rng = np.random.default_rng(16)
    dims, latent, N = (40, 60, 80), (2, 3, 4), 12
    truth = M.new_model([rng.standard_normal((n, m)) for n, m in zip(dims, latent)], None, 1.0)
    d = M.sample(truth, N, 0)
    data_bytes = d.samples.nbytes
    cfg = pw.PowerConfig(iterations=1, seed=0)
    tracemalloc.start()
    try:
        state, est = pw.run_power(d, latent, cfg, trace=False)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    # O(Nn + Σ n_k²): far below the n² = 3.7e10 entries of an explicit moment
    assert peak < data_bytes + 8 * sum(n * n for n in dims) + 2_000_000
    assert est.omega_hat > 0
