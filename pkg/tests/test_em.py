import math
import warnings

import numpy as np
import pytest

from tpca import em
from tpca import model as M
from tpca import tensor_core as tc


def random_model(rng, dims, latent, sigma2=0.5):
    factors = [rng.standard_normal((n, m)) for n, m in zip(dims, latent)]
    return M.new_model(factors, rng.standard_normal(latent), sigma2)


def test_config_validation():
    with pytest.raises(ValueError):
        em.EmConfig(max_iter=0)
    with pytest.raises(ValueError):
        em.EmConfig(tol=0.0)
    with pytest.raises(ValueError):
        em.EmConfig(init="bogus")
    with pytest.raises(ValueError):
        em.EmConfig(init="model")


def test_e_step_orthonormal_factors():
    rng = np.random.default_rng(0)
    Q = [np.linalg.qr(rng.standard_normal((n, m)))[0] for n, m in ((4, 2), (3, 2))]
    m = M.new_model(Q, None, 1.0)
    _, V = em.e_step(m, rng.standard_normal((4, 3, 2)))
    np.testing.assert_allclose(V, 0.5 * np.eye(4), atol=1e-14)


def test_e_step_matches_ridge_and_dense_posterior():
    rng = np.random.default_rng(1)
    m = random_model(rng, (4, 3, 3), (2, 2, 1), sigma2=0.8)
    X = rng.standard_normal((4, 3, 3, 5))
    E, V = em.e_step(m, X)
    A = tc.mat_of_tucker(m.factors)
    mu = tc.vec(M.mean_tensor(m))
    # ridge minimizer of ‖x - μ - A u‖² + σ² ‖u‖²
    lhs = np.vstack([A, math.sqrt(m.sigma2) * np.eye(m.m)])
    Sigma = M.covariance_dense(m)
    for i in range(5):
        rhs = np.concatenate([tc.vec(X[..., i]) - mu, np.zeros(m.m)])
        u = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        np.testing.assert_allclose(tc.vec(E[..., i]), u, rtol=1e-9, atol=1e-10)
        # dense posterior mean Aᵀ Σ⁻¹ (x - μ)
        post = A.T @ np.linalg.solve(Sigma, tc.vec(X[..., i]) - mu)
        np.testing.assert_allclose(tc.vec(E[..., i]), post, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(V, np.eye(m.m) - A.T @ np.linalg.solve(Sigma, A), atol=1e-10)
    assert np.all(np.linalg.eigvalsh(V) > 0)


def test_e_step_shrinks_with_large_noise_and_singular_case():
    rng = np.random.default_rng(2)
    m = random_model(rng, (3, 3), (2, 2), sigma2=1e12)
    E, _ = em.e_step(m, rng.standard_normal((3, 3, 4)))
    assert np.max(np.abs(E)) < 1e-9
    deficient = M.new_model([np.ones((3, 2)), np.eye(3)[:, :2]], None, 0.0)
    with pytest.raises(em.EmError):
        em.e_step(deficient, rng.standard_normal((3, 3, 2)))


def test_trace_term_dense():
    rng = np.random.default_rng(3)
    m = random_model(rng, (3, 4), (2, 3))
    _, V = em.e_step(m, rng.standard_normal((3, 4, 2)))
    A = tc.mat_of_tucker(m.factors)
    assert em.trace_term(m.grams(), V) == pytest.approx(np.trace(A @ V @ A.T), rel=1e-12)


def test_m_step_objective_nonincreasing():
    rng = np.random.default_rng(4)
    for trial in range(200):
        dims = tuple(int(x) for x in rng.integers(2, 5, size=3))
        latent = tuple(int(rng.integers(1, n + 1)) for n in dims)
        m = random_model(rng, dims, latent, sigma2=float(rng.uniform(0.1, 2)))
        X = rng.standard_normal(dims + (int(rng.integers(2, 6)),))
        E, V = em.e_step(m, X)
        before = em.em_objective(X, E, V, m)
        new = em.m_step_factors(X, E, V, m)
        after = em.em_objective(X, E, V, M.TpcaModel(tuple(new), m.nu, m.sigma2))
        assert after <= before + 1e-9 * abs(before), trial


def test_m_step_exact_interpolation():
    rng = np.random.default_rng(5)
    m = random_model(rng, (4, 3, 3), (2, 2, 2), sigma2=0.0)
    Z = rng.standard_normal((2, 2, 2, 30))
    X = tc.tucker_apply(m.factors, m.nu[..., None] + Z)
    V = np.zeros((8, 8))
    new = em.m_step_factors(X, Z, V, m)
    for A, B in zip(new, m.factors):
        np.testing.assert_allclose(A, B, atol=1e-10)
    assert em.m_step_sigma2(X, Z, V, new, m.nu) == pytest.approx(0.0, abs=1e-18)


def test_m_step_order_one_is_ppca():
    rng = np.random.default_rng(6)
    m = M.new_model([rng.standard_normal((5, 2))], rng.standard_normal(2), 0.7)
    X = rng.standard_normal((5, 12))
    E, V = em.e_step(m, X)
    U = m.nu[:, None] + E
    expect = (X @ U.T / 12) @ np.linalg.inv(V + U @ U.T / 12)
    np.testing.assert_allclose(em.m_step_factors(X, E, V, m)[0], expect, rtol=1e-10)


def test_m_step_nu():
    rng = np.random.default_rng(7)
    Q = [np.linalg.qr(rng.standard_normal((n, m)))[0] for n, m in ((4, 2), (3, 2))]
    X = rng.standard_normal((4, 3, 6))
    E0 = np.zeros((2, 2, 6))
    np.testing.assert_allclose(em.m_step_nu(X, E0, Q),
                               tc.tucker_apply(Q, X.mean(axis=-1), adjoint=True), atol=1e-12)
    factors = [rng.standard_normal((4, 2)), rng.standard_normal((3, 2))]
    nu0 = rng.standard_normal((2, 2))
    Xm = np.repeat(tc.tucker_apply(factors, nu0)[..., None], 3, axis=-1)
    np.testing.assert_allclose(em.m_step_nu(Xm, np.zeros((2, 2, 3)), factors), nu0, atol=1e-10)
    # dense least-squares oracle
    E = rng.standard_normal((2, 2, 6))
    A = tc.mat_of_tucker(factors)
    resid = tc.vec(np.mean(X - tc.tucker_apply(factors, E), axis=-1))
    expect = np.linalg.lstsq(A, resid, rcond=None)[0]
    np.testing.assert_allclose(tc.vec(em.m_step_nu(X, E, factors)), expect, atol=1e-10)


def test_m_step_nu_rank_deficient_warns():
    X = np.ones((3, 3, 2))
    with pytest.warns(RuntimeWarning):
        em.m_step_nu(X, np.zeros((2, 1, 2)), [np.ones((3, 2)), np.ones((3, 1))])


def test_m_step_sigma2_zero_loadings():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((3, 2, 4))
    s2 = em.m_step_sigma2(X, np.zeros((1, 1, 4)), np.eye(1), [np.zeros((3, 1)),
                                                            np.zeros((2, 1))], np.zeros((1, 1)))
    assert s2 == pytest.approx(float(np.mean(X**2)))


def test_fit_em_monotone_and_normalized():
    rng = np.random.default_rng(9)
    truth = random_model(rng, (5, 4, 3), (2, 2, 2), sigma2=0.5)
    d = M.sample(truth, 20, 1)
    res = em.fit_em(d, (2, 2, 2), em.EmConfig(max_iter=60, tol=1e-8))
    tr = np.array(res.trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[1:]))
    assert res.status in ("converged", "max_iter")
    norms = [np.linalg.norm(B) for B in res.model.outer_grams()]
    np.testing.assert_allclose(norms, norms[0], rtol=1e-10)
    assert res.to_dict()["iterations"] == res.iterations


def test_fit_em_fixed_point():
    rng = np.random.default_rng(10)
    truth = random_model(rng, (4, 4, 3), (2, 2, 1), sigma2=0.3)
    d = M.sample(truth, 25, 2)
    cfg = em.EmConfig(max_iter=500, tol=1e-6)
    res = em.fit_em(d, (2, 2, 1), cfg)
    assert res.status == "converged"
    ll = M.log_likelihood(res.model, d)
    nxt, _, _ = em.em_iteration(res.model, d)
    assert abs(M.log_likelihood(nxt, d) - ll) <= cfg.tol * abs(ll)


def test_fit_em_random_and_model_inits_deterministic():
    rng = np.random.default_rng(11)
    truth = random_model(rng, (4, 3, 3), (2, 1, 2))
    d = M.sample(truth, 10, 3)
    a = em.fit_em(d, (2, 1, 2), em.EmConfig(init="random", seed=5, max_iter=20))
    b = em.fit_em(d, (2, 1, 2), em.EmConfig(init="random", seed=5, max_iter=20))
    assert a.trace == b.trace
    c = em.fit_em(d, (2, 1, 2), em.EmConfig(init="model", init_model=truth, max_iter=5))
    assert c.trace[0] == pytest.approx(M.log_likelihood(truth, d))


def test_init_hosvd_residual_sigma2_and_subspaces():
    rng = np.random.default_rng(12)
    truth = random_model(rng, (6, 5, 4), (2, 2, 2), sigma2=0.0)
    truth = M.new_model(truth.factors, np.zeros((2, 2, 2)), 0.0)
    d = M.sample(truth, 8, 4)
    init = em.init_hosvd(d, (2, 2, 2))
    for A, B in zip(init.factors, truth.factors):
        P = B @ np.linalg.pinv(B)
        np.testing.assert_allclose(P @ A, A, atol=1e-8)
    # residual estimate: mean discarded Gram eigenvalue per entry
    X = rng.standard_normal((5, 4, 3, 6))
    Xc = X - X.mean(axis=-1, keepdims=True)
    levels = []
    for k, m in enumerate((2, 2, 1)):
        Mk = tc.mode_matricize(Xc, k)
        lam = np.sort(np.linalg.eigvalsh(Mk @ Mk.T / 6))[::-1]
        levels.append(lam[m:].mean() / (60 // X.shape[k]))
    init2 = em.init_hosvd(X, (2, 2, 1))
    assert init2.sigma2 == pytest.approx(np.mean(levels), rel=1e-10)
    again = em.init_hosvd(X, (2, 2, 1))
    for A, B in zip(init2.factors, again.factors):
        np.testing.assert_array_equal(A, B)
    ortho = em.init_hosvd(X, (2, 2, 1), sigma2_init=0.5, scaling="orthonormal")
    assert ortho.sigma2 == 0.5
    for A in ortho.factors:
        np.testing.assert_allclose(A.T @ A, np.eye(A.shape[1]), atol=1e-12)
    with pytest.raises(ValueError):
        em.init_hosvd(X, (2, 2, 1), scaling="bogus")


def test_single_sample_fit_runs():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((6, 3, 3, 1))
    res = em.fit_em(X, (5, 2, 2))
    assert res.model.sigma2 > 0


def test_m_step_nu_ignores_roundoff_singular_values():
    rng = np.random.default_rng(14)
    U = np.linalg.qr(rng.standard_normal((6, 3)))[0]
    A = U @ np.diag([3.7, 1.0, 6e-15])
    B = np.ones((2, 1))
    X = rng.standard_normal((6, 2, 4))
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        nu = em.m_step_nu(X, np.zeros((3, 1, 4)), [A, B])
    # the round-off direction must not be inverted
    assert np.linalg.norm(nu) < 10 * np.linalg.norm(X)
    expect = tc.tucker_apply([np.linalg.pinv(A[:, :2]), np.linalg.pinv(B)], X.mean(axis=-1))
    np.testing.assert_allclose(nu[:2], expect, atol=1e-10)
    assert abs(nu[2, 0]) < 1e-10


def test_single_sample_noise_floor_certificate():
    # every σ² update is ‖X - P‖²/n plus a nonnegative trace, with P = A·(ν + E)
    # on the Tucker variety, so σ² never drops below the distance to it
    rng = np.random.default_rng(15)
    dims, latent = (6, 3, 3), (5, 2, 2)
    ranks, _ = M.tucker_variety_dim(dims, latent)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        X = rng.standard_normal(dims + (1,))
        res = em.fit_em(X, latent, em.EmConfig(max_iter=30))
        nxt, E, V = em.em_iteration(res.model, X)
    P = tc.tucker_apply(nxt.factors, nxt.nu[..., None] + E)[..., 0]
    assert tc.hosvd_residual(P, ranks) < 1e-8 * np.linalg.norm(P)
    n = int(np.prod(dims))
    assert nxt.sigma2 * n >= np.sum((X[..., 0] - P) ** 2) * (1 - 1e-12)
