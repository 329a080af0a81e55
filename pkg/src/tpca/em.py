"""Exact-likelihood EM for TPCA.

All work tied to ``M = AᵀA + σ² I`` happens densely in the latent space of
dimension ``m = m_1 ⋯ m_r``; the ambient space is only touched through Tucker
maps applied to the samples.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import tensor_core as tc
from .model import TpcaModel, as_samples, log_likelihood, normalize_model

log = logging.getLogger(__name__)

# singular values below this fraction of the largest are treated as zero, both
# when deciding rank deficiency and inside every pseudo-inverse
RANK_RTOL = 1e-10


class EmError(ArithmeticError):
    """Numerical failure inside an EM step."""


@dataclass
class EmConfig:
    max_iter: int = 100
    tol: float = 1e-3
    init: str = "hosvd"  # "hosvd" | "model" | "random"
    init_scaling: str = "spectral"  # HOSVD start: "spectral" | "orthonormal"
    sigma2_init: object = "residual"  # "residual" or a float (e.g. the true σ²)
    seed: int = 0
    init_model: Optional[TpcaModel] = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.init not in ("hosvd", "model", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "model" and self.init_model is None:
            raise ValueError("init='model' requires init_model")


@dataclass
class EmState:
    model: TpcaModel
    trace: list = field(default_factory=list)
    iteration: int = 0
    conditional_means: Optional[np.ndarray] = None  # (m_1, ..., m_r, N)
    conditional_cov: Optional[np.ndarray] = None  # dense (m, m)


@dataclass
class EmResult:
    model: TpcaModel
    trace: list
    status: str  # "converged" | "max_iter"
    iterations: int

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "trace": list(self.trace),
            "status": self.status,
            "iterations": self.iterations,
        }


def latent_operator(grams) -> np.ndarray:
    """Dense matrix of ``AᵀA``, i.e. ``G_r ⊗ ... ⊗ G_1`` with ``G_k = A_kᵀA_k``."""
    return tc.mat_of_tucker(grams)


def e_step(model: TpcaModel, data):
    """Posterior means ``E_i`` and the shared posterior covariance ``V``.

    Returns
    -------
    E : ndarray of shape ``(m_1, ..., m_r, N)``
    V : ndarray of shape ``(m, m)``, the matrix of ``σ² M⁻¹``
    """
    X = as_samples(data)
    N = X.shape[-1]
    M = latent_operator(model.grams()) + model.sigma2 * np.eye(model.m)
    try:
        chol = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError as exc:
        raise EmError("latent system M is singular (σ² = 0 with rank-deficient loadings)") from exc
    R = X - tc.tucker_apply(model.factors, model.nu)[..., None]
    Y = tc.tucker_apply(model.factors, R, adjoint=True).reshape(model.m, N, order="F")
    E = scipy.linalg.cho_solve(chol, Y).reshape(model.latent_dims + (N,), order="F")
    V = model.sigma2 * scipy.linalg.cho_solve(chol, np.eye(model.m))
    V = 0.5 * (V + V.T)
    return E, V


def trace_term(grams, V) -> float:
    """``tr(A V Aᵀ) = <G_r ⊗ ... ⊗ G_1, V>``, evaluated in the latent space."""
    return float(np.sum(latent_operator(grams) * V))


def em_objective(data, E, V, model: TpcaModel) -> float:
    """Expected complete-data loss minimized by the factor and mean updates."""
    X = as_samples(data)
    N = X.shape[-1]
    fit = tc.tucker_apply(model.factors, model.nu[..., None] + E)
    return float(np.sum((X - fit) ** 2) / N + trace_term(model.grams(), V))


def _weight_matrix(grams, V, latent_dims, k) -> np.ndarray:
    """``W_k``: the pair flattening of ``V`` contracted with ``vec(G_l)``, ``l != k``."""
    Vop = tc.matrix_to_operator(V, latent_dims, latent_dims)
    return tc.contract_operator_modes(Vop, grams, skip=(k,))


def _solve_normal(lhs, rhs, k):
    """Return ``rhs @ inv(lhs)`` for a symmetric ``lhs``, falling back to pinv."""
    lhs = 0.5 * (lhs + lhs.T)
    try:
        chol = scipy.linalg.cho_factor(lhs)
        return scipy.linalg.cho_solve(chol, rhs.T).T
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(lhs)
        warnings.warn(
            f"mode {k}: normal matrix not positive definite (cond={cond:.3g}); using pseudo-inverse",
            RuntimeWarning,
            stacklevel=3,
        )
        return rhs @ np.linalg.pinv(lhs, rcond=RANK_RTOL, hermitian=True)


def m_step_factors(data, E, V, model: TpcaModel) -> list[np.ndarray]:
    """One cyclic sweep of closed-form loading updates, modes ``0..r-1``.

    Each update uses the freshest loadings of the other modes and solves
    ``A_k [W_k + (1/N) Σ U U ᵀ] = (1/N) Σ M_k(X_i) Uᵀ`` with
    ``U = M_k(A^(-k) · (ν + E_i))``.
    """
    X = as_samples(data)
    N = X.shape[-1]
    r = model.order
    factors = [A.copy() for A in model.factors]
    latent = model.nu[..., None] + E
    for k in range(r):
        grams = [A.T @ A for A in factors]
        W = _weight_matrix(grams, V, model.latent_dims, k)
        partial = tc.tucker_apply(factors, latent, skip=(k,))
        # batch axis folds into the columns of the matricization
        U = tc.mode_matricize(partial, k)
        Xk = tc.mode_matricize(X, k)
        rhs = Xk @ U.T / N
        lhs = W + U @ U.T / N
        factors[k] = _solve_normal(lhs, rhs, k)
    return factors


def m_step_nu(data, E, factors) -> np.ndarray:
    """Least-squares latent mean ``(AᵀA)⁻¹ Aᵀ · mean_i(X_i - A·E_i)``."""
    X = as_samples(data)
    resid = np.mean(X - tc.tucker_apply(factors, E), axis=-1)
    pinvs = []
    for k, A in enumerate(factors):
        s = np.linalg.svd(A, compute_uv=False)
        if s[0] == 0.0 or s[-1] <= RANK_RTOL * s[0]:
            warnings.warn(f"mode {k}: rank-deficient loading; using pseudo-inverse for nu",
                          RuntimeWarning, stacklevel=2)
            pinvs.append(np.linalg.pinv(A, rcond=RANK_RTOL))
        else:
            pinvs.append(np.linalg.solve(A.T @ A, A.T))
    return tc.tucker_apply(pinvs, resid)


def m_step_sigma2(data, E, V, factors, nu) -> float:
    X = as_samples(data)
    N = X.shape[-1]
    n = X[..., 0].size
    fit = tc.tucker_apply(factors, nu[..., None] + E)
    grams = [A.T @ A for A in factors]
    return float(np.sum((X - fit) ** 2) / (n * N) + trace_term(grams, V) / n)


def _discarded_noise(eigvals, m_k, n_rest):
    """Per-entry noise level implied by the discarded eigenvalues of a mode Gram."""
    tail = eigvals[m_k:]
    if tail.size == 0:
        return None
    return float(np.mean(np.clip(tail, 0.0, None))) / n_rest


def init_hosvd(data, latent_dims, sigma2_init="residual", scaling="spectral") -> TpcaModel:
    """HOSVD warm start.

    Directions ``U_k`` are the leading eigenvectors of the mode Grams
    ``(1/N) Σ M_k(X̃_i) M_k(X̃_i)ᵀ`` of the centred data (raw data when
    ``N = 1``).

    ``scaling="orthonormal"`` uses ``A_k = U_k`` directly.
    ``scaling="spectral"`` sets ``A_k = U_k Λ_k^{1/2}``, where ``Λ_k`` holds the
    top Gram eigenvalues minus the noise floor ``σ² ∏_{l≠k} n_l``, rescaled by
    one common factor so that ``∏ tr(B_k)`` matches the excess energy
    ``mean ‖X̃_i‖² - n σ²``.

    The latent mean is the projection of the sample mean onto the loadings.
    ``sigma2_init="residual"`` estimates σ² as the mean discarded Gram
    eigenvalue per entry, averaged over modes with ``m_k < n_k``; a number is
    used as given.
    """
    if scaling not in ("spectral", "orthonormal"):
        raise ValueError(f"unknown scaling {scaling!r}")
    X = as_samples(data)
    dims = X.shape[:-1]
    N = X.shape[-1]
    n = int(np.prod(dims))
    latent_dims = tuple(int(m) for m in latent_dims)
    xbar = X.mean(axis=-1)
    Xc = X - xbar[..., None] if N > 1 else X
    eigs, vecs = [], []
    for k in range(len(dims)):
        Mk = tc.mode_matricize(Xc, k)
        lam, U = np.linalg.eigh(Mk @ Mk.T / N)
        eigs.append(lam[::-1])
        vecs.append(U[:, ::-1])
    if sigma2_init == "residual":
        levels = [
            _discarded_noise(lam, m, n // dims[k])
            for k, (lam, m) in enumerate(zip(eigs, latent_dims))
        ]
        levels = [v for v in levels if v is not None]
        if levels:
            sigma2 = float(np.mean(levels))
        else:
            # no discarded directions: assume 1% of the per-entry energy is noise
            sigma2 = 0.01 * float(np.sum(Xc**2)) / (n * N)
    else:
        sigma2 = float(sigma2_init)
    if scaling == "orthonormal":
        factors = [U[:, :m] for U, m in zip(vecs, latent_dims)]
    else:
        shapes = []
        for k, (lam, U, m) in enumerate(zip(eigs, vecs, latent_dims)):
            top = lam[:m] - sigma2 * (n // dims[k])
            top = np.maximum(top, max(float(lam[0]), 1e-12) * 1e-3)
            shapes.append(U[:, :m] * np.sqrt(top / np.linalg.norm(top)))
        energy = float(np.sum(Xc**2)) / N
        # common scale c with (c²)^r ∏ ‖S_k‖_F² = excess energy
        excess = max(energy - n * sigma2, 0.05 * energy)
        base = float(np.prod([np.sum(S**2) for S in shapes]))
        c = (excess / base) ** (1.0 / (2 * len(dims)))
        factors = [c * S for S in shapes]
    nu = tc.tucker_apply([np.linalg.pinv(A, rcond=RANK_RTOL) for A in factors], xbar)
    return TpcaModel(tuple(factors), nu, max(sigma2, 1e-12))


def random_init(dims, latent_dims, data, seed) -> TpcaModel:
    X = as_samples(data)
    rng = np.random.default_rng(seed)
    n = int(np.prod(dims))
    scale = float(np.sum(X**2)) / (n * X.shape[-1])
    factors = [rng.standard_normal((d, m)) * scale ** (0.5 / len(dims))
               for d, m in zip(dims, latent_dims)]
    return TpcaModel(tuple(factors), np.zeros(tuple(latent_dims)), max(scale, 1e-6))


def em_iteration(model: TpcaModel, data) -> tuple[TpcaModel, np.ndarray, np.ndarray]:
    """One full E/M cycle: E-step, factor sweep, ν, then σ²."""
    E, V = e_step(model, data)
    factors = m_step_factors(data, E, V, model)
    nu = m_step_nu(data, E, factors)
    sigma2 = m_step_sigma2(data, E, V, factors, nu)
    return TpcaModel(tuple(factors), nu, sigma2), E, V


def fit_em(data, latent_dims, config: Optional[EmConfig] = None) -> EmResult:
    """Run EM until the relative log-likelihood change drops below ``tol``.

    The returned model is normalized (right singular vectors removed, equal
    ``‖A_k A_kᵀ‖_F``). ``trace[0]`` is the log-likelihood at the start point
    and ``trace[t]`` the value after iteration ``t``.
    """
    config = config or EmConfig()
    X = as_samples(data)
    dims = X.shape[:-1]
    if config.init == "model":
        model = config.init_model
    elif config.init == "random":
        model = random_init(dims, latent_dims, X, config.seed)
        if config.sigma2_init != "residual":
            model = TpcaModel(model.factors, model.nu, float(config.sigma2_init))
    else:
        model = init_hosvd(X, latent_dims, config.sigma2_init, config.init_scaling)
    state = EmState(model, [log_likelihood(model, X)])
    status = "max_iter"
    for it in range(1, config.max_iter + 1):
        try:
            model, E, V = em_iteration(state.model, X)
        except (EmError, np.linalg.LinAlgError) as exc:
            raise EmError(f"EM failed at iteration {it}: {exc}") from exc
        ll = log_likelihood(model, X)
        prev = state.trace[-1]
        state.model, state.iteration = model, it
        state.conditional_means, state.conditional_cov = E, V
        state.trace.append(ll)
        if math.isfinite(prev) and abs(ll - prev) <= config.tol * abs(prev):
            status = "converged"
            break
    log.debug("EM stopped after %d iterations (%s)", state.iteration, status)
    return EmResult(normalize_model(state.model), state.trace, status, state.iteration)
