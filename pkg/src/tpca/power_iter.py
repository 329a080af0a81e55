"""Rank-one power iteration on the Kronecker-lifted second moment.

The lifted moment ``pair(S_N)``, with ``S_N = (1/N) Σ X_i ⊗ X_i`` (raw,
uncentred moments), is an order-``r`` tensor of shape ``(n_1², ..., n_r²)``.
Each iterate is a unit vector ``b_k = vec(B_k)`` with ``B_k`` symmetric PSD of
rank at most ``m_k``. Contracting ``pair(S_N)`` with ``b_j`` for ``j != k``
gives a PSD ``n_k x n_k`` matrix; its best rank-``m_k`` truncation, normalized,
is the next iterate.

Two evaluation paths are provided. The naive path materializes ``S_N`` as an
order-``2r`` array and is meant for small shapes and cross-checks. The fast
path factors ``B_j = C_j C_jᵀ`` and only ever applies adjoint Tucker maps to
the samples, so memory stays ``O(Nn + Σ n_k²)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .evaluation import sin_theta
from .model import TpcaModel, _sign_fix, as_samples, new_model

NAIVE_CAP = 2**22  # largest Π n_k² the naive path will materialize
EIG_RTOL = 1e-12  # eigenvalues below EIG_RTOL * λ_max are dropped from square roots
PSD_TOL = 1e-10
CHUNK = 64  # samples per block on the fast path


class PowerError(ArithmeticError):
    """Numerical failure inside the power iteration."""


@dataclass
class PowerConfig:
    iterations: int = 5
    init: str = "random-psd"  # "random-psd" | "hosvd" | "provided"
    seed: int = 0
    path: str = "fast"  # "fast" | "naive" | "both"
    cap: int = NAIVE_CAP
    gauss_seidel: bool = False
    initial: Optional[list] = None  # B_k⁰ matrices when init == "provided"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.init not in ("random-psd", "hosvd", "provided"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.path not in ("fast", "naive", "both"):
            raise ValueError(f"unknown path {self.path!r}")
        if self.init == "provided" and self.initial is None:
            raise ValueError("init='provided' requires initial matrices")


@dataclass
class PowerState:
    matrices: list  # B_k, symmetric PSD, rank ≤ m_k, unit Frobenius norm
    latent_dims: tuple
    iteration: int = 0
    history: list = field(default_factory=list)  # matrices after each iteration, index 0 = init
    trace: list = field(default_factory=list)  # rows (iteration, mode, sin_theta, omega_hat)

    @property
    def vectors(self) -> list[np.ndarray]:
        return [tc.vec(B) for B in self.matrices]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(B.shape[0] for B in self.matrices)


@dataclass
class PowerEstimates:
    omega_hat: float
    B_hat: list
    A_hat: list
    sigma2_hat: float
    iterations: int = 0

    @property
    def sigma2_negative(self) -> bool:
        return self.sigma2_hat < 0

    def to_model(self) -> TpcaModel:
        """Zero-mean model from the estimates; a negative σ̂² is clamped to 0."""
        return new_model(self.A_hat, None, max(self.sigma2_hat, 0.0))

    def to_dict(self) -> dict:
        return {
            "omega_hat": self.omega_hat,
            "B_hat": [B.tolist() for B in self.B_hat],
            "A_hat": [A.tolist() for A in self.A_hat],
            "sigma2_hat": self.sigma2_hat,
            "sigma2_negative": self.sigma2_negative,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerEstimates":
        return cls(
            float(d["omega_hat"]),
            [np.array(B, dtype=float) for B in d["B_hat"]],
            [np.array(A, dtype=float) for A in d["A_hat"]],
            float(d["sigma2_hat"]),
            int(d.get("iterations", 0)),
        )


def _check_iterate(B, m_k, k):
    if not np.allclose(B, B.T, atol=1e-12):
        raise PowerError(f"mode {k}: iterate is not symmetric")
    lam = np.linalg.eigvalsh(B)
    if lam[0] < -PSD_TOL:
        raise PowerError(f"mode {k}: iterate has eigenvalue {lam[0]:.3g} < 0")
    if np.sum(lam > PSD_TOL * max(lam[-1], 1.0)) > m_k:
        raise PowerError(f"mode {k}: iterate rank exceeds {m_k}")
    if abs(np.linalg.norm(B) - 1.0) > 1e-10:
        raise PowerError(f"mode {k}: iterate is not unit norm")


def psd_truncate_normalize(tilde_B, m_k: int) -> np.ndarray:
    """Best rank-``m_k`` PSD truncation of a symmetric PSD matrix, scaled to unit norm.

    Raises
    ------
    PowerError
        If the retained eigenvalues are all numerically zero.
    """
    S = np.asarray(tilde_B, dtype=float)
    S = 0.5 * (S + S.T)
    lam, U = np.linalg.eigh(S)
    lam, U = lam[::-1][:m_k], U[:, ::-1][:, :m_k]
    scale = float(np.max(np.abs(S))) if S.size else 0.0
    if scale == 0.0 or lam[0] <= PSD_TOL * scale:
        raise PowerError("degenerate iterate: top eigenvalues are numerically zero")
    if lam[-1] < -PSD_TOL * lam[0]:
        warnings.warn(f"input not PSD (eigenvalue {lam[-1]:.3g}); clipping", RuntimeWarning,
                      stacklevel=2)
    lam = np.clip(lam, 0.0, None)
    lam /= np.linalg.norm(lam)
    B = (U * lam) @ U.T
    return 0.5 * (B + B.T)


def eigen_sqrt(B) -> np.ndarray:
    """``C`` with ``C Cᵀ = B`` from the eigenpairs above ``EIG_RTOL * λ_max``."""
    lam, U = np.linalg.eigh(0.5 * (B + B.T))
    keep = lam > EIG_RTOL * max(lam[-1], 0.0)
    if not keep.any():
        return np.zeros((B.shape[0], 1))
    return U[:, keep] * np.sqrt(lam[keep])


def init_power(data_or_dims, latent_dims, config: PowerConfig) -> PowerState:
    """Initial iterates ``B_k⁰``.

    ``random-psd`` draws ``G_k`` with standard-normal entries and uses
    ``G_k G_kᵀ / ‖G_k G_kᵀ‖_F``; ``hosvd`` uses ``U_k U_kᵀ / sqrt(m_k)`` with
    ``U_k`` the leading eigenvectors of the raw mode-``k`` Gram matrix;
    ``provided`` truncates and normalizes ``config.initial``.
    """
    latent_dims = tuple(int(m) for m in latent_dims)
    if config.init == "hosvd":
        X = as_samples(data_or_dims)
        mats = []
        for k, m in enumerate(latent_dims):
            Xk = tc.mode_matricize(X, k)
            _, U = np.linalg.eigh(Xk @ Xk.T)
            U = U[:, ::-1][:, :m]
            mats.append(U @ U.T / math.sqrt(m))
    elif config.init == "provided":
        mats = [psd_truncate_normalize(B, m) for B, m in zip(config.initial, latent_dims)]
    else:
        if isinstance(data_or_dims, (tuple, list)) and all(
            isinstance(d, (int, np.integer)) for d in data_or_dims
        ):
            dims = tuple(int(d) for d in data_or_dims)
        else:
            dims = as_samples(data_or_dims).shape[:-1]
        rng = np.random.default_rng(config.seed)
        mats = []
        for n_k, m_k in zip(dims, latent_dims):
            G = rng.standard_normal((n_k, m_k))
            P = G @ G.T
            mats.append(P / np.linalg.norm(P))
    if len(mats) != len(latent_dims):
        raise ValueError("one initial matrix per mode is required")
    for k, (B, m) in enumerate(zip(mats, latent_dims)):
        _check_iterate(B, m, k)
    return PowerState(mats, latent_dims, 0, [[B.copy() for B in mats]])


def second_moment_operator(data, cap: int = NAIVE_CAP) -> np.ndarray:
    """``S_N`` as an explicit order-``2r`` array ``(1/N) Σ X_i[a] X_i[b]``."""
    X = as_samples(data)
    dims = X.shape[:-1]
    n = int(np.prod(dims))
    if n * n > cap:
        raise ValueError(f"naive path needs {n * n} entries, above the cap {cap}")
    V = X.reshape(n, -1, order="F")
    S = V @ V.T / X.shape[-1]
    return tc.matrix_to_operator(S, dims, dims)


def tilde_from_operator(op, matrices, k: int) -> np.ndarray:
    """Contract ``pair(op)`` with ``vec(B_j)`` for every ``j != k``."""
    return tc.contract_operator_modes(op, matrices, skip=(k,))


def omega_from_operator(op, matrices) -> float:
    return float(tc.contract_operator_modes(op, matrices))


def _contract_mode(T, C, k) -> np.ndarray:
    """``Cᵀ`` applied to mode ``k`` of ``T`` without copying a Fortran-ordered ``T``."""
    if not T.flags.f_contiguous:
        return tc.mode_product(T, C.T, k)
    P = int(np.prod(T.shape[:k]))
    n_k = T.shape[k]
    Q = int(np.prod(T.shape[k + 1:]))
    shape = T.shape[:k] + (C.shape[1],) + T.shape[k + 1:]
    if P == 1:
        Y = C.T @ T.reshape(n_k, Q, order="F")
        return Y.reshape(shape, order="F")
    # (Q, P, n_k) stack of Fortran-ordered blocks, each multiplied by C
    Y = np.matmul(T.reshape(P, n_k, Q, order="F").transpose(2, 0, 1), C)
    return Y.transpose(1, 2, 0).reshape(shape, order="F")


def _adjoint_batch(roots, T, skip=()) -> np.ndarray:
    """``(C_1ᵀ, ..., C_rᵀ)`` applied to a batch, most reducing mode first."""
    modes = [k for k in range(len(roots)) if k not in skip]
    if not modes:
        return T
    first = max(modes, key=lambda k: roots[k].shape[0] / roots[k].shape[1])
    W = _contract_mode(T, roots[first], first)
    return tc.tucker_apply(roots, W, adjoint=True, skip=set(skip) | {first})


def _fast_tilde(X, roots, k) -> np.ndarray:
    N = X.shape[-1]
    n_k = X.shape[k]
    out = np.zeros((n_k, n_k))
    for start in range(0, N, CHUNK):
        W = _adjoint_batch(roots, X[..., start:start + CHUNK], skip=(k,))
        Wk = tc.mode_matricize(W, k)
        out += Wk @ Wk.T
    return out / N


def power_step_tilde(data, state: PowerState, k: int, path: str = "fast",
                     cap: int = NAIVE_CAP, matrices=None) -> np.ndarray:
    """The contracted matrix ``tilde_B_k`` for mode ``k``.

    ``matrices`` overrides the iterates of ``state`` (used for Gauss–Seidel
    sweeps). ``path="both"`` evaluates the two paths and checks that they
    agree to 1e-10 relative.
    """
    X = as_samples(data)
    mats = state.matrices if matrices is None else matrices
    if path not in ("fast", "naive", "both"):
        raise ValueError(f"unknown path {path!r}")
    fast = naive = None
    if path in ("fast", "both"):
        roots = [np.eye(B.shape[0]) if j == k else eigen_sqrt(B) for j, B in enumerate(mats)]
        fast = _fast_tilde(X, roots, k)
    if path in ("naive", "both"):
        naive = tilde_from_operator(second_moment_operator(X, cap), mats, k)
        naive = 0.5 * (naive + naive.T)
    if path == "both":
        scale = max(np.linalg.norm(naive), np.finfo(float).tiny)
        if np.linalg.norm(fast - naive) > 1e-10 * scale:
            raise PowerError(f"mode {k}: fast and naive paths disagree")
    return fast if fast is not None else naive


def power_iteration(data, state: PowerState, config: PowerConfig) -> PowerState:
    """One sweep over all modes; Jacobi unless ``config.gauss_seidel``."""
    current = list(state.matrices)
    new = []
    for k, m in enumerate(state.latent_dims):
        basis = current if config.gauss_seidel else state.matrices
        tilde = power_step_tilde(data, state, k, config.path, config.cap, matrices=basis)
        B = psd_truncate_normalize(tilde, m)
        _check_iterate(B, m, k)
        new.append(B)
        if config.gauss_seidel:
            current[k] = B
    history = state.history + [[B.copy() for B in new]]
    return PowerState(new, state.latent_dims, state.iteration + 1, history, list(state.trace))


def estimate_omega(data, state_or_matrices, path: str = "fast", cap: int = NAIVE_CAP) -> float:
    """``ω̂ = (b̂_1ᵀ, ..., b̂_rᵀ) · pair(S_N) = (1/N) Σ ‖(C_1ᵀ, ..., C_rᵀ)·X_i‖²``."""
    X = as_samples(data)
    mats = getattr(state_or_matrices, "matrices", state_or_matrices)
    if path == "naive":
        return max(omega_from_operator(second_moment_operator(X, cap), mats), 0.0)
    roots = [eigen_sqrt(B) for B in mats]
    N = X.shape[-1]
    total = 0.0
    for start in range(0, N, CHUNK):
        W = _adjoint_batch(roots, X[..., start:start + CHUNK])
        total += float(np.sum(W * W))
    return total / N


def estimate_factors(omega_hat: float, state_or_matrices, latent_dims=None):
    """``B̂_k = ω̂^{1/r} B_k`` and ``Â_k = Û_k Λ̂_k^{1/2}``.

    Returns ``(A_hat, B_hat)``. Columns of ``Â_k`` follow nonincreasing
    eigenvalues with the sign convention of :func:`tpca.model.canonical_factor`.
    """
    if omega_hat < 0:
        raise ValueError(f"omega_hat must be nonnegative, got {omega_hat}")
    mats = getattr(state_or_matrices, "matrices", state_or_matrices)
    if latent_dims is None:
        latent_dims = getattr(state_or_matrices, "latent_dims")
    r = len(mats)
    scale = omega_hat ** (1.0 / r)
    A_hat, B_hat = [], []
    for B, m in zip(mats, latent_dims):
        Bh = scale * B
        lam, U = np.linalg.eigh(0.5 * (Bh + Bh.T))
        lam, U = np.clip(lam[::-1][:m], 0.0, None), U[:, ::-1][:, :m]
        U = U * _sign_fix(U)
        A_hat.append(U * np.sqrt(lam))
        B_hat.append(Bh)
    return A_hat, B_hat


def estimate_sigma2(data, B_hat) -> float:
    """``σ̂² = (1/n) tr(S_N) - (1/n) Π tr(B̂_k)``; may be negative."""
    X = as_samples(data)
    n = int(np.prod(X.shape[:-1]))
    flat = X.ravel(order="K")
    trace_S = float(np.dot(flat, flat)) / X.shape[-1]
    signal = float(np.prod([np.trace(B) for B in B_hat]))
    return (trace_S - signal) / n


def estimates_from_matrices(data, matrices, latent_dims, path: str = "fast",
                            cap: int = NAIVE_CAP, iterations: int = 0) -> PowerEstimates:
    omega = estimate_omega(data, matrices, path, cap)
    A_hat, B_hat = estimate_factors(omega, matrices, latent_dims)
    s2 = estimate_sigma2(data, B_hat)
    if s2 < 0:
        warnings.warn(f"negative noise estimate {s2:.6g}", RuntimeWarning, stacklevel=2)
    return PowerEstimates(omega, B_hat, A_hat, s2, iterations)


def run_power(data, latent_dims, config: Optional[PowerConfig] = None,
              truth: Optional[TpcaModel] = None, trace: bool = True):
    """Run ``config.iterations`` power iterations and form the final estimates.

    Returns ``(state, estimates)``. ``state.history`` keeps the iterates after
    every iteration. ``state.trace`` gets one row
    ``(iteration, mode, sin_theta, omega_hat)`` per mode and iteration;
    ``sin_theta`` is ``None`` without a ``truth`` model. ``trace=False`` skips
    the trace, which saves one pass over the data per iteration.
    """
    config = config or PowerConfig()
    latent_dims = tuple(int(m) for m in latent_dims)
    X = as_samples(data)
    state = init_power(X, latent_dims, config)
    targets = [tc.vec(B) for B in truth.outer_grams()] if truth is not None else None

    def record(st):
        if not trace:
            return
        omega = estimate_omega(X, st, config.path if config.path != "both" else "fast", config.cap)
        for k, B in enumerate(st.matrices):
            s = sin_theta(tc.vec(B), targets[k]) if targets is not None else None
            st.trace.append((st.iteration, k, s, omega))

    record(state)
    for _ in range(config.iterations):
        state = power_iteration(X, state, config)
        record(state)
    path = "naive" if config.path == "naive" else "fast"
    est = estimates_from_matrices(X, state.matrices, latent_dims, path, config.cap,
                                  state.iteration)
    return state, est
