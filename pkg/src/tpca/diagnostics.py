"""Calculators for the concentration and one-step recovery bounds.

All functions are pure and deterministic. ``C0 = 0.145`` is the Gaussian-chaos
tail constant that appears in the concentration terms.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

C0 = 0.145
BISECT_TOL = 1e-14


@dataclass(frozen=True)
class ConcentrationInput:
    dims: tuple
    latent_dims: tuple
    N: int
    sigma: float
    normA: float  # product of spectral norms ‖A_k‖
    deltas: tuple = (0.05, 0.05, 0.05)

    def __post_init__(self):
        if len(self.dims) != len(self.latent_dims) or not self.dims:
            raise ValueError("dims and latent_dims must be nonempty and of equal length")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.sigma < 0 or self.normA < 0:
            raise ValueError("sigma and normA must be nonnegative")
        if len(self.deltas) != 3 or not all(0 < d < 1 for d in self.deltas):
            raise ValueError("deltas must be three numbers in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ConcentrationInput":
        return cls(
            tuple(int(x) for x in d["dims"]),
            tuple(int(x) for x in d["latent_dims"]),
            int(d["N"]),
            float(d["sigma"]),
            float(d["normA"]),
            tuple(float(x) for x in d.get("deltas", (0.05, 0.05, 0.05))),
        )


@dataclass(frozen=True)
class ConcentrationTerms:
    alpha1: float
    alpha2: float
    alpha3: float
    t1: float
    t2: float
    t3: float
    psi: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TauInterval:
    feasible: bool
    tau0: Optional[float]
    tau1: Optional[float]
    psi_over_omega: float
    m: int
    r: int

    def to_dict(self) -> dict:
        return asdict(self)


def _rate(alpha: float) -> float:
    return max(alpha, math.sqrt(alpha))


def concentration_terms(inp: ConcentrationInput) -> ConcentrationTerms:
    """Terms ``t1, t2, t3`` bounding ``‖S_N - Σ‖_ml`` and ``ψ = σ² + t1 + t2 + t3``."""
    r = len(inp.dims)
    d1, d2, d3 = inp.deltas
    L = math.log(10 * r)
    a1 = (2 * L * sum(inp.dims) + math.log(1 / d1)) / (C0 * inp.N)
    a2 = (2 * L * sum(inp.latent_dims) + math.log(1 / d2)) / (C0 * inp.N)
    a3 = 3.0 / inp.N * (L * (sum(inp.dims) + sum(inp.latent_dims)) + math.log(1 / d3))
    s2 = inp.sigma**2
    t1 = 2 * s2 * _rate(a1)
    t2 = 2 * inp.normA**2 * _rate(a2)
    t3 = 4 * inp.sigma * inp.normA * _rate(a3)
    return ConcentrationTerms(a1, a2, a3, t1, t2, t3, s2 + t1 + t2 + t3)


def g_value(x: float, psi_over_omega: float, m: int, r: int) -> float:
    """``g(x) = x²(1 - x²)^{r-1} - 32 m (ψ/ω)²``."""
    return x * x * (1 - x * x) ** (r - 1) - 32 * m * psi_over_omega**2


def feasibility_threshold(m: int, r: int) -> float:
    """Largest admissible ``(ψ/ω)²`` (exclusive)."""
    return (1.0 / (32 * m)) * (1.0 / r) * (1 - 1.0 / r) ** (r - 1)


def _bisect(f, lo, hi, tol):
    flo = f(lo)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0 or hi - lo <= tol * max(1.0, abs(mid)):
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def tau_interval(psi_over_omega: float, m: int, r: int, tol: float = BISECT_TOL) -> TauInterval:
    """Roots ``τ0 < τ1`` of ``g`` on ``(0, 1)``, found by bisection.

    Feasible iff ``(ψ/ω)² < (1/(32m)) (1/r) (1 - 1/r)^{r-1}`` (strict). The
    roots are bracketed on ``(0, sqrt(1/r)]`` and ``[sqrt(1/r), 1)``.
    """
    if not psi_over_omega > 0:
        raise ValueError("psi_over_omega must be positive")
    if r < 2:
        raise ValueError("r must be at least 2")
    if not psi_over_omega**2 < feasibility_threshold(m, r):
        return TauInterval(False, None, None, psi_over_omega, m, r)

    def g(x):
        return g_value(x, psi_over_omega, m, r)

    peak = math.sqrt(1.0 / r)
    tau0 = _bisect(g, 0.0, peak, tol)
    tau1 = _bisect(g, peak, 1.0, tol)
    return TauInterval(True, tau0, tau1, psi_over_omega, m, r)


def one_step_bounds(psi: float, omega: float, tau: float, m: int, r: int) -> tuple[float, float]:
    """``(f1, f2)``: bounds on ``sin θ_k`` and ``|ω - ω̂|/ω`` after one iteration."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    if omega <= 0:
        raise ValueError("omega must be positive")
    q = psi / omega
    base = 1 - tau * tau
    f1 = q * 4 * math.sqrt(2 * m) / base ** ((r - 1) / 2)
    f2 = q * q * 16 * m * r / base ** (r - 1) + q * math.sqrt(m)
    return f1, f2


def recovery_bound(f1: float, f2: float, omega: float, r: int, n_k: int, m_k: int,
                   lambda_min_Bk: float) -> float:
    """Bound on ``‖Â_k - A_k O_k‖_F / sqrt(n_k m_k)`` after one iteration."""
    if not lambda_min_Bk > 0:
        raise ValueError("lambda_min_Bk must be positive")
    num = (f2 + math.sqrt(2) * f1) * omega ** (1.0 / r)
    return num / (2 * (math.sqrt(2) - 1) * math.sqrt(n_k * m_k) * lambda_min_Bk)


def recovery_bounds(f1, f2, omega, r, dims, latent_dims, lambda_mins) -> list[float]:
    return [recovery_bound(f1, f2, omega, r, n, m, lam)
            for n, m, lam in zip(dims, latent_dims, lambda_mins)]


def sigma2_bound(f1: float, f2: float, omega: float, r: int, sigma2: float,
                 norm_sigma: float, n: int, m: int, N: int) -> tuple[float, float, float]:
    """``(α4, t4, total)`` for the bound on ``|σ̂² - σ²|`` after one iteration."""
    if not norm_sigma > 0:
        raise ValueError("norm_sigma must be positive")
    D = m * norm_sigma + (n - m) * sigma2 / norm_sigma
    a4 = 2 * norm_sigma * math.log(N * n) / (C0 * N * D)
    t4 = D / n * _rate(a4)
    total = math.sqrt(m) * omega / n * ((1 + 2 * f1 + math.sqrt(2) * f2) ** r - 1) + t4
    return a4, t4, total


def model_quantities(factors, sigma2: float) -> dict:
    """``ω``, ``‖A‖``, ``‖Σ‖ = ‖A‖² + σ²`` and per-mode ``λ_{m_k}(B_k)`` of a model."""
    omega = 1.0
    normA = 1.0
    lams = []
    for A in factors:
        A = np.asarray(A, dtype=float)
        B = A @ A.T
        omega *= float(np.linalg.norm(B))
        s = np.linalg.svd(A, compute_uv=False)
        normA *= float(s[0])
        lams.append(float(s[-1] ** 2))
    return {"omega": omega, "normA": normA, "norm_sigma": normA**2 + sigma2,
            "lambda_min": lams}


def report(inp: ConcentrationInput, omega: Optional[float] = None, tau: Optional[float] = None,
           lambda_mins=None) -> dict:
    """Every computable term for a given input as a JSON-ready dictionary.

    Without ``omega`` only the concentration terms are reported. With
    ``omega`` the τ-interval is added; with ``tau`` also ``f1``, ``f2``, the
    σ² bound and, given ``lambda_mins``, the per-mode factor bounds.
    """
    terms = concentration_terms(inp)
    out = {"input": {**asdict(inp), "dims": list(inp.dims), "latent_dims": list(inp.latent_dims),
                     "deltas": list(inp.deltas)},
           "concentration": terms.to_dict()}
    if omega is None:
        return out
    r = len(inp.dims)
    m = int(np.prod(inp.latent_dims))
    n = int(np.prod(inp.dims))
    interval = tau_interval(terms.psi / omega, m, r) if r >= 2 else None
    out["omega"] = omega
    out["tau_interval"] = interval.to_dict() if interval is not None else None
    if tau is not None:
        f1, f2 = one_step_bounds(terms.psi, omega, tau, m, r)
        out["tau"] = tau
        out["assumption_holds"] = bool(interval is not None and interval.feasible
                                       and tau < interval.tau1)
        out["f1"], out["f2"] = f1, f2
        norm_sigma = inp.normA**2 + inp.sigma**2
        a4, t4, total = sigma2_bound(f1, f2, omega, r, inp.sigma**2, norm_sigma, n, m, inp.N)
        out["sigma2_bound"] = {"alpha4": a4, "t4": t4, "total": total}
        if lambda_mins is not None:
            out["factor_bounds"] = recovery_bounds(f1, f2, omega, r, inp.dims, inp.latent_dims,
                                                   lambda_mins)
    return out
