"""Error metrics and replication summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class AlignmentReport:
    errors: list
    mean_error: float
    rotations: list


@dataclass(frozen=True)
class ReplicationSummary:
    metric: str
    values: tuple
    mean: float
    lower: float
    upper: float
    count: int


def procrustes_error(A_hat, A):
    """Size-normalized error of ``A_hat`` after the best orthogonal right rotation.

    Returns ``(err, O)`` where ``O`` minimizes ``‖A_hat O - A‖_F`` over all
    orthogonal matrices (reflections included) and
    ``err = ‖A_hat O - A‖_F / sqrt(n_k m_k)``.
    """
    A_hat = np.asarray(A_hat, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"expected one factor matrix, got shape {A.shape}; "
                         "use align_factors for a list of factors")
    if A_hat.shape != A.shape:
        raise ValueError(f"shape mismatch {A_hat.shape} vs {A.shape}")
    U, _, Vt = np.linalg.svd(A_hat.T @ A)
    O = U @ Vt
    err = np.linalg.norm(A_hat @ O - A) / math.sqrt(A.size)
    return float(err), O


def align_factors(estimates, truth) -> AlignmentReport:
    errs, rots = [], []
    for A_hat, A in zip(estimates, truth):
        e, O = procrustes_error(A_hat, A)
        errs.append(e)
        rots.append(O)
    return AlignmentReport(errs, float(np.mean(errs)), rots)


def sin_theta(b_hat, b) -> float:
    """Sine of the angle between two vectors, both renormalized first."""
    b_hat = np.ravel(np.asarray(b_hat, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    nh, nb = np.linalg.norm(b_hat), np.linalg.norm(b)
    if nh == 0.0 or nb == 0.0:
        raise ValueError("sin_theta is undefined for a zero vector")
    cos = float(np.dot(b_hat, b) / (nh * nb))
    return math.sqrt(max(0.0, 1.0 - min(1.0, cos * cos)))


def summarize(values, metric: str = "value", level: float = 0.95) -> ReplicationSummary:
    """Mean with a Student-t confidence interval."""
    values = tuple(float(v) for v in values)
    k = len(values)
    if k < 2:
        raise ValueError("at least two values are needed for an interval")
    arr = np.asarray(values)
    mean = float(arr.mean())
    half = float(stats.t.ppf(0.5 + level / 2, k - 1) * arr.std(ddof=1) / math.sqrt(k))
    return ReplicationSummary(metric, values, mean, mean - half, mean + half, k)
