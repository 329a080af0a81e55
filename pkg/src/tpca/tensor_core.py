"""Dense multilinear algebra with colexicographic (column-major) layout.

Tensors are plain ``numpy.ndarray`` objects. Whenever a tensor is flattened,
the first index varies fastest, so ``vec(T)`` is ``T.ravel(order="F")`` and the
matrix of a Tucker map ``(A_1, ..., A_r)`` is ``A_r ⊗ ... ⊗ A_1``.

Mode arguments are 0-based like numpy axes. Multi-indices passed to
:func:`colex_rank` are 1-based.
"""
from __future__ import annotations

from functools import reduce
from typing import Sequence

import numpy as np

MAX_ENTRIES = 2**31


class ShapeError(ValueError):
    """Raised on inconsistent tensor, factor or operator shapes."""


def check_shape(dims) -> tuple[int, ...]:
    """Validate a shape and return it as a tuple of ints.

    Rejects empty shapes, non-positive dimensions and shapes with more than
    ``MAX_ENTRIES`` entries.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        raise ShapeError("tensor order must be at least 1")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be positive, got {dims}")
    total = 1
    for d in dims:
        total *= d
        if total > MAX_ENTRIES:
            raise ShapeError(f"shape {dims} has more than 2**31 entries")
    return dims


def colex_rank(index, dims) -> int:
    """1-based linear position of a 1-based multi-index in colex order.

    >>> colex_rank((2, 1, 1), (2, 2, 2))
    2
    """
    dims = check_shape(dims)
    index = tuple(int(i) for i in index)
    if len(index) != len(dims):
        raise ShapeError(f"index {index} does not match order {len(dims)}")
    rank, stride = 1, 1
    for i, n in zip(index, dims):
        if not 1 <= i <= n:
            raise IndexError(f"index {index} out of range for shape {dims}")
        rank += (i - 1) * stride
        stride *= n
    return rank


def colex_unrank(rank: int, dims) -> tuple[int, ...]:
    """Inverse of :func:`colex_rank`."""
    dims = check_shape(dims)
    total = int(np.prod(dims))
    if not 1 <= rank <= total:
        raise IndexError(f"rank {rank} out of range 1..{total}")
    rest = rank - 1
    index = []
    for n in dims:
        index.append(rest % n + 1)
        rest //= n
    return tuple(index)


def vec(T) -> np.ndarray:
    """Flatten a tensor to a vector in colex order."""
    return np.asarray(T, dtype=float).ravel(order="F")


def unvec(v, dims) -> np.ndarray:
    """Fold a colex-ordered vector back into a tensor of shape ``dims``."""
    dims = check_shape(dims)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != int(np.prod(dims)):
        raise ShapeError(f"vector of length {v.size} cannot fill shape {dims}")
    return v.reshape(dims, order="F")


def inner(S, T) -> float:
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    if S.shape != T.shape:
        raise ShapeError(f"shape mismatch {S.shape} vs {T.shape}")
    return float(np.vdot(S, T))


def frobenius(T) -> float:
    return float(np.linalg.norm(np.asarray(T, dtype=float).ravel()))


def mode_matricize(T, k: int) -> np.ndarray:
    """Mode-``k`` matricization: an ``n_k x prod(n_l, l != k)`` matrix.

    Columns are the mode-``k`` fibers, ordered colexicographically over the
    remaining modes.
    """
    T = np.asarray(T)
    if not 0 <= k < T.ndim:
        raise ShapeError(f"mode {k} out of range for order {T.ndim}")
    return np.moveaxis(T, k, 0).reshape(T.shape[k], -1, order="F")


def mode_fold(M, k: int, dims) -> np.ndarray:
    """Inverse of :func:`mode_matricize`."""
    dims = check_shape(dims)
    moved = (dims[k],) + dims[:k] + dims[k + 1:]
    return np.moveaxis(np.asarray(M).reshape(moved, order="F"), 0, k)


def mode_product(T, M, k: int) -> np.ndarray:
    """Multiply mode ``k`` of ``T`` by the matrix ``M`` (``M @ T_(k)``)."""
    T = np.asarray(T)
    if M.shape[1] != T.shape[k]:
        raise ShapeError(
            f"factor with {M.shape[1]} columns cannot act on mode {k} of size {T.shape[k]}"
        )
    return np.moveaxis(np.tensordot(M, T, axes=(1, k)), 0, k)


def _check_factors(factors) -> list[np.ndarray]:
    factors = [np.atleast_2d(np.asarray(A, dtype=float)) for A in factors]
    if not factors:
        raise ShapeError("at least one factor is required")
    for A in factors:
        if A.ndim != 2:
            raise ShapeError("factors must be matrices")
    return factors


def tucker_apply(factors: Sequence[np.ndarray], T, adjoint: bool = False, skip=()) -> np.ndarray:
    """Apply the Tucker map ``(A_1, ..., A_r) · T``.

    Parameters
    ----------
    factors : sequence of (n_k, m_k) arrays
    T : array_like
        Input tensor of shape ``(m_1, ..., m_r)``, or ``(n_1, ..., n_r)`` when
        ``adjoint`` is set. Extra trailing axes are carried along untouched,
        which lets a batch of samples be processed in one call.
    adjoint : bool
        Apply the adjoint map ``(A_1ᵀ, ..., A_rᵀ) · T`` instead.
    skip : iterable of int
        Modes left unchanged (identity factor).
    """
    factors = _check_factors(factors)
    T = np.asarray(T, dtype=float)
    r = len(factors)
    if T.ndim < r:
        raise ShapeError(f"tensor of order {T.ndim} cannot take {r} factors")
    skip = set(skip)
    out = T
    for k, A in enumerate(factors):
        if k in skip:
            continue
        M = A.T if adjoint else A
        if out.shape[k] != M.shape[1]:
            raise ShapeError(
                f"mode {k}: tensor size {out.shape[k]} does not match factor {A.shape}"
            )
        out = mode_product(out, M, k)
    return out


def kron_tensor(A, B) -> np.ndarray:
    """Kronecker product of two tensors of equal order.

    Entry ``(j_k + i_k * m_k)_k`` (0-based) of the result is
    ``A[i_1..i_r] * B[j_1..j_r]``; for matrices this is ``numpy.kron``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != B.ndim:
        raise ShapeError(f"order mismatch {A.ndim} vs {B.ndim}")
    r = A.ndim
    outer = np.multiply.outer(A, B)
    # interleave axes as (i_1, j_1, i_2, j_2, ...)
    perm = [ax for k in range(r) for ax in (k, r + k)]
    shape = tuple(a * b for a, b in zip(A.shape, B.shape))
    return outer.transpose(perm).reshape(shape)


def mat_of_tucker(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Dense ``n x m`` matrix of a Tucker map, ``A_r ⊗ ... ⊗ A_1``."""
    factors = _check_factors(factors)
    return reduce(kron_tensor, reversed(factors))


def operator_of_tucker(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Order-``2r`` array ``F[i_1..i_r, j_1..j_r]`` of a Tucker map."""
    factors = _check_factors(factors)
    r = len(factors)
    out = reduce(np.multiply.outer, factors)
    # outer gives (i_1, j_1, i_2, j_2, ...); regroup outputs then inputs
    perm = [2 * k for k in range(r)] + [2 * k + 1 for k in range(r)]
    return out.transpose(perm)


def operator_to_matrix(op, out_dims, in_dims) -> np.ndarray:
    """Matrix flattening of an order-``2r`` operator array."""
    n = int(np.prod(out_dims))
    m = int(np.prod(in_dims))
    return np.asarray(op, dtype=float).reshape((n, m), order="F")


def matrix_to_operator(M, out_dims, in_dims) -> np.ndarray:
    return np.asarray(M, dtype=float).reshape(tuple(out_dims) + tuple(in_dims), order="F")


def pair_of_operator(op, out_dims, in_dims) -> np.ndarray:
    """Pair flattening of an operator into shape ``(n_1 m_1, ..., n_r m_r)``.

    Position ``i_k + j_k * n_k`` (0-based) along axis ``k`` holds
    ``op[i_1..i_r, j_1..j_r]``.
    """
    out_dims = check_shape(out_dims)
    in_dims = check_shape(in_dims)
    r = len(out_dims)
    op = np.asarray(op, dtype=float)
    if op.shape != out_dims + in_dims:
        raise ShapeError(f"operator shape {op.shape} != {out_dims + in_dims}")
    perm = [ax for k in range(r) for ax in (k, r + k)]
    shape = tuple(n * m for n, m in zip(out_dims, in_dims))
    return op.transpose(perm).reshape(shape, order="F")


def pair_of_tucker(factors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Rank-one decomposition of the pair flattening: ``[vec(A_1), ..., vec(A_r)]``."""
    return [vec(A) for A in _check_factors(factors)]


def outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.multiply.outer, [np.asarray(v, dtype=float) for v in vectors])


def spectral_norm_tucker(factors: Sequence[np.ndarray]) -> float:
    """Operator norm of a Tucker map, the product of the factors' spectral norms."""
    return float(np.prod([np.linalg.norm(A, 2) for A in _check_factors(factors)]))


def contract_operator_modes(op, matrices, skip=()) -> np.ndarray:
    """Contract each (output, input) index pair of an operator with a matrix.

    For an order-``2r`` array ``op`` and matrices ``M_k`` this sums
    ``op[i, j] * prod_k M_k[i_k, j_k]`` over every mode not in ``skip``;
    the skipped modes survive as (output, input) axes in that order. This is
    the contraction of the pair flattening with ``vec(M_k)``.
    """
    op = np.asarray(op, dtype=float)
    r = op.ndim // 2
    skip = sorted(set(skip))
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    out_idx = letters[:r]
    in_idx = letters[r:2 * r]
    operands = [op]
    terms = [out_idx + in_idx]
    for k in range(r):
        if k in skip:
            continue
        operands.append(np.asarray(matrices[k], dtype=float))
        terms.append(out_idx[k] + in_idx[k])
    result = "".join(out_idx[k] + in_idx[k] for k in skip)
    return np.einsum(",".join(terms) + "->" + result, *operands, optimize=True)


def ml_norm_estimate(op, out_dims, in_dims, restarts: int = 32, tol: float = 1e-10,
                     max_sweeps: int = 500, seed=None, cap: int = 2**20) -> float:
    """Lower bound on the multilinear norm of an explicit operator.

    Maximizes ``<F(u), v>`` over unit rank-one ``u = u_1 ⊗ ... ⊗ u_r`` and
    ``v = v_1 ⊗ ... ⊗ v_r`` by alternating updates of the ``2r`` unit vectors,
    restarted from uniformly random unit vectors. Every returned value is
    attained by some feasible pair, so it never exceeds the true norm.
    """
    out_dims = check_shape(out_dims)
    in_dims = check_shape(in_dims)
    op = np.asarray(op, dtype=float)
    if op.shape != out_dims + in_dims:
        raise ShapeError(f"operator shape {op.shape} != {out_dims + in_dims}")
    if op.size > cap:
        raise ShapeError(f"operator has {op.size} entries, above the cap {cap}")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    rng = np.random.default_rng(seed)
    dims = out_dims + in_dims
    order = len(dims)
    best = 0.0
    for _ in range(restarts):
        vecs = [rng.standard_normal(d) for d in dims]
        vecs = [x / np.linalg.norm(x) for x in vecs]
        value = -np.inf
        for _ in range(max_sweeps):
            for a in range(order):
                g = op
                # contract every axis except ``a``, highest axis first
                for b in reversed(range(order)):
                    if b != a:
                        g = np.tensordot(g, vecs[b], axes=(b, 0))
                nrm = np.linalg.norm(g)
                if nrm == 0.0:
                    break
                vecs[a] = g / nrm
            new_value = nrm
            if abs(new_value - value) <= tol * max(1.0, abs(new_value)):
                value = new_value
                break
            value = new_value
        # certified value at the final feasible point
        g = op
        for b in reversed(range(order)):
            g = np.tensordot(g, vecs[b], axes=(b, 0))
        best = max(best, abs(float(g)))
    return best


def hosvd(T, ranks):
    """Truncated higher-order SVD.

    Returns
    -------
    factors : list of (n_k, m_k) arrays with orthonormal columns
        Leading left singular vectors of each mode matricization.
    core : ndarray of shape ``ranks``
        ``(A_1ᵀ, ..., A_rᵀ) · T``.
    """
    T = np.asarray(T, dtype=float)
    ranks = tuple(int(m) for m in ranks)
    if len(ranks) != T.ndim:
        raise ShapeError(f"{len(ranks)} ranks given for order-{T.ndim} tensor")
    factors = []
    for k, m in enumerate(ranks):
        if not 1 <= m <= T.shape[k]:
            raise ShapeError(f"rank {m} invalid for mode {k} of size {T.shape[k]}")
        U, _, _ = np.linalg.svd(mode_matricize(T, k), full_matrices=False)
        factors.append(U[:, :m])
    core = tucker_apply(factors, T, adjoint=True)
    return factors, core


def hosvd_residual(T, ranks) -> float:
    """Frobenius distance between ``T`` and its truncated HOSVD reconstruction."""
    factors, core = hosvd(T, ranks)
    return frobenius(np.asarray(T) - tucker_apply(factors, core))
