"""The TPCA generative model ``X = A·(ν + Z) + ε``.

A model is a list of loadings ``A_k`` of shape ``(n_k, m_k)``, a latent mean
``ν`` of shape ``(m_1, ..., m_r)`` and an isotropic noise variance ``σ²``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor_core as tc

MAGIC = b"TPCA1"


class ModelError(ValueError):
    """Raised for invalid model parameters."""


@dataclass(frozen=True)
class TpcaModel:
    factors: tuple
    nu: np.ndarray
    sigma2: float

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(A.shape[0] for A in self.factors)

    @property
    def latent_dims(self) -> tuple[int, ...]:
        return tuple(A.shape[1] for A in self.factors)

    @property
    def n(self) -> int:
        return int(np.prod(self.dims))

    @property
    def m(self) -> int:
        return int(np.prod(self.latent_dims))

    def grams(self) -> list[np.ndarray]:
        """Latent Gram matrices ``A_kᵀ A_k``."""
        return [A.T @ A for A in self.factors]

    def outer_grams(self) -> list[np.ndarray]:
        """Mode covariances ``B_k = A_k A_kᵀ``."""
        return [A @ A.T for A in self.factors]

    def to_dict(self) -> dict:
        return {
            "factors": [A.tolist() for A in self.factors],
            "nu": tc.vec(self.nu).tolist(),
            "latent_dims": list(self.latent_dims),
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TpcaModel":
        factors = [np.array(A, dtype=float) for A in d["factors"]]
        latent = tuple(d.get("latent_dims") or [A.shape[1] for A in factors])
        nu = tc.unvec(np.array(d["nu"], dtype=float), latent) if d.get("nu") is not None else None
        return new_model(factors, nu, d["sigma2"])


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray  # shape (n_1, ..., n_r, N)
    seed: Optional[int] = None
    truth: Optional[TpcaModel] = None

    def __post_init__(self):
        if self.samples.ndim < 2:
            raise ModelError("samples must carry a trailing sample axis")
        if self.samples.shape[-1] < 1:
            raise ModelError("a dataset needs at least one sample")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.samples.shape[:-1]

    @property
    def N(self) -> int:
        return self.samples.shape[-1]

    def __len__(self):
        return self.N

    def __getitem__(self, i) -> np.ndarray:
        return self.samples[..., i]

    @classmethod
    def from_list(cls, tensors, seed=None, truth=None) -> "Dataset":
        tensors = [np.asarray(T, dtype=float) for T in tensors]
        if not tensors:
            raise ModelError("a dataset needs at least one sample")
        shape = tensors[0].shape
        if any(T.shape != shape for T in tensors):
            raise ModelError("all samples must share one shape")
        return cls(np.stack(tensors, axis=-1), seed, truth)


@dataclass(frozen=True)
class SpectrumReport:
    mode_eigenvalues: list  # per mode, nonincreasing, length n_k
    eigenvalues: np.ndarray  # all n eigenvalues of Σ, nonincreasing
    sigma2: float
    signal_count: int  # eigenvalues carrying a nonzero signal product
    noise_multiplicity: int = field(default=0)


def as_samples(data) -> np.ndarray:
    """Return the ``(n_1, ..., n_r, N)`` sample array of a dataset-like input."""
    if isinstance(data, Dataset):
        return data.samples
    return np.asarray(data, dtype=float)


def new_model(factors: Sequence, nu=None, sigma2: float = 1.0) -> TpcaModel:
    factors = tuple(np.atleast_2d(np.array(A, dtype=float)) for A in factors)
    if not factors:
        raise ModelError("at least one factor is required")
    for k, A in enumerate(factors):
        if A.ndim != 2:
            raise ModelError(f"factor {k} is not a matrix")
        if A.shape[1] > A.shape[0]:
            raise ModelError(f"factor {k} has m_k={A.shape[1]} > n_k={A.shape[0]}")
    tc.check_shape([A.shape[0] for A in factors])
    latent = tuple(A.shape[1] for A in factors)
    if nu is None:
        nu = np.zeros(latent)
    nu = np.array(nu, dtype=float)
    if nu.ndim == 1 and nu.shape != latent and nu.size == int(np.prod(latent)):
        nu = tc.unvec(nu, latent)
    if nu.shape != latent:
        raise ModelError(f"nu has shape {nu.shape}, expected {latent}")
    sigma2 = float(sigma2)
    if not sigma2 >= 0.0:
        raise ModelError(f"sigma2 must be nonnegative, got {sigma2}")
    return TpcaModel(factors, nu, sigma2)


def mean_tensor(model: TpcaModel) -> np.ndarray:
    return tc.tucker_apply(model.factors, model.nu)


def covariance_apply(model: TpcaModel, T) -> np.ndarray:
    """``σ² T + (B_1, ..., B_r) · T`` with ``B_k = A_k A_kᵀ``."""
    T = np.asarray(T, dtype=float)
    if T.shape[:model.order] != model.dims:
        raise tc.ShapeError(f"tensor shape {T.shape} does not match {model.dims}")
    return model.sigma2 * T + tc.tucker_apply(model.outer_grams(), T)


def covariance_dense(model: TpcaModel) -> np.ndarray:
    return model.sigma2 * np.eye(model.n) + tc.mat_of_tucker(model.outer_grams())


def _mode_eigh(B):
    lam, U = np.linalg.eigh(B)
    return lam[::-1], U[:, ::-1]


def covariance_spectrum(model: TpcaModel) -> SpectrumReport:
    mode_eigs = []
    for B in model.outer_grams():
        lam = _mode_eigh(B)[0]
        # B_k is PSD; eigh can return tiny negatives
        mode_eigs.append(np.clip(lam, 0.0, None))
    products = tc.outer(mode_eigs).ravel()
    eigenvalues = np.sort(model.sigma2 + products)[::-1]
    ranks = []
    for lam, A in zip(mode_eigs, model.factors):
        tol = max(A.shape) * np.finfo(float).eps * (lam[0] if lam[0] > 0 else 1.0)
        ranks.append(int(np.sum(lam > tol)))
    signal = int(np.prod(ranks))
    return SpectrumReport(mode_eigs, eigenvalues, model.sigma2, signal, model.n - signal)


def _sample_stream(seed: int, index: int) -> np.random.Generator:
    # counter-based Philox with one independent substream per sample
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def sample(model: TpcaModel, N: int, seed: int) -> Dataset:
    """Draw ``N`` independent observations; deterministic given ``seed``."""
    if N < 1:
        raise ModelError("N must be at least 1")
    sigma = math.sqrt(model.sigma2)
    # Fortran layout keeps each sample contiguous; draws fill vec(X_i) in colex order
    latent = np.empty(model.latent_dims + (N,), order="F")
    X = np.empty(model.dims + (N,), order="F")
    for i in range(N):
        rng = _sample_stream(seed, i)
        latent[..., i] = tc.unvec(rng.standard_normal(model.m), model.latent_dims)
        X[..., i] = tc.unvec(rng.standard_normal(model.n), model.dims)
    latent += model.nu[..., None]
    X *= sigma
    # chunked so large shapes never hold a second full-size temporary
    for start in range(0, N, 64):
        stop = min(start + 64, N)
        X[..., start:stop] += tc.tucker_apply(model.factors, latent[..., start:stop])
    return Dataset(X, seed, model)


def _latent_system(model: TpcaModel) -> np.ndarray:
    """Dense matrix of ``M = AᵀA + σ² I`` on the latent space."""
    return tc.mat_of_tucker(model.grams()) + model.sigma2 * np.eye(model.m)


def log_likelihood(model: TpcaModel, data) -> float:
    """Exact Gaussian log-likelihood of the samples, constants included.

    ``log det Σ`` comes from the per-mode spectra. The quadratic form uses the
    Woodbury identity when the latent space is smaller than the ambient space
    and the mode eigenbases otherwise. With ``σ² = 0`` the density is taken on
    the support of Σ and ``-inf`` is returned for data outside it.
    """
    X = as_samples(data)
    if X.shape[:-1] != model.dims:
        raise tc.ShapeError(f"data shape {X.shape[:-1]} does not match {model.dims}")
    N = X.shape[-1]
    n = model.n
    R = X - mean_tensor(model)[..., None]
    spec = covariance_spectrum(model)
    if model.sigma2 > 0.0 and model.m < n:
        logdet = float(np.sum(np.log(spec.eigenvalues)))
        Y = tc.tucker_apply(model.factors, R, adjoint=True)
        Ym = Y.reshape(model.m, N, order="F")
        sol = np.linalg.solve(_latent_system(model), Ym)
        quad = (np.sum(R * R) - np.sum(Ym * sol)) / model.sigma2
        rank = n
    else:
        bases = [_mode_eigh(B)[1] for B in model.outer_grams()]
        vals = model.sigma2 + tc.outer(spec.mode_eigenvalues)
        Y = tc.tucker_apply(bases, R, adjoint=True)
        scale = max(float(vals.max()), 1.0)
        support = vals > 1e-12 * scale
        if not support.all():
            off = np.sum(Y[~support] ** 2)
            if off > 1e-18 * max(np.sum(R * R), 1.0):
                return -math.inf
        logdet = float(np.sum(np.log(vals[support])))
        quad = float(np.sum(Y[support] ** 2 / vals[support][:, None]))
        rank = int(support.sum())
    return float(-0.5 * N * rank * math.log(2 * math.pi) - 0.5 * N * logdet - 0.5 * quad)


def _sign_fix(U):
    """Flip columns so that each column's first largest-magnitude entry is positive."""
    signs = np.ones(U.shape[1])
    for j in range(U.shape[1]):
        col = U[:, j]
        idx = int(np.argmax(np.abs(col) > np.abs(col).max() * (1 - 1e-12))) if col.any() else 0
        if col[idx] < 0:
            signs[j] = -1.0
    return signs


def canonical_factor(A, rtol: float = 1e-10):
    """Rotate ``A`` to ``U S`` (right singular vectors removed).

    Returns the rotated factor and the orthogonal ``V`` with ``A V = U S``.
    Columns are ordered by nonincreasing singular value; ties are broken by
    lexicographic order of the sign-fixed left singular vectors.
    """
    A = np.asarray(A, dtype=float)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    V = Vt.T
    signs = _sign_fix(U)
    U, V = U * signs, V * signs
    scale = s[0] if s.size and s[0] > 0 else 1.0
    keys = [(-round(si / scale / rtol), tuple(-U[:, j])) for j, si in enumerate(s)]
    order = sorted(range(len(s)), key=lambda j: keys[j])
    U, s, V = U[:, order], s[order], V[:, order]
    return U * s, V


def normalize_model(model: TpcaModel) -> TpcaModel:
    """Equivalent model with ``A_kᵀA_k`` diagonal and equal ``‖A_k A_kᵀ‖_F``.

    The mean ``A·ν`` and the covariance are unchanged.
    """
    rotated, rotations = zip(*(canonical_factor(A) for A in model.factors))
    norms = np.array([np.linalg.norm(A.T @ A) for A in rotated])
    if np.any(norms == 0.0):
        raise ModelError("a loading is identically zero; scales cannot be equalized")
    common = float(np.exp(np.mean(np.log(norms))))
    factors = [A * math.sqrt(common / f) for A, f in zip(rotated, norms)]
    nu = tc.tucker_apply([V.T for V in rotations], model.nu)
    return TpcaModel(tuple(factors), nu, model.sigma2)


def model_dimension(dims, latent_dims, free_mean: bool = False) -> int:
    dims, latent_dims = _check_dims(dims, latent_dims)
    d = 2 + sum(n * m - math.comb(m, 2) - 1 for n, m in zip(dims, latent_dims))
    if free_mean:
        d += int(np.prod(latent_dims))
    return d


def tucker_variety_dim(dims, latent_dims) -> tuple[tuple[int, ...], int]:
    """Effective multilinear ranks and dimension of the image of the Tucker maps."""
    dims, latent_dims = _check_dims(dims, latent_dims)
    total = int(np.prod(latent_dims))
    d = tuple(min(m, total // m) for m in latent_dims)
    dim = sum(dk * n - dk * dk for dk, n in zip(d, dims)) + int(np.prod(d))
    return d, dim


def _check_dims(dims, latent_dims):
    dims = tc.check_shape(dims)
    latent_dims = tc.check_shape(latent_dims)
    if len(dims) != len(latent_dims):
        raise ModelError("dims and latent_dims differ in length")
    if any(m > n for n, m in zip(dims, latent_dims)):
        raise ModelError("latent dimensions must not exceed ambient ones")
    return dims, latent_dims


# -- dataset files -----------------------------------------------------------
#
# Binary layout (little-endian):
#   5 bytes   magic "TPCA1"
#   u32       order r
#   r x u32   dims n_1..n_r
#   u64       N
#   N*n f64   samples, each in colex order, one after another
# The JSON sidecar ``<path>.json`` holds {"seed": ..., "truth": {...} | null}.

def save_dataset(data: Dataset, path) -> None:
    path = Path(path)
    dims = data.dims
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<Q", data.N))
        flat = data.samples.reshape(-1, data.N, order="F").T
        fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
    meta = {
        "seed": data.seed,
        "truth": data.truth.to_dict() if data.truth is not None else None,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a TPCA1 dataset")
    off = 5
    (r,) = struct.unpack_from("<I", raw, off)
    off += 4
    dims = struct.unpack_from(f"<{r}I", raw, off)
    off += 4 * r
    (N,) = struct.unpack_from("<Q", raw, off)
    off += 8
    n = int(np.prod(dims))
    flat = np.frombuffer(raw, dtype="<f8", count=n * N, offset=off).reshape(N, n)
    samples = flat.T.reshape(tuple(dims) + (N,), order="F").astype(float)
    seed, truth = None, None
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        seed = meta.get("seed")
        if meta.get("truth"):
            truth = TpcaModel.from_dict(meta["truth"])
    return Dataset(samples, seed, truth)
