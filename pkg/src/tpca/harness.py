"""Seeded simulation runner and record emission.

Every replication draws its randomness from a child seed, a 64-bit BLAKE2b
hash of ``(master seed, grid index, replication index)``, so results do not
depend on how replications are scheduled across workers.

CSV columns, in order::

    case,grid_index,replication,seed,estimator,dims,latent_dims,sigma2,N,L,
    mode_errors,err,sigma2_hat,sigma2_rel_error,omega_hat,iterations,status,
    message,wall_time

Errors compare estimates with the truth rescaled to equal ``‖A_k A_kᵀ‖_F``
across modes (``truth_scale="identified"``), the only scale split the data can
determine. ``truth_scale="raw"`` compares with the generated factors as drawn.

``dims`` and ``latent_dims`` are written as ``40x60x80``; ``mode_errors`` is a
``;``-separated list. Numbers use 17 significant digits; absent values are
empty cells.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import em as em_mod
from . import power_iter as pw
from .evaluation import align_factors, summarize
from .model import TpcaModel, new_model, normalize_model, sample

COLUMNS = (
    "case", "grid_index", "replication", "seed", "estimator", "dims", "latent_dims",
    "sigma2", "N", "L", "mode_errors", "err", "sigma2_hat", "sigma2_rel_error",
    "omega_hat", "iterations", "status", "message", "wall_time",
)
HEADER = ",".join(COLUMNS)


def _hash64(*parts) -> int:
    payload = b"".join(struct.pack("<q", int(p)) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def child_seed(master: int, grid_index: int, replication: int) -> int:
    """Stable 64-bit seed for one replication."""
    return _hash64(master, grid_index, replication)


def sub_seed(seed: int, stream: int) -> int:
    """Independent seed for one use (truth, sampling, init) within a replication."""
    return _hash64(seed & (2**63 - 1), seed >> 63, stream)


def generate_truth(dims, latent_dims, seed: int, sigma2: float = 1.0) -> TpcaModel:
    """Random loadings ``A_k = U_k D_k`` scaled to ``‖A_k‖_F = sqrt(n_k m_k)``, ``ν = 0``."""
    rng = np.random.default_rng(seed)
    factors = []
    for n_k, m_k in zip(dims, latent_dims):
        if m_k > n_k:
            raise ValueError(f"latent size {m_k} exceeds mode size {n_k}")
        U, d, _ = np.linalg.svd(rng.standard_normal((n_k, m_k)), full_matrices=False)
        A = U * d
        factors.append(A * (math.sqrt(n_k * m_k) / np.linalg.norm(A)))
    return new_model(factors, None, sigma2)


@dataclass(frozen=True)
class GridPoint:
    dims: tuple
    latent_dims: tuple
    sigma2: float
    N: int


@dataclass
class ExperimentSpec:
    grid: list  # GridPoint list
    replications: int = 10
    seed: int = 0
    estimator: str = "em"  # "em" | "power" | "both"
    case: str = "custom"
    L: tuple = (5,)  # power iterations reported; all share one run per replication
    em: dict = field(default_factory=dict)  # EmConfig overrides; sigma2_init may be "true"
    power: dict = field(default_factory=dict)  # PowerConfig overrides
    record_timing: bool = False
    truth_scale: str = "identified"  # or "raw"

    def __post_init__(self):
        if not self.grid:
            raise ValueError("experiment grid is empty")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.estimator not in ("em", "power", "both"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.truth_scale not in ("identified", "raw"):
            raise ValueError(f"unknown truth_scale {self.truth_scale!r}")
        if not self.L or min(self.L) < 1:
            raise ValueError("L values must be positive")

    @classmethod
    def preset(cls, case: str, **overrides) -> "ExperimentSpec":
        """Simulation settings for the three reference cases."""
        if case == "case1":
            grid = [GridPoint((n,) * 3, (m,) * 3, s2, 15)
                    for n, m in ((5, 2), (5, 3), (15, 6), (15, 9))
                    for s2 in (0.1, 1.0, 10.0)]
            base = dict(replications=10, estimator="em",
                        em={"init": "hosvd", "init_scaling": "orthonormal",
                            "sigma2_init": "true", "tol": 1e-3, "max_iter": 100})
        elif case == "case2":
            grid = [GridPoint((15, 15, 15), (3, 3, 3), 1.0, 400)]
            base = dict(replications=50, estimator="power", L=tuple(range(1, 11)),
                        power={"init": "random-psd"})
        elif case == "case3":
            grid = [GridPoint((40, 60, 80), (2, 3, 4), s2, N)
                    for s2 in (1.0, 4.0, 9.0, 16.0, 25.0)
                    for N in (100, 200, 300, 400, 500)]
            base = dict(replications=50, estimator="power", L=(5,),
                        power={"init": "random-psd"})
        else:
            raise ValueError(f"unknown case {case!r}")
        base.update(overrides)
        return cls(grid=grid, case=case, **base)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        case = d.pop("case", "custom")
        if case != "custom":
            if "L" in d:
                d["L"] = tuple(int(x) for x in d["L"])
            return cls.preset(case, **d)
        g = d.pop("grid")
        grid = [GridPoint(tuple(int(x) for x in s["dims"]), tuple(int(x) for x in s["latent_dims"]),
                          float(s2), int(N))
                for s in g["shapes"] for s2 in g["sigma2"] for N in g["N"]]
        L = tuple(int(x) for x in d.pop("L", g.get("L", (5,))))
        return cls(grid=grid, case="custom", L=L, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [asdict(p) for p in self.grid]
        d["L"] = list(self.L)
        return d


@dataclass
class ExperimentRecord:
    case: str
    grid_index: int
    replication: int
    seed: int
    estimator: str
    dims: tuple
    latent_dims: tuple
    sigma2: float
    N: int
    L: Optional[int] = None
    mode_errors: Optional[list] = None
    err: Optional[float] = None
    sigma2_hat: Optional[float] = None
    sigma2_rel_error: Optional[float] = None
    omega_hat: Optional[float] = None
    iterations: Optional[int] = None
    status: str = "ok"
    message: str = ""
    wall_time: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["latent_dims"] = list(self.latent_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["latent_dims"] = tuple(d["latent_dims"])
        return cls(**d)


def _em_config(spec: ExperimentSpec, point: GridPoint, seed: int) -> em_mod.EmConfig:
    opts = dict(spec.em)
    if opts.get("sigma2_init") == "true":
        opts["sigma2_init"] = point.sigma2
    opts.setdefault("seed", seed)
    return em_mod.EmConfig(**opts)


def _run_one(spec: ExperimentSpec, g: int, rep: int) -> list[ExperimentRecord]:
    point = spec.grid[g]
    seed = child_seed(spec.seed, g, rep)
    base = dict(case=spec.case, grid_index=g, replication=rep, seed=seed,
                dims=point.dims, latent_dims=point.latent_dims, sigma2=point.sigma2, N=point.N)
    estimators = ("em", "power") if spec.estimator == "both" else (spec.estimator,)
    try:
        truth = generate_truth(point.dims, point.latent_dims, sub_seed(seed, 1), point.sigma2)
        data = sample(truth, point.N, sub_seed(seed, 2))
        target = normalize_model(truth) if spec.truth_scale == "identified" else truth
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return [ExperimentRecord(estimator=e, status="error", message=str(exc), **base)
                for e in estimators]
    rows = []
    for est in estimators:
        start = time.monotonic()
        try:
            if est == "em":
                rows.append(_fit_em_row(spec, point, data, target, seed, base))
            else:
                rows.extend(_fit_power_rows(spec, point, data, target, seed, base))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rows.append(ExperimentRecord(estimator=est, status="error", message=str(exc), **base))
            continue
        if spec.record_timing:
            elapsed = time.monotonic() - start
            for row in rows:
                if row.estimator == est:
                    row.wall_time = elapsed
    return rows


def _fit_em_row(spec, point, data, truth, seed, base) -> ExperimentRecord:
    config = _em_config(spec, point, sub_seed(seed, 3))
    result = em_mod.fit_em(data, point.latent_dims, config)
    report = align_factors(result.model.factors, truth.factors)
    s2 = result.model.sigma2
    return ExperimentRecord(
        estimator="em", mode_errors=report.errors, err=report.mean_error, sigma2_hat=s2,
        sigma2_rel_error=abs(s2 - point.sigma2) / point.sigma2, iterations=result.iterations,
        status=result.status, **base)


def _fit_power_rows(spec, point, data, truth, seed, base) -> list[ExperimentRecord]:
    opts = {"init": "random-psd", **spec.power}
    config = pw.PowerConfig(iterations=max(spec.L), seed=sub_seed(seed, 3), **opts)
    state, final = pw.run_power(data, point.latent_dims, config, trace=False)
    rows = []
    for L in sorted(set(spec.L)):
        if L == state.iteration:
            est = final
        else:
            est = pw.estimates_from_matrices(data, state.history[L], point.latent_dims,
                                             iterations=L)
        report = align_factors(est.A_hat, truth.factors)
        rows.append(ExperimentRecord(
            estimator="power", L=L, mode_errors=report.errors, err=report.mean_error,
            sigma2_hat=est.sigma2_hat,
            sigma2_rel_error=abs(est.sigma2_hat - point.sigma2) / point.sigma2,
            omega_hat=est.omega_hat, iterations=L,
            status="negative_sigma2" if est.sigma2_negative else "ok", **base))
    return rows


def _run_task(args):
    spec, g, rep = args
    return _run_one(spec, g, rep)


def run_experiment(spec: ExperimentSpec, threads: int = 1, progress=None):
    """Run every (grid point, replication) pair.

    Returns ``(records, summaries)``. Records come back ordered by grid
    index, then replication, then estimator and ``L``, whatever ``threads``.
    ``summaries`` maps ``(grid_index, estimator, L)`` to a
    :class:`~tpca.evaluation.ReplicationSummary` of ``err`` when at least two
    replications succeeded.
    """
    tasks = [(spec, g, rep) for g in range(len(spec.grid)) for rep in range(spec.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = []
        for t in tasks:
            chunks.append(_run_task(t))
            if progress is not None:
                progress(len(chunks), len(tasks))
    records = list(itertools.chain.from_iterable(chunks))
    return records, summarize_records(records)


def summarize_records(records) -> dict:
    groups: dict = {}
    for r in records:
        if r.err is not None:
            groups.setdefault((r.grid_index, r.estimator, r.L), []).append(r.err)
    return {key: summarize(vals, "err") for key, vals in groups.items() if len(vals) >= 2}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (tuple, list)):
        if value and all(isinstance(v, (int, np.integer)) for v in value):
            return "x".join(str(int(v)) for v in value)
        return ";".join(_fmt(v) for v in value)
    return str(value)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(COLUMNS)
    for r in records:
        d = r.to_dict()
        writer.writerow([_fmt(d[c]) for c in COLUMNS])
    return buf.getvalue()


def records_to_json(records) -> str:
    return json.dumps([r.to_dict() for r in records], indent=1) + "\n"


def records_from_json(text: str) -> list[ExperimentRecord]:
    return [ExperimentRecord.from_dict(d) for d in json.loads(text)]


def emit(records, fmt: str, path) -> None:
    """Write records as CSV or JSON; I/O errors name the path."""
    if not records:
        raise ValueError("no records to write")
    if fmt == "csv":
        text = records_to_csv(records)
    elif fmt == "json":
        text = records_to_json(records)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    try:
        # newline="" keeps the CRLF row terminators intact
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
