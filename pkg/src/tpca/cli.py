"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import em as em_mod
from . import harness
from . import power_iter as pw
from .evaluation import align_factors
from .model import TpcaModel, load_dataset, normalize_model, sample, save_dataset

log = logging.getLogger("tpca")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 5,5,5, got {text!r}")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _write_text(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dump(obj, out) -> None:
    _write_text(json.dumps(obj, indent=2) + "\n", out)


def cmd_simulate(args) -> int:
    if args.model:
        model = TpcaModel.from_dict(_read_json(args.model))
    else:
        if not (args.dims and args.latent_dims):
            raise ValueError("give --model or both --dims and --latent-dims")
        model = harness.generate_truth(args.dims, args.latent_dims,
                                       harness.sub_seed(args.seed, 1), args.sigma2)
    if args.out is None:
        raise ValueError("simulate needs --out")
    data = sample(model, args.N, args.seed)
    save_dataset(data, args.out)
    log.info("wrote %d samples of shape %s to %s", data.N, data.dims, args.out)
    return EXIT_OK


def cmd_fit_em(args) -> int:
    data = load_dataset(args.data)
    sigma2_init = "residual" if args.sigma2_init is None else args.sigma2_init
    config = em_mod.EmConfig(max_iter=args.max_iter, tol=args.tol, init=args.init,
                             init_scaling=args.init_scaling, sigma2_init=sigma2_init,
                             seed=args.seed)
    result = em_mod.fit_em(data, args.latent_dims, config)
    _dump({"estimator": "em", **result.to_dict()}, args.out)
    return EXIT_OK


def cmd_fit_power(args) -> int:
    data = load_dataset(args.data)
    config = pw.PowerConfig(iterations=args.iterations, init=args.init, seed=args.seed,
                            path=args.path, gauss_seidel=args.gauss_seidel)
    state, est = pw.run_power(data, args.latent_dims, config, truth=data.truth)
    if args.trace_csv:
        rows = ["iteration,mode,sin_theta,omega_hat"]
        for it, k, s, om in state.trace:
            rows.append(f"{it},{k},{'' if s is None else format(s, '.17g')},{om:.17g}")
        Path(args.trace_csv).write_text("\r\n".join(rows) + "\r\n")
    if est.sigma2_negative:
        log.warning("noise estimate is negative (%.6g)", est.sigma2_hat)
    _dump({"estimator": "power", **est.to_dict()}, args.out)
    return EXIT_OK


def _factors_of(estimates: dict):
    if "A_hat" in estimates:
        return [np.array(A) for A in estimates["A_hat"]], estimates.get("sigma2_hat")
    if "model" in estimates:
        m = TpcaModel.from_dict(estimates["model"])
        return list(m.factors), m.sigma2
    raise ValueError("estimates file holds neither A_hat nor model")


def cmd_eval(args) -> int:
    factors, s2 = _factors_of(_read_json(args.estimates))
    if Path(args.truth).suffix == ".npz":
        truth = load_dataset(args.truth).truth
        if truth is None:
            raise ValueError(f"{args.truth} carries no truth")
    else:
        truth_doc = _read_json(args.truth)
        truth = TpcaModel.from_dict(truth_doc.get("truth", truth_doc))
    target = normalize_model(truth) if args.truth_scale == "identified" else truth
    report = align_factors(factors, target.factors)
    out = {"mode_errors": report.errors, "err": report.mean_error}
    if s2 is not None:
        out["sigma2_hat"] = s2
        out["sigma2_rel_error"] = abs(s2 - truth.sigma2) / truth.sigma2 if truth.sigma2 else None
    _dump(out, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec_doc = _read_json(args.spec)
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = harness.ExperimentSpec.from_dict(spec_doc)
    records, summaries = harness.run_experiment(spec, threads=args.threads)
    if args.out is None:
        text = (harness.records_to_csv(records) if args.format == "csv"
                else harness.records_to_json(records))
        sys.stdout.write(text)
    else:
        harness.emit(records, args.format, args.out)
    for (g, est, L), s in sorted(summaries.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)):
        log.info("grid %d %s L=%s: Err %.4f [%.4f, %.4f]", g, est, L, s.mean, s.lower, s.upper)
    failed = sum(r.status == "error" for r in records)
    if failed:
        log.warning("%d replication(s) failed; see the status column", failed)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    doc = _read_json(args.input)
    inp = dg.ConcentrationInput.from_dict(doc)
    report = dg.report(inp, omega=doc.get("omega"), tau=doc.get("tau"),
                       lambda_mins=doc.get("lambda_mins"))
    _dump(report, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", help="output path (default stdout where sensible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tpca", description="Tensor probabilistic PCA tools.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a dataset from a model")
    s.add_argument("--model", help="model JSON; otherwise a random truth is generated")
    s.add_argument("--dims", type=_ints)
    s.add_argument("--latent-dims", type=_ints)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.add_argument("-N", "--samples", dest="N", type=int, required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-em", parents=[common], help="fit by EM")
    s.add_argument("data")
    s.add_argument("--latent-dims", type=_ints, required=True)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--init", choices=("hosvd", "random"), default="hosvd")
    s.add_argument("--init-scaling", choices=("spectral", "orthonormal"), default="spectral")
    s.add_argument("--sigma2-init", type=float, help="fixed starting noise variance")
    s.set_defaults(func=cmd_fit_em)

    s = sub.add_parser("fit-power", parents=[common], help="fit by rank-one power iteration")
    s.add_argument("data")
    s.add_argument("--latent-dims", type=_ints, required=True)
    s.add_argument("--iterations", "-L", type=int, default=5)
    s.add_argument("--init", choices=("random-psd", "hosvd"), default="random-psd")
    s.add_argument("--path", choices=("fast", "naive", "both"), default="fast")
    s.add_argument("--gauss-seidel", action="store_true")
    s.add_argument("--trace-csv", help="write per-iteration trace rows here")
    s.set_defaults(func=cmd_fit_power)

    s = sub.add_parser("eval", parents=[common], help="score estimates against a truth")
    s.add_argument("estimates")
    s.add_argument("truth", help="model JSON, dataset .npz, or a dataset sidecar holding a truth")
    s.add_argument("--truth-scale", choices=("identified", "raw"), default="identified",
                   help="compare with the truth at equal per-mode scale (default) or as drawn")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run a simulation grid")
    s.add_argument("spec", help="experiment JSON")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("diagnose", parents=[common], help="bound report for given inputs")
    s.add_argument("input", help="JSON with dims, latent_dims, N, sigma, normA, deltas "
                                 "and optional omega, tau, lambda_mins")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
