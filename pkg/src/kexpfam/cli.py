"""Command-line front end: dataset generation, fitting, evaluation,
sampling, scoring, and the score-degeneracy demo.

Every run writes a provenance JSON next to its primary output recording the
tool version and the full argument list, so the run can be replayed.
Output files themselves contain no timestamps or absolute paths; replaying
a provenance file byte-reproduces them.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import DataError, NumericalError
from .evaluation import (
    CvConfig,
    cross_validate,
    disjoint_support_demo,
    test_loglik,
)
from .data_io import (
    load_csv,
    load_model,
    prune_correlated,
    save_csv,
    save_model,
    standardize,
)
from .factorization import NodeHyperparams, make_dag, fit_joint
from .sampling import (
    GridDatasetConfig,
    HmcConfig,
    ancestral_sample,
    rejection_sample_grid,
)
from .score_fit import BaseDensity, empirical_score

CURVE_SIZES = (200, 500, 1000, 2000)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_provenance(out_path: str, subcommand: str, argv: list[str]) -> None:
    payload = {
        "tool": "kexpfam",
        "version": __version__,
        "subcommand": subcommand,
        "argv": list(argv),
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write_json(str(out_path) + ".provenance.json", payload)


def _parse_pair(text: str, flag: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise DataError(f"{flag} expects two comma-separated numbers, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise DataError(f"{flag}: cannot parse {text!r}") from None


def _parse_grid_weights(text: str, dim: int):
    """Either 'wa,wb' broadcast to all dimensions, or a JSON list of
    [wa, wb] pairs, one per dimension."""
    text = text.strip()
    if text.startswith("["):
        try:
            pairs = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"--weights: invalid JSON: {exc}") from None
        if len(pairs) != dim or any(len(p) != 2 for p in pairs):
            raise DataError(f"--weights JSON needs {dim} [wa, wb] pairs")
        arr = np.asarray(pairs, dtype=np.float64)
        return arr[:, 0], arr[:, 1]
    wa, wb = _parse_pair(text, "--weights")
    return np.full(dim, wa), np.full(dim, wb)


def _parse_dag(text: str, dim: int):
    if text in ("full", "markov"):
        return make_dag(text, dim)
    if text.startswith("custom:"):
        try:
            parents = json.loads(text[len("custom:"):])
        except json.JSONDecodeError as exc:
            raise DataError(f"--dag custom: invalid JSON: {exc}") from None
        return make_dag("custom", dim, custom_parents=parents)
    raise DataError(
        f"unknown DAG kind {text!r}; expected full, markov, or custom:<json>"
    )


def _parse_float_list(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise DataError(f"{flag}: cannot parse {text!r}") from None


def _hmc_config(args) -> HmcConfig:
    return HmcConfig(step_size=args.step_size, leapfrog_steps=args.leapfrog_steps,
                     burn_in=args.burn_in, thin=args.thin, chains=args.chains,
                     seed=args.seed)


def _sidecar(path: str, suffix: str) -> str:
    stem, _ = os.path.splitext(str(path))
    return stem + suffix


# --- subcommands ------------------------------------------------------------


def _cmd_gen_grid(args, argv) -> int:
    wa, wb = _parse_grid_weights(args.weights, args.dim)
    lo, hi = _parse_pair(args.support, "--support")
    config = GridDatasetConfig(dim=args.dim, n=args.n, weights_a=wa, weights_b=wb,
                               support=(lo, hi), seed=args.seed)
    samples, stats = rejection_sample_grid(config, return_stats=True)
    names = [f"x{i}" for i in range(args.dim)]
    save_csv(args.out, samples, names)
    _write_json(_sidecar(args.out, ".config.json"), {
        "dim": args.dim, "n": args.n,
        "weights_a": list(wa), "weights_b": list(wb),
        "support": [lo, hi], "seed": args.seed,
        "accept_rate": stats["accept_rate"],
    })
    _write_provenance(args.out, "gen-grid", argv)
    print(f"wrote {args.n} x {args.dim} grid samples to {args.out} "
          f"(accept rate {stats['accept_rate']:.3f})")
    return 0


def _load_training(args):
    values, names = load_csv(args.data)
    if args.prune_threshold is not None:
        values, names, dropped = prune_correlated(values, names,
                                                  args.prune_threshold)
        if dropped:
            print(f"pruned correlated columns: {', '.join(dropped)}")
    return standardize(values, names)


def _fit_from_args(args, dataset):
    dag = _parse_dag(args.dag, dataset.dim)
    base = BaseDensity(std=args.base_std)
    cv_result = None
    if args.cv:
        cv_config = CvConfig(
            folds=args.folds,
            lambda_grid=_parse_float_list(args.lambda_grid, "--lambda-grid"),
            bandwidth_scale_grid=_parse_float_list(args.scale_grid, "--scale-grid"),
            seed=args.cv_seed,
        )
        cv_result = cross_validate(dataset, dag, cv_config, base,
                                   max_workers=args.threads)
        hyper = cv_result.hyperparams()
    else:
        if args.lam is None:
            raise DataError("fit requires either --lambda or --cv")
        hyper = NodeHyperparams(lam=args.lam, x_scale=args.bandwidth_scale,
                                y_scale=args.bandwidth_scale)
    model = fit_joint(dataset, dag, hyper, base)
    return model, cv_result


def _cmd_fit(args, argv) -> int:
    dataset = _load_training(args)
    model, cv_result = _fit_from_args(args, dataset)
    archive_settings = {
        "dag": args.dag, "base_std": args.base_std,
        "cv": bool(args.cv), "lambda": args.lam,
        "bandwidth_scale": args.bandwidth_scale, "seed": args.seed,
    }
    save_model(model, args.out_model, provenance=archive_settings)
    if cv_result is not None:
        rows = [[r.node, c.lam, c.scale, c.mean_score]
                for r in cv_result.nodes for c in r.table]
        save_csv(_sidecar(args.out_model, ".cv.csv"), np.array(rows),
                 ["node", "lambda", "scale", "mean_score"])
        chosen = ", ".join(
            f"node {r.node}: lambda={r.best_lam:g} scale={r.best_scale:g}"
            for r in cv_result.nodes
        )
        print(f"cross-validation selected {chosen}")
    _write_provenance(args.out_model, "fit", argv)
    print(f"fitted {dataset.dim}-column model on {dataset.n} rows "
          f"-> {args.out_model}")
    return 0


def _model_summary(model) -> list[dict]:
    out = []
    for node, f in enumerate(model.factors):
        kx = f.kernel_x
        out.append({
            "node": node,
            "lambda": f.lam,
            "x_bandwidths": (list(kx.bandwidths) if hasattr(kx, "bandwidths")
                             else None),
            "y_bandwidths": list(f.kernel_y.bandwidths),
            "base_std": f.base.std,
        })
    return out


def _cmd_eval(args, argv) -> int:
    if args.curve:
        return _cmd_eval_curve(args, argv)
    if args.model is None:
        raise DataError("eval requires --model (or --curve with --data)")
    model = load_model(args.model)
    rows, _ = load_csv(args.test)
    mean, per_row = test_loglik(model, rows, is_samples=args.is_samples,
                                seed=args.seed)
    stderr = float(np.std(per_row, ddof=1) / np.sqrt(len(per_row))) \
        if len(per_row) > 1 else 0.0
    _write_json(args.out, {
        "mean_loglik": mean,
        "stderr": stderr,
        "n_test": len(per_row),
        "is_samples": args.is_samples,
        "seed": args.seed,
        "per_node": _model_summary(model),
    })
    rows_path = args.per_row or _sidecar(args.out, ".rows.csv")
    save_csv(rows_path, per_row[:, None], ["loglik"])
    _write_provenance(args.out, "eval", argv)
    print(f"mean test log-likelihood {mean:.4f} (stderr {stderr:.4f}, "
          f"n={len(per_row)})")
    return 0


def _cmd_eval_curve(args, argv) -> int:
    if args.data is None:
        raise DataError("--curve requires --data (training CSV)")
    dataset = _load_training(args)
    test_rows, _ = load_csv(args.test)
    shuffled = np.random.default_rng(args.seed).permutation(dataset.n)
    records = []
    for size in CURVE_SIZES:
        if size > dataset.n:
            break
        subset = standardize(dataset.destandardize()[shuffled[:size]],
                             dataset.column_names)
        model, _ = _fit_from_args(args, subset)
        mean, per_row = test_loglik(model, test_rows, is_samples=args.is_samples,
                                    seed=args.seed)
        stderr = float(np.std(per_row, ddof=1) / np.sqrt(len(per_row)))
        records.append([size, mean, stderr])
        print(f"n={size}: mean test log-likelihood {mean:.4f}")
    save_csv(args.out, np.array(records), ["n_train", "mean_loglik", "stderr"])
    _write_provenance(args.out, "eval", argv)
    return 0


def _cmd_sample(args, argv) -> int:
    model = load_model(args.model)
    samples = ancestral_sample(model, args.n, _hmc_config(args))
    save_csv(args.out, samples, model.column_names)
    _write_provenance(args.out, "sample", argv)
    print(f"wrote {args.n} joint samples to {args.out}")
    return 0


def _cmd_score(args, argv) -> int:
    model = load_model(args.model)
    rows, _ = load_csv(args.data)
    Z = model.standardize_rows(rows)
    per_node = []
    for node, factor in enumerate(model.factors):
        parents = list(model.dag.parents[node])
        score = empirical_score(factor, Z[:, parents], Z[:, [node]])
        per_node.append({"node": node, "score": score})
    total = float(sum(e["score"] for e in per_node))
    _write_json(args.out, {"per_node": per_node, "total": total,
                           "n_rows": int(Z.shape[0])})
    _write_provenance(args.out, "score", argv)
    print(f"total empirical score {total:.6f} over {Z.shape[0]} rows")
    return 0


def _cmd_diverge(args, argv) -> int:
    if args.demo != "appendix-d":
        raise DataError(f"unknown demo {args.demo!r}; available: appendix-d")
    result = disjoint_support_demo(n_samples=args.samples, seed=args.seed)
    print(f"score divergence estimate: {result['fisher_divergence']:.3e}")
    print(f"total variation distance: {result['tv_distance']:.4f}")
    if args.out:
        _write_json(args.out, result)
        _write_provenance(args.out, "diverge", argv)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kexpfam",
        description="Conditional density estimation with kernel exponential "
                    "family models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen-grid", help="generate the synthetic grid dataset")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--weights", default="1,1",
                   help="'wa,wb' for all dims or JSON list of per-dim pairs")
    g.add_argument("--support", default="0,1")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_grid)

    f = sub.add_parser("fit", help="fit a factorized model to a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--dag", default="markov",
                   help="full | markov | custom:<json parent lists>")
    f.add_argument("--lambda", dest="lam", type=float, default=None)
    f.add_argument("--bandwidth-scale", type=float, default=1.0)
    f.add_argument("--cv", action="store_true",
                   help="grid-search hyperparameters per node")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--lambda-grid",
                   default=",".join(f"{v:g}" for v in CvConfig().lambda_grid))
    f.add_argument("--scale-grid", default="0.25,0.5,1,2,4")
    f.add_argument("--cv-seed", type=int, default=0)
    f.add_argument("--base-std", type=float, default=2.0)
    f.add_argument("--prune-threshold", type=float, default=None,
                   help="drop one of each column pair correlated above this")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("--out-model", required=True)
    f.set_defaults(func=_cmd_fit)

    e = sub.add_parser("eval", help="test log-likelihood of a fitted model")
    e.add_argument("--model")
    e.add_argument("--test", required=True)
    e.add_argument("--is-samples", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--per-row", default=None)
    e.add_argument("--curve", action="store_true",
                   help="refit at n in {200,500,1000,2000} and emit a table")
    e.add_argument("--data", default=None, help="training CSV (with --curve)")
    e.add_argument("--dag", default="markov")
    e.add_argument("--lambda", dest="lam", type=float, default=None)
    e.add_argument("--bandwidth-scale", type=float, default=1.0)
    e.add_argument("--cv", action="store_true")
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--lambda-grid",
                   default=",".join(f"{v:g}" for v in CvConfig().lambda_grid))
    e.add_argument("--scale-grid", default="0.25,0.5,1,2,4")
    e.add_argument("--cv-seed", type=int, default=0)
    e.add_argument("--base-std", type=float, default=2.0)
    e.add_argument("--prune-threshold", type=float, default=None)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sample", help="draw joint samples from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--step-size", type=float, default=0.1)
    s.add_argument("--leapfrog-steps", type=int, default=20)
    s.add_argument("--burn-in", type=int, default=100)
    s.add_argument("--thin", type=int, default=10)
    s.add_argument("--chains", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    c = sub.add_parser("score", help="empirical score of a model on a dataset")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_score)

    d = sub.add_parser("diverge", help="score-divergence diagnostics")
    d.add_argument("--demo", required=True)
    d.add_argument("--samples", type=int, default=100_000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default=None)
    d.set_defaults(func=_cmd_diverge)

    return parser


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": {"type": kind, "message": message}}),
          file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args, argv)
    except DataError as exc:
        _emit_error("data", str(exc))
        return 2
    except NumericalError as exc:
        _emit_error("numerical", str(exc))
        return 3
    except OSError as exc:
        _emit_error("io", str(exc))
        return 4


if __name__ == "__main__":
    sys.exit(main())
