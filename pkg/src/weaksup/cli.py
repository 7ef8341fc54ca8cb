"""Command-line entry point.

Binds datasets (CSV or synthetic), tasks, solver configuration, and report
emission.  Exit codes: 0 success, 1 validation error, 2 solver error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, problem
from .harness import (MILSyntheticSpec, SolverOptions, SyntheticSpec,
                      crossval_mil, gen_clusters, gen_mil, run_experiment,
                      run_prequantized)
from .kernel import KernelSpec
from .problem import load_dataset_csv, load_precomputed_kernel_csv, validate_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_kernel(text: str) -> KernelSpec:
    if text == "linear":
        return KernelSpec("linear")
    if text == "rbf":
        return KernelSpec("gaussian")
    if text.startswith("rbf:"):
        try:
            return KernelSpec("gaussian", sigma=float(text[4:]))
        except ValueError:
            raise UsageError(f"--kernel: bad rbf width in {text!r}")
    if text.startswith("precomputed:"):
        return KernelSpec("precomputed", path=text[len("precomputed:"):])
    raise UsageError(f"--kernel: unknown kernel {text!r}")


def parse_synth(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"--synth: expected KEY=VAL, got {part!r}")
        key, val = part.split("=", 1)
        out[key] = val
    return out


def _synth_clusters(kv: dict, seed: int) -> SyntheticSpec:
    try:
        return SyntheticSpec(
            n_points=int(kv.get("n", 300)),
            n_clusters=int(kv.get("k", 3)),
            separation=float(kv.get("separation", 4.0)),
            noise_dims=int(kv.get("noise_dims", 0)),
            noise_sigma=float(kv.get("noise_sigma", 1.0)),
            shape=kv.get("shape", "gaussian_blobs"),
            signal_sigma=float(kv.get("sigma", 1.0)),
            center_offset=float(kv.get("offset", 0.0)),
            seed=int(kv.get("seed", seed)),
        )
    except ValueError as exc:
        raise UsageError(f"--synth: {exc}")


def _synth_mil(kv: dict, seed: int) -> MILSyntheticSpec:
    try:
        return MILSyntheticSpec(
            n_pos_bags=int(kv.get("pos_bags", 8)),
            n_neg_bags=int(kv.get("neg_bags", 8)),
            bag_size=int(kv.get("bag_size", 10)),
            witness_rate=float(kv.get("witness", 0.5)),
            separation=float(kv.get("separation", 4.0)),
            seed=int(kv.get("seed", seed)),
        )
    except ValueError as exc:
        raise UsageError(f"--synth: {exc}")


def _add_common(sp):
    sp.add_argument("--data", default=None)
    sp.add_argument("--manifest", default=None,
                    help="instance manifest for precomputed kernels")
    sp.add_argument("--synth", default=None, metavar="KEY=VAL,...")
    sp.add_argument("--kernel", default="linear")
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--lambda-grid", dest="lam_grid", default=None)
    sp.add_argument("--weights", choices=("uniform", "bag"), default="uniform")
    sp.add_argument("--gap-tol", type=float, default=1e-4)
    sp.add_argument("--inner-tol", type=float, default=1e-8)
    sp.add_argument("--max-iter", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=harness.MODES, default="ours")
    sp.add_argument("--out", required=True)
    sp.add_argument("--emit-z", action="store_true")
    sp.add_argument("--prequantize", type=int, default=None, metavar="M")
    sp.add_argument("--k", type=int, default=None,
                    help="latent class count (clustering with --data)")


def build_parser() -> _Parser:
    parser = _Parser(prog="weaksup")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("cluster", "ssl", "mil", "synth", "crossval"):
        _add_common(subs.add_parser(name))
    return parser


def _lambdas(args):
    if args.lam is None and args.lam_grid is None:
        raise UsageError("one of --lambda or --lambda-grid is required")
    if args.lam is not None and args.lam_grid is not None:
        raise UsageError("--lambda and --lambda-grid are mutually exclusive")
    if args.lam is not None:
        return [args.lam]
    try:
        vals = [float(v) for v in args.lam_grid.split(",") if v]
    except ValueError:
        raise UsageError(f"--lambda-grid: bad value in {args.lam_grid!r}")
    if not vals:
        raise UsageError("--lambda-grid: empty grid")
    return vals


def _load(args, task):
    weight_mode = "per_bag" if args.weights == "bag" else "uniform"
    kspec = parse_kernel(args.kernel)
    if (args.data is None) == (args.synth is None):
        raise UsageError("exactly one of --data or --synth is required")
    if args.synth is not None:
        kv = parse_synth(args.synth)
        if task == "mil":
            ds = gen_mil(_synth_mil(kv, args.seed), weight_mode=weight_mode)
        else:
            ds = gen_clusters(_synth_clusters(kv, args.seed))
            if task == "ssl":
                n_labeled = int(kv.get("l", 10))
                ds = harness.make_ssl_dataset(ds.features, ds.true_labels,
                                              n_labeled, seed=args.seed)
    elif kspec.kind == "precomputed":
        if args.manifest is None:
            raise UsageError("--manifest is required with a precomputed kernel")
        ds = load_precomputed_kernel_csv(kspec.path or args.data, args.manifest,
                                         task, weight_mode, args.k)
    else:
        if task == "clustering" and args.k is None:
            raise UsageError("--k is required for clustering on --data")
        ds = load_dataset_csv(args.data, task, weight_mode, args.k)
    violations = validate_dataset(ds)
    if violations:
        raise UsageError("--data: invalid dataset: " + "; ".join(violations))
    return ds, kspec


def emit_report(experiments: list, out_dir: str, artifacts=None,
                ds=None, emit_z: bool = False):
    """Write report.json plus per-run CSV artifacts.

    Identical results re-emit byte-identical files (wall_time aside).
    """
    os.makedirs(out_dir, exist_ok=True)
    report = {"experiments": experiments}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if artifacts is None:
        return
    outer = artifacts.get("outer")
    if outer is not None:
        with open(os.path.join(out_dir, "trace.csv"), "w", encoding="utf-8") as fh:
            fh.write("iter,g,gap,t,inner_iterations,violation\n")
            for row in outer.trace_rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
        if emit_z:
            np.savetxt(os.path.join(out_dir, "Z.csv"), outer.z.z,
                       delimiter=",")
    if ds is not None and "assignment" in artifacts:
        z = artifacts["assignment"]
        labels = artifacts["labels"]
        bag_of = ds.bag_of()
        with open(os.path.join(out_dir, "assignments.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("instance_id,bag_id,latent_label,max_score\n")
            for n in range(ds.n_instances):
                fh.write(f"{n},{ds.bags[bag_of[n]].id},{labels[n]},"
                         f"{z[n, labels[n]]!r}\n")
    clf = artifacts.get("classifier")
    if clf is not None:
        with open(os.path.join(out_dir, "classifier.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write("# weight matrix w (one class per line)\n")
            for row in clf.w:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write("# intercept b\n")
            fh.write(" ".join(repr(float(v)) for v in clf.b) + "\n")


def _experiment_entry(task, mode, lam, seed, acc_mean, acc_std, gap, wall):
    return {
        "task": task,
        "mode": mode,
        "lambda": lam,
        "accuracy_mean": acc_mean,
        "accuracy_std": acc_std,
        "gap": gap,
        "wall_time_s": wall,
        "seed": seed,
    }


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        lams = _lambdas(args)
        task = {"cluster": "clustering", "synth": "clustering",
                "ssl": "ssl", "mil": "mil",
                "crossval": "mil"}[args.command]
        ds, kspec = _load(args, task)
        opts = SolverOptions(gap_tol=args.gap_tol, inner_tol=args.inner_tol,
                             max_iter=args.max_iter)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "crossval":
            weight_mode = "per_bag" if args.weights == "bag" else "uniform"
            res = crossval_mil(ds, lams, kspec, weight_mode=weight_mode,
                               master_seed=args.seed, opts=opts)
            entry = _experiment_entry(task, args.mode, lams[-1], args.seed,
                                      res["accuracy_mean"],
                                      res["accuracy_std"], None, 0.0)
            entry["per_split"] = res["per_split"]
            emit_report([entry], args.out)
            print(f"accuracy {res['accuracy_mean']:.3f} "
                  f"+/- {res['accuracy_std']:.3f}")
        elif args.prequantize is not None:
            art = run_prequantized(ds, args.prequantize, kspec, lams,
                                   seed=args.seed, opts=opts)
            acc = None
            if ds.true_labels is not None:
                acc = harness.accuracy_best_perm(art["labels"], ds.true_labels)
            entry = _experiment_entry(task, args.mode, lams[-1], args.seed,
                                      acc, 0.0, art["outer"].gap, 0.0)
            emit_report([entry], args.out, artifacts=art, ds=ds,
                        emit_z=args.emit_z)
        else:
            if ds.true_labels is not None:
                metrics, art = run_experiment(ds, task, kspec, lams,
                                              mode=args.mode, seed=args.seed,
                                              opts=opts)
                entry = _experiment_entry(task, args.mode, lams[-1], args.seed,
                                          metrics.accuracy_best_perm, 0.0,
                                          metrics.gap, metrics.wall_time_s)
            else:
                art = harness.run_pipeline(
                    ds, task, kspec, lams, seed=args.seed,
                    intercept=(args.mode != "ours_no_intercept"), opts=opts)
                entry = _experiment_entry(task, args.mode, lams[-1], args.seed,
                                          None, None, art["outer"].gap, 0.0)
            emit_report([entry], args.out, artifacts=art, ds=ds,
                        emit_z=args.emit_z)
        return 0
    except OSError as exc:
        print(f"error: --out: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
