"""Command-line entry point: ``mrot <command> [flags]``.

Commands
--------
gen-data   write synthetic source/target(/validation) CSV files
solve-ot   solve one transport problem from a cost-matrix CSV
train      fit a model and write a checkpoint plus the per-batch loss trace
eval       score a checkpoint on a labeled CSV
ablate     run the component grid across seeds and tabulate mean and sd

Every command writes ``manifest.json`` into ``--out`` (config snapshot, seed,
version, output paths, duration); result files name the manifest that
produced them. Exit status: 0 on success, 1 on a runtime or data error, 2 on
a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml

import mrot
from mrot.config import ConfigError, TrainConfig, config_from_dict
from mrot.data import (
    evaluate,
    generate_covariate_shift,
    generate_semantic_shift,
    load_csv,
    read_matrix_csv,
    write_csv,
)
from mrot.experiments import (
    ABLATION_ROWS,
    LabelScaler,
    covariate_task,
    run_ablation,
    semantic_task,
    summarize,
)
from mrot.model import TrainingDiverged, load_checkpoint, predict, save_checkpoint, train, write_trace_csv
from mrot.transport import (
    MAX_ORACLE_SIZE,
    OtParams,
    exact_ot_oracle,
    marginal_residuals,
    ot_loss,
    solve_mrot_plan,
)

logger = logging.getLogger("mrot")

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mrot-manifest"
METRIC_KEYS = ("mae", "rmse", "pearson", "spearman")

# flag name -> TrainConfig field
CONFIG_FLAGS = {
    "mode": str, "alpha": float, "beta": float, "mu0": float, "lambda1": float, "lambda2": float,
    "epsilon": float, "kappa": float, "zeta": float, "epochs": int, "batch_size": int,
    "learning_rate": float, "n_clusters": int, "feature_dim": int,
}


class CliError(Exception):
    """Runtime failure reported with exit status 1."""


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5, check=True)
        return f"{mrot.__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return mrot.__version__


def atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Manifest:
    """Run record written before any result and finalized with the duration."""

    def __init__(self, command, out_dir, seed, config=None, arguments=None):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        self.start = time.perf_counter()
        self.data = {
            "format": MANIFEST_FORMAT,
            "command": command,
            "version": version_string(),
            "seed": seed,
            "config": config,
            "arguments": arguments or {},
            "outputs": [],
            "duration_seconds": None,
        }

    @property
    def reference(self) -> str:
        return f"manifest: {MANIFEST_NAME}"

    def output(self, path) -> Path:
        path = Path(path)
        self.data["outputs"].append(str(path))
        return path

    def write(self):
        atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self):
        self.data["duration_seconds"] = time.perf_counter() - self.start
        self.write()


def read_config(path) -> dict:
    """Sectioned config mapping from a YAML file or a previous run's manifest."""
    with open(path) as fh:
        data = json.load(fh) if str(path).endswith(".json") else yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if data.get("format") == MANIFEST_FORMAT:
        return data.get("config") or {}
    return data


def effective_config(args) -> TrainConfig:
    """Config file values overridden by any explicitly given flag."""
    cfg = config_from_dict(read_config(args.config)) if args.config else TrainConfig()
    changes = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "hidden", None) is not None:
        changes["hidden"] = args.hidden
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _arguments(args):
    return {k: v for k, v in vars(args).items() if k != "handler" and v is not None}


def _write_csv_table(path, header, rows, manifest):
    buf = io.StringIO()
    buf.write(f"# {manifest.reference}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(manifest.output(path), buf.getvalue())


def _format_table(header, rows):
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_gen_data(args):
    out = Path(args.out)
    manifest = Manifest("gen-data", out, args.seed, arguments=_arguments(args))
    manifest.write()
    if args.kind == "semantic":
        splits = dict(zip(("source", "target", "validation"),
                          generate_semantic_shift(args.n, args.d_in, args.noise_sd, args.seed)))
    else:
        splits = dict(zip(("source", "target"),
                          generate_covariate_shift(args.n, args.d_in, args.shift, args.seed, args.noise_sd)))
    for name, ds in splits.items():
        path = manifest.output(out / f"{name}.csv")
        write_csv(ds, path, comment=manifest.reference)
        print(f"wrote {path} ({len(ds)} rows)")
    manifest.finish()


def _read_labels(path, b):
    labels = read_matrix_csv(path).ravel()
    if labels.size != b:
        raise CliError(f"{path}: expected {b} labels to match the cost matrix, got {labels.size}")
    return labels


def cmd_solve_ot(args):
    cost = read_matrix_csv(args.cost)
    if cost.shape[0] != cost.shape[1]:
        raise CliError(f"{args.cost}: cost matrix must be square, got {cost.shape[0]}x{cost.shape[1]}")
    b = cost.shape[0]
    if args.oracle and b > MAX_ORACLE_SIZE:
        raise CliError(f"--oracle needs b <= {MAX_ORACLE_SIZE}, got b={b}")
    if args.labels:
        labels = _read_labels(args.labels, b)
    elif args.lambda2 > 0:
        raise CliError("--lambda2 > 0 needs --labels")
    else:
        labels = np.zeros(b)
    params = OtParams(lambda1=args.lambda1, lambda2=args.lambda2, sinkhorn_tol=args.tol)
    out = Path(args.out)
    manifest = Manifest("solve-ot", out, args.seed, arguments=_arguments(args))
    manifest.write()
    coupling, objectives = solve_mrot_plan(cost, labels, params)
    row_res, col_res = marginal_residuals(coupling.plan)
    print("plan:")
    for row in coupling.plan:
        print("  " + " ".join(f"{v:.6g}" for v in row))
    print("objective trace: " + " ".join(f"{v:.10g}" for v in objectives))
    print(f"transport cost: {ot_loss(coupling, cost):.10g}")
    print(f"marginal residuals: row {row_res:.3g} col {col_res:.3g}")
    if args.oracle:
        _, value = exact_ot_oracle(cost)
        gap = abs(ot_loss(coupling, cost) - value)
        print(f"oracle value: {value:.10g}")
        print(f"oracle gap: {gap:.3g} (limit {5e-2 * (1 + value):.3g})")
    _write_csv_table(Path(args.trace) if args.trace else out / "objective_trace.csv", ["iter", "objective"],
                     [(i, repr(float(v))) for i, v in enumerate(objectives)], manifest)
    _write_csv_table(out / "plan.csv", [f"t{j}" for j in range(b)],
                     [[repr(float(v)) for v in row] for row in coupling.plan], manifest)
    manifest.finish()


def _load_target(path, label_column, mode):
    return load_csv(path, label_column, domain_tag="target", require_labels=mode == "semi")


def cmd_train(args):
    config = effective_config(args)
    out = Path(args.out)
    manifest = Manifest("train", out, config.seed, config=config.to_dict(), arguments=_arguments(args))
    manifest.write()
    source = load_csv(args.source, args.label_column)
    target = _load_target(args.target, args.label_column, config.mode)
    if source.features.shape[1] != target.features.shape[1]:
        raise CliError(f"source has {source.features.shape[1]} features, target has {target.features.shape[1]}")
    scaler = LabelScaler.fit(source.labels)
    dump = out / "clusters.csv" if args.dump_clusters else None
    try:
        result = train(scaler.dataset(source), scaler.dataset(target), config, cluster_dump=dump)
    except TrainingDiverged as exc:
        write_trace_csv(manifest.output(out / "trace.partial.csv"), exc.trace, comment=manifest.reference)
        manifest.finish()
        raise CliError(str(exc)) from None
    if dump is not None:
        manifest.output(dump)
    trace_path = manifest.output(Path(args.trace) if args.trace else out / "trace.csv")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace_path, result.trace, comment=manifest.reference)
    ckpt = manifest.output(out / "checkpoint.json")
    save_checkpoint(result.params, ckpt, config, metadata={
        "label_mean": scaler.mean, "label_std": scaler.std, "manifest": str(manifest.path)})
    last = result.trace[-1] if result.trace else None
    print(f"trained {len(result.trace)} steps; final total loss {last[4]:.6g}" if last else "trained 0 steps")
    print(f"wrote {ckpt} and {trace_path}")
    manifest.finish()


def _check_shapes(params, config_dict, path):
    cfg = config_from_dict(config_dict)
    expected = [h for h in cfg.hidden] + [cfg.feature_dim]
    actual = [w.shape[1] for w in params.weights]
    if expected != actual:
        raise CliError(f"config layer sizes {expected} do not match checkpoint {path} layer sizes {actual}")


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    params, ckpt_config, meta = load_checkpoint(ckpt, with_metadata=True)
    if args.config:
        _check_shapes(params, read_config(args.config), ckpt)
    data = load_csv(args.data, args.label_column, domain_tag="target")
    if data.features.shape[1] != params.input_dim:
        raise CliError(f"{args.data} has {data.features.shape[1]} features; "
                       f"checkpoint expects {params.input_dim}")
    scaler = LabelScaler(meta.get("label_mean", 0.0), meta.get("label_std", 1.0))
    report = evaluate(scaler.inverse(predict(params, data.features)), data.labels)
    header = list(METRIC_KEYS) + ["flags"]
    row = [repr(getattr(report, k)) for k in METRIC_KEYS] + [";".join(report.flags)]
    print(_format_table(header, [[f"{getattr(report, k):.6g}" for k in METRIC_KEYS] + row[-1:]]))
    out = Path(args.out)
    manifest = Manifest("eval", out, args.seed, config=ckpt_config, arguments=_arguments(args))
    manifest.write()
    _write_csv_table(out / "metrics.csv", header, [row], manifest)
    manifest.finish()


def cmd_ablate(args):
    config = effective_config(args)
    seeds = list(range(config.seed, config.seed + args.seeds))
    rows = args.rows or list(ABLATION_ROWS)
    out = Path(args.out)
    manifest = Manifest("ablate", out, config.seed, config=config.to_dict(), arguments=_arguments(args))
    manifest.write()
    if args.task == "semantic":
        factory = lambda s: semantic_task(args.n, args.d_in, seed=s)  # noqa: E731
        base = config
    else:
        factory = lambda s: covariate_task(args.n, args.d_in, args.shift, args.labeled_fraction, seed=s)  # noqa: E731
        base = config.replace(mode="semi")
    results = run_ablation(factory, base, seeds, rows)
    table = summarize(results)
    header = ["row"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "sd")]
    csv_rows = [[row] + [repr(v) for k in METRIC_KEYS for v in table[row][k]] for row in rows]
    _write_csv_table(out / "ablation.csv", header, csv_rows, manifest)
    if args.trace:
        per_seed = [[row, seed] + [repr(getattr(r, k)) for k in METRIC_KEYS]
                    for row in rows for seed, r in zip(seeds, results[row])]
        _write_csv_table(Path(args.trace), ["row", "seed", *METRIC_KEYS], per_seed, manifest)
    pretty = [[row] + [f"{table[row][k][0]:.4f} ± {table[row][k][1]:.4f}" for k in METRIC_KEYS] for row in rows]
    print(_format_table(["row", *METRIC_KEYS], pretty))
    manifest.finish()


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--config", help="YAML config file or a previous run's manifest.json")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trace", help="path for the trace CSV")


def _config_flags(p):
    g = p.add_argument_group("config overrides")
    for name, typ in CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "mode":
            g.add_argument(flag, choices=("uda", "semi"))
        else:
            g.add_argument(flag, type=typ, dest=name)
    g.add_argument("--lr", type=float, dest="learning_rate", help=argparse.SUPPRESS)
    g.add_argument("--hidden", type=_int_list, help="hidden layer widths, e.g. 16 or 32,16")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrot", description="Regularized mini-batch OT for regression DA.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=f"%(prog)s {mrot.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic domain-shift CSV files")
    _common(p)
    p.add_argument("--kind", required=True, choices=("semantic", "covariate"))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d-in", type=int, default=5)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--shift", type=float, default=1.5, help="covariate shift magnitude")
    p.set_defaults(handler=cmd_gen_data, seed=0)

    p = sub.add_parser("solve-ot", help="solve one transport problem")
    _common(p)
    p.add_argument("--cost", required=True, help="headerless square cost-matrix CSV")
    p.add_argument("--labels", help="headerless CSV of source labels (required when --lambda2 > 0)")
    p.add_argument("--lambda1", type=float, default=0.05)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-9, help="Sinkhorn marginal tolerance")
    p.add_argument("--oracle", action="store_true", help="compare against exact OT (b <= 6)")
    p.set_defaults(handler=cmd_solve_ot)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--source", required=True, help="labeled source CSV")
    p.add_argument("--target", required=True, help="target CSV (labels needed in semi mode)")
    p.add_argument("--label-column", default="y")
    p.add_argument("--dump-clusters", action="store_true", help="write per-batch cluster assignments")
    _config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on labeled data")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled CSV")
    p.add_argument("--label-column", default="y")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the ERM/OT/OT+VR/TL/MROT grid")
    _common(p)
    p.add_argument("--task", choices=("semantic", "covariate"), default="semantic")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--rows", nargs="+", choices=ABLATION_ROWS)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d-in", type=int, default=5)
    p.add_argument("--shift", type=float, default=1.5)
    p.add_argument("--labeled-fraction", type=float, default=0.25)
    _config_flags(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.handler(args)
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
