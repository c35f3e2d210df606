"""Command line entry point.

Every subcommand resolves one flat configuration (defaults, then ``--config``
JSON with dotted keys, then ``--set key=value`` and the dedicated flags),
prints it, saves it next to its outputs and then runs.

Exit codes: 0 success, 1 invalid input or configuration, 2 a verification
check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path


from . import bench as bench_mod
from . import bounds as bounds_mod
from . import datagen, pooling, tasks
from .encoder import EncoderConfig, load_checkpoint
from .train_eval import TrainConfig, cross_validate, evaluate, split_indices

SUBCOMMANDS = ("gen-data", "make-targets", "train", "eval", "verify-bounds", "verify-corollaries", "bench")

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs",
    "io.data": "",
    "io.labels_dir": "",
    "io.checkpoint": "",
    "data.count": 50000,
    "data.N": 32,
    "data.d": 16,
    "data.scale_mode": datagen.DEFAULT_SCALE_MODE,
    "data.exp_param": datagen.DEFAULT_EXP_PARAM,
    "targets.kind": "knn",
    "targets.k_list": [1],
    "train.epochs": 30,
    "train.batch_size": 750,
    "train.lr": 5e-4,
    "train.folds": 5,
    "train.holdout_fraction": 0.1,
    "train.methods": ["avg", "max", "cls", "ada"],
    "train.eval_batch_size": 1024,
    "bounds.cases": 100000,
    "bounds.n_max": 64,
    "bounds.keep": 100,
    "corollaries.trials": 1000,
    "corollaries.avg_tol": 1e-12,
    "corollaries.max_tol": 1e-3,
    "bench.methods": list(bench_mod.KERNELS),
    "bench.Ns": [1000, 2000, 4000, 8000],
    "bench.ds": [16],
    "bench.reps": 15,
    "bench.warmup": 2,
    "bench.batch": 1,
    "bench.slope_min": bench_mod.SLOPE_RANGE[0],
    "bench.slope_max": bench_mod.SLOPE_RANGE[1],
}
for _f in fields(EncoderConfig):
    if _f.name not in ("dim_input", "seed", "pool_method"):
        DEFAULTS[f"encoder.{_f.name}"] = _f.default
DEFAULTS["encoder.num_layers"] = 3

# keys whose default is None accept an int too
_NULLABLE = {k for k, v in DEFAULTS.items() if v is None}


class ConfigValidationError(ValueError):
    pass


class VerificationFailure(RuntimeError):
    pass


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and value.lower() in ("none", "null") and key in _NULLABLE:
        value = None
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigValidationError(f"{key} may not be null")
    if key in _NULLABLE:
        default = 0
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if isinstance(value, list):
            kind = type(default[0]) if default else str
            try:
                return [kind(v) for v in value]
            except (TypeError, ValueError):
                pass
    raise ConfigValidationError(f"{key}: cannot use {value!r} (expected {type(default).__name__})")


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, file values and overrides; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigValidationError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigValidationError("config file must hold a JSON object of dotted keys")
    return doc


def encoder_config(cfg: dict) -> EncoderConfig:
    vals = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("encoder.")}
    return EncoderConfig(dim_input=cfg["data.d"], seed=cfg["seed"], **vals)


def train_config(cfg: dict, k_list) -> TrainConfig:
    return TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       folds=cfg["train.folds"], holdout_fraction=cfg["train.holdout_fraction"],
                       seed=cfg["seed"], k_list=tuple(k_list), methods=tuple(cfg["train.methods"]),
                       encoder=encoder_config(cfg), eval_batch_size=cfg["train.eval_batch_size"])


def label_path(directory, kind: str, k: int) -> Path:
    return Path(directory) / (f"labels_k{k}.pbt" if kind == "knn" else f"labels_{kind}.pbt")


# -- subcommands ----------------------------------------------------------------

def _dataset_path(cfg: dict) -> Path:
    return Path(cfg["io.data"]) if cfg["io.data"] else Path(cfg["out"]) / "data.pbs"


def _read_dataset(cfg: dict) -> datagen.Dataset:
    path = _dataset_path(cfg)
    if not path.exists():
        raise ConfigValidationError(f"dataset {path} not found (run gen-data or pass --data)")
    return datagen.read_dataset(path)


def _labels(cfg: dict, ds: datagen.Dataset) -> dict:
    """Label sets keyed by k, read from disk when present and derived otherwise."""
    kind = cfg["targets.kind"]
    ks = cfg["targets.k_list"] if kind == "knn" else [ds.N]
    directory = cfg["io.labels_dir"] or _dataset_path(cfg).parent
    out = {}
    for k in ks:
        p = label_path(directory, kind, k)
        if p.exists():
            lab = tasks.read_labels(p)
            if lab.count != ds.count or lab.kind != kind:
                raise ConfigValidationError(f"{p} does not match the dataset")
        else:
            lab = tasks.make_labels(ds, kind, k)
        out[k] = lab
    return out


def cmd_gen_data(cfg: dict) -> dict:
    ds = datagen.generate_dataset(cfg["data.count"], cfg["data.N"], cfg["data.d"], cfg["seed"],
                                  cfg["data.scale_mode"], cfg["data.exp_param"])
    path = Path(cfg["out"]) / "data.pbs"
    datagen.write_dataset(path, ds)
    return {"dataset": str(path), "bytes": path.stat().st_size}


def cmd_make_targets(cfg: dict) -> dict:
    ds = _read_dataset(cfg)
    kind = cfg["targets.kind"]
    ks = cfg["targets.k_list"] if kind == "knn" else [ds.N]
    written = []
    for k in ks:
        lab = tasks.make_labels(ds, kind, k)
        p = label_path(cfg["out"], kind, k)
        tasks.write_labels(p, lab)
        c, t = tasks.baseline_losses(ds, lab)
        written.append({"k": k, "path": str(p), "baseline_centroid": c, "baseline_target": t})
    return {"labels": written}


def cmd_train(cfg: dict) -> dict:
    ds = _read_dataset(cfg)
    labels = _labels(cfg, ds)
    tcfg = train_config(cfg, sorted(labels))
    report = cross_validate(ds, labels, tcfg, ckpt_dir=Path(cfg["out"]) / "checkpoints")
    c, j = report.write(cfg["out"])
    print(report.to_csv(), end="")
    return {"report_csv": str(c), "report_json": str(j), "config_hash": report.config_hash}


def cmd_eval(cfg: dict) -> dict:
    if not cfg["io.checkpoint"]:
        raise ConfigValidationError("eval needs --checkpoint")
    state, extra = load_checkpoint(cfg["io.checkpoint"])
    ds = _read_dataset(cfg)
    labels = _labels(cfg, ds)
    k = extra.get("k", next(iter(labels)))
    if k not in labels:
        raise ConfigValidationError(f"checkpoint was trained for k={k}, labels hold {sorted(labels)}")
    lab = labels[k]
    holdout, _ = split_indices(ds.count, train_config(cfg, [k]))
    x = ds.batch(holdout)
    loss = evaluate(state, x, lab.target_index[holdout], lab.y[holdout], cfg["train.eval_batch_size"])
    base_c, base_t = tasks.baseline_losses(ds, lab, holdout)
    result = {"checkpoint": cfg["io.checkpoint"], "k": k, "holdout": int(len(holdout)), "loss": loss,
              "baseline_centroid": base_c, "baseline_target": base_t}
    (Path(cfg["out"]) / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def cmd_verify_bounds(cfg: dict) -> dict:
    res = bounds_mod.sweep(cfg["bounds.cases"], cfg["seed"], cfg["bounds.n_max"], cfg["bounds.keep"])
    path = Path(cfg["out"]) / "bounds_report.csv"
    path.write_text(bounds_mod.reports_to_csv(res.reports))
    summary = {"cases": res.cases, "failures": res.failures, "worst_slack": res.worst_slack, "report": str(path)}
    if not res.passed:
        raise VerificationFailure(f"{res.failures} of {res.cases} cases leave the bounds", summary)
    return summary


def cmd_verify_corollaries(cfg: dict) -> dict:
    res = pooling.reduction_sweep(cfg["corollaries.trials"], cfg["seed"])
    res["avg_ok"] = res["avg_error"] <= cfg["corollaries.avg_tol"]
    res["max_ok"] = res["max_error"] <= cfg["corollaries.max_tol"]
    (Path(cfg["out"]) / "corollaries.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    if not (res["avg_ok"] and res["max_ok"]):
        raise VerificationFailure("a pooling reduction exceeds its tolerance", res)
    return res


def cmd_bench(cfg: dict) -> dict:
    results = []
    for m in cfg["bench.methods"]:
        results += bench_mod.bench_pooling(m, cfg["bench.Ns"], cfg["bench.ds"], cfg["bench.reps"],
                                           cfg["bench.warmup"], cfg["bench.batch"], cfg["seed"])
    path = Path(cfg["out"]) / "bench.csv"
    path.write_text(bench_mod.results_to_csv(results))
    slopes = {f"{r.method}@d={r.d}": r.slope for r in results}
    summary = {"csv": str(path), "slopes": slopes}
    lo, hi = cfg["bench.slope_min"], cfg["bench.slope_max"]
    bad = {k: s for k, s in slopes.items() if not lo <= s <= hi}
    if len(cfg["bench.Ns"]) > 1 and bad:
        raise VerificationFailure(f"N-exponents outside [{lo}, {hi}]: {bad}", summary)
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "make-targets": cmd_make_targets,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-bounds": cmd_verify_bounds,
    "verify-corollaries": cmd_verify_corollaries,
    "bench": cmd_bench,
}

# flag -> config key, per subcommand
FLAGS = {
    "gen-data": {"count": "data.count", "N": "data.N", "d": "data.d", "scale_mode": "data.scale_mode"},
    "make-targets": {"data": "io.data", "k": "targets.k_list", "kind": "targets.kind"},
    "train": {"data": "io.data", "labels_dir": "io.labels_dir", "k": "targets.k_list", "kind": "targets.kind",
              "epochs": "train.epochs", "folds": "train.folds", "method": "train.methods",
              "batch_size": "train.batch_size", "lr": "train.lr"},
    "eval": {"data": "io.data", "labels_dir": "io.labels_dir", "checkpoint": "io.checkpoint",
             "k": "targets.k_list", "kind": "targets.kind", "folds": "train.folds"},
    "verify-bounds": {"cases": "bounds.cases"},
    "verify-corollaries": {"trials": "corollaries.trials"},
    "bench": {"method": "bench.methods", "Ns": "bench.Ns", "ds": "bench.ds", "reps": "bench.reps"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adapool", description="Pooling experiments: data, training, verification, timing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of dotted keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag in FLAGS[name]:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigValidationError("--seed must be an unsigned 64-bit integer")
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigValidationError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key] = value
        for flag, key in FLAGS[args.command].items():
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = resolve_config(load_config_file(args.config) if args.config else None, overrides)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    out = Path(cfg["out"])
    text = json.dumps(cfg, indent=1, sort_keys=True)
    print(f"# effective config ({args.command})\n{text}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.config.json").write_text(text + "\n")
        result = COMMANDS[args.command](cfg)
    except VerificationFailure as exc:
        msg, summary = exc.args
        print(json.dumps(summary, indent=1, sort_keys=True, default=str))
        print(f"verification failed: {msg}", file=sys.stderr)
        return 2
    except (ConfigValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
