"""Command-line entry point: ``mtlhmb <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid data or configuration,
3 runtime failure. Diagnostics go to stderr; results only to files.

Config files are JSON; explicit flags override values from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    BINARY,
    ImputedDataset,
    SplitSpec,
    StandardizationStats,
    atomic_write_text,
    load_csv,
    load_imputed,
    read_matrix,
    save_csv,
    split,
    standardize_apply,
    standardize_fit,
    standardize_invert,
    write_matrix,
)
from .dgp import SETTINGS, DgpConfig, apply_sweep, config_from_dict, generate
from .errors import ConfigError, DataError
from .harness import ExperimentSpec, average_rmse, mmd_permutation_test, rmse, run_experiment, write_outputs
from .hbi import HbiConfig, HbiImputer, hbi_grid
from .mtl import MODEL_FORMAT, MODEL_VERSION, MtlConfig, MtlModel, export_latents, latents_to_csv, mtl_grid
from .mtl import predict_dataset, train_mtl
from .training import grid_search

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
VAL_FRACTION = 0.2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _dataclass_from(cls, data: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


def _load_any(manifest):
    ds = load_imputed(manifest)
    if ds.imputed or ds.T == 1:
        return ds
    return ds.base


def _train_val(ds, seed: int):
    """Hold out a validation share of every task for early stopping."""
    tr, va, _ = split(ds, SplitSpec((1.0 - VAL_FRACTION, VAL_FRACTION, 0.0), seed))
    return tr, va


# -- commands ----------------------------------------------------------------------


def cmd_generate(args) -> None:
    if args.config:
        cfg = config_from_dict(_read_json(args.config))
    elif args.setting:
        if args.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {args.setting!r}; choose from {sorted(SETTINGS)}")
        cfg = SETTINGS[args.setting][0]
    else:
        cfg = DgpConfig()
    for name in ("rho", "n", "sigma", "alpha"):
        value = getattr(args, name)
        if value is not None:
            cfg = apply_sweep(cfg, name, value)
    for item in args.set or []:
        name, _, value = item.partition("=")
        if not value:
            raise ConfigError(f"--set expects name=value, got {item!r}")
        cfg = apply_sweep(cfg, name, float(value) if "." in value else int(value))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    gt = generate(cfg)
    out = Path(args.out)
    manifest = save_csv(gt.dataset, out)
    hidden = {}
    for t in range(1, cfg.T + 1):
        for s in range(1, cfg.T + 1):
            if s != t:
                name = f"truth_task{t}_source{s}.csv"
                write_matrix(out / name, gt.hidden_block(t, s))
                hidden[f"{t},{s}"] = name
    sidecar = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "coefficients": {"v_c": gt.coefficients.v_c.tolist(), "v_t": [v.tolist() for v in gt.coefficients.v_t]},
        "hidden_blocks": hidden,
    }
    atomic_write_text(out / "ground_truth.json", json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {manifest}", file=sys.stderr)


def cmd_impute(args) -> None:
    ds = load_csv(args.data)
    cfg = _dataclass_from(HbiConfig, _read_json(args.config) if args.config else {}, seed=args.seed)
    stats = standardize_fit(ds)
    z = standardize_apply(stats, ds)
    tr, va = _train_val(z, cfg.seed)
    imputer = HbiImputer(cfg, hbi_grid(cfg, args.grid)).fit(tr, va)
    filled = standardize_invert(stats, imputer.transform(z))
    filled = ImputedDataset(ds, filled.imputed)
    manifest = save_csv(filled, args.out)
    models = {str(s): m.to_dict() for s, m in imputer.models.items()}
    doc = {"format": "mtlhmb-hbi", "version": MODEL_VERSION, "stats": stats.to_dict(), "models": models}
    atomic_write_text(Path(args.out) / "hbi_models.json", json.dumps(doc) + "\n")
    print(f"wrote {manifest}", file=sys.stderr)


def _save_model(model: MtlModel, stats: StandardizationStats, path: Path) -> None:
    doc = model.to_dict()
    doc["stats"] = stats.to_dict()
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc) + "\n")


def _load_model(path) -> tuple[MtlModel, StandardizationStats]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: model file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid model file ({exc})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a {MODEL_FORMAT} file")
    if "stats" not in doc:
        raise DataError(f"{path}: model file lacks standardization statistics")
    return MtlModel.from_dict(doc), StandardizationStats.from_dict(doc["stats"])


def cmd_train(args) -> None:
    ds = _load_any(args.data)
    cfg = _dataclass_from(MtlConfig, _read_json(args.config) if args.config else {}, seed=args.seed)
    stats = standardize_fit(ds)
    z = standardize_apply(stats, ds)
    tr, va = _train_val(z, cfg.seed)

    def run(c):
        m = train_mtl(tr, c, va)
        return m, m.log.best_val

    model = grid_search(run, mtl_grid(cfg, args.grid)).best_model
    out = Path(args.out)
    _save_model(model, stats, out)
    atomic_write_text(out.with_suffix(".log.csv"), model.log.to_csv())
    print(f"wrote {out}", file=sys.stderr)


def _raw_predictions(model, stats, ds) -> list[np.ndarray]:
    z = standardize_apply(stats, ds)
    preds = predict_dataset(model, z)
    return [p if model.response_kinds[t - 1] == BINARY else stats.inverse_y(t, p) for t, p in enumerate(preds, start=1)]


def _check_layout(model: MtlModel, ds) -> None:
    if tuple(ds.layout.source_dims) != tuple(model.layout.source_dims):
        raise DataError(f"dataset layout {ds.layout.source_dims} does not match model {model.layout.source_dims}")


def cmd_predict(args) -> None:
    model, stats = _load_model(args.model)
    ds = _load_any(args.data)
    _check_layout(model, ds)
    lines = ["task,row,prediction"]
    for t, pred in enumerate(_raw_predictions(model, stats, ds), start=1):
        lines.extend(f"{t},{i},{float(v)!r}" for i, v in enumerate(pred))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, "\n".join(lines) + "\n")


def cmd_evaluate(args) -> None:
    model, stats = _load_model(args.model)
    ds = _load_any(args.data)
    _check_layout(model, ds)
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    per_task = [rmse(p, base.task(t).y) for t, p in enumerate(_raw_predictions(model, stats, ds), start=1)]
    doc = {"rmse": per_task, "average_rmse": average_rmse(per_task)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, json.dumps(doc, indent=2) + "\n")


def cmd_experiment(args) -> None:
    data = _read_json(args.config)
    if args.grid:
        data["grid"] = args.grid
    if args.seed is not None:
        data["base_seed"] = args.seed
    spec = ExperimentSpec.from_dict(data)
    records = run_experiment(spec, workers=args.workers)
    paths = write_outputs(records, args.out, spec)
    failed = sum(r.status != "ok" for r in records if r.task == "avg")
    if failed:
        print(f"{failed} method runs failed; see records.csv", file=sys.stderr)
    print(f"wrote {paths['records']} and {paths['summary']}", file=sys.stderr)


def cmd_mmd_test(args) -> None:
    if args.data:
        if args.x or args.y:
            raise UsageError("use either --data or --x/--y")
        ds = load_csv(args.data)
        a, b = args.tasks
        X, Y = ds.task(a).X0, ds.task(b).X0
    elif args.x and args.y:
        X, Y = read_matrix(Path(args.x), args.header), read_matrix(Path(args.y), args.header)
    else:
        raise UsageError("mmd-test needs --data or both --x and --y")
    res = mmd_permutation_test(X, Y, args.permutations, args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, json.dumps(asdict(res), indent=2) + "\n")


def cmd_export_latents(args) -> None:
    model, stats = _load_model(args.model)
    ds = _load_any(args.data)
    _check_layout(model, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, latents_to_csv(export_latents(model, standardize_apply(stats, ds))))


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtlhmb", description="Two-step multi-task learning for block-wise missing multi-source data.")
    p.add_argument("--version", action="version", version=f"mtlhmb {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        return sp

    g = add("generate", cmd_generate, "simulate a block-wise missing dataset")
    g.add_argument("--setting", help="preset template: " + ", ".join(sorted(SETTINGS)))
    g.add_argument("--config", help="JSON file of DGP fields")
    g.add_argument("--rho", type=float)
    g.add_argument("--n", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--set", action="append", metavar="NAME=VALUE", help="swept quantity, e.g. rho2=0.7")

    for name, fn, help_ in (
        ("impute", cmd_impute, "fill missing blocks with HBI"),
        ("train", cmd_train, "fit the multi-task network"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--data", required=True, help="dataset manifest")
        sp.add_argument("--config", help="JSON file of model hyperparameters")
        sp.add_argument("--grid", choices=("full", "reduced", "fixed"), default="fixed")

    for name, fn, help_ in (
        ("predict", cmd_predict, "predict responses with a trained model"),
        ("evaluate", cmd_evaluate, "per-task and average RMSE of a trained model"),
        ("export-latents", cmd_export_latents, "write layer-1 shared/specific codes as CSV"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", required=True, help="dataset manifest (imputed when T > 1)")

    e = add("experiment", cmd_experiment, "run a simulation sweep")
    e.add_argument("--config", required=True, help="JSON experiment description")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--grid", choices=("full", "reduced", "fixed"))

    m = add("mmd-test", cmd_mmd_test, "MMD permutation test between two samples")
    m.add_argument("--data", help="dataset manifest; compares anchor blocks of --tasks")
    m.add_argument("--tasks", type=int, nargs=2, default=(1, 2))
    m.add_argument("--x")
    m.add_argument("--y")
    m.add_argument("--header", action="store_true")
    m.add_argument("--permutations", type=int, default=10_000)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
