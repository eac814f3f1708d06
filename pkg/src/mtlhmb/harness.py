"""Experiment orchestration, metrics, MMD testing and result aggregation.

One experiment is a sweep over a single DGP parameter. Every (value,
repetition) pair is an independent job: generate data with the repetition
seed, split 60/20/20, standardize on the training part, fit each method with
grid search on train/validation and score test RMSE on the raw response
scale.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import (
    NaiveImputer,
    StlConfig,
    observed_features,
    stl_grid,
    train_hps,
    train_htl,
    train_stl,
    train_stl_imputed,
)
from .data import SplitSpec, atomic_write_text, split, standardize_apply, standardize_fit
from .dgp import SETTINGS, DgpConfig, apply_sweep, config_from_dict, generate
from .errors import ConfigError
from .hbi import HbiConfig, HbiImputer, hbi_grid
from .mtl import MtlConfig, mtl_grid, predict_dataset, train_mtl
from .training import GridResult, grid_search

OURS = "MTL-HMB"
METHODS = (OURS, "STL", "HTL", "HPS", "Step1+STL", "NaiveImp+Step2")
DEFAULT_METHODS = (OURS, "STL", "HTL")
GRID_MODES = ("full", "reduced", "fixed")
SEED_STRIDE = 1_000_003
AVG = "avg"

__all__ = [
    "ExperimentSpec",
    "ResultRecord",
    "MmdResult",
    "rmse",
    "average_rmse",
    "grid_search",
    "run_experiment",
    "mmd",
    "mmd_permutation_test",
    "aggregate",
    "write_outputs",
]


# -- metrics ---------------------------------------------------------------------


def rmse(pred, y) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if pred.shape != y.shape:
        raise ConfigError(f"prediction has {pred.size} entries, target has {y.size}")
    if y.size == 0:
        raise ConfigError("rmse of empty vectors")
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def average_rmse(per_task) -> float:
    per_task = list(per_task)
    if not per_task:
        raise ConfigError("no per-task RMSE values")
    return float(np.mean(per_task))


# -- experiment description ------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    setting: str
    template: DgpConfig
    sweep_param: str | None = None
    sweep_values: tuple = ()
    methods: tuple[str, ...] = DEFAULT_METHODS
    repetitions: int = 30
    base_seed: int = 0
    grid: str = "reduced"
    max_epochs: int | None = None  # caps every model's epoch budget when set

    def __post_init__(self):
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.grid not in GRID_MODES:
            raise ConfigError(f"grid must be one of {GRID_MODES}, got {self.grid!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if self.sweep_param is not None:
            if not self.sweep_values:
                raise ConfigError(f"sweep over {self.sweep_param!r} has no values")
            for v in self.sweep_values:
                apply_sweep(self.template, self.sweep_param, v)
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def points(self) -> list:
        """Swept values, or ``[None]`` for a single-configuration experiment."""
        return list(self.sweep_values) if self.sweep_param is not None else [None]

    def dgp_config(self, value, repetition: int) -> DgpConfig:
        cfg = self.template
        if self.sweep_param is not None:
            cfg = apply_sweep(cfg, self.sweep_param, value)
        return replace(cfg, seed=self.base_seed + repetition * SEED_STRIDE)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template"] = self.template.to_dict()
        d["sweep_values"] = list(self.sweep_values)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        """Build from JSON-style data.

        A known setting id fills the template and sweep from the presets;
        explicit keys override them. ``template`` entries are merged over
        the preset template.
        """
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        setting = str(d.get("setting", "CUSTOM"))
        if setting in SETTINGS:
            template, param, values = SETTINGS[setting]
            d.setdefault("sweep_param", param)
            d.setdefault("sweep_values", values)
        elif setting == "CUSTOM":
            template = DgpConfig()
        else:
            raise ConfigError(f"unknown setting {setting!r}")
        overrides = d.pop("template", None) or {}
        if not isinstance(overrides, dict):
            raise ConfigError("template must be an object of DGP fields")
        base = template.to_dict()
        base.update(overrides)
        d["template"] = config_from_dict(base)
        d["setting"] = setting
        return cls(**d)


@dataclass(frozen=True)
class ResultRecord:
    setting: str
    sweep_param: str
    sweep_value: str
    repetition: int
    seed: int
    method: str
    task: str  # task number or "avg"
    split: str
    rmse: float
    status: str  # "ok" or "failed"
    config_hash: str
    error: str = ""
    wall_time: float = field(default=0.0, compare=False)


RECORD_COLUMNS = (
    "setting",
    "sweep_param",
    "sweep_value",
    "repetition",
    "seed",
    "method",
    "task",
    "split",
    "rmse",
    "status",
    "config_hash",
    "error",
)


# -- method runners -----------------------------------------------------------------


def _cap(cfg, max_epochs):
    return cfg if max_epochs is None else replace(cfg, max_epochs=max_epochs)


def _select(fit_fn, candidates) -> GridResult:
    def run(cfg):
        model = fit_fn(cfg)
        return model, model.log.best_val

    return grid_search(run, candidates)


class _Run:
    """State for one (value, repetition) job: data, split, scaling and shared imputations."""

    def __init__(self, spec: ExperimentSpec, dgp: DgpConfig):
        self.spec = spec
        self.dgp = dgp
        self.data = generate(dgp).dataset
        parts = split(self.data, SplitSpec(seed=dgp.seed))
        self.stats = standardize_fit(parts[0])
        self.train, self.val, self.test = (standardize_apply(self.stats, p) for p in parts)
        self.T = self.data.T
        self._imputed = {}

    def configs(self, cls, grid_fn):
        return [_cap(c, self.spec.max_epochs) for c in grid_fn(cls(seed=self.dgp.seed), self.spec.grid)]

    def imputed(self, kind: str):
        """(train, val, test) with missing blocks filled by HBI or the naive imputer."""
        if kind not in self._imputed:
            cls = HbiImputer if kind == "hbi" else NaiveImputer
            imp = cls(grid=self.configs(HbiConfig, hbi_grid)).fit(self.train, self.val)
            self._imputed[kind] = tuple(imp.transform(d) for d in (self.train, self.val, self.test))
        return self._imputed[kind]

    def score(self, preds) -> list[float]:
        return [
            rmse(self.stats.inverse_y(t, preds[t - 1]), self.stats.inverse_y(t, self.test.task(t).y))
            for t in range(1, self.T + 1)
        ]

    def mtl(self, kind: str) -> list[float]:
        itr, iva, ite = self.imputed(kind)
        model = _select(lambda c: train_mtl(itr, c, iva), self.configs(MtlConfig, mtl_grid)).best_model
        return self.score(predict_dataset(model, ite))

    def stl(self) -> list[float]:
        preds = []
        for t in range(1, self.T + 1):
            fit_fn = lambda c, t=t: train_stl(self.train.task(t), c, self.val.task(t), key=t)  # noqa: E731
            model = _select(fit_fn, self.configs(StlConfig, stl_grid)).best_model
            preds.append(model.predict(observed_features(self.test.task(t))))
        return self.score(preds)

    def htl(self) -> list[float]:
        fit_fn = lambda c: train_htl(self.train, c, self.val)  # noqa: E731
        model = _select(fit_fn, self.configs(MtlConfig, mtl_grid)).best_model
        return self.score(predict_dataset(model, self.test))

    def hps(self) -> list[float]:
        itr, iva, ite = self.imputed("hbi")
        model = _select(lambda c: train_hps(itr, c, iva), self.configs(StlConfig, stl_grid)).best_model
        return self.score([model.predict(t, ite.full_features(t)) for t in range(1, self.T + 1)])

    def step1_stl(self) -> list[float]:
        itr, iva, ite = self.imputed("hbi")
        preds = []
        for t in range(1, self.T + 1):
            fit_fn = lambda c, t=t: train_stl_imputed(itr, t, c, iva)  # noqa: E731
            model = _select(fit_fn, self.configs(StlConfig, stl_grid)).best_model
            preds.append(model.predict(ite.full_features(t)))
        return self.score(preds)

    def method(self, name: str) -> list[float]:
        runners = {
            OURS: lambda: self.mtl("hbi"),
            "STL": self.stl,
            "HTL": self.htl,
            "HPS": self.hps,
            "Step1+STL": self.step1_stl,
            "NaiveImp+Step2": lambda: self.mtl("naive"),
        }
        return runners[name]()


def config_hash(dgp: DgpConfig, method: str, grid: str, max_epochs) -> str:
    blob = json.dumps(
        {"dgp": dgp.to_dict(), "method": method, "grid": grid, "max_epochs": max_epochs}, sort_keys=True
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_point(spec: ExperimentSpec, value, repetition: int) -> list[ResultRecord]:
    """All methods for one swept value and repetition.

    A method that raises yields ``failed`` records (NaN RMSE) and the
    remaining methods still run.
    """
    dgp = spec.dgp_config(value, repetition)
    run = _Run(spec, dgp)
    out = []
    common = dict(
        setting=spec.setting,
        sweep_param=spec.sweep_param or "",
        sweep_value="" if value is None else repr(value),
        repetition=repetition,
        seed=dgp.seed,
        split="test",
    )
    for method in spec.methods:
        h = config_hash(dgp, method, spec.grid, spec.max_epochs)
        t0 = time.perf_counter()
        try:
            per_task = run.method(method)
            status, err = "ok", ""
        except Exception as exc:  # a failing method must not abort the sweep
            per_task = [math.nan] * run.T
            status = "failed"
            err = f"{type(exc).__name__}: {exc}"
            traceback.print_exc()
        elapsed = time.perf_counter() - t0
        avg = average_rmse(per_task) if status == "ok" else math.nan
        for task, value_ in [(str(t), r) for t, r in enumerate(per_task, start=1)] + [(AVG, avg)]:
            out.append(
                ResultRecord(
                    method=method,
                    task=task,
                    rmse=value_,
                    status=status,
                    config_hash=h,
                    error=err,
                    wall_time=elapsed,
                    **common,
                )
            )
    return out


def _run_job(args):
    return run_point(*args)


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list[ResultRecord]:
    """Every swept value x repetition, in a deterministic record order."""
    jobs = [(spec, v, r) for v in spec.points() for r in range(spec.repetitions)]
    if workers <= 1 or len(jobs) == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    return [rec for recs in results for rec in recs]


# -- MMD ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MmdResult:
    statistic: float
    p_value: float
    n_permutations: int
    bandwidth: float


def _check_pair(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ConfigError(f"column counts differ: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ConfigError("each sample needs at least 2 rows")
    return X, Y


def _sq_dists(Z: np.ndarray) -> np.ndarray:
    sq = np.sum(Z * Z, axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T), 0.0)


def median_bandwidth(Z: np.ndarray) -> float:
    """Median pairwise distance over distinct pairs; 1.0 if all rows coincide."""
    D = np.sqrt(_sq_dists(Z))
    iu = np.triu_indices(Z.shape[0], k=1)
    med = float(np.median(D[iu]))
    return med if med > 0 else 1.0


def _kernel(Z: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-_sq_dists(Z) / (2.0 * bandwidth**2))


def _weights(labels: np.ndarray, n: int, m: int) -> np.ndarray:
    # a^T K a = mean_XX + mean_YY - 2 mean_XY with a = 1/n on X rows, -1/m on Y rows
    return np.where(labels, 1.0 / n, -1.0 / m)


def mmd(X, Y, bandwidth: float | None = None) -> float:
    """Biased squared MMD with an RBF kernel (median-heuristic bandwidth by default)."""
    X, Y = _check_pair(X, Y)
    Z = np.vstack([X, Y])
    bw = median_bandwidth(Z) if bandwidth is None else bandwidth
    K = _kernel(Z, bw)
    n = X.shape[0]
    stat = K[:n, :n].mean() + K[n:, n:].mean() - 2.0 * K[:n, n:].mean()
    return max(float(stat), 0.0)


def mmd_permutation_test(X, Y, n_permutations: int = 10_000, seed: int = 0, chunk: int = 1000) -> MmdResult:
    """Permutation p-value ``(1 + #{perm >= observed}) / (B + 1)``.

    The bandwidth comes from the pooled sample, so it is the same for every
    relabelling and the kernel matrix is computed once.
    """
    X, Y = _check_pair(X, Y)
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    n, m = X.shape[0], Y.shape[0]
    Z = np.vstack([X, Y])
    bw = median_bandwidth(Z)
    K = _kernel(Z, bw)
    labels = np.r_[np.ones(n, dtype=bool), np.zeros(m, dtype=bool)]
    a = _weights(labels, n, m)
    observed = float(a @ K @ a)
    tol = 1e-12 * max(1.0, abs(observed))
    rng = np.random.default_rng(seed)
    exceed = 0
    done = 0
    while done < n_permutations:
        b = min(chunk, n_permutations - done)
        A = rng.permuted(np.tile(a, (b, 1)), axis=1)
        stats = np.einsum("ij,ij->i", A @ K, A)
        exceed += int(np.count_nonzero(stats >= observed - tol))
        done += b
    return MmdResult(max(observed, 0.0), (1 + exceed) / (n_permutations + 1), n_permutations, bw)


# -- aggregation and output ------------------------------------------------------------


def aggregate(records) -> list[dict]:
    """Per (setting, swept value, method) statistics of the average RMSE.

    Each row also carries ``improvement_pct``, the relative gain of
    MTL-HMB's mean over this method's mean (empty for MTL-HMB itself or
    when either is missing).
    """
    records = list(records)
    if not records:
        raise ConfigError("no records to aggregate")
    groups: dict[tuple, list] = {}
    failed: dict[tuple, int] = {}
    for r in records:
        if r.task != AVG:
            continue
        key = (r.setting, r.sweep_param, r.sweep_value, r.method)
        groups.setdefault(key, [])
        failed.setdefault(key, 0)
        if r.status == "ok":
            groups[key].append(r.rmse)
        else:
            failed[key] += 1
    rows = []
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        row = dict(zip(("setting", "sweep_param", "sweep_value", "method"), key))
        row["n"] = int(v.size)
        row["n_failed"] = failed[key]
        if v.size:
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
            row.update(
                mean=float(v.mean()),
                sd=float(v.std(ddof=1)) if v.size > 1 else 0.0,
                min=float(q[0]),
                q1=float(q[1]),
                median=float(q[2]),
                q3=float(q[3]),
                max=float(q[4]),
            )
        else:
            row.update({k: math.nan for k in ("mean", "sd", "min", "q1", "median", "q3", "max")})
        rows.append(row)
    ours = {(r["setting"], r["sweep_param"], r["sweep_value"]): r["mean"] for r in rows if r["method"] == OURS}
    for row in rows:
        mine = ours.get((row["setting"], row["sweep_param"], row["sweep_value"]))
        base = row["mean"]
        if row["method"] == OURS or mine is None or not np.isfinite(base) or base == 0:
            row["improvement_pct"] = math.nan
        else:
            row["improvement_pct"] = 100.0 * (base - mine) / base
    return rows


SUMMARY_COLUMNS = (
    "setting",
    "sweep_param",
    "sweep_value",
    "method",
    "n",
    "n_failed",
    "mean",
    "sd",
    "min",
    "q1",
    "median",
    "q3",
    "max",
    "improvement_pct",
)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return x


def records_csv(records) -> str:
    return _csv_text(RECORD_COLUMNS, [asdict(r) for r in records])


def timings_csv(records) -> str:
    rows = [asdict(r) for r in records if r.task == AVG]
    return _csv_text(("setting", "sweep_value", "repetition", "method", "wall_time"), rows)


def _json_safe(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def write_outputs(records, out_dir, spec: ExperimentSpec | None = None) -> dict[str, Path]:
    """records.csv, timings.csv, summary.csv and summary.json, each written atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    summary = aggregate(records)
    paths = {
        "records": out / "records.csv",
        "timings": out / "timings.csv",
        "summary": out / "summary.csv",
        "summary_json": out / "summary.json",
    }
    atomic_write_text(paths["records"], records_csv(records))
    atomic_write_text(paths["timings"], timings_csv(records))
    atomic_write_text(paths["summary"], _csv_text(SUMMARY_COLUMNS, summary))
    doc = {
        "spec": spec.to_dict() if spec is not None else None,
        "summary": [{k: _json_safe(v) for k, v in row.items()} for row in summary],
    }
    atomic_write_text(paths["summary_json"], json.dumps(doc, indent=2) + "\n")
    return paths
