"""Containers for multi-source, block-wise missing multi-task data.

Task ``t`` (1-based) always observes the anchoring source 0 and its own
source ``t``; every other ``(t, s)`` block is missing until imputed.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

CONTINUOUS = "continuous"
BINARY = "binary"
SD_FLOOR = 1e-12


@dataclass(frozen=True)
class BlockLayout:
    source_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.source_dims)
        if len(dims) < 2:
            raise ConfigError("need an anchoring source and at least one task-specific source")
        if any(d < 1 for d in dims):
            raise ConfigError(f"source dims must be positive, got {dims}")
        object.__setattr__(self, "source_dims", dims)

    @property
    def T(self) -> int:
        return len(self.source_dims) - 1

    @property
    def observed(self) -> frozenset[tuple[int, int]]:
        return frozenset((t, s) for t in range(1, self.T + 1) for s in (0, t))

    @property
    def missing(self) -> list[tuple[int, int]]:
        return [(t, s) for t in range(1, self.T + 1) for s in range(1, self.T + 1) if s != t]

    @property
    def total_dim(self) -> int:
        return sum(self.source_dims)

    def source_slice(self, s: int) -> slice:
        start = sum(self.source_dims[:s])
        return slice(start, start + self.source_dims[s])


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    X0: np.ndarray
    Xt: np.ndarray
    y: np.ndarray
    response_kind: str = CONTINUOUS

    def __post_init__(self):
        X0 = np.asarray(self.X0, dtype=np.float64)
        Xt = np.asarray(self.Xt, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X0.ndim != 2 or Xt.ndim != 2:
            raise DataError(f"task {self.task_id}: feature blocks must be 2-D")
        if not (X0.shape[0] == Xt.shape[0] == y.shape[0]):
            raise DataError(
                f"task {self.task_id}: row counts differ "
                f"(X0 {X0.shape[0]}, Xt {Xt.shape[0]}, y {y.shape[0]})"
            )
        for name, arr in (("X0", X0), ("Xt", Xt), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"task {self.task_id}: {name} has non-finite entries")
        if self.response_kind not in (CONTINUOUS, BINARY):
            raise DataError(f"task {self.task_id}: unknown response kind {self.response_kind!r}")
        if self.response_kind == BINARY and not np.all((y == 0) | (y == 1)):
            raise DataError(f"task {self.task_id}: binary response must be 0/1")
        object.__setattr__(self, "X0", X0)
        object.__setattr__(self, "Xt", Xt)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def rows(self, idx) -> TaskDataset:
        idx = np.asarray(idx, dtype=int)
        return replace(self, X0=self.X0[idx], Xt=self.Xt[idx], y=self.y[idx])


@dataclass(frozen=True)
class MultiTaskDataset:
    layout: BlockLayout
    tasks: tuple[TaskDataset, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if len(tasks) != self.layout.T:
            raise DataError(f"layout has T={self.layout.T} but {len(tasks)} tasks were given")
        p = self.layout.source_dims
        for t, task in enumerate(tasks, start=1):
            if task.X0.shape[1] != p[0]:
                raise DataError(f"task {task.task_id}: anchor has {task.X0.shape[1]} cols, expected {p[0]}")
            if task.Xt.shape[1] != p[t]:
                raise DataError(f"task {task.task_id}: source {t} has {task.Xt.shape[1]} cols, expected {p[t]}")

    @property
    def T(self) -> int:
        return self.layout.T

    def task(self, t: int) -> TaskDataset:
        """Task by 1-based position."""
        if not 1 <= t <= self.T:
            raise ConfigError(f"unknown task {t}")
        return self.tasks[t - 1]

    def block(self, t: int, s: int) -> np.ndarray:
        if s == 0:
            return self.task(t).X0
        if s == t:
            return self.task(t).Xt
        raise DataError(f"block ({t}, {s}) is not observed")

    def subset(self, rows: list) -> MultiTaskDataset:
        return MultiTaskDataset(self.layout, tuple(task.rows(r) for task, r in zip(self.tasks, rows)))

    def sizes(self) -> list[int]:
        return [task.n for task in self.tasks]


@dataclass(frozen=True)
class ImputedDataset:
    """A dataset whose missing blocks have been filled in.

    ``imputed`` maps ``(t, s)`` to an ``n_t x p_s`` matrix for every block
    outside the observed set.
    """

    base: MultiTaskDataset
    imputed: dict = field(default_factory=dict)

    def __post_init__(self):
        layout = self.base.layout
        for (t, s), block in self.imputed.items():
            if (t, s) in layout.observed:
                raise DataError(f"block ({t}, {s}) is observed and cannot be imputed")
            want = (self.base.task(t).n, layout.source_dims[s])
            if np.shape(block) != want:
                raise DataError(f"imputed block ({t}, {s}) has shape {np.shape(block)}, expected {want}")
        absent = [key for key in layout.missing if key not in self.imputed]
        if absent:
            raise DataError(f"missing blocks not imputed: {absent}")

    @property
    def layout(self) -> BlockLayout:
        return self.base.layout

    @property
    def T(self) -> int:
        return self.base.T

    def provenance(self, t: int, s: int) -> str:
        return "observed" if (t, s) in self.layout.observed else "imputed"

    def block(self, t: int, s: int) -> np.ndarray:
        if (t, s) in self.layout.observed:
            return self.base.block(t, s)
        return self.imputed[(t, s)]

    def full_features(self, t: int) -> np.ndarray:
        """``[x_0 | x_1 | ... | x_T]`` for task ``t`` with imputed blocks in place."""
        return np.hstack([self.block(t, s) for s in range(self.T + 1)])

    def subset(self, rows: list) -> ImputedDataset:
        rows = [np.asarray(r, dtype=int) for r in rows]
        return ImputedDataset(
            self.base.subset(rows),
            {(t, s): b[rows[t - 1]] for (t, s), b in self.imputed.items()},
        )


# -- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"split fractions must be three non-negative numbers, got {self.fractions}")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    """Floor the validation and test shares, give the remainder to training."""
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_indices(ds: MultiTaskDataset, spec: SplitSpec) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for task in ds.tasks:
        sizes = split_sizes(task.n, spec.fractions)
        for size, frac in zip(sizes, spec.fractions):
            if frac > 0 and size < 1:
                raise DataError(
                    f"task {task.task_id}: {task.n} rows cannot fill a split with fractions {spec.fractions}"
                )
        perm = rng.permutation(task.n)
        a, b = sizes[0], sizes[0] + sizes[1]
        out.append((np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])))
    return out


def split(ds, spec: SplitSpec):
    """Per-task train/validation/test partition; works for raw or imputed datasets."""
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    idx = split_indices(base, spec)
    return tuple(ds.subset([parts[k] for parts in idx]) for k in range(3))


# -- standardisation ----------------------------------------------------------


@dataclass(frozen=True)
class StandardizationStats:
    source_mean: tuple[np.ndarray, ...]
    source_sd: tuple[np.ndarray, ...]
    y_mean: tuple[float, ...]
    y_sd: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "source_mean": [m.tolist() for m in self.source_mean],
            "source_sd": [s.tolist() for s in self.source_sd],
            "y_mean": list(self.y_mean),
            "y_sd": list(self.y_sd),
        }

    @classmethod
    def from_dict(cls, d: dict) -> StandardizationStats:
        return cls(
            tuple(np.asarray(m, dtype=np.float64) for m in d["source_mean"]),
            tuple(np.asarray(s, dtype=np.float64) for s in d["source_sd"]),
            tuple(float(v) for v in d["y_mean"]),
            tuple(float(v) for v in d["y_sd"]),
        )

    def transform_block(self, s: int, X: np.ndarray) -> np.ndarray:
        return (X - self.source_mean[s]) / self.source_sd[s]

    def inverse_block(self, s: int, Z: np.ndarray) -> np.ndarray:
        return Z * self.source_sd[s] + self.source_mean[s]

    def transform_y(self, t: int, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean[t - 1]) / self.y_sd[t - 1]

    def inverse_y(self, t: int, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.y_sd[t - 1] + self.y_mean[t - 1]


def _mean_sd(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    sd = X.std(axis=0)  # population convention
    sd = np.where(sd < SD_FLOOR, 1.0, sd)
    return mean, sd


def standardize_fit(train: MultiTaskDataset) -> StandardizationStats:
    """Column statistics from training rows.

    The anchoring source is pooled over all tasks; source ``t`` uses task
    ``t``. Binary responses are left on their 0/1 scale.
    """
    if isinstance(train, ImputedDataset):
        train = train.base
    means, sds = [], []
    m, s = _mean_sd(np.vstack([task.X0 for task in train.tasks]))
    means.append(m)
    sds.append(s)
    for task in train.tasks:
        m, s = _mean_sd(task.Xt)
        means.append(m)
        sds.append(s)
    y_mean, y_sd = [], []
    for task in train.tasks:
        if task.response_kind == BINARY:
            y_mean.append(0.0)
            y_sd.append(1.0)
        else:
            mu, sd = _mean_sd(task.y.reshape(-1, 1))
            y_mean.append(float(mu[0]))
            y_sd.append(float(sd[0]))
    return StandardizationStats(tuple(means), tuple(sds), tuple(y_mean), tuple(y_sd))


def _map_dataset(stats: StandardizationStats, ds, block_fn, y_fn):
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    tasks = []
    for t, task in enumerate(base.tasks, start=1):
        y = task.y if task.response_kind == BINARY else y_fn(t, task.y)
        tasks.append(replace(task, X0=block_fn(0, task.X0), Xt=block_fn(t, task.Xt), y=y))
    new_base = MultiTaskDataset(base.layout, tuple(tasks))
    if isinstance(ds, ImputedDataset):
        return ImputedDataset(new_base, {(t, s): block_fn(s, b) for (t, s), b in ds.imputed.items()})
    return new_base


def standardize_apply(stats: StandardizationStats, ds):
    return _map_dataset(stats, ds, stats.transform_block, stats.transform_y)


def standardize_invert(stats: StandardizationStats, ds):
    return _map_dataset(stats, ds, stats.inverse_block, stats.inverse_y)


# -- CSV ingestion --------------------------------------------------------------


def read_matrix(path: Path, header: bool = False, expected_cols: int | None = None) -> np.ndarray:
    """Parse a numeric CSV; every problem is reported with file, row and column."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col}: non-finite value {cell!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    if expected_cols is not None and X.shape[1] != expected_cols:
        raise DataError(f"{path}: {X.shape[1]} columns but manifest says {expected_cols}")
    return X


def write_matrix(path: Path, X: np.ndarray) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in X:
            writer.writerow([repr(float(v)) for v in row])


def _read_manifest(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(manifest.get("tasks"), list) or not manifest["tasks"]:
        raise DataError(f"{path}: manifest needs a non-empty 'tasks' list")
    return manifest


def _load(path: Path):
    path = Path(path)
    manifest = _read_manifest(path)
    root = path.parent
    header = bool(manifest.get("header", False))
    T = len(manifest["tasks"])
    dims: dict[int, int] = {}
    tasks, imputed = [], {}
    for t, entry in enumerate(manifest["tasks"], start=1):
        try:
            task_id = str(entry["id"])
            sources = entry["sources"]
            response_path = entry["response_path"]
        except KeyError as exc:
            raise DataError(f"{path}: task {t} lacks key {exc}") from None
        blocks = {}
        for src in sources:
            s, dim = int(src["source_id"]), int(src["dim"])
            if not 0 <= s <= T:
                raise DataError(f"{path}: task {task_id} names source {s}, only 0..{T} exist")
            if dims.setdefault(s, dim) != dim:
                raise DataError(f"{path}: source {s} declared with dims {dims[s]} and {dim}")
            X = read_matrix(root / src["path"], header, dim)
            kind = src.get("provenance", "observed")
            if kind == "imputed":
                imputed[(t, s)] = X
            else:
                blocks[s] = X
        if set(blocks) != {0, t}:
            raise DataError(
                f"{path}: task {task_id} (position {t}) must observe exactly sources 0 and {t}, "
                f"found {sorted(blocks)}"
            )
        y = read_matrix(root / response_path, header)
        if y.shape[1] != 1:
            raise DataError(f"{root / response_path}: response must have one column, found {y.shape[1]}")
        n = {blocks[0].shape[0], blocks[t].shape[0], y.shape[0]}
        if len(n) != 1:
            raise DataError(f"{path}: task {task_id} blocks have differing row counts {sorted(n)}")
        tasks.append(
            TaskDataset(task_id, blocks[0], blocks[t], y[:, 0], entry.get("response_kind", CONTINUOUS))
        )
    missing_dims = [s for s in range(T + 1) if s not in dims]
    if missing_dims:
        raise DataError(f"{path}: no dims given for sources {missing_dims}")
    layout = BlockLayout(tuple(dims[s] for s in range(T + 1)))
    return MultiTaskDataset(layout, tuple(tasks)), imputed


def load_csv(manifest_path) -> MultiTaskDataset:
    """Load the observed blocks listed in a dataset manifest."""
    ds, _ = _load(Path(manifest_path))
    return ds


def load_imputed(manifest_path) -> ImputedDataset:
    ds, imputed = _load(Path(manifest_path))
    return ImputedDataset(ds, imputed)


def save_csv(ds, out_dir) -> Path:
    """Write a (possibly imputed) dataset as header-less CSVs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    entries = []
    for t, task in enumerate(base.tasks, start=1):
        sources = []
        for s in range(base.T + 1):
            if (t, s) in base.layout.observed:
                X, prov = base.block(t, s), "observed"
            elif isinstance(ds, ImputedDataset):
                X, prov = ds.imputed[(t, s)], "imputed"
            else:
                continue
            name = f"task{t}_source{s}.csv"
            write_matrix(out / name, X)
            sources.append({"source_id": s, "path": name, "dim": base.layout.source_dims[s], "provenance": prov})
        resp = f"task{t}_y.csv"
        write_matrix(out / resp, task.y.reshape(-1, 1))
        entries.append(
            {"id": task.task_id, "sources": sources, "response_path": resp, "response_kind": task.response_kind}
        )
    manifest = out / "manifest.json"
    atomic_write_text(manifest, json.dumps({"header": False, "tasks": entries}, indent=2))
    return manifest


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
