"""Heterogeneous block-wise imputation.

For every task-specific source ``s`` a small encoder/decoder family is fit:

* ``E_c``   - common encoder of the anchoring source, shared by all tasks
* ``E_p_t`` - private encoder for rows of task ``s``
* ``E_p_rest`` - one private encoder for rows of all other tasks
* ``D``     - decoder rebuilding the anchor from ``[f | g]``
* ``G``     - predictor of source ``s`` from the shared code ``f``

Missing blocks ``(r, s)`` are then filled with ``G(E_c(x_0^r))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ImputedDataset, MultiTaskDataset, SplitSpec, split_indices
from .errors import ConfigError, DataError
from .nn import Mlp, ParamSet, Tensor, concat, init_mlp, mlp_dims, mlp_from_dict, mlp_to_dict
from .training import BatchCycler, TrainLog, fit, grid_search, rows_sse, seeded_rng


@dataclass(frozen=True)
class HbiConfig:
    width: int = 32
    depth: int = 2
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 30
    max_epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("width", "depth", "batch_size", "patience", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"HbiConfig.{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("HbiConfig.lr must be positive")

    @property
    def latent_dim(self) -> int:
        return self.width


HBI_GRID = {"width": (8, 16, 32), "depth": (1, 2, 3), "batch_size": (8, 16, 32)}
REDUCED_DEPTHS = (1, 2)


def hbi_grid(base: HbiConfig, mode: str) -> list[HbiConfig]:
    """Candidates in ascending width, then depth, then batch size.

    The reduced grid keeps the default width and batch and tries depths 1
    and 2: a single-layer encoder/predictor is exact when the conditional
    mean of a source given the anchor is linear.
    """
    if mode == "fixed":
        return [base]
    if mode == "reduced":
        return [replace(base, depth=d) for d in REDUCED_DEPTHS]
    if mode != "full":
        raise ConfigError(f"unknown grid mode {mode!r}")
    return [
        replace(base, width=w, depth=d, batch_size=b)
        for w in HBI_GRID["width"]
        for d in HBI_GRID["depth"]
        for b in HBI_GRID["batch_size"]
    ]


@dataclass
class HbiModel:
    target_source: int
    E_c: Mlp
    E_p_t: Mlp
    E_p_rest: Mlp
    D: Mlp
    G: Mlp
    log: TrainLog | None = field(default=None, repr=False)

    def params(self) -> ParamSet:
        out = ParamSet()
        for name in ("E_c", "E_p_t", "E_p_rest", "D", "G"):
            out.update(getattr(self, name).params(f"{name}."))
        return out

    def impute(self, x0: np.ndarray) -> np.ndarray:
        return self.G(self.E_c(x0)).data

    def to_dict(self) -> dict:
        return {
            "target_source": self.target_source,
            "nets": {k: mlp_to_dict(getattr(self, k)) for k in ("E_c", "E_p_t", "E_p_rest", "D", "G")},
            "params": {k: v.data.tolist() for k, v in self.params().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> HbiModel:
        nets = {k: mlp_from_dict(v) for k, v in d["nets"].items()}
        model = cls(int(d["target_source"]), **nets)
        for k, p in model.params().items():
            p.data = np.asarray(d["params"][k], dtype=np.float64)
        return model


def init_hbi(p0: int, ps: int, target_source: int, config: HbiConfig, rng: np.random.Generator) -> HbiModel:
    w, depth, d = config.width, config.depth, config.latent_dim
    enc = mlp_dims(p0, w, depth, d)
    return HbiModel(
        target_source,
        E_c=init_mlp(enc, "relu", rng),
        E_p_t=init_mlp(enc, "relu", rng),
        E_p_rest=init_mlp(enc, "relu", rng),
        D=init_mlp(mlp_dims(2 * d, w, depth, p0), "relu", rng),
        G=init_mlp(mlp_dims(d, w, depth, ps), "relu", rng),
    )


def hbi_losses(model: HbiModel, x0_t, xs_t, x0_rest=None) -> tuple[Tensor, Tensor]:
    """Prediction and reconstruction losses, each summed over batch rows.

    ``x0_t``/``xs_t`` are anchor and target-source rows of the target task;
    ``x0_rest`` are anchor rows pooled from the other tasks (may be omitted
    when there are none).
    """
    x0_t = np.asarray(x0_t, dtype=np.float64)
    if x0_t.shape[0] == 0:
        raise ConfigError("target-task batch is empty")
    f_t = model.E_c(x0_t)
    l_pre = rows_sse(model.G(f_t), np.asarray(xs_t, dtype=np.float64))
    l_recon = rows_sse(model.D(concat([f_t, model.E_p_t(x0_t)])), x0_t)
    if x0_rest is not None and len(x0_rest):
        x0_rest = np.asarray(x0_rest, dtype=np.float64)
        rebuilt = model.D(concat([model.E_c(x0_rest), model.E_p_rest(x0_rest)]))
        l_recon = l_recon + rows_sse(rebuilt, x0_rest)
    return l_pre, l_recon


def prediction_loss(model: HbiModel, x0: np.ndarray, xs: np.ndarray) -> float:
    """Mean over rows of the per-row squared imputation error."""
    return float(np.mean((model.impute(x0) - xs) ** 2))


def holdout_target_rows(ds: MultiTaskDataset, s: int, seed: int) -> tuple[MultiTaskDataset, MultiTaskDataset]:
    """Split off 20% of task-``s`` rows for early stopping when no validation set is given."""
    idx = split_indices(ds, SplitSpec((0.8, 0.2, 0.0), seed))
    rows_tr = [np.arange(n) for n in ds.sizes()]
    rows_va = [np.arange(0) for _ in ds.sizes()]
    rows_tr[s - 1], rows_va[s - 1] = idx[s - 1][0], idx[s - 1][1]
    return ds.subset(rows_tr), ds.subset(rows_va)


def train_hbi(
    ds: MultiTaskDataset,
    target_source: int,
    config: HbiConfig = HbiConfig(),
    val: MultiTaskDataset | None = None,
) -> HbiModel:
    """Fit the imputation networks for one task-specific source.

    Each step draws ``batch_size`` rows from the target task and
    ``batch_size`` rows from every other task; an epoch is one pass over
    the largest task. Early stopping watches the prediction loss on the
    target task's validation rows.
    """
    s = target_source
    if not 1 <= s <= ds.T:
        raise ConfigError(f"source {s} does not exist (T={ds.T})")
    if ds.task(s).n < 2:
        raise DataError(f"task {s} has {ds.task(s).n} training rows, need at least 2")
    if val is None or val.task(s).n == 0:
        ds, val = holdout_target_rows(ds, s, config.seed)

    rng = seeded_rng(config.seed, s)
    model = init_hbi(ds.layout.source_dims[0], ds.layout.source_dims[s], s, config, rng)
    params = model.params()
    target = ds.task(s)
    others = [task for r, task in enumerate(ds.tasks, start=1) if r != s and task.n > 0]
    cyc_t = BatchCycler(target.n, config.batch_size, rng)
    cyc_rest = [BatchCycler(task.n, config.batch_size, rng) for task in others]
    x0_val, xs_val = val.task(s).X0, val.task(s).Xt

    def loss_fn() -> Tensor:
        i = cyc_t.next()
        rest = np.vstack([task.X0[c.next()] for task, c in zip(others, cyc_rest)]) if others else None
        l_pre, l_recon = hbi_losses(model, target.X0[i], target.Xt[i], rest)
        return l_pre + l_recon

    model.log = fit(
        params,
        loss_fn,
        math.ceil(max(ds.sizes()) / config.batch_size),
        val_fn=lambda: prediction_loss(model, x0_val, xs_val),
        lr=config.lr,
        patience=config.patience,
        max_epochs=config.max_epochs,
    )
    return model


def impute_source(model: HbiModel, ds) -> dict[int, np.ndarray]:
    """Imputed source-``s`` block for every task other than ``s``."""
    s = model.target_source
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    if base.layout.source_dims[0] != model.E_c.in_dim:
        raise ConfigError("anchor dimension does not match the imputation model")
    return {r: model.impute(base.task(r).X0) for r in range(1, base.T + 1) if r != s}


class HbiImputer:
    """Fits one imputation model per task-specific source and fills datasets."""

    def __init__(self, config: HbiConfig = HbiConfig(), grid: list[HbiConfig] | None = None):
        self.config = config
        self.grid = grid or [config]
        self.models: dict[int, HbiModel] = {}
        self.selected: dict[int, HbiConfig] = {}

    def fit(self, train: MultiTaskDataset, val: MultiTaskDataset | None = None) -> HbiImputer:
        if isinstance(train, ImputedDataset):
            train = train.base
        if isinstance(val, ImputedDataset):
            val = val.base
        if train.T < 2:
            return self  # nothing is missing with a single task
        for s in range(1, train.T + 1):

            def run(cfg, s=s):
                model = train_hbi(train, s, cfg, val)
                return model, model.log.best_val

            result = grid_search(run, self.grid)
            self.models[s] = result.best_model
            self.selected[s] = result.best_config
        return self

    def transform(self, ds: MultiTaskDataset) -> ImputedDataset:
        if isinstance(ds, ImputedDataset):
            ds = ds.base
        imputed = {}
        for s, model in self.models.items():
            for r, block in impute_source(model, ds).items():
                imputed[(r, s)] = block
        return ImputedDataset(ds, imputed)


def impute_all(
    ds: MultiTaskDataset, config: HbiConfig = HbiConfig(), val: MultiTaskDataset | None = None
) -> ImputedDataset:
    """Fit on ``ds`` (early stopping on ``val`` if given) and fill its missing blocks."""
    return HbiImputer(config).fit(ds, val).transform(ds)
