"""Comparison methods and ablations.

* STL - one feed-forward regressor per task on its observed blocks
* HTL - the dual-path network with private encoders reading only each
  task's own source and no imputation
* HPS - a shared trunk on imputed full features with per-task output layers
* Step1+STL - STL on imputed full features
* naive imputation - a single encoder/predictor fit on the source's own
  task, ignoring the other tasks
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BINARY, ImputedDataset, MultiTaskDataset, TaskDataset
from .errors import ConfigError, DataError
from .hbi import HbiConfig, holdout_target_rows, prediction_loss
from .mtl import PRIVATE_OWN, MtlConfig, MtlModel, task_loss, train_mtl
from .nn import DenseLayer, Mlp, ParamSet, Tensor, glorot_dense, init_mlp, mlp_dims
from .training import BatchCycler, TrainLog, check_rows, fit, grid_search, rows_sse, seeded_rng

STL_GRID = {"width": (32, 64, 128), "depth": (2, 3, 4, 5), "batch_size": (8, 16, 32)}
STL_REDUCED = {"width": (32, 64), "depth": (2, 3), "batch_size": (16,)}


@dataclass(frozen=True)
class StlConfig:
    width: int = 64
    depth: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 30
    max_epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("width", "depth", "batch_size", "patience", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"StlConfig.{name} must be positive")


def stl_grid(base: StlConfig, mode: str) -> list[StlConfig]:
    if mode == "fixed":
        return [base]
    grid = {"full": STL_GRID, "reduced": STL_REDUCED}.get(mode)
    if grid is None:
        raise ConfigError(f"unknown grid mode {mode!r}")
    return [
        replace(base, width=w, depth=d, batch_size=b)
        for w in grid["width"]
        for d in grid["depth"]
        for b in grid["batch_size"]
    ]


# -- single-task regressor --------------------------------------------------------


@dataclass
class StlModel:
    net: Mlp
    kind: str
    log: TrainLog | None = field(default=None, repr=False)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.net(np.asarray(X, dtype=np.float64)).data[:, 0]


def fit_regressor(X, y, config: StlConfig, X_val=None, y_val=None, kind: str = "continuous", key: int = 0) -> StlModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise DataError(f"need at least 2 training rows, got {X.shape[0]}")
    rng = seeded_rng(config.seed, 15485863, key)
    out_act = "sigmoid" if kind == BINARY else "identity"
    net = init_mlp(mlp_dims(X.shape[1], config.width, config.depth, 1), "relu", rng, out_act)
    model = StlModel(net, kind)
    params = net.params()
    cyc = BatchCycler(X.shape[0], config.batch_size, rng)

    def loss_fn() -> Tensor:
        i = cyc.next()
        return task_loss(net(X[i]), y[i], kind)

    val_fn = None
    if X_val is not None and len(y_val):
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.float64)
        val_fn = lambda: task_loss(net(X_val), y_val, kind).item() / len(y_val)  # noqa: E731
    model.log = fit(
        params,
        loss_fn,
        math.ceil(X.shape[0] / cyc.batch_size),
        val_fn=val_fn,
        lr=config.lr,
        patience=config.patience,
        max_epochs=config.max_epochs,
    )
    return model


def observed_features(task: TaskDataset) -> np.ndarray:
    return np.hstack([task.X0, task.Xt])


def train_stl(task: TaskDataset, config: StlConfig = StlConfig(), val: TaskDataset | None = None, key: int = 0) -> StlModel:
    """Regressor on ``[x_0 | x_t]`` of a single task; never sees other tasks."""
    X_val = observed_features(val) if val is not None else None
    y_val = val.y if val is not None else None
    return fit_regressor(observed_features(task), task.y, config, X_val, y_val, task.response_kind, key)


def train_stl_imputed(train: ImputedDataset, t: int, config: StlConfig = StlConfig(), val: ImputedDataset | None = None) -> StlModel:
    """Step1+STL: regressor on task ``t``'s full imputed feature row."""
    task = train.base.task(t)
    X_val = val.full_features(t) if val is not None else None
    y_val = val.base.task(t).y if val is not None else None
    return fit_regressor(train.full_features(t), task.y, config, X_val, y_val, task.response_kind, t)


# -- HTL -------------------------------------------------------------------------------


def train_htl(train: MultiTaskDataset, config: MtlConfig = MtlConfig(), val: MultiTaskDataset | None = None) -> MtlModel:
    """Dual-path network without imputation; R_imp does not apply."""
    if isinstance(train, ImputedDataset) or isinstance(val, ImputedDataset):
        raise DataError("HTL works on the raw block-wise missing data, not imputed blocks")
    return train_mtl(train, replace(config, private_sources=PRIVATE_OWN, delta=0.0), val)


# -- hard parameter sharing --------------------------------------------------------------


@dataclass
class HpsModel:
    trunk: Mlp
    heads: list[DenseLayer]
    kinds: tuple[str, ...]
    log: TrainLog | None = field(default=None, repr=False)

    def params(self) -> ParamSet:
        out = self.trunk.params("trunk.")
        for t, head in enumerate(self.heads, start=1):
            out[f"head{t}.W"] = head.weights
            out[f"head{t}.b"] = head.bias
        return out

    def forward(self, t: int, X) -> Tensor:
        return self.heads[t - 1](self.trunk(X))

    def predict(self, t: int, X) -> np.ndarray:
        return self.forward(t, np.asarray(X, dtype=np.float64)).data[:, 0]


def train_hps(train: ImputedDataset, config: StlConfig = StlConfig(), val: ImputedDataset | None = None) -> HpsModel:
    """Shared trunk on ``[x_0 | ... | x_T]`` with one affine output layer per task."""
    base = train.base
    check_rows(base.sizes(), 2, "train_hps")
    rng = seeded_rng(config.seed, 32452843)
    trunk = init_mlp(mlp_dims(base.layout.total_dim, config.width, config.depth, config.width), "relu", rng, "relu")
    kinds = tuple(task.response_kind for task in base.tasks)
    heads = [glorot_dense(rng, config.width, 1, "sigmoid" if k == BINARY else "identity") for k in kinds]
    model = HpsModel(trunk, heads, kinds)
    params = model.params()
    data = [(train.full_features(t), base.task(t).y) for t in range(1, base.T + 1)]
    cyclers = [BatchCycler(len(y), config.batch_size, rng) for _, y in data]

    def loss_fn() -> Tensor:
        total = Tensor(0.0)
        for t, ((X, y), cyc) in enumerate(zip(data, cyclers), start=1):
            i = cyc.next()
            total = total + task_loss(model.forward(t, X[i]), y[i], kinds[t - 1])
        return total

    val_fn = None
    if val is not None:
        vdata = [(val.full_features(t), val.base.task(t).y) for t in range(1, base.T + 1)]

        def val_fn() -> float:
            return sum(
                task_loss(model.forward(t, X), y, kinds[t - 1]).item() / len(y)
                for t, (X, y) in enumerate(vdata, start=1)
                if len(y)
            )

    model.log = fit(
        params,
        loss_fn,
        math.ceil(max(base.sizes()) / config.batch_size),
        val_fn=val_fn,
        lr=config.lr,
        patience=config.patience,
        max_epochs=config.max_epochs,
    )
    return model


# -- naive imputation ------------------------------------------------------------------


@dataclass
class NaiveImputeModel:
    target_source: int
    E: Mlp
    G: Mlp
    log: TrainLog | None = field(default=None, repr=False)

    def params(self) -> ParamSet:
        out = self.E.params("E.")
        out.update(self.G.params("G."))
        return out

    def impute(self, x0: np.ndarray) -> np.ndarray:
        return self.G(self.E(x0)).data


def train_naive(ds: MultiTaskDataset, s: int, config: HbiConfig = HbiConfig(), val: MultiTaskDataset | None = None) -> NaiveImputeModel:
    """Encoder/predictor for source ``s`` fit on task ``s`` rows only."""
    task = ds.task(s)
    if task.n < 2:
        raise DataError(f"task {s} has {task.n} training rows, need at least 2")
    if val is None or val.task(s).n == 0:
        ds, val = holdout_target_rows(ds, s, config.seed)
        task = ds.task(s)
    rng = seeded_rng(config.seed, s)
    d = config.latent_dim
    model = NaiveImputeModel(
        s,
        init_mlp(mlp_dims(ds.layout.source_dims[0], config.width, config.depth, d), "relu", rng),
        init_mlp(mlp_dims(d, config.width, config.depth, ds.layout.source_dims[s]), "relu", rng),
    )
    cyc = BatchCycler(task.n, config.batch_size, rng)
    x0_val, xs_val = val.task(s).X0, val.task(s).Xt

    def loss_fn() -> Tensor:
        i = cyc.next()
        return rows_sse(model.G(model.E(task.X0[i])), task.Xt[i])

    model.log = fit(
        model.params(),
        loss_fn,
        math.ceil(task.n / cyc.batch_size),
        val_fn=lambda: prediction_loss(model, x0_val, xs_val),
        lr=config.lr,
        patience=config.patience,
        max_epochs=config.max_epochs,
    )
    return model


class NaiveImputer:
    def __init__(self, config: HbiConfig = HbiConfig(), grid: list[HbiConfig] | None = None):
        self.config = config
        self.grid = grid or [config]
        self.models: dict[int, NaiveImputeModel] = {}

    def fit(self, train: MultiTaskDataset, val: MultiTaskDataset | None = None) -> NaiveImputer:
        if train.T < 2:
            return self
        for s in range(1, train.T + 1):

            def run(cfg, s=s):
                model = train_naive(train, s, cfg, val)
                return model, model.log.best_val

            self.models[s] = grid_search(run, self.grid).best_model
        return self

    def transform(self, ds: MultiTaskDataset) -> ImputedDataset:
        imputed = {}
        for s, model in self.models.items():
            for r in range(1, ds.T + 1):
                if r != s:
                    imputed[(r, s)] = model.impute(ds.task(r).X0)
        return ImputedDataset(ds, imputed)


def train_naive_impute(ds: MultiTaskDataset, config: HbiConfig = HbiConfig(), val: MultiTaskDataset | None = None) -> ImputedDataset:
    return NaiveImputer(config).fit(ds, val).transform(ds)
