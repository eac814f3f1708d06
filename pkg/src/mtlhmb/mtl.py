"""Multi-task network with a shared and a task-specific pathway.

Layer 1 is a pair of encoders: the shared ``phi_c`` reads only the anchoring
source, the private ``phi_p[t]`` reads the task's full (imputed) feature
row. Layers ``2..L`` carry the shared branch forward on its own while each
task branch also sees the shared branch's previous output. A per-task head
reads ``[h_L | k_L]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import BINARY, CONTINUOUS, BlockLayout, ImputedDataset
from .errors import ConfigError, DataError
from .nn import (
    DenseLayer,
    Mlp,
    ParamSet,
    Tensor,
    concat,
    glorot_dense,
    init_mlp,
    mlp_dims,
)
from .training import BatchCycler, TrainLog, check_rows, fit, seeded_rng

MODEL_FORMAT = "mtlhmb-model"
MODEL_VERSION = 1

PRIVATE_ALL = "all"  # phi_p reads [x_0 | x_1 | ... | x_T]
PRIVATE_OWN = "own"  # phi_p reads only the task's own source (HTL baseline)


@dataclass(frozen=True)
class MtlConfig:
    width: int = 64  # encoder hidden width
    depth: int = 3  # dense layers per encoder
    latent_dim: int | None = None  # d_h = d_k; defaults to width
    path_depth: int = 3  # L
    path_width: int | None = None  # defaults to width
    gamma: float = 0.1
    delta: float = 0.1
    kappa: float = 0.1
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 30
    max_epochs: int = 300
    seed: int = 0
    private_sources: str = PRIVATE_ALL

    def __post_init__(self):
        for name in ("width", "depth", "path_depth", "batch_size", "patience", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"MtlConfig.{name} must be positive")
        if min(self.gamma, self.delta, self.kappa) < 0:
            raise ConfigError("regularization weights must be non-negative")
        if self.private_sources not in (PRIVATE_ALL, PRIVATE_OWN):
            raise ConfigError(f"unknown private_sources {self.private_sources!r}")

    @property
    def d_latent(self) -> int:
        return self.latent_dim or self.width

    @property
    def d_path(self) -> int:
        return self.path_width or self.width


MTL_GRID = {
    "width": (32, 64, 128),
    "depth": (2, 3, 4),
    "path_depth": (2, 3, 4),
    "batch_size": (8, 16, 32),
    "reg": (0.01, 0.1, 1.0),
}
REDUCED_GRID = {"width": (32, 64), "depth": (2, 3), "batch_size": (16,)}


def mtl_grid(base: MtlConfig, mode: str) -> list[MtlConfig]:
    """Candidate configs for ``mode`` in {full, reduced, fixed}; ascending width, depth, batch."""
    if mode == "fixed":
        return [base]
    if mode == "reduced":
        return [
            replace(base, width=w, depth=d, batch_size=b)
            for w in REDUCED_GRID["width"]
            for d in REDUCED_GRID["depth"]
            for b in REDUCED_GRID["batch_size"]
        ]
    if mode != "full":
        raise ConfigError(f"unknown grid mode {mode!r}")
    regs = MTL_GRID["reg"]
    return [
        replace(base, width=w, depth=d, path_depth=L, batch_size=b, gamma=g, delta=dl, kappa=k)
        for w in MTL_GRID["width"]
        for d in MTL_GRID["depth"]
        for b in MTL_GRID["batch_size"]
        for L in MTL_GRID["path_depth"]
        for g in regs
        for dl in regs
        for k in regs
    ]


@dataclass
class MtlModel:
    layout: BlockLayout
    config: MtlConfig
    response_kinds: tuple[str, ...]
    phi_c: Mlp
    phi_p: list[Mlp]
    shared_path: list[DenseLayer]
    task_paths: list[list[DenseLayer]]
    heads: list[DenseLayer]
    log: TrainLog | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.layout.T

    def private_sources(self, t: int) -> list[int]:
        if self.config.private_sources == PRIVATE_OWN:
            return [t]
        return list(range(self.T + 1))

    def private_input(self, ds, t: int) -> np.ndarray:
        return np.hstack([ds.block(t, s) for s in self.private_sources(t)])

    def params(self) -> ParamSet:
        out = ParamSet()
        out.update(self.phi_c.params("phi_c."))
        for t, enc in enumerate(self.phi_p, start=1):
            out.update(enc.params(f"phi_p{t}."))
        for l, layer in enumerate(self.shared_path, start=2):
            out[f"path_c.{l}.W"] = layer.weights
            out[f"path_c.{l}.b"] = layer.bias
        for t, layers in enumerate(self.task_paths, start=1):
            for l, layer in enumerate(layers, start=2):
                out[f"path_p{t}.{l}.W"] = layer.weights
                out[f"path_p{t}.{l}.b"] = layer.bias
        for t, head in enumerate(self.heads, start=1):
            out[f"head{t}.W"] = head.weights
            out[f"head{t}.b"] = head.bias
        return out

    # -- persistence ------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "layout": list(self.layout.source_dims),
            "config": asdict(self.config),
            "response_kinds": list(self.response_kinds),
            "params": {k: v.data.tolist() for k, v in self.params().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> MtlModel:
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ConfigError(
                f"model file has format {d.get('format')!r} v{d.get('version')}, "
                f"expected {MODEL_FORMAT!r} v{MODEL_VERSION}"
            )
        model = init_mtl(BlockLayout(tuple(d["layout"])), MtlConfig(**d["config"]), tuple(d["response_kinds"]))
        params = model.params()
        if set(params) != set(d["params"]):
            raise ConfigError("model file parameters do not match its architecture")
        for k, p in params.items():
            arr = np.asarray(d["params"][k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter {k}: shape {arr.shape}, expected {p.data.shape}")
            p.data = arr
        return model


def init_mtl(layout: BlockLayout, config: MtlConfig, response_kinds=None) -> MtlModel:
    T = layout.T
    kinds = tuple(response_kinds or (CONTINUOUS,) * T)
    if len(kinds) != T:
        raise ConfigError("one response kind per task is required")
    rng = seeded_rng(config.seed, 7919)
    d_lat, d_path = config.d_latent, config.d_path
    phi_c = init_mlp(mlp_dims(layout.source_dims[0], config.width, config.depth, d_lat), "relu", rng, "relu")
    phi_p = []
    for t in range(1, T + 1):
        in_dim = layout.source_dims[t] if config.private_sources == PRIVATE_OWN else layout.total_dim
        phi_p.append(init_mlp(mlp_dims(in_dim, config.width, config.depth, d_lat), "relu", rng, "relu"))
    shared_path = []
    d_c = d_p = d_lat
    for _ in range(2, config.path_depth + 1):
        shared_path.append(glorot_dense(rng, d_c, d_path, "relu"))
        d_c = d_path
    task_paths = []
    for _ in range(T):
        layers, d_c, d_p = [], d_lat, d_lat
        for _ in range(2, config.path_depth + 1):
            layers.append(glorot_dense(rng, d_c + d_p, d_path, "relu"))
            d_c = d_p = d_path
        task_paths.append(layers)
    heads = [
        glorot_dense(rng, d_c + d_p, 1, "sigmoid" if kind == BINARY else "identity") for kind in kinds
    ]
    return MtlModel(layout, config, kinds, phi_c, phi_p, shared_path, task_paths, heads)


def mtl_forward(model: MtlModel, t: int, x0, x_private) -> tuple[Tensor, Tensor, Tensor]:
    """Prediction plus the layer-1 shared (``H``) and private (``K``) codes for task ``t``."""
    if not 1 <= t <= model.T:
        raise ConfigError(f"unknown task {t}")
    H = model.phi_c(x0)
    K = model.phi_p[t - 1](x_private)
    h, k = H, K
    for shared, private in zip(model.shared_path, model.task_paths[t - 1]):
        h, k = shared(h), private(concat([h, k]))
    out = model.heads[t - 1](concat([h, k]))
    return out, H, K


def r_orth(H, K) -> Tensor:
    """Squared Frobenius norm of ``H^T K``."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    K = K if isinstance(K, Tensor) else Tensor(K)
    if H.shape[0] != K.shape[0]:
        raise ConfigError(f"H has {H.shape[0]} rows, K has {K.shape[0]}")
    return (H.T @ K).square().sum()


def r_imp(model: MtlModel) -> Tensor:
    """Squared norm of the first-layer private-encoder weights fed by imputed sources."""
    total = Tensor(0.0)
    if model.config.private_sources != PRIVATE_ALL:
        return total
    layout = model.layout
    for t in range(1, model.T + 1):
        W = model.phi_p[t - 1].layers[0].weights
        for s in range(1, model.T + 1):
            if s != t:
                total = total + W[layout.source_slice(s), :].square().sum()
    return total


def r_dr(model: MtlModel) -> Tensor:
    """Overlap between each shared path layer and the shared-input rows of the task layer."""
    total = Tensor(0.0)
    for layers in model.task_paths:
        for shared, private in zip(model.shared_path, layers):
            d_in = shared.in_dim
            total = total + (shared.weights.T @ private.weights[:d_in, :]).square().sum()
    return total


def task_loss(pred: Tensor, y: np.ndarray, kind: str) -> Tensor:
    """Per-row loss summed over rows: squared error or binary cross-entropy."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    n = float(y.shape[0])
    if kind == BINARY:
        p = pred.clip(1e-7, 1.0 - 1e-7)
        return -(p.log() * y + (1.0 - p).log() * (1.0 - y)).mean() * n
    return (pred - y).square().mean() * n


def total_loss(model: MtlModel, batches, gamma=None, delta=None, kappa=None, parts: dict | None = None) -> Tensor:
    """Integrated loss plus weighted regularizers.

    ``batches`` holds one ``(x0, x_private, y)`` triple per task. Weights
    default to the model config. When ``parts`` is a dict the unweighted
    components are stored in it.
    """
    cfg = model.config
    gamma = cfg.gamma if gamma is None else gamma
    delta = cfg.delta if delta is None else delta
    kappa = cfg.kappa if kappa is None else kappa
    integ = Tensor(0.0)
    orth = Tensor(0.0)
    for t, (x0, xp, y) in enumerate(batches, start=1):
        pred, H, K = mtl_forward(model, t, x0, xp)
        integ = integ + task_loss(pred, y, model.response_kinds[t - 1])
        if gamma:
            orth = orth + r_orth(H, K)
    loss = integ
    if gamma:
        loss = loss + gamma * orth
    imp = r_imp(model) if delta else Tensor(0.0)
    dr = r_dr(model) if kappa else Tensor(0.0)
    if delta:
        loss = loss + delta * imp
    if kappa:
        loss = loss + kappa * dr
    if parts is not None:
        parts.update(integ=integ.item(), orth=orth.item(), imp=imp.item(), dr=dr.item())
    return loss


def _task_arrays(model: MtlModel, ds) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if model.config.private_sources == PRIVATE_ALL and not isinstance(ds, ImputedDataset):
        if ds.T > 1:
            raise DataError("the full-feature encoder needs an imputed dataset")
        ds = ImputedDataset(ds, {})
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    return [(base.task(t).X0, model.private_input(ds, t), base.task(t).y) for t in range(1, model.T + 1)]


def predict(model: MtlModel, t: int, x0, x_private) -> np.ndarray:
    pred, _, _ = mtl_forward(model, t, np.asarray(x0, dtype=np.float64), np.asarray(x_private, dtype=np.float64))
    return pred.data[:, 0]


def predict_dataset(model: MtlModel, ds) -> list[np.ndarray]:
    return [predict(model, t, x0, xp) for t, (x0, xp, _) in enumerate(_task_arrays(model, ds), start=1)]


def validation_loss(model: MtlModel, arrays) -> float:
    """Sum over tasks of the mean per-row loss."""
    total = 0.0
    for t, (x0, xp, y) in enumerate(arrays, start=1):
        if len(y) == 0:
            continue
        pred, _, _ = mtl_forward(model, t, x0, xp)
        total += task_loss(pred, y, model.response_kinds[t - 1]).item() / len(y)
    return total


def train_mtl(
    train,
    config: MtlConfig = MtlConfig(),
    val=None,
    *,
    max_steps: int | None = None,
    stop_below: float | None = None,
) -> MtlModel:
    """Joint mini-batch training; every step draws ``batch_size`` rows per task.

    ``train``/``val`` are imputed datasets (or raw ones when the private
    encoders read only each task's own source). Early stopping monitors
    the summed validation loss; without ``val`` training runs to
    ``max_epochs``/``max_steps``.
    """
    base = train.base if isinstance(train, ImputedDataset) else train
    check_rows(base.sizes(), 2, "train_mtl")
    model = init_mtl(base.layout, config, tuple(task.response_kind for task in base.tasks))
    params = model.params()
    arrays = _task_arrays(model, train)
    val_arrays = _task_arrays(model, val) if val is not None else None
    rng = seeded_rng(config.seed, 104729)
    cyclers = [BatchCycler(len(y), config.batch_size, rng) for _, _, y in arrays]

    def loss_fn() -> Tensor:
        batches = []
        for (x0, xp, y), cyc in zip(arrays, cyclers):
            i = cyc.next()
            batches.append((x0[i], xp[i], y[i]))
        return total_loss(model, batches)

    steps = math.ceil(max(base.sizes()) / config.batch_size)
    model.log = fit(
        params,
        loss_fn,
        steps,
        val_fn=(lambda: validation_loss(model, val_arrays)) if val_arrays else None,
        lr=config.lr,
        patience=config.patience,
        max_epochs=config.max_epochs,
        max_steps=max_steps,
        stop_below=stop_below,
    )
    return model


def training_integ_loss(model: MtlModel, ds) -> float:
    """Integrated loss summed over every training row of every task."""
    total = 0.0
    for t, (x0, xp, y) in enumerate(_task_arrays(model, ds), start=1):
        pred, _, _ = mtl_forward(model, t, x0, xp)
        total += task_loss(pred, y, model.response_kinds[t - 1]).item()
    return total


def export_latents(model: MtlModel, ds) -> list[tuple[str, int, str, np.ndarray]]:
    """``(task_id, row_id, kind, vector)`` rows, shared code then private code per sample."""
    base = ds.base if isinstance(ds, ImputedDataset) else ds
    out = []
    for t, (x0, xp, _) in enumerate(_task_arrays(model, ds), start=1):
        _, H, K = mtl_forward(model, t, x0, xp)
        task_id = base.task(t).task_id
        for i in range(H.shape[0]):
            out.append((task_id, i, "shared", H.data[i]))
            out.append((task_id, i, "specific", K.data[i]))
    return out


def latents_to_csv(rows) -> str:
    width = max((len(v) for *_, v in rows), default=0)
    lines = ["task_id,row_id,kind," + ",".join(f"z{j}" for j in range(width))]
    for task_id, i, kind, vec in rows:
        cells = [repr(float(v)) for v in vec] + [""] * (width - len(vec))
        lines.append(f"{task_id},{i},{kind}," + ",".join(cells))
    return "\n".join(lines) + "\n"
