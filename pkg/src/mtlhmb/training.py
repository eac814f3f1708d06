"""Mini-batch training loop with early stopping, shared by every model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .nn import Adam, ParamSet, Tensor, gradients


class BatchCycler:
    """Yields index batches of size ``batch_size`` over a reshuffled ``range(n)``.

    When fewer than ``batch_size`` rows remain, the permutation is redrawn
    and the batch is filled from the new one.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ConfigError("cannot draw batches from zero rows")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class TrainLog:
    """Per-check history: ``(step, train_loss, val_loss, lr)`` rows."""

    rows: list = field(default_factory=list)
    best_val: float = math.inf
    best_step: int = 0
    steps: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = ["step,train_loss,val_loss,lr"]
        for step, tr, va, lr in self.rows:
            lines.append(f"{step},{tr!r},{va!r},{lr!r}")
        return "\n".join(lines) + "\n"


def fit(
    params: ParamSet,
    loss_fn: Callable[[], Tensor],
    steps_per_epoch: int,
    *,
    val_fn: Callable[[], float] | None = None,
    lr: float = 1e-3,
    patience: int = 30,
    max_epochs: int = 300,
    max_steps: int | None = None,
    stop_below: float | None = None,
) -> TrainLog:
    """Adam over ``loss_fn`` with one validation check per epoch.

    With ``val_fn`` the parameters at the best check (the initial ones
    included) are restored on return and training stops after ``patience``
    consecutive checks without strict improvement. Without it, training
    runs for ``max_epochs`` / ``max_steps`` and keeps the final parameters;
    ``stop_below`` ends it early once the epoch-mean training loss drops
    under the threshold.
    """
    opt = Adam(lr=lr)
    log = TrainLog()
    best = params.snapshot()
    if val_fn is not None:
        log.best_val = val_fn()
        log.rows.append((0, math.nan, log.best_val, opt.effective_lr()))
    stale = 0
    for _ in range(max_epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            loss = loss_fn()
            total += loss.item()
            opt.step(params, gradients(loss, params))
            log.steps += 1
            if max_steps is not None and log.steps >= max_steps:
                break
        train_loss = total / steps_per_epoch
        if val_fn is None:
            log.rows.append((log.steps, train_loss, math.nan, opt.effective_lr()))
            if stop_below is not None and train_loss < stop_below:
                break
        else:
            val = val_fn()
            log.rows.append((log.steps, train_loss, val, opt.effective_lr()))
            if val < log.best_val:
                log.best_val, log.best_step = val, log.steps
                best = params.snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    log.stopped_early = True
                    break
        if max_steps is not None and log.steps >= max_steps:
            break
    if val_fn is not None:
        params.restore(best)
    return log


@dataclass
class GridResult:
    best_config: object
    best_model: object
    best_val: float
    evaluated: list  # (config, val_loss) in grid order


def grid_search(train_fn: Callable, candidates: Sequence) -> GridResult:
    """Exhaustive search; ``train_fn(config) -> (model, val_loss)``.

    The first candidate with the lowest validation loss wins, so grid order
    breaks ties.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("empty hyperparameter grid")
    best = None
    evaluated = []
    for cfg in candidates:
        model, val = train_fn(cfg)
        evaluated.append((cfg, val))
        if best is None or val < best[2]:
            best = (cfg, model, val)
    return GridResult(best[0], best[1], best[2], evaluated)


def seeded_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def rows_sse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over rows of the per-row mean squared error."""
    n = target.shape[0]
    return (pred - target).square().mean() * float(n)


def check_rows(counts: Iterable[int], minimum: int, what: str) -> None:
    for i, n in enumerate(counts, start=1):
        if n < minimum:
            raise ConfigError(f"{what}: task {i} has {n} training rows, need at least {minimum}")
