"""Synthetic multi-task data with block-wise missing sources.

Each task draws its full feature vector ``[x_0 | x_1 | ... | x_T]`` from a
zero-mean Gaussian whose covariance decays as ``rho_t ** (0.01 |i - j|)``
over the concatenated feature index, then hides every task-specific block
except its own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import BlockLayout, MultiTaskDataset, TaskDataset
from .errors import ConfigError

NONLINEAR = "nonlinear_square"
LINEAR = "linear"
COEF_MEAN = -10.0
COEF_SD = 10.0
JITTER = 1e-10


@dataclass(frozen=True)
class DgpConfig:
    n: tuple[int, ...] = (300, 300)
    p: tuple[int, ...] = (100, 25, 25)
    rho: tuple[float, ...] = (0.95, 0.95)
    alpha: float = 0.3
    sigma: tuple[float, ...] = (0.1, 0.1)
    response_form: str = NONLINEAR
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "p", "rho", "sigma"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        T = len(self.p) - 1
        if T < 1:
            raise ConfigError("p must list the anchor dim and at least one task-specific dim")
        for name in ("n", "rho", "sigma"):
            if len(getattr(self, name)) != T:
                raise ConfigError(f"{name} needs {T} entries (one per task), got {len(getattr(self, name))}")
        if any(int(d) < 1 for d in self.p) or any(int(k) < 1 for k in self.n):
            raise ConfigError("dims and sample sizes must be >= 1")
        if any(not 0.0 < r < 1.0 for r in self.rho):
            raise ConfigError(f"rho values must lie in (0, 1), got {self.rho}")
        if any(s < 0 for s in self.sigma):
            raise ConfigError("noise sd must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.response_form not in (NONLINEAR, LINEAR):
            raise ConfigError(f"unknown response form {self.response_form!r}")

    @property
    def T(self) -> int:
        return len(self.p) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class DgpCoefficients:
    v_c: np.ndarray
    v_t: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class GroundTruthDataset:
    config: DgpConfig
    X_full: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    coefficients: DgpCoefficients
    dataset: MultiTaskDataset = field(repr=False)

    def hidden_block(self, t: int, s: int) -> np.ndarray:
        """True values of block ``(t, s)``, observed or not."""
        return self.X_full[t - 1][:, self.dataset.layout.source_slice(s)]


def gen_covariance(p: int, rho: float) -> np.ndarray:
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"rho must lie in (0, 1), got {rho}")
    idx = np.arange(p)
    return rho ** (0.01 * np.abs(idx[:, None] - idx[None, :]))


def sample_gaussian(n: int, Sigma: np.ndarray, seed) -> np.ndarray:
    """``n`` rows from ``N(0, Sigma)`` via a Cholesky factor."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    p = Sigma.shape[0]
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(Sigma + JITTER * np.eye(p))
        except np.linalg.LinAlgError:
            raise ConfigError("covariance is not positive definite") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((n, p)) @ L.T


def gen_response(x, coeffs: DgpCoefficients, task: int, alpha: float, form: str = NONLINEAR) -> np.ndarray:
    """Noise-free response for one row or a stack of rows of task ``task`` (1-based)."""
    x = np.asarray(x, dtype=np.float64)
    v_t = coeffs.v_t[task - 1]
    p = x.shape[-1]
    if coeffs.v_c.shape[0] != p or v_t.shape[0] != p:
        raise ConfigError(f"coefficients have length {coeffs.v_c.shape[0]}, rows have {p}")
    shared_input = x * x if form == NONLINEAR else x
    return alpha * (shared_input @ coeffs.v_c) / p + (1.0 - alpha) * (x @ v_t) / p


def generate(config: DgpConfig) -> GroundTruthDataset:
    rng = np.random.default_rng(config.seed)
    p_total = sum(config.p)
    v_c = rng.normal(COEF_MEAN, COEF_SD, size=p_total)
    v_t = tuple(rng.normal(COEF_MEAN, COEF_SD, size=p_total) for _ in range(config.T))
    coeffs = DgpCoefficients(v_c, v_t)

    layout = BlockLayout(config.p)
    X_full, ys, tasks = [], [], []
    for t in range(1, config.T + 1):
        X = sample_gaussian(config.n[t - 1], gen_covariance(p_total, config.rho[t - 1]), rng)
        y = gen_response(X, coeffs, t, config.alpha, config.response_form)
        y = y + rng.normal(0.0, config.sigma[t - 1], size=y.shape[0])
        X_full.append(X)
        ys.append(y)
        tasks.append(
            TaskDataset(f"task{t}", X[:, layout.source_slice(0)].copy(), X[:, layout.source_slice(t)].copy(), y)
        )
    return GroundTruthDataset(config, tuple(X_full), tuple(ys), coeffs, MultiTaskDataset(layout, tuple(tasks)))


# -- experiment presets ---------------------------------------------------------

_TWO_TASK = DgpConfig(n=(300, 300), p=(100, 25, 25), rho=(0.95, 0.7), alpha=0.3, sigma=(0.1, 0.1))

# name -> (template, swept parameter, sweep values)
SETTINGS: dict[str, tuple[DgpConfig, str | None, tuple]] = {
    "A": (replace(_TWO_TASK, rho=(0.95, 0.95)), "rho", (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)),
    "B": (_TWO_TASK, "rho2", (0.5, 0.6, 0.7, 0.8, 0.9)),
    "C": (replace(_TWO_TASK, rho=(0.8, 0.8)), "alpha", (0.1, 0.3, 0.5, 0.7, 0.9)),
    "D": (_TWO_TASK, "n", (100, 200, 300, 400, 500, 600)),
    "E": (_TWO_TASK, "p_specific", (25, 50, 75, 100)),
    "F": (_TWO_TASK, "sigma1", (0.1, 0.2, 0.3, 0.4, 0.5)),
    "MULTI3": (
        DgpConfig(n=(300,) * 3, p=(125, 25, 25, 25), rho=(0.95, 0.9, 0.9), sigma=(0.1,) * 3),
        None,
        (),
    ),
    "MULTI4": (
        DgpConfig(n=(300,) * 4, p=(125, 25, 25, 25, 25), rho=(0.95, 0.9, 0.9, 0.9), sigma=(0.1,) * 4),
        None,
        (),
    ),
    "ABLATION": (
        DgpConfig(n=(300, 300), p=(100, 25, 25), rho=(0.8, 0.6), alpha=0.3, sigma=(0.1, 0.1)),
        "n2",
        (100, 200, 300, 400),
    ),
    "LINEAR": (replace(_TWO_TASK, response_form=LINEAR), None, ()),
}


def apply_sweep(config: DgpConfig, name: str, value) -> DgpConfig:
    """Set one swept quantity on ``config``.

    ``rho``, ``n`` and ``sigma`` set every task; a numeric suffix (``rho2``)
    sets one task; ``p_specific`` sets every task-specific source dim.
    """
    T = config.T
    if name == "alpha":
        return replace(config, alpha=float(value))
    if name == "p0":
        return replace(config, p=(int(value),) + config.p[1:])
    if name == "p_specific":
        return replace(config, p=(config.p[0],) + (int(value),) * T)
    if name == "seed":
        return replace(config, seed=int(value))
    for base, cast in (("rho", float), ("sigma", float), ("n", int)):
        if name == base:
            return replace(config, **{base: (cast(value),) * T})
        if name.startswith(base) and name[len(base):].isdigit():
            k = int(name[len(base):])
            if not 1 <= k <= T:
                raise ConfigError(f"{name}: task index out of range 1..{T}")
            vals = list(getattr(config, base))
            vals[k - 1] = cast(value)
            return replace(config, **{base: tuple(vals)})
    raise ConfigError(f"unknown swept parameter {name!r}")


def config_from_dict(d: dict) -> DgpConfig:
    known = set(DgpConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown DGP fields {sorted(unknown)}")
    return DgpConfig(**d)
