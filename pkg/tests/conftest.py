import numpy as np
import pytest

from mtlhmb.data import BlockLayout, MultiTaskDataset, TaskDataset


def make_dataset(sizes=(12, 10), dims=(4, 3, 2), seed=0, kinds=None):
    """Small random block-wise missing dataset."""
    rng = np.random.default_rng(seed)
    layout = BlockLayout(dims)
    tasks = []
    for t, n in enumerate(sizes, start=1):
        kind = kinds[t - 1] if kinds else "continuous"
        y = rng.integers(0, 2, size=n).astype(float) if kind == "binary" else rng.normal(size=n)
        tasks.append(TaskDataset(f"task{t}", rng.normal(size=(n, dims[0])), rng.normal(size=(n, dims[t])), y, kind))
    return MultiTaskDataset(layout, tuple(tasks))


@pytest.fixture
def small_ds():
    return make_dataset()


def make_imputed(sizes=(12, 10), dims=(4, 3, 2), seed=0, kinds=None):
    """``make_dataset`` with random values in every missing block."""
    from mtlhmb.data import ImputedDataset

    ds = make_dataset(sizes, dims, seed, kinds)
    rng = np.random.default_rng(seed + 1)
    blocks = {(t, s): rng.normal(size=(ds.task(t).n, dims[s])) for t, s in ds.layout.missing}
    return ImputedDataset(ds, blocks)


def jitter_biases(params, rng):
    # zero biases can leave a unit exactly on the ReLU kink, where central
    # differences see half a slope
    for name, p in params.items():
        if name.endswith(".b"):
            p.data = rng.uniform(0.05, 0.3, size=p.data.shape) * rng.choice([-1.0, 1.0], size=p.data.shape)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
