import csv
import io
import itertools
import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlhmb import harness
from mtlhmb.dgp import DgpConfig
from mtlhmb.errors import ConfigError
from mtlhmb.harness import (
    AVG,
    METHODS,
    OURS,
    ExperimentSpec,
    ResultRecord,
    aggregate,
    average_rmse,
    median_bandwidth,
    mmd,
    mmd_permutation_test,
    records_csv,
    rmse,
    run_experiment,
    run_point,
    write_outputs,
)

TINY = DgpConfig(n=(20, 20), p=(4, 2, 2), rho=(0.9, 0.8))


def tiny_spec(**kw):
    base = dict(setting="CUSTOM", template=TINY, repetitions=1, grid="fixed", max_epochs=2)
    base.update(kw)
    return ExperimentSpec(**base)


# -- metrics -----------------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(12.5))
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(3.5355, abs=1e-4)
    assert average_rmse([1.0, 3.0]) == 2.0


def test_rmse_errors():
    with pytest.raises(ConfigError):
        rmse([], [])
    with pytest.raises(ConfigError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ConfigError):
        average_rmse([])


# -- MMD --------------------------------------------------------------------------------


def brute_mmd(X, Y):
    Z = np.vstack([X, Y])
    dists = [float(np.linalg.norm(Z[i] - Z[j])) for i in range(len(Z)) for j in range(i + 1, len(Z))]
    bw = statistics.median(dists)

    def k(a, b):
        return math.exp(-float(np.sum((a - b) ** 2)) / (2 * bw * bw))

    def mean_k(A, B):
        return sum(k(a, b) for a in A for b in B) / (len(A) * len(B))

    return mean_k(X, X) + mean_k(Y, Y) - 2 * mean_k(X, Y)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_mmd_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    X = rng.normal(size=(int(rng.integers(2, 7)), d))
    Y = rng.normal(size=(int(rng.integers(2, 7)), d)) + rng.normal()
    assert mmd(X, Y) == pytest.approx(max(brute_mmd(X, Y), 0.0), abs=1e-12)


def test_mmd_identical_samples():
    X = np.random.default_rng(0).normal(size=(30, 3))
    assert abs(mmd(X, X.copy())) < 1e-12


def test_mmd_far_clusters():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 2))
    Y = rng.normal(10.0, 1.0, size=(100, 2))
    assert mmd(X, Y) > 0.5
    res = mmd_permutation_test(X, Y, n_permutations=500, seed=0)
    assert res.p_value == pytest.approx(1 / 501)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_mmd_non_negative_and_p_in_range(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    assert mmd(X, Y) >= 0
    res = mmd_permutation_test(X, Y, n_permutations=50, seed=seed)
    assert 1 / 51 <= res.p_value <= 1.0


def test_permutation_p_matches_exhaustive_enumeration():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(3, 2)), rng.normal(0.7, 1.0, size=(3, 2))
    Z = np.vstack([X, Y])
    observed = mmd(X, Y)
    bw = median_bandwidth(Z)
    splits = list(itertools.combinations(range(6), 3))
    hits = 0
    for idx in splits:
        rest = [i for i in range(6) if i not in idx]
        hits += mmd(Z[list(idx)], Z[rest], bandwidth=bw) >= observed - 1e-12
    exact = hits / len(splits)
    res = mmd_permutation_test(X, Y, n_permutations=20_000, seed=0)
    assert res.p_value == pytest.approx(exact, abs=0.015)
    assert res.bandwidth == pytest.approx(bw)


def test_mmd_is_seeded():
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(20, 2)), rng.normal(0.3, 1.0, size=(20, 2))
    a = mmd_permutation_test(X, Y, 300, seed=9)
    b = mmd_permutation_test(X, Y, 300, seed=9, chunk=7)
    assert a == b


def test_mmd_input_errors():
    with pytest.raises(ConfigError):
        mmd(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        mmd(np.zeros((1, 2)), np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        mmd_permutation_test(np.zeros((3, 2)), np.ones((3, 2)), n_permutations=0)


def test_bandwidth_of_coincident_rows():
    assert median_bandwidth(np.zeros((4, 2))) == 1.0


# -- aggregation --------------------------------------------------------------------------


def rec(method, value, rmse_, rep=0, status="ok", task=AVG, sweep="0.5"):
    return ResultRecord("A", "rho", sweep, rep, rep, method, task, "test", rmse_, status, "h")


def test_aggregate_quartiles():
    rows = aggregate([rec(OURS, None, v, rep=i) for i, v in enumerate([1.0, 2.0, 3.0, 4.0])])
    (row,) = rows
    assert row["median"] == 2.5
    assert row["q1"] == 1.75 and row["q3"] == 3.25
    assert row["mean"] == 2.5 and row["sd"] == pytest.approx(np.std([1, 2, 3, 4], ddof=1))


def test_aggregate_single_record():
    (row,) = aggregate([rec("STL", None, 1.7)])
    assert row["mean"] == row["min"] == row["q1"] == row["median"] == row["q3"] == row["max"] == 1.7
    assert row["sd"] == 0.0


def test_aggregate_improvement_and_failures():
    recs = [rec(OURS, None, 0.7), rec("STL", None, 1.0), rec("HTL", None, 2.0, task="1"), rec("HTL", None, math.nan, status="failed")]
    rows = {r["method"]: r for r in aggregate(recs)}
    assert rows["STL"]["improvement_pct"] == pytest.approx(30.0)
    assert math.isnan(rows[OURS]["improvement_pct"])
    assert rows["HTL"]["n"] == 0 and rows["HTL"]["n_failed"] == 1
    assert math.isnan(rows["HTL"]["mean"])


@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=30))
def test_aggregate_mean_is_arithmetic_mean(values):
    (row,) = aggregate([rec("STL", None, v, rep=i) for i, v in enumerate(values)])
    assert abs(row["mean"] - sum(values) / len(values)) < 1e-12 * max(1.0, max(values))
    assert row["min"] <= row["q1"] <= row["median"] <= row["q3"] <= row["max"]


def test_aggregate_empty():
    with pytest.raises(ConfigError):
        aggregate([])


# -- specs ---------------------------------------------------------------------------------


def test_preset_specs():
    d = ExperimentSpec.from_dict({"setting": "D"})
    assert d.sweep_param == "n" and d.sweep_values == (100, 200, 300, 400, 500, 600)
    assert d.template.p == (100, 25, 25) and d.template.rho == (0.95, 0.7)
    assert d.template.alpha == 0.3 and d.template.sigma == (0.1, 0.1)
    assert d.dgp_config(300, 0).n == (300, 300)
    f = ExperimentSpec.from_dict({"setting": "F"})
    assert f.sweep_values == (0.1, 0.2, 0.3, 0.4, 0.5)
    assert f.dgp_config(0.4, 0).sigma == (0.4, 0.1)
    assert f.repetitions == 30 and f.grid == "reduced"


def test_spec_seed_stride():
    spec = ExperimentSpec.from_dict({"setting": "A", "base_seed": 5})
    assert spec.dgp_config(0.9, 3).seed == 5 + 3 * 1_000_003


def test_spec_overrides_and_round_trip():
    spec = ExperimentSpec.from_dict(
        {"setting": "A", "sweep_values": [0.95], "template": {"n": [50, 50]}, "repetitions": 2}
    )
    assert spec.template.n == (50, 50) and spec.template.rho == (0.95, 0.95)
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


@pytest.mark.parametrize(
    "d",
    [
        {"setting": "Z"},
        {"setting": "A", "repetitions": 0},
        {"setting": "A", "grid": "huge"},
        {"setting": "A", "methods": ["XGB"]},
        {"setting": "A", "sweep_param": "beta"},
        {"setting": "A", "colour": 1},
        {"setting": "A", "template": {"rho": [2.0, 0.5]}},
    ],
)
def test_spec_validation(d):
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict(d)


# -- runs ----------------------------------------------------------------------------------


def test_record_count_and_fields():
    spec = tiny_spec(sweep_param="rho", sweep_values=(0.5, 0.9), repetitions=2, methods=("MTL-HMB", "STL"))
    recs = run_experiment(spec)
    assert len(recs) == 2 * 2 * 2 * (2 + 1)
    assert sum(r.task == AVG for r in recs) == 2 * 2 * 2
    assert all(r.status == "ok" and r.rmse >= 0 and r.split == "test" for r in recs)
    for r in recs:
        if r.task == AVG:
            tasks = [x.rmse for x in recs if x.method == r.method and x.seed == r.seed and x.sweep_value == r.sweep_value and x.task != AVG]
            assert r.rmse == pytest.approx(sum(tasks) / 2)


def test_every_method_runs():
    recs = run_point(tiny_spec(methods=METHODS), None, 0)
    assert {r.method for r in recs} == set(METHODS)
    assert all(r.status == "ok" for r in recs), [r.error for r in recs if r.error]


def test_runs_are_reproducible():
    spec = tiny_spec(methods=("MTL-HMB", "HTL"))
    assert records_csv(run_experiment(spec)) == records_csv(run_experiment(spec))


def test_workers_give_same_records():
    spec = tiny_spec(sweep_param="rho", sweep_values=(0.5, 0.9), methods=("STL",))
    assert records_csv(run_experiment(spec, workers=2)) == records_csv(run_experiment(spec))


def test_failed_method_is_recorded(monkeypatch):
    real = harness._Run.method

    def flaky(self, name):
        if name == "HTL":
            raise RuntimeError("boom")
        return real(self, name)

    monkeypatch.setattr(harness._Run, "method", flaky)
    recs = run_point(tiny_spec(methods=("STL", "HTL", "MTL-HMB")), None, 0)
    bad = [r for r in recs if r.method == "HTL"]
    assert all(r.status == "failed" and math.isnan(r.rmse) and "boom" in r.error for r in bad)
    assert all(r.status == "ok" for r in recs if r.method != "HTL")
    rows = {r["method"]: r for r in aggregate(recs)}
    assert rows["HTL"]["n_failed"] == 1


def test_write_outputs(tmp_path):
    spec = tiny_spec(methods=("STL",))
    recs = run_experiment(spec)
    paths = write_outputs(recs, tmp_path, spec)
    rows = list(csv.DictReader(io.StringIO(paths["records"].read_text())))
    assert len(rows) == 3 and "wall_time" not in rows[0]
    summary = list(csv.DictReader(io.StringIO(paths["summary"].read_text())))
    assert summary[0]["method"] == "STL" and summary[0]["n"] == "1"
    doc = json.loads(paths["summary_json"].read_text())
    assert doc["spec"]["setting"] == "CUSTOM"
    assert doc["summary"][0]["improvement_pct"] is None
    assert len(paths["timings"].read_text().splitlines()) == 2
