import csv
import math
import os

import numpy as np
import pytest

from surrokit import ModelOptions
from surrokit.bench import (ACCURACY_THRESHOLDS, DESK_SUITE, RECORD_COLUMNS, BenchmarkRecord, accuracy_profile,
                            make_design, parse_suite, read_records, run_benchmark, run_test, test_cases,
                            time_profile, worker_count)
from surrokit.errors import ConfigurationError, DataError
from surrokit.tensor import detect_incomplete_grid, factorize_doe

# pytest would otherwise try to collect the helper as a test
test_cases.__test__ = False


@pytest.fixture(scope="module")
def baseline_run():
    return run_benchmark(parse_suite("desk", sizes=(20, 100)), ["baseline-mean", "crash"], isolate=False)


def test_desk_suite_has_twelve_problems():
    assert len(DESK_SUITE) == 12
    assert {p.design for p in DESK_SUITE.values()} == {"free", "grid", "incomplete"}


def test_constant_baseline_steps_at_one(baseline_run):
    records, acc, _ = baseline_run
    assert all(r.rrms == 1.0 for r in records if r.technique == "baseline-mean")
    v = acc.values["baseline-mean"]
    i = int(np.flatnonzero(acc.thresholds == 1.0)[0])
    assert np.all(v[:i] == 0.0) and np.all(v[i:] == 1.0)


def test_crash_baseline_never_counts(baseline_run):
    records, acc, tim = baseline_run
    crash = [r for r in records if r.technique == "crash"]
    assert all(math.isinf(r.rrms) and r.failure for r in crash)
    assert np.all(acc.values["crash"][:-1] == 0.0)
    assert acc.values["crash"][-1] == 1.0
    assert np.all(tim.values["crash"][:-1] == 0.0)


def test_profiles_monotone_in_unit_interval(rng):
    recs = [BenchmarkRecord("p", 0, t, float(v), float(s), 0.0)
            for t in ("a", "b") for v, s in zip(rng.lognormal(-2, 2, 40), rng.lognormal(0, 1, 40))]
    recs.append(BenchmarkRecord("p", 1, "a", 0.0, 1.0, 0.0, "ValueError: boom"))
    for prof in (accuracy_profile(recs), time_profile(recs)):
        assert prof.thresholds[-1] == math.inf
        for v in prof.values.values():
            assert np.all(np.diff(v) >= 0) and v.min() >= 0 and v.max() <= 1


def test_threshold_grid_contains_one():
    assert 1.0 in ACCURACY_THRESHOLDS
    assert np.all(np.diff(ACCURACY_THRESHOLDS) > 0)


def test_failure_forces_infinite_rrms():
    r = BenchmarkRecord("p", 0, "t", 0.5, 1.0, 0.0, "timeout after 1 s")
    assert r.rrms == math.inf
    with pytest.raises(ValueError):
        BenchmarkRecord("p", 0, "t", -0.1, 1.0, 0.0)


def test_unknown_problem_rejected():
    with pytest.raises(ConfigurationError, match="nosuch"):
        parse_suite("ackley2,nosuch")


def test_unwritable_output_rejected(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError, match="not writable"):
        run_benchmark("linear10", ["baseline-mean"], out_dir=str(blocker / "sub"), isolate=False)


def test_outputs_written_and_read_back(tmp_path):
    suite = parse_suite("linear10,step", sizes=(20,), doe_kinds=("lhs",))
    records, acc, _ = run_benchmark(suite, ["rsm", "baseline-mean"], out_dir=str(tmp_path), isolate=False)
    assert sorted(os.listdir(tmp_path)) == ["profile.csv", "profile.svg", "records.csv", "time_profile.csv"]
    with open(tmp_path / "records.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == RECORD_COLUMNS
    back = read_records(tmp_path / "records.csv")
    assert [(r.problem, r.technique, r.rrms) for r in back] == [(r.problem, r.technique, r.rrms) for r in records]
    with open(tmp_path / "profile.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "baseline-mean", "rsm"]
    assert len(rows) == len(acc.thresholds) + 1 and rows[-1][0] == "inf"
    assert (tmp_path / "profile.svg").read_text().startswith("<svg")


def test_benchmark_is_reproducible():
    suite = parse_suite("oscillatory1d,smooth3d", sizes=(20,))
    a, _, _ = run_benchmark(suite, ["gp"], seed=3, isolate=False)
    b, _, _ = run_benchmark(suite, ["gp"], seed=3, isolate=False)
    assert [r.rrms for r in a] == [r.rrms for r in b]


def test_cases_cover_sizes_and_designs():
    cases = test_cases(parse_suite("desk"), 0)
    free = [c for c in cases if c.problem.design == "free"]
    assert {c.doe for c in free} == {"random", "lhs"}
    n_free = sum(p.design == "free" for p in DESK_SUITE.values())
    assert len(free) == 3 * 2 * n_free
    assert len(cases) == len(free) + 3 * (12 - n_free)
    assert len({c.seed for c in cases}) == len(cases)


def test_structured_problems_have_structure():
    rng = np.random.default_rng(0)
    grid = make_design(DESK_SUITE["separable_grid"], 100, "grid", rng)
    assert len(factorize_doe(grid).partition) == 2
    part = make_design(DESK_SUITE["incomplete_grid"], 100, "grid", rng)
    assert detect_incomplete_grid(part) is not None and len(part) == 100


def test_lhs_design_strata(rng):
    x = make_design(DESK_SUITE["smooth3d"], 50, "lhs", rng)
    p = DESK_SUITE["smooth3d"]
    u = (x - p.lower) / (p.upper - p.lower)
    for j in range(3):
        assert sorted(np.floor(u[:, j] * 50).astype(int)) == list(range(50))


def test_isolated_worker_timeout():
    suite = parse_suite("ackley5", sizes=(500,), doe_kinds=("lhs",))
    records, _, _ = run_benchmark(suite, ["smart", "baseline-mean"], timeout=1.0, workers=1)
    smart = [r for r in records if r.technique == "smart"]
    assert smart[0].failure == "timeout after 1 s" and smart[0].rrms == math.inf
    assert [r.rrms for r in records if r.technique == "baseline-mean"] == [1.0]


def test_isolated_matches_in_process():
    suite = parse_suite("linear10", sizes=(20,), doe_kinds=("random",))
    a, _, _ = run_benchmark(suite, ["rsm"], isolate=True, workers=1)
    b, _, _ = run_benchmark(suite, ["rsm"], isolate=False)
    assert a[0].rrms == b[0].rrms


def test_memory_limit_failure_recorded():
    suite = parse_suite("smooth3d", sizes=(500,), doe_kinds=("lhs",))
    records, _, _ = run_benchmark(suite, ["gp"], mem_limit_mb=64, workers=1)
    assert records[0].failure and records[0].rrms == math.inf


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("GTA_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("GTA_THREADS", "zero")
    with pytest.raises(ConfigurationError):
        worker_count()


def test_failed_training_recorded(rng):
    case = test_cases(parse_suite("ackley5", sizes=(20,), doe_kinds=("lhs",)), 0)[0]
    recs = run_test(case, "pla", ModelOptions())
    assert recs[0].failure.startswith("CapacityError") and recs[0].rrms == math.inf
