"""Benchmark harness: desk test suite, isolated test runs, RRMS/time profiles."""

from __future__ import annotations

import csv
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .core import ModelOptions, TrainingSample, rrms
from .errors import ConfigurationError, DataError, DegenerateMetricError

SIZES = (20, 100, 500)
DOE_KINDS = ("random", "lhs")
HOLDOUT = 2000
TIMEOUT = 120.0
MEM_LIMIT_MB = 2048
BASELINES = ("baseline-mean", "crash")
RECORD_COLUMNS = ("problem", "output_index", "technique", "rrms", "train_seconds", "predict_seconds", "failure")
# 20 points per decade; the exponent grid hits 0 exactly so threshold 1 is on it
ACCURACY_THRESHOLDS = 10.0 ** (np.arange(-60, 21) / 20.0)
TIME_THRESHOLDS = 10.0 ** (np.arange(-30, 31) / 10.0)


# ---------------------------------------------------------------- problems

def ackley(x):
    d = x.shape[1]
    a = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x ** 2, axis=1) / d))
    return a - np.exp(np.sum(np.cos(2 * np.pi * x), axis=1) / d) + 20.0 + math.e


def rosenbrock(x):
    return np.sum(100.0 * (x[:, 1:] - x[:, :-1] ** 2) ** 2 + (1.0 - x[:, :-1]) ** 2, axis=1)


def _quadratic(x):
    return np.sum((x - 0.2) ** 2, axis=1)


def _step(x):
    return np.floor(2.0 * x[:, 0]) + (x[:, 1] > 0.3)


def _separable(x):
    return np.sin(3.0 * x[:, 0]) * np.exp(x[:, 1])


def _coupled(x):
    return np.sin(2.0 * x[:, 0] + x[:, 1]) + 0.5 * x[:, 1] ** 2


def _two_regime(x):
    return np.where(x[:, 0] < 0.0, x[:, 0], 5.0 - x[:, 0])


_LINEAR_COEF = np.linspace(-1.0, 1.0, 10) + 0.1


def _linear(x):
    return x @ _LINEAR_COEF + 0.5


def _oscillatory(x):
    return np.sin(10.0 * x[:, 0]) + x[:, 0]


def _smooth3(x):
    return np.exp(-np.sum(x ** 2, axis=1)) + x[:, 0] * x[:, 1] - 0.3 * x[:, 2]


@dataclass(frozen=True)
class Problem:
    """An explicit response function on a box.

    ``design`` is "free" (random or LHS DoE), "grid" (full factorial close to
    the requested size) or "incomplete" (random 40% of a grid).
    """

    name: str
    dim: int
    func: Callable
    lower: float = -1.0
    upper: float = 1.0
    design: str = "free"
    noise: float = 0.0

    def __call__(self, x):
        return np.asarray(self.func(x), float).reshape(len(x), -1)


DESK_SUITE = {
    p.name: p for p in (
        Problem("ackley2", 2, ackley, -2.0, 2.0),
        Problem("ackley5", 5, ackley, -2.0, 2.0),
        Problem("rosenbrock2", 2, rosenbrock, -2.0, 2.0),
        Problem("rosenbrock5", 5, rosenbrock, -2.0, 2.0),
        Problem("noisy_quadratic", 3, _quadratic, noise=0.05),
        Problem("step", 2, _step),
        Problem("separable_grid", 2, _separable, design="grid"),
        Problem("incomplete_grid", 2, _coupled, design="incomplete"),
        Problem("two_regime", 1, _two_regime),
        Problem("linear10", 10, _linear),
        Problem("oscillatory1d", 1, _oscillatory),
        Problem("smooth3d", 3, _smooth3),
    )
}


@dataclass
class Suite:
    problems: list
    sizes: tuple = SIZES
    doe_kinds: tuple = DOE_KINDS
    holdout: int = HOLDOUT


def parse_suite(ids="desk", sizes=None, doe_kinds=None, holdout=HOLDOUT) -> Suite:
    """``ids`` is "desk" or a comma-separated list of desk problem ids."""
    ids = (ids or "desk").strip()
    if ids == "desk":
        names = list(DESK_SUITE)
    else:
        names = [s.strip() for s in ids.split(",") if s.strip()]
        for n in names:
            if n not in DESK_SUITE:
                raise ConfigurationError(f"unknown problem id {n!r}")
    if not names:
        raise ConfigurationError("empty suite")
    return Suite([DESK_SUITE[n] for n in names], tuple(sizes or SIZES), tuple(doe_kinds or DOE_KINDS), holdout)


def _grid_shape(n, dim):
    side = max(2, round(n ** (1.0 / dim)))
    shape = [side] * dim
    # adjust the last axis to get as close to n as possible
    shape[-1] = max(2, round(n / side ** (dim - 1)))
    return shape


def _grid(shape, lower, upper):
    axes = [np.linspace(lower, upper, m) for m in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def make_design(problem: Problem, n: int, kind: str, rng) -> np.ndarray:
    lo, hi = problem.lower, problem.upper
    if problem.design == "grid":
        return _grid(_grid_shape(n, problem.dim), lo, hi)
    if problem.design == "incomplete":
        full = _grid(_grid_shape(int(round(n / 0.4)), problem.dim), lo, hi)
        keep = np.sort(rng.choice(len(full), size=min(n, len(full)), replace=False))
        return full[keep]
    if kind == "random":
        u = rng.random((n, problem.dim))
    elif kind == "lhs":
        u = qmc.LatinHypercube(d=problem.dim, seed=rng).random(n)
    else:
        raise ConfigurationError(f"unknown DoE kind {kind!r}")
    return lo + (hi - lo) * u


@dataclass
class TestCase:
    problem: Problem
    size: int
    doe: str
    seed: int

    @property
    def label(self):
        return f"{self.problem.name}/n{self.size}/{self.doe}"

    def data(self):
        """Training sample and holdout (inputs, outputs), reproducible from the seed."""
        rng = np.random.default_rng(self.seed)
        x = make_design(self.problem, self.size, self.doe, rng)
        y = self.problem(x)
        if self.problem.noise > 0:
            y = y + self.problem.noise * rng.standard_normal(y.shape)
        hold_rng = np.random.default_rng([self.seed, 1])
        xt = self.problem.lower + (self.problem.upper - self.problem.lower) * hold_rng.random(
            (HOLDOUT, self.problem.dim))
        return TrainingSample(x, y), xt, self.problem(xt)


def test_cases(suite: Suite, seed: int = 0) -> list:
    cases = []
    for pi, prob in enumerate(suite.problems):
        kinds = suite.doe_kinds if prob.design == "free" else ("grid",)
        for size in suite.sizes:
            for ki, kind in enumerate(kinds):
                s = int(np.random.SeedSequence([seed, pi, size, ki]).generate_state(1)[0])
                cases.append(TestCase(prob, size, kind, s))
    return cases


# ---------------------------------------------------------------- records

@dataclass
class BenchmarkRecord:
    problem: str
    output_index: int
    technique: str
    rrms: float
    train_seconds: float
    predict_seconds: float
    failure: str | None = None

    def __post_init__(self):
        if self.failure is not None:
            self.rrms = math.inf
        if not self.rrms >= 0:
            raise ValueError("rrms must be non-negative")

    def row(self):
        return [self.problem, self.output_index, self.technique, repr(float(self.rrms)),
                repr(float(self.train_seconds)), repr(float(self.predict_seconds)), self.failure or ""]


class _MeanOfHoldout:
    """Constant predictor equal to the holdout mean; its RRMS is 1 by construction."""

    def __init__(self, value):
        self.value = value

    def predict(self, x):
        return np.tile(self.value, (len(x), 1))


def _train(sample, technique, options, holdout_y):
    if technique == "baseline-mean":
        return _MeanOfHoldout(holdout_y.mean(axis=0))
    if technique == "crash":
        raise RuntimeError("deliberate crash")
    from .api import train

    return train(sample, options.replace(technique=technique))


def run_test(case: TestCase, technique: str, options: ModelOptions) -> list:
    """Train and evaluate one technique on one test case; failures become rrms = +inf."""
    sample, xt, yt = case.data()
    m = yt.shape[1]
    t0 = time.perf_counter()
    try:
        model = _train(sample, technique, options.replace(seed=options.seed), yt)
    except Exception as exc:  # any training failure counts against the technique
        secs = time.perf_counter() - t0
        return [BenchmarkRecord(case.label, j, technique, math.inf, secs, 0.0, _describe(exc)) for j in range(m)]
    train_secs = time.perf_counter() - t0
    t1 = time.perf_counter()
    try:
        pred = np.asarray(model.predict(xt), float).reshape(len(xt), -1)
    except Exception as exc:
        return [BenchmarkRecord(case.label, j, technique, math.inf, train_secs, time.perf_counter() - t1,
                                _describe(exc)) for j in range(m)]
    pred_secs = time.perf_counter() - t1
    out = []
    for j in range(m):
        try:
            value = rrms(yt[:, j], pred[:, j])
            fail = None if math.isfinite(value) else "non-finite prediction"
        except DegenerateMetricError as exc:
            value, fail = math.inf, _describe(exc)
        out.append(BenchmarkRecord(case.label, j, technique, value, train_secs, pred_secs, fail))
    return out


def _describe(exc):
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")[:200]


def _child(conn, case, technique, options, mem_limit_mb):
    try:
        import resource

        if mem_limit_mb:
            limit = int(mem_limit_mb) * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
    except (ImportError, ValueError, OSError):
        pass
    try:
        conn.send(run_test(case, technique, options))
    except BaseException as exc:  # report even MemoryError from inside the worker
        conn.send(_describe(exc))
    finally:
        conn.close()


def worker_count():
    n = os.cpu_count() or 1
    cap = os.environ.get("GTA_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError("GTA_THREADS must be a positive integer") from None
    return n


def _run_isolated(jobs, options, timeout, mem_limit_mb, workers):
    """Run (case, technique) jobs in separate processes, at most ``workers`` at a time."""
    ctx = mp.get_context("fork")
    pending = list(enumerate(jobs))
    running = {}
    results = {}
    while pending or running:
        while pending and len(running) < workers:
            idx, (case, tech) = pending.pop(0)
            recv, send = ctx.Pipe(duplex=False)
            proc = ctx.Process(target=_child, args=(send, case, tech, options, mem_limit_mb), daemon=True)
            proc.start()
            send.close()
            running[idx] = (proc, recv, time.perf_counter(), case, tech)
        time.sleep(0.01)
        for idx in list(running):
            proc, recv, start, case, tech = running[idx]
            res = None
            if recv.poll():
                try:
                    res = recv.recv()
                except EOFError:
                    res = f"worker exited with code {proc.exitcode}"
            elif not proc.is_alive():
                res = f"worker exited with code {proc.exitcode}"
            elif time.perf_counter() - start > timeout:
                proc.kill()
                res = f"timeout after {timeout:g} s"
            if res is None:
                continue
            proc.join()
            recv.close()
            del running[idx]
            if isinstance(res, str):
                elapsed = time.perf_counter() - start
                res = [BenchmarkRecord(case.label, 0, tech, math.inf, elapsed, 0.0, res)]
            results[idx] = res
    return [results[i] for i in range(len(jobs))]


def run_benchmark(suite: Suite | str, techniques, seed: int = 0, out_dir=None, options: ModelOptions | None = None,
                  timeout: float = TIMEOUT, mem_limit_mb: int = MEM_LIMIT_MB, isolate: bool = True,
                  workers: int | None = None):
    """Run every (test case, technique) pair; returns (records, accuracy profile, time profile).

    With ``out_dir`` the records CSV, both profile CSVs and an SVG plot are written there.
    """
    if isinstance(suite, str):
        suite = parse_suite(suite)
    options = (options or ModelOptions()).replace(seed=seed)
    techniques = list(techniques)
    if not techniques:
        raise ConfigurationError("no techniques to benchmark")
    for t in techniques:
        if t not in BASELINES:
            options.replace(technique=t)  # validates the id
    if out_dir is not None:
        _check_writable(out_dir)
    jobs = [(case, tech) for case in test_cases(suite, seed) for tech in techniques]
    if isolate:
        batches = _run_isolated(jobs, options, timeout, mem_limit_mb, workers or worker_count())
    else:
        batches = [run_test(case, tech, options) for case, tech in jobs]
    records = sorted((r for b in batches for r in b), key=lambda r: (r.problem, r.technique, r.output_index))
    acc = accuracy_profile(records)
    tim = time_profile(records)
    if out_dir is not None:
        write_records(os.path.join(out_dir, "records.csv"), records)
        write_profile(os.path.join(out_dir, "profile.csv"), acc)
        write_profile(os.path.join(out_dir, "time_profile.csv"), tim)
        with open(os.path.join(out_dir, "profile.svg"), "w") as fh:
            fh.write(profile_svg(acc, tim))
    return records, acc, tim


def _check_writable(out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise DataError(f"output path {out_dir} is not writable: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------- profiles

@dataclass
class Profile:
    """Fraction of tests at or below each threshold, per technique.

    The last threshold is +inf; only records the harness itself could not
    produce are excluded there.
    """

    thresholds: np.ndarray
    values: dict = field(default_factory=dict)


def _profile(records, key, thresholds):
    thresholds = np.append(np.asarray(thresholds, float), math.inf)
    by_tech = {}
    for r in records:
        by_tech.setdefault(r.technique, []).append(r)
    values = {}
    for tech, recs in sorted(by_tech.items()):
        v = np.array([key(r) for r in recs], float)
        harness_ok = np.array([not (r.failure or "").startswith("harness") for r in recs])
        frac = np.array([np.mean(v <= t) for t in thresholds[:-1]] + [np.mean(harness_ok)])
        values[tech] = frac
    return Profile(thresholds, values)


def accuracy_profile(records, thresholds=ACCURACY_THRESHOLDS) -> Profile:
    return _profile(records, lambda r: r.rrms, thresholds)


def time_profile(records, thresholds=TIME_THRESHOLDS) -> Profile:
    # a failed test never counts as fast
    return _profile(records, lambda r: math.inf if r.failure else r.train_seconds, thresholds)


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchmarkRecord(r["problem"], int(r["output_index"]), r["technique"], float(r["rrms"]),
                            float(r["train_seconds"]), float(r["predict_seconds"]), r["failure"] or None)
            for r in rows]


def write_profile(path, profile: Profile):
    techs = list(profile.values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold"] + techs)
        for i, t in enumerate(profile.thresholds):
            w.writerow([repr(float(t))] + [repr(float(profile.values[k][i])) for k in techs])


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _panel(profile, x0, title, xlabel, width=420, height=300):
    """One step-plot panel with a log threshold axis and an extra tick for +inf."""
    finite = profile.thresholds[:-1]
    lo, hi = math.log10(finite[0]), math.log10(finite[-1])
    inf_x = width - 30

    def px(t):
        if math.isinf(t):
            return x0 + inf_x
        return x0 + (math.log10(t) - lo) / (hi - lo) * (inf_x - 40)

    def py(v):
        return 30 + (1.0 - v) * (height - 70)

    parts = [f'<text x="{x0 + width / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
             f'<line x1="{x0}" y1="{py(0):.1f}" x2="{x0 + inf_x}" y2="{py(0):.1f}" stroke="black"/>',
             f'<line x1="{x0}" y1="{py(0):.1f}" x2="{x0}" y2="{py(1):.1f}" stroke="black"/>']
    for e in range(int(lo), int(hi) + 1):
        parts.append(f'<text x="{px(10.0 ** e):.1f}" y="{py(0) + 15:.1f}" text-anchor="middle" '
                     f'font-size="10">1e{e}</text>')
    parts.append(f'<text x="{px(math.inf):.1f}" y="{py(0) + 15:.1f}" text-anchor="middle" font-size="10">'
                 '∞</text>')
    parts.append(f'<text x="{x0 + width / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                 f'font-size="11">{xlabel}</text>')
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{x0 - 4}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:g}</text>')
    for k, (tech, vals) in enumerate(profile.values.items()):
        pts = []
        prev = 0.0
        for t, v in zip(profile.thresholds, vals):
            pts.append(f"{px(t):.1f},{py(prev):.1f}")
            pts.append(f"{px(t):.1f},{py(v):.1f}")
            prev = v
        color = _COLORS[k % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{x0 + 8}" y="{py(1) + 14 + 13 * k:.1f}" fill="{color}" '
                     f'font-size="11">{tech}</text>')
    return "\n".join(parts)


def profile_svg(accuracy: Profile, timing: Profile | None = None) -> str:
    panels = [_panel(accuracy, 50, "Accuracy profile", "RRMS threshold")]
    width = 500
    if timing is not None:
        panels.append(_panel(timing, 550, "Training time profile", "seconds"))
        width = 1000
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="300" '
            f'font-family="sans-serif">\n' + "\n".join(panels) + "\n</svg>\n")
