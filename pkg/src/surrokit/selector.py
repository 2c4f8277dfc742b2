"""Technique selection: a rule table, and cross-validated Bayesian tuning of every admissible technique."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from . import gp as _gp
from .core import ModelOptions, TrainingSample, accel_scale, k_fold_cv
from .errors import ConflictError, DataError, SelectionError
from .tensor import detect_incomplete_grid, factorize_doe

log = logging.getLogger(__name__)

SBO_BUDGET = 20
N_CANDIDATES = 2048
INTERPOLATORS = ("gp", "sgp", "splt", "pla", "ta")
NOISE_SENSITIVE = ("splt", "pla", "ta")


# ---------------------------------------------------------------- rule table

def design_flags(sample: TrainingSample) -> dict:
    """Structure of the DoE that the rule table looks at."""
    groups = 1
    try:
        groups = len(factorize_doe(sample.inputs).partition)
    except DataError:
        pass
    return {"factor_groups": groups, "incomplete_grid": detect_incomplete_grid(sample.inputs) is not None}


def decision_tree_select(sample: TrainingSample, options: ModelOptions, flags=None) -> str:
    """Pick a technique from size, dimension, DoE structure and the option flags."""
    n, d = sample.n, sample.d_in
    ae, exact = options.require_ae, options.exact_fit
    if options.require_linearity:
        if ae:
            raise ConflictError("conflict: no linear technique provides accuracy evaluation")
        if exact:
            raise ConflictError("conflict: a linear model cannot guarantee exact fit")
        return "rsm"
    if exact and "IsNoisy" in options.hints:
        raise ConflictError("conflict: exact fit requested for data hinted as noisy")
    if d == 1 and n <= 1000 and not ae:
        return "splt"
    if options.enable_tensor and not ae:
        flags = flags or design_flags(sample)
        if flags["factor_groups"] > 1:
            return "ta"
        if flags["incomplete_grid"] and not exact:
            return "ita"
    if n < 8 and not exact and not ae:
        return "rsm"
    if ae:
        if n <= 4000:
            return "gp"
        if n <= 50000:
            return "sgp"
        raise ConflictError(f"conflict: accuracy evaluation is unavailable for N={n} > 50000")
    if n <= 4000:
        return "gp"
    if exact:
        if d <= 3:
            return "pla"
        raise ConflictError(f"conflict: no interpolating technique handles N={n} in {d} dimensions")
    if n <= 20000:
        return "hda"
    return "gbrt"


def admissible_techniques(sample: TrainingSample, options: ModelOptions, flags=None) -> list:
    """Candidate set for smart selection after capacity, capability and hint filters."""
    n, d = sample.n, sample.d_in
    flags = flags or design_flags(sample)
    if options.require_linearity:
        if options.require_ae or options.exact_fit:
            decision_tree_select(sample, options, flags)  # raises the matching conflict
        return ["rsm"]
    cands = ["rsm"]
    if d == 1 and n >= 2:
        cands.append("splt")
    if n <= 4000:
        cands.append("gp")
    else:
        cands.append("sgp")
    if n >= 8:
        cands.append("hda")
    if options.enable_tensor and flags["factor_groups"] > 1:
        cands.append("ta")
    if options.enable_tensor and flags["incomplete_grid"]:
        cands.append("ita")
    if n >= 2:
        cands.append("gbrt")
    if d <= 3 and n >= d + 2:
        cands.append("pla")
    if "ClusteredData" in options.hints and n >= 20:
        cands.append("moa")
    filters = []
    if options.exact_fit:
        cands = [c for c in cands if c in INTERPOLATORS]
        filters.append("exact_fit")
    if options.require_ae:
        cands = [c for c in cands if c in ("gp", "sgp", "moa")]
        filters.append("require_ae")
    if options.smoothing > 0:
        cands = [c for c in cands if c not in ("gbrt", "pla")]
        filters.append("smoothing")
    if "IsNoisy" in options.hints:
        if options.exact_fit:
            raise ConflictError("conflict: exact fit requested for data hinted as noisy")
        cands = [c for c in cands if c not in NOISE_SENSITIVE]
        filters.append("IsNoisy")
    if not cands:
        raise ConflictError("conflict: no admissible technique after filters " + ", ".join(filters))
    return cands


# ---------------------------------------------------------------- parameter spaces

@dataclass
class Param:
    name: str
    kind: str          # log | linear | integer | categorical
    bounds: tuple      # (lo, hi) or the list of levels
    default: object    # None means "let the technique decide"


@dataclass
class TechniqueParamSpace:
    technique: str
    params: list = field(default_factory=list)

    @property
    def width(self):
        return sum(len(p.bounds) if p.kind == "categorical" else 1 for p in self.params)

    def defaults(self) -> dict:
        return {p.name: p.default for p in self.params}

    def encode(self, lam: dict) -> np.ndarray:
        """Unit-cube coordinates; categorical levels one-hot, auto defaults at the midpoint."""
        out = []
        for p in self.params:
            v = lam.get(p.name)
            if p.kind == "categorical":
                hot = np.zeros(len(p.bounds))
                hot[p.bounds.index(v) if v in p.bounds else 0] = 1.0
                out.extend(hot)
            elif v is None:
                out.append(0.5)
            elif p.kind == "log":
                lo, hi = math.log(p.bounds[0]), math.log(p.bounds[1])
                out.append((math.log(v) - lo) / (hi - lo))
            else:
                lo, hi = p.bounds
                out.append((v - lo) / (hi - lo) if hi > lo else 0.5)
        return np.array(out, float)

    def decode(self, u) -> dict:
        """Parameter values for a point of the unit cube (categorical blocks by argmax)."""
        lam, i = {}, 0
        for p in self.params:
            if p.kind == "categorical":
                k = len(p.bounds)
                lam[p.name] = p.bounds[int(np.argmax(u[i:i + k]))]
                i += k
                continue
            t = float(np.clip(u[i], 0.0, 1.0))
            i += 1
            if p.kind == "log":
                lo, hi = math.log(p.bounds[0]), math.log(p.bounds[1])
                lam[p.name] = float(math.exp(lo + t * (hi - lo)))
            elif p.kind == "integer":
                lo, hi = p.bounds
                lam[p.name] = int(round(lo + t * (hi - lo)))
            else:
                lo, hi = p.bounds
                lam[p.name] = lo + t * (hi - lo)
        return lam

    def snap(self, u):
        return self.encode(self.decode(u))


def default_space(technique: str) -> TechniqueParamSpace:
    spaces = {
        "gp": [Param("nugget", "log", (1e-10, 1e-1), None), Param("kernel", "categorical", ["se", "matern52"], "se")],
        "sgp": [Param("nugget", "log", (1e-10, 1e-1), None), Param("kernel", "categorical", ["se", "matern52"], "se")],
        "hda": [Param("p", "categorical", [None, 0, 3, 6, 12, 25, 50, 100], None),
                Param("nu", "categorical", [0.5, 0.25, 1.0], 0.5)],
        "gbrt": [Param("depth", "integer", (2, 6), 3), Param("learning_rate", "log", (0.01, 0.3), 0.1),
                 Param("trees", "categorical", [100, 50, 200], 100)],
        "rsm": [Param("order", "categorical", ["linear", "quadratic"], "linear"),
                Param("estimator", "categorical", ["ridge", "stepwise", "elastic_net"], "ridge"),
                Param("ridge_lambda", "log", (1e-8, 1e2), None)],
        "splt": [Param("tension_cap", "log", (1.0, 1e3), 1e3)],
        "ita": [Param("lambda", "log", (1e-8, 10.0), 1e-3)],
        "moa": [Param("k_max", "integer", (1, 5), 5), Param("tau", "log", (1e-3, 0.2), 0.01)],
        "ta": [],
        "pla": [],
    }
    return TechniqueParamSpace(technique, spaces[technique])


# ---------------------------------------------------------------- acquisition

def expected_improvement(mean, sd, best):
    """Closed-form E[max(0, best - c)] for c ~ N(mean, sd^2); sd = 0 gives max(0, best - mean)."""
    mean = np.asarray(mean, float)
    sd = np.asarray(sd, float)
    gap = best - mean
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sd > 0, gap / np.where(sd > 0, sd, 1.0), 0.0)
        ei = gap * norm.cdf(z) + sd * norm.pdf(z)
    return np.where(sd > 0, np.maximum(ei, 0.0), np.maximum(gap, 0.0))


@dataclass
class SelectorState:
    """History of evaluated parameter vectors and their CV errors for one technique."""

    technique: str
    space: TechniqueParamSpace
    budget: int
    acceptable_quality: float | None = None
    history: list = field(default_factory=list)     # (params, c) pairs
    seconds: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    aux: object = None                               # (z, alpha-bearing GpModel, c mean, c scale)

    @property
    def incumbent(self):
        return min(c for _, c in self.history) if self.history else math.inf

    @property
    def best_params(self):
        return min(self.history, key=lambda h: h[1])[0]

    def fit_aux(self, seed=0):
        x = np.array([self.space.encode(lam) for lam, _ in self.history])
        c = np.array([v for _, v in self.history], float)
        mu, sd = c.mean(), c.std()
        sd = sd if sd > 0 else 1.0
        cs = ((c - mu) / sd)[:, None]
        theta, _ = _gp.optimize_hyperparameters(x, cs, "se", None, restarts=2, seed=seed)
        d = x.shape[1]
        model = _gp.GpModel(_identity_map(d), x, cs, np.exp(theta[:d]), math.exp(theta[d]),
                            math.exp(theta[d + 1]), [mu], [sd])
        self.aux = model

    def predict_aux(self, u):
        u = np.atleast_2d(u)
        return self.aux._predict(u)[:, 0], self.aux._ae(u)[:, 0]


def _identity_map(d):
    from .core import InputMap

    return InputMap.identity(d)


def acquisition_ei(state: SelectorState, lam) -> float:
    """Expected improvement of the auxiliary model at parameter vector ``lam`` (dict or encoded)."""
    u = state.space.encode(lam) if isinstance(lam, dict) else np.asarray(lam, float)
    mean, sd = state.predict_aux(u)
    return float(expected_improvement(mean, sd, state.incumbent)[0])


def _propose(state: SelectorState, rng_seed: int):
    space = state.space
    seen = {json.dumps(lam, sort_keys=True, default=str) for lam, _ in state.history}
    sob = qmc.Sobol(space.width, scramble=True, seed=rng_seed)
    cand = sob.random(N_CANDIDATES)
    cand = np.array([space.snap(u) for u in cand])
    if len(state.history) >= 2:
        state.fit_aux(rng_seed)
        mean, sd = state.predict_aux(cand)
        ei = expected_improvement(mean, sd, state.incumbent)
        order = np.argsort(-ei, kind="stable")
    else:
        order = np.arange(len(cand))
    for i in order:
        u = cand[i]
        if len(state.history) >= 2:
            u = _polish(state, u)
        lam = space.decode(u)
        if json.dumps(lam, sort_keys=True, default=str) not in seen:
            return lam
    return None  # every candidate was evaluated already


def _polish(state, u):
    """Local EI ascent over the continuous coordinates of ``u``."""
    space = state.space
    cont = []
    i = 0
    for p in space.params:
        if p.kind == "categorical":
            i += len(p.bounds)
        else:
            if p.kind != "integer":
                cont.append(i)
            i += 1
    if not cont:
        return u

    def neg_ei(v):
        w = u.copy()
        w[cont] = v
        return -acquisition_ei(state, w)

    res = minimize(neg_ei, u[cont], method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(cont),
                   options={"maxiter": 30})
    if res.fun <= neg_ei(u[cont]):
        u = u.copy()
        u[cont] = res.x
    return space.snap(u)


def evaluate_params(sample, options, technique, lam, folds=5, seed=0):
    params = {k: v for k, v in lam.items() if v is not None}
    opts = options.replace(technique=technique, params={**options.params, **params}, smoothing=options.smoothing)
    t0 = time.perf_counter()
    cv = k_fold_cv(sample, opts, technique, folds=min(folds, sample.n), seed=seed)
    return cv, time.perf_counter() - t0


def sbo_optimize(sample, space: TechniqueParamSpace, options: ModelOptions, budget=None, folds=5):
    """Surrogate-based minimization of the CV error over one technique's parameters."""
    if budget is None:
        budget = accel_scale(SBO_BUDGET, options.accelerator)
    if not space.params:
        budget = 1
    if budget < 1:
        raise DataError("SBO budget must be at least 1")
    state = SelectorState(space.technique, space, budget, options.acceptable_quality)
    lam = space.defaults()
    for k in range(budget):
        cv, secs = evaluate_params(sample, options, space.technique, lam, folds, options.seed)
        c = cv.pooled_rrms
        if len(cv.failed_folds) == cv.folds:
            state.failures.append({"params": lam, "failed_folds": cv.failed_folds})
        if not math.isfinite(c):
            c = 1e6
        state.history.append((lam, c))
        state.seconds.append(secs)
        log.info(json.dumps({"technique": space.technique, "params": lam, "c": c, "seconds": secs},
                            default=str))
        if state.acceptable_quality is not None and state.incumbent <= state.acceptable_quality:
            break
        if k + 1 < budget:
            lam = _propose(state, options.seed + 7919 * (k + 1))
            if lam is None:
                break
    if len(state.failures) == len(state.history):
        raise SelectionError(f"every evaluation of {space.technique} failed", state.failures)
    return state.best_params, state.incumbent, state


def smart_select(sample, options: ModelOptions, candidates=None, spaces=None, budget=None):
    """Tune every admissible technique by SBO and retrain the one with the lowest CV error."""
    from .api import check_conflicts, train

    check_conflicts(sample, options.replace(technique="smart"))
    if sample.n == 1:
        return train(sample, options.replace(technique="auto"))
    cands = list(candidates) if candidates else admissible_techniques(sample, options)
    spaces = spaces or {}
    results = {}
    for tech in cands:
        space = spaces.get(tech) or default_space(tech)
        try:
            lam, c, state = sbo_optimize(sample, space, options, budget)
        except SelectionError as exc:
            results[tech] = {"error": str(exc), "diagnostics": exc.diagnostics}
            continue
        results[tech] = {"params": lam, "cv_rrms": c, "state": state,
                         "mean_seconds": float(np.mean(state.seconds))}
    ok = [t for t in cands if "cv_rrms" in results[t]]
    if not ok:
        raise SelectionError("no candidate technique could be trained",
                             {t: results[t] for t in cands})
    ranked = sorted(ok, key=lambda t: (results[t]["cv_rrms"], results[t]["mean_seconds"]))
    last = None
    for tech in ranked:
        lam = {k: v for k, v in results[tech]["params"].items() if v is not None}
        try:
            model = train(sample, options.replace(technique=tech, params={**options.params, **lam}))
        except Exception as exc:  # winner failing on the full sample: fall back to the runner-up
            last = exc
            continue
        model.meta["selected_by"] = "smart"
        model.meta["cv_rrms"] = results[tech]["cv_rrms"]
        model.meta["smart_selection"] = {
            t: ({"params": results[t]["params"], "cv_rrms": results[t]["cv_rrms"],
                 "history": [[lam_i, c_i] for lam_i, c_i in results[t]["state"].history]}
                if "cv_rrms" in results[t] else {"error": results[t]["error"]})
            for t in cands}
        model.selection_report = results
        return model
    raise SelectionError(f"every ranked technique failed on the full sample: {last}", {})
