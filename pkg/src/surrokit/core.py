"""Shared data model, the trained-model contract, RRMS, cross-validation and persistence."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    DegenerateMetricError,
    EncodingError,
    ModelFormatError,
    UnsupportedCapabilityError,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

TECHNIQUES = ("auto", "smart", "rsm", "splt", "gp", "sgp", "hda", "ta", "ita", "gbrt", "pla", "moa")
HINTS = ("IsNoisy", "ClusteredData")

# accelerator level -> multiplier on budgets (SBO iterations, restarts, grid lengths, trees)
ACCEL_FACTORS = (1.0, 0.75, 0.5, 0.3, 0.2)


def accel_scale(n: int, level: int) -> int:
    """Scale an integer budget ``n`` down for accelerator ``level`` (1..5)."""
    return max(1, math.ceil(n * ACCEL_FACTORS[level - 1] - 1e-9))


@dataclass
class TrainingSample:
    """N input/output pairs with column metadata.

    ``categories`` maps a categorical input column index to the text labels its
    integer codes stand for (only filled when labels came from text files).
    """

    inputs: np.ndarray
    outputs: np.ndarray
    input_names: list = None
    output_names: list = None
    categorical_mask: list = None
    categories: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2:
            raise DataError("inputs and outputs must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"inputs have {x.shape[0]} rows but outputs have {y.shape[0]}")
        self.inputs, self.outputs = x, y
        if self.input_names is None:
            self.input_names = [f"x{i + 1}" for i in range(x.shape[1])]
        if self.output_names is None:
            self.output_names = [f"y{i + 1}" for i in range(y.shape[1])]
        if self.categorical_mask is None:
            self.categorical_mask = [False] * x.shape[1]
        self.input_names = list(self.input_names)
        self.output_names = list(self.output_names)
        self.categorical_mask = [bool(c) for c in self.categorical_mask]
        if len(self.input_names) != x.shape[1] or len(self.categorical_mask) != x.shape[1]:
            raise DataError("input metadata length does not match the number of input columns")
        if len(self.output_names) != y.shape[1]:
            raise DataError("output_names length does not match the number of output columns")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.outputs.shape[1]

    def subset(self, rows) -> "TrainingSample":
        return dataclasses.replace(self, inputs=self.inputs[rows], outputs=self.outputs[rows])

    def output(self, j: int) -> "TrainingSample":
        return dataclasses.replace(
            self, outputs=self.outputs[:, [j]], output_names=[self.output_names[j]]
        )


@dataclass
class ModelOptions:
    """User options controlling technique choice and model features.

    ``params`` carries technique parameters (the values tuned by smart selection);
    unknown keys are ignored by techniques that do not use them.
    """

    technique: str = "auto"
    exact_fit: bool = False
    require_ae: bool = False
    require_linearity: bool = False
    enable_tensor: bool = True
    smoothing: float = 0.0
    joint_outputs: bool = False
    accelerator: int = 1
    hints: frozenset = frozenset()
    seed: int = 0
    acceptable_quality: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ConfigurationError(f"unknown technique {self.technique!r}")
        if not 0.0 <= float(self.smoothing) <= 1.0:
            raise ConfigurationError("smoothing must lie in [0, 1]")
        if int(self.accelerator) not in (1, 2, 3, 4, 5):
            raise ConfigurationError("accelerator must be an integer in 1..5")
        if int(self.seed) < 0:
            raise ConfigurationError("seed must be non-negative")
        self.hints = frozenset(self.hints)
        self.params = dict(self.params)

    def replace(self, **changes) -> "ModelOptions":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hints"] = sorted(self.hints)
        d["params"] = _jsonable(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelOptions":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    return obj


class InputMap:
    """Categorical one-hot encoding followed by per-column standardization.

    Categorical columns expand to ``levels - 1`` dummy columns (first level is
    the reference).  The derivative with respect to a categorical input is 0.
    """

    def __init__(self, d_in, mean, scale, levels=None):
        self.d_in = int(d_in)
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.levels = {int(k): [float(v) for v in vals] for k, vals in (levels or {}).items()}
        self.dim = self.mean.size
        jac = np.zeros((self.dim, self.d_in))
        col = 0
        for j in range(self.d_in):
            if j in self.levels:
                col += len(self.levels[j]) - 1
            else:
                jac[col, j] = 1.0 / self.scale[col]
                col += 1
        self.jacobian = jac

    @classmethod
    def fit(cls, x, categorical_mask=None, standardize=True):
        x = np.asarray(x, dtype=float)
        d_in = x.shape[1]
        mask = categorical_mask or [False] * d_in
        levels = {j: sorted(set(x[:, j].tolist())) for j in range(d_in) if mask[j]}
        raw = cls(d_in, np.zeros(_encoded_dim(d_in, levels)), np.ones(_encoded_dim(d_in, levels)), levels)
        e = raw.encode(x)
        if standardize:
            mean = e.mean(axis=0)
            scale = e.std(axis=0)
            scale[scale <= 1e-300] = 1.0
        else:
            mean, scale = np.zeros(e.shape[1]), np.ones(e.shape[1])
        return cls(d_in, mean, scale, levels)

    @classmethod
    def identity(cls, d_in):
        return cls(d_in, np.zeros(d_in), np.ones(d_in))

    def encode(self, x):
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(self.d_in):
            if j in self.levels:
                lv = self.levels[j]
                known = np.isin(x[:, j], lv)
                if not known.all():
                    bad = x[~known, j][0]
                    raise EncodingError(f"unseen categorical label {bad!r} in input column {j}")
                for level in lv[1:]:
                    cols.append((x[:, j] == level).astype(float))
            else:
                cols.append(x[:, j])
        return np.column_stack(cols) if cols else np.zeros((x.shape[0], 0))

    def transform(self, x):
        return (self.encode(x) - self.mean) / self.scale

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "d_in": self.d_in,
            "categorical_levels": {str(k): v for k, v in self.levels.items()},
        }

    @classmethod
    def from_dict(cls, d, d_in):
        return cls(d.get("d_in", d_in), d["mean"], d["scale"], d.get("categorical_levels"))


def _encoded_dim(d_in, levels):
    return sum(len(levels[j]) - 1 if j in levels else 1 for j in range(d_in))


def as_2d(x, d_in):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.size == d_in else x.reshape(-1, d_in)
    if x.ndim != 2 or x.shape[1] != d_in:
        raise DataError(f"expected points with {d_in} coordinates, got shape {np.shape(x)}")
    return x


_MODEL_CLASSES: dict = {}


def register_model(cls):
    _MODEL_CLASSES[cls.__name__] = cls
    return cls


class SurrogateModel:
    """A trained approximation of R^d_in -> R^d_out.

    Subclasses work on standardized encoded inputs ``z`` and implement
    ``_predict``, ``_gradient`` (shape n x d_out x dim(z)), optionally ``_ae``,
    plus ``get_params`` / ``from_params`` for persistence.
    """

    technique = "base"
    has_gradient = True
    has_ae = False
    is_smooth = True

    def __init__(self, input_map: InputMap, d_out: int, options: ModelOptions | None = None, meta=None):
        self.input_map = input_map
        self.d_out = int(d_out)
        self.options = options or ModelOptions()
        self.meta = dict(meta or {})

    @property
    def d_in(self) -> int:
        return self.input_map.d_in

    @property
    def capabilities(self) -> dict:
        return {"has_gradient": self.has_gradient, "has_ae": self.has_ae, "is_smooth": self.is_smooth}

    def predict(self, x) -> np.ndarray:
        z = self.input_map.transform(as_2d(x, self.d_in))
        return self._predict(z)

    def gradient(self, x) -> np.ndarray:
        """Jacobian of the prediction, shape (n, d_out, d_in)."""
        if not self.has_gradient:
            raise UnsupportedCapabilityError("technique has no gradient")
        z = self.input_map.transform(as_2d(x, self.d_in))
        return self._gradient(z) @ self.input_map.jacobian

    def accuracy(self, x) -> np.ndarray:
        """Point-wise accuracy estimate (posterior standard deviation)."""
        if not self.has_ae:
            raise UnsupportedCapabilityError("technique has no accuracy evaluation")
        z = self.input_map.transform(as_2d(x, self.d_in))
        return self._ae(z)

    def _predict(self, z):
        raise NotImplementedError

    def _gradient(self, z):
        raise NotImplementedError

    def _ae(self, z):
        raise NotImplementedError

    def _smoothed(self, s: float) -> "SurrogateModel":
        raise UnsupportedCapabilityError(f"{self.technique} models do not support smoothing")

    def get_params(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_params(cls, params, input_map, d_out, options, meta):
        raise NotImplementedError

    def _clone_with(self, **attrs):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.meta = dict(self.meta)
        new.__dict__.update(attrs)
        return new


@register_model
class StackedModel(SurrogateModel):
    """Componentwise multi-output model: one independent single-output model per column."""

    technique = "stacked"

    def __init__(self, components, input_map, options=None, meta=None):
        super().__init__(input_map, len(components), options, meta)
        self.components = list(components)
        self.technique = components[0].technique
        self.has_gradient = all(c.has_gradient for c in components)
        self.has_ae = all(c.has_ae for c in components)
        self.is_smooth = all(c.is_smooth for c in components)

    def predict(self, x):
        return np.hstack([c.predict(x) for c in self.components])

    def gradient(self, x):
        if not self.has_gradient:
            raise UnsupportedCapabilityError("technique has no gradient")
        return np.concatenate([c.gradient(x) for c in self.components], axis=1)

    def accuracy(self, x):
        if not self.has_ae:
            raise UnsupportedCapabilityError("technique has no accuracy evaluation")
        return np.hstack([c.accuracy(x) for c in self.components])

    def _smoothed(self, s):
        return self._clone_with(components=[smooth_model(c, s) for c in self.components])

    def get_params(self):
        return {"components": [model_to_record(c) for c in self.components]}

    @classmethod
    def from_params(cls, params, input_map, d_out, options, meta):
        comps = [model_from_record(r) for r in params["components"]]
        return cls(comps, input_map, options, meta)


# ---------------------------------------------------------------- persistence

def _fmt_float(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return format(v, ".16e")


def dumps_exact(obj, indent=None, _level=0) -> str:
    """JSON text with every real written to 17 significant digits."""
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_exact(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + ",".join(items) + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps_exact(v) for v in obj) + "]"
        return "[" + ",".join(f"{pad}{dumps_exact(v, indent, _level + 1)}" for v in obj) + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    if isinstance(obj, (set, frozenset)):
        return dumps_exact(sorted(obj), indent, _level)
    return json.dumps(obj)


def model_to_record(model: SurrogateModel) -> dict:
    return {
        "technique": model.technique,
        "model_class": type(model).__name__,
        "d_in": model.d_in,
        "d_out": model.d_out,
        "options": model.options.to_dict(),
        "standardization": model.input_map.to_dict(),
        "parameters": _jsonable(model.get_params()),
        "meta": _jsonable(model.meta),
    }


def model_from_record(rec: dict) -> SurrogateModel:
    for key in ("technique", "d_in", "d_out", "standardization", "parameters"):
        if key not in rec:
            raise ModelFormatError(f"model record is missing required field {key!r}")
    cls = _MODEL_CLASSES.get(rec.get("model_class"))
    if cls is None:
        cls = next((c for c in _MODEL_CLASSES.values() if c.technique == rec["technique"]), None)
    if cls is None:
        raise ModelFormatError(f"unknown technique id in field 'technique': {rec['technique']!r}")
    try:
        input_map = InputMap.from_dict(rec["standardization"], rec["d_in"])
        options = ModelOptions.from_dict(rec.get("options", {}))
        model = cls.from_params(rec["parameters"], input_map, int(rec["d_out"]), options, rec.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, KeyError):
            raise ModelFormatError(f"model parameters are missing field {exc.args[0]!r}") from exc
        raise ModelFormatError(f"invalid model parameters: {exc}") from exc
    return model


def save_model(model: SurrogateModel, path) -> None:
    _load_techniques()
    rec = {"format_version": FORMAT_VERSION}
    rec.update(model_to_record(model))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_exact(rec, indent=1))
        fh.write("\n")


def load_model(path) -> SurrogateModel:
    _load_techniques()
    try:
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is truncated or not JSON: {exc}") from exc
    if not isinstance(rec, dict) or "format_version" not in rec:
        raise ModelFormatError("model file is missing required field 'format_version'")
    if rec["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format_version {rec['format_version']!r} (expected {FORMAT_VERSION})"
        )
    return model_from_record(rec)


def _load_techniques():
    # importing the technique modules registers their model classes
    from . import gp, hda, linear, moa, piecewise, splines, tensor  # noqa: F401


# ---------------------------------------------------------------- metrics

def rrms(true_outputs, predicted) -> float:
    """Relative root-mean-squared error; the mean is taken over the test set."""
    f = np.asarray(true_outputs, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if f.shape != p.shape:
        raise DataError("true and predicted values differ in length")
    if f.size < 2:
        raise DegenerateMetricError("RRMS needs at least two test values")
    dev = f - f.mean()
    den = np.dot(dev, dev)
    if den == 0.0:
        raise DegenerateMetricError("RRMS is undefined: all true values are equal")
    res = f - p
    return math.sqrt(np.dot(res, res) / den)


def validate_sample(sample: TrainingSample, options: ModelOptions | None = None) -> list:
    """Return a list of human-readable problems with the sample/options pair."""
    options = options or ModelOptions()
    report = []
    if sample.n < 1:
        report.append("sample has no rows")
    if not np.all(np.isfinite(sample.inputs)) or not np.all(np.isfinite(sample.outputs)):
        report.append("sample contains NaN or Inf values")
    if options.exact_fit and sample.n > 1:
        _, inv = np.unique(sample.inputs, axis=0, return_inverse=True)
        inv = np.asarray(inv).ravel()
        for g in np.unique(inv):
            rows = sample.outputs[inv == g]
            if rows.shape[0] > 1 and np.ptp(rows, axis=0).max() > 0:
                report.append("conflict: exact fit impossible (equal inputs with different outputs)")
                break
    if options.require_linearity and options.technique not in ("auto", "smart", "rsm"):
        report.append("conflict: linearity requires rsm")
    if options.require_linearity and options.require_ae:
        report.append("conflict: no linear technique provides accuracy evaluation")
    if options.require_linearity and options.exact_fit:
        report.append("conflict: a linear model cannot guarantee exact fit")
    if options.exact_fit and "IsNoisy" in options.hints:
        report.append("conflict: exact fit requested for data hinted as noisy")
    if options.require_ae and options.technique in ("rsm", "splt", "hda", "ta", "ita", "gbrt", "pla"):
        report.append(f"conflict: {options.technique} provides no accuracy evaluation")
    if options.smoothing > 0 and options.technique in ("gbrt", "pla"):
        report.append(f"conflict: {options.technique} models cannot be smoothed")
    return report


@dataclass
class CvEstimate:
    rrms_per_output: list
    pooled_rrms: float
    folds: int
    failed_folds: list = field(default_factory=list)


def _pooled(f, p):
    try:
        return rrms(f, p)
    except DegenerateMetricError:
        return 0.0 if np.allclose(f, p) else math.inf


def fold_indices(n: int, folds: int, seed: int) -> list:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[k::folds]) for k in range(folds)]


def k_fold_cv(
    sample: TrainingSample,
    options: ModelOptions,
    trainer: str | Callable | None = None,
    folds: int = 5,
    seed: int = 0,
) -> CvEstimate:
    """Pooled out-of-fold RRMS; failing folds predict their training mean."""
    if folds < 2 or folds > sample.n:
        raise ConfigurationError(f"folds must lie in [2, N={sample.n}], got {folds}")
    if trainer is None or isinstance(trainer, str):
        from .api import train

        technique = trainer or options.technique
        opts = options.replace(technique=technique)

        def trainer(s, o=opts):  # noqa: E306
            return train(s, o)

    pred = np.empty_like(sample.outputs)
    failed = []
    for k, test in enumerate(fold_indices(sample.n, folds, seed)):
        mask = np.ones(sample.n, bool)
        mask[test] = False
        sub = sample.subset(mask)
        try:
            model = trainer(sub) if _arity(trainer) == 1 else trainer(sub, options)
            pred[test] = model.predict(sample.inputs[test])
            if not np.all(np.isfinite(pred[test])):
                raise FloatingPointError("non-finite predictions")
        except Exception as exc:  # a failing fold must not abort the estimate
            log.debug("fold %d failed: %s", k, exc)
            failed.append(k)
            pred[test] = sub.outputs.mean(axis=0)
    per = [_pooled(sample.outputs[:, j], pred[:, j]) for j in range(sample.d_out)]
    return CvEstimate(per, float(np.mean(per)), folds, failed)


def _arity(fn) -> int:
    import inspect

    try:
        params = inspect.signature(fn).parameters.values()
    except (TypeError, ValueError):
        return 2
    required = [p for p in params if p.default is inspect.Parameter.empty
                and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    return len(required)


# ---------------------------------------------------------------- smoothing

SMOOTH_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def smooth_model(model: SurrogateModel, s: float) -> SurrogateModel:
    """Return a regularized copy of ``model``; ``s = 0`` is the identity."""
    if not model.is_smooth:
        raise UnsupportedCapabilityError(f"{model.technique} models do not support smoothing")
    if not 0.0 <= s <= 1.0:
        raise ConfigurationError("smoothing must lie in [0, 1]")
    if s == 0.0:
        return model
    new = model._smoothed(float(s))
    new.meta["smoothing"] = float(s)
    return new


def roughness(model: SurrogateModel, lower, upper, n_probe=1000, seed=0) -> float:
    """Mean squared gradient norm over a random probe of a box."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    rng = np.random.default_rng(seed)
    pts = lower + (upper - lower) * rng.random((n_probe, lower.size))
    g = model.gradient(pts)
    return float(np.mean(np.sum(g ** 2, axis=(1, 2))))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def range_of(y: Sequence) -> float:
    y = np.asarray(y, float)
    return float(np.ptp(y)) if y.size else 0.0
