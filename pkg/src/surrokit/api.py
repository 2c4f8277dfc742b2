"""Single entry point for training: option checks, technique dispatch, multi-output handling."""

from __future__ import annotations

import time

from .core import InputMap, ModelOptions, StackedModel, TrainingSample, smooth_model, validate_sample
from .errors import ConflictError, DataError

INTERPOLATING = ("gp", "sgp", "splt", "pla", "ta", "moa")
JOINT_CAPABLE = ("gp", "sgp", "hda")


def _trainer(technique):
    from . import gp, hda, linear, moa, piecewise, splines, tensor

    return {
        "rsm": lambda s, o: linear.fit_rsm(s, o),
        "splt": splines.fit_splt,
        "gp": gp.fit_gp,
        "sgp": gp.fit_sgp,
        "hda": hda.boost_hda,
        "ta": lambda s, o: tensor.fit_ta(s, options=o),
        "ita": lambda s, o: tensor.fit_ita(s, options=o),
        "gbrt": piecewise.fit_gbrt,
        "pla": piecewise.fit_pla,
        "moa": moa.fit_moa,
    }[technique]


def check_conflicts(sample, options):
    problems = validate_sample(sample, options)
    for p in problems:
        if p.startswith("conflict"):
            raise ConflictError(p)
    if problems:
        raise DataError("; ".join(problems))


def train(sample: TrainingSample, options: ModelOptions | None = None):
    """Train a surrogate model; ``options.technique`` may be a technique id, "auto" or "smart"."""
    options = options or ModelOptions()
    check_conflicts(sample, options)
    t0 = time.perf_counter()
    technique = options.technique
    if sample.n == 1:
        from .linear import constant_model

        model = constant_model(sample, options)
        model.meta.setdefault("warnings", []).append("single training point: constant model")
    elif technique == "smart":
        from .selector import smart_select

        return smart_select(sample, options)
    else:
        if technique == "auto":
            from .selector import decision_tree_select

            technique = decision_tree_select(sample, options)
        if options.exact_fit and technique not in INTERPOLATING:
            raise ConflictError(f"conflict: {technique} cannot reproduce training outputs exactly")
        opts = options.replace(technique=technique)
        fit = _trainer(technique)
        if sample.d_out > 1 and not (options.joint_outputs and technique in JOINT_CAPABLE):
            comps = [fit(sample.output(j), opts) for j in range(sample.d_out)]
            imap = InputMap.fit(sample.inputs, sample.categorical_mask)
            model = StackedModel(comps, imap, opts, {"n_train": sample.n, "output_names": sample.output_names})
        else:
            model = fit(sample, opts)
        if options.smoothing > 0:
            model = smooth_model(model, options.smoothing)
        if options.technique == "auto":
            model.meta["selected_by"] = "decision_tree"
    model.meta["train_seconds"] = time.perf_counter() - t0
    model.meta.setdefault("n_train", sample.n)
    return model
