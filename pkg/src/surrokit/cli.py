"""Command-line interface: train, predict, evaluate, benchmark, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .core import ModelOptions, load_model, rrms, save_model
from .data import load_csv, write_csv
from .errors import (CapacityError, ConfigurationError, ConflictError, DataError, DegenerateMetricError,
                     ModelFormatError, SelectionError, UnsupportedCapabilityError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser():
    p = _Parser(prog="surrokit", description="Train, apply and benchmark surrogate models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a CSV file")
    t.add_argument("--data", required=True)
    t.add_argument("--inputs", required=True, help="comma-separated input column names")
    t.add_argument("--outputs", required=True, help="comma-separated output column names")
    t.add_argument("--categorical", default="", help="comma-separated categorical input columns")
    t.add_argument("--technique", default="auto")
    t.add_argument("--accelerator", type=int, default=1, metavar="N")
    t.add_argument("--exact-fit", action="store_true")
    t.add_argument("--ae", action="store_true", help="require accuracy evaluation")
    t.add_argument("--smoothing", type=float, default=0.0, metavar="X")
    t.add_argument("--joint", action="store_true", help="train outputs jointly where supported")
    t.add_argument("--hint", action="append", default=[], metavar="TAG")
    t.add_argument("--seed", type=int, default=0, metavar="N")
    t.add_argument("--output", required=True, help="model file to write")

    q = sub.add_parser("predict", help="predict with a saved model")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--grad", action="store_true", help="also write gradients")
    q.add_argument("--ae", action="store_true", help="also write accuracy estimates")

    e = sub.add_parser("evaluate", help="RRMS of a saved model on labelled data")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)

    b = sub.add_parser("benchmark", help="run the benchmark suite")
    b.add_argument("--suite", default="desk", help='"desk" or comma-separated problem ids')
    b.add_argument("--technique", default="auto,smart", help="comma-separated technique labels")
    b.add_argument("--accelerator", type=int, default=1, metavar="N")
    b.add_argument("--seed", type=int, default=0, metavar="N")
    b.add_argument("--timeout", type=float, default=120.0, metavar="S")
    b.add_argument("--mem-limit", type=int, default=2048, metavar="MB")
    b.add_argument("--output", required=True, help="output directory")

    i = sub.add_parser("inspect", help="summarize a saved model")
    i.add_argument("--model", required=True)
    return p


def _split(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _cmd_train(a):
    from .api import train

    sample = load_csv(a.data, a.inputs, a.outputs, a.categorical)
    opts = ModelOptions(technique=a.technique, exact_fit=a.exact_fit, require_ae=a.ae, smoothing=a.smoothing,
                        joint_outputs=a.joint, accelerator=a.accelerator, hints=frozenset(a.hint), seed=a.seed)
    model = train(sample, opts)
    model.meta["input_names"] = sample.input_names
    model.meta["output_names"] = sample.output_names
    model.meta["categorical"] = [n for n, c in zip(sample.input_names, sample.categorical_mask) if c]
    model.meta["categories"] = {str(k): v for k, v in sample.categories.items()}
    save_model(model, a.output)
    print(f"trained {model.technique} on {sample.n} rows; model written to {a.output}")
    return EXIT_OK


def _names(model, key, count, prefix):
    names = model.meta.get(key)
    return list(names) if names and len(names) == count else [f"{prefix}{i + 1}" for i in range(count)]


def _load_inputs(model, path, outputs=None):
    inputs = _names(model, "input_names", model.d_in, "x")
    cats = {int(k): v for k, v in model.meta.get("categories", {}).items()}
    return load_csv(path, inputs, outputs, model.meta.get("categorical", []), cats)


def _cmd_predict(a):
    model = load_model(a.model)
    sample = _load_inputs(model, a.data)
    x = sample.inputs
    outs = _names(model, "output_names", model.d_out, "y")
    cols, blocks = list(outs), [model.predict(x)]
    if a.grad:
        g = model.gradient(x)
        cols += [f"d{o}/d{i}" for o in outs for i in sample.input_names]
        blocks.append(g.reshape(len(x), -1))
    if a.ae:
        cols += [f"ae[{o}]" for o in outs]
        blocks.append(model.accuracy(x))
    write_csv(a.out, cols, np.hstack(blocks))
    return EXIT_OK


def _cmd_evaluate(a):
    model = load_model(a.model)
    outs = _names(model, "output_names", model.d_out, "y")
    sample = _load_inputs(model, a.data, outs)
    pred = model.predict(sample.inputs)
    for j, name in enumerate(outs):
        try:
            value = rrms(sample.outputs[:, j], pred[:, j])
        except DegenerateMetricError as exc:
            raise DataError(f"output {name!r}: {exc}") from exc
        print(f"rrms[{name}]={value:.10g}")
    return EXIT_OK


def _cmd_benchmark(a):
    from .bench import parse_suite, run_benchmark

    suite = parse_suite(a.suite)
    opts = ModelOptions(accelerator=a.accelerator, seed=a.seed)
    records, acc, _ = run_benchmark(suite, _split(a.technique), a.seed, a.output, opts,
                                    timeout=a.timeout, mem_limit_mb=a.mem_limit)
    failed = sum(r.failure is not None for r in records)
    print(f"{len(records)} records ({failed} failed) written to {a.output}")
    idx = [int(np.argmin(np.abs(acc.thresholds - t))) for t in (0.1, 0.3, 1.0)]
    for tech, vals in acc.values.items():
        print(f"{tech}: " + " ".join(f"P(rrms<={acc.thresholds[i]:g})={vals[i]:.3f}" for i in idx))
    return EXIT_OK


def _cmd_inspect(a):
    model = load_model(a.model)
    info = {"technique": model.technique, "model_class": type(model).__name__, "d_in": model.d_in,
            "d_out": model.d_out, "capabilities": model.capabilities, "options": model.options.to_dict()}
    for key in ("input_names", "output_names", "n_train", "selected_by", "cv_rrms", "train_seconds"):
        if key in model.meta:
            info[key] = model.meta[key]
    print(json.dumps(info, indent=2, default=str))
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "predict": _cmd_predict, "evaluate": _cmd_evaluate,
            "benchmark": _cmd_benchmark, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConflictError, CapacityError, UnsupportedCapabilityError, SelectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
