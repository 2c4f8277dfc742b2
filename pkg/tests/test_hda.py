import math

import numpy as np
import pytest

from surrokit import ModelOptions, TrainingSample, rrms, train
from surrokit.core import range_of
from surrokit.hda import (GAUSSIAN, SIGMOID, Layer, _prune, boost_hda, fit_hda, fit_layer, layer_predict,
                          select_p)

from conftest import gradient_rel_error


def _bump_sample(seed=0, n=200):
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, (n, 2))
    return TrainingSample(x, np.exp(-np.sum(x ** 2, axis=1)))


def test_linear_data_selects_no_units(rng):
    x = rng.uniform(-1, 1, (60, 3))
    y = x @ [1.0, -0.5, 2.0] + 0.3
    s = TrainingSample(x, y)
    m = fit_hda(s)
    assert m.meta["basis_sizes"] == [0]
    rsm = train(s, ModelOptions(technique="rsm"))
    q = rng.uniform(-1, 1, (200, 3))
    assert rrms(rsm.predict(q)[:, 0], m.predict(q)[:, 0]) <= 1e-6


def test_gaussian_bump_is_fitted():
    s = _bump_sample()
    m = fit_hda(s)
    assert m.meta["basis_sizes"][0] >= 3
    assert rrms(s.outputs[:, 0], m.predict(s.inputs)[:, 0]) < 0.05


def test_deterministic_given_seed():
    s = _bump_sample(1, 60)
    opts = ModelOptions(technique="hda", accelerator=5, seed=3)
    a, b = boost_hda(s, opts), boost_hda(s, opts)
    q = np.random.default_rng(0).uniform(-2, 2, (30, 2))
    assert np.array_equal(a.predict(q), b.predict(q))


def test_single_stage_boost_equals_fit_hda():
    s = _bump_sample(2, 60)
    opts = ModelOptions(technique="hda", accelerator=5)
    a = fit_hda(s, opts)
    b = boost_hda(s, opts.replace(params={"stages": 1}))
    q = np.random.default_rng(0).uniform(-2, 2, (30, 2))
    assert np.array_equal(a.predict(q), b.predict(q))


def test_boosting_residuals_and_cv_never_worse():
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, (300, 2))
    y = x[:, 0] ** 2 + 0.5 * x[:, 0] * x[:, 1] + 0.05 * r.normal(size=300)
    s = TrainingSample(x, y)
    m = boost_hda(s, ModelOptions(technique="hda", accelerator=3))
    hist = m.meta["cv_history"]
    assert min(hist[: m.meta["stages"]]) <= hist[0] + 1e-9
    ys = (y - y.mean()) / y.std()
    current = np.zeros((300, 1))
    norms = [np.linalg.norm(ys)]
    for nu, layer in zip(m.nus, m.layers):
        current = current + nu * layer_predict(layer, m.train_z)
        norms.append(np.linalg.norm(ys[:, None] - current))
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_gradient_matches_differences():
    s = _bump_sample(3, 80)
    m = boost_hda(s, ModelOptions(technique="hda", params={"p": 6, "stages": 2}))
    q = np.random.default_rng(1).uniform(-1.5, 1.5, (10, 2))
    assert gradient_rel_error(m, q) <= 1e-4


def test_wide_gaussians_reduce_to_linear_part(rng):
    z = rng.normal(size=(50, 2))
    centers = rng.normal(size=(3, 2))
    w = rng.normal(size=(6, 1))
    layer = Layer([GAUSSIAN] * 3, centers, [math.log(1e6)] * 3, w, 0.0)
    pred = layer_predict(layer, z)[:, 0]
    linear = w[0, 0] + z @ w[1:3, 0] + w[3:, 0].sum()
    assert np.max(np.abs(pred - linear)) <= 1e-6 * max(range_of(pred), 1e-12)


def test_pruning_keeps_predictions(rng):
    z = rng.normal(size=(40, 2))
    w = np.array([[0.5], [1.0], [-1.0], [2.0], [1e-14], [-3.0]])
    layer = Layer([SIGMOID, GAUSSIAN, SIGMOID], rng.normal(size=(3, 2)), [0.1, 0.0, -0.2], w, 0.0)
    pruned = _prune(layer, 2)
    assert pruned.p == 2
    assert np.max(np.abs(layer_predict(layer, z) - layer_predict(pruned, z))) <= 1e-9


def test_basis_size_scan_respects_half_n():
    r = np.random.default_rng(0)
    z = r.normal(size=(20, 1))
    p, scores = select_p(z, np.sin(z), max_iter=50)
    assert all(k <= 10 for k in scores) and p in scores


def test_layer_with_units_has_finite_parameters(rng):
    z = rng.normal(size=(60, 2))
    layer = fit_layer(z, np.tanh(3 * z[:, :1]), 3)
    assert np.all(np.isfinite(layer.centers)) and np.all(np.isfinite(layer.weights))


def test_too_few_points():
    from surrokit.errors import DataError

    with pytest.raises(DataError):
        boost_hda(TrainingSample([[0.0]], [1.0]))
