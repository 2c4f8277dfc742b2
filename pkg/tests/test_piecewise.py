import itertools

import numpy as np
import pytest

from surrokit import ModelOptions, TrainingSample, train
from surrokit.core import rrms
from surrokit.errors import CapacityError, DimensionReductionError, UnsupportedCapabilityError
from surrokit.piecewise import fit_gbrt, fit_pla, triangulate


def test_depth_zero_tree_predicts_mean(rng):
    x = rng.uniform(size=(30, 2))
    y = rng.normal(size=30)
    m = fit_gbrt(TrainingSample(x, y), ModelOptions(technique="gbrt", params={"depth": 0, "trees": 1}))
    np.testing.assert_allclose(m.predict(rng.uniform(size=(50, 2)))[:, 0], y.mean(), atol=1e-14)


def test_step_function_is_fitted(rng):
    x = rng.uniform(-1, 1, (200, 2))
    y = np.where(x[:, 0] > 0.2, 1.0, -1.0)
    m = train(TrainingSample(x, y), ModelOptions(technique="gbrt"))
    assert rrms(y, m.predict(x)[:, 0]) < 0.1


def test_gbrt_has_no_gradient(rng):
    x = rng.uniform(size=(20, 2))
    m = fit_gbrt(TrainingSample(x, x[:, 0]))
    assert not m.is_smooth
    with pytest.raises(UnsupportedCapabilityError):
        m.gradient(x[:2])


def test_boosting_loss_non_increasing(rng):
    x = rng.uniform(size=(80, 3))
    y = np.sin(4 * x[:, 0]) + x[:, 1] * x[:, 2] + 0.1 * rng.normal(size=80)
    loss = np.array(fit_gbrt(TrainingSample(x, y)).meta["training_loss"][0])
    assert np.all(np.diff(loss) <= 1e-12 * loss[0])


def test_gbrt_tree_depth_bounded(rng):
    x = rng.uniform(size=(60, 2))
    m = fit_gbrt(TrainingSample(x, np.sin(5 * x[:, 0])), ModelOptions(technique="gbrt", params={"depth": 2}))

    def depth(tree, node=0):
        if tree["left"][node] < 0:
            return 0
        return 1 + max(depth(tree, tree["left"][node]), depth(tree, tree["right"][node]))

    assert max(depth(t) for t in m.trees[0]) == 2


# ---------------------------------------------------------------- PLA

def test_linear_function_reproduced(rng):
    x = rng.uniform(-1, 1, (40, 2))
    f = lambda p: 1.5 * p[:, 0] - 0.7 * p[:, 1] + 0.2
    m = fit_pla(TrainingSample(x, f(x)))
    q = rng.uniform(-1, 1, (500, 2))
    inside = ~m.extrapolation_flags(q)
    assert inside.sum() > 300
    assert np.max(np.abs(m.predict(q[inside])[:, 0] - f(q[inside]))) <= 1e-10


def test_vertices_are_exact(rng):
    x = rng.uniform(size=(25, 3))
    y = rng.normal(size=25)
    m = fit_pla(TrainingSample(x, y))
    assert np.max(np.abs(m.predict(x)[:, 0] - y)) <= 1e-12


def test_centroid_is_vertex_mean(rng):
    x = rng.uniform(size=(15, 2))
    y = rng.normal(size=15)
    m = fit_pla(TrainingSample(x, y))
    z = m.input_map.transform(x)
    row = [int(np.argmin(np.sum((z - v) ** 2, axis=1))) for v in m.vertices]
    for s in m.simplices[:5]:
        # the input map is affine, so centroids map to centroids
        centroid = x[[row[i] for i in s]].mean(axis=0, keepdims=True)
        assert m.predict(centroid)[0, 0] == pytest.approx(m.values[s, 0].mean(), abs=1e-12)


def _value_in_simplex(m, k, z):
    c = m._tinv[k] @ (z - m._last[k])
    w = np.append(c, 1.0 - c.sum())
    return w @ m.values[m.simplices[k], 0]


def test_continuous_across_shared_faces(rng):
    x = rng.uniform(size=(30, 2))
    m = fit_pla(TrainingSample(x, np.sin(3 * x[:, 0]) + x[:, 1] ** 2))
    faces = {}
    for k, s in enumerate(m.simplices):
        for e in itertools.combinations(sorted(s), 2):
            faces.setdefault(e, []).append(k)
    shared = [(e, ks) for e, ks in faces.items() if len(ks) == 2]
    for i in range(100):
        e, (a, b) = shared[rng.integers(len(shared))]
        t = rng.uniform()
        z = t * m.vertices[e[0]] + (1 - t) * m.vertices[e[1]]
        assert abs(_value_in_simplex(m, a, z) - _value_in_simplex(m, b, z)) <= 1e-9


def cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def empty_circumcircle_triangles(p):
    """All triangles whose circumcircle has no other point strictly inside."""
    out = set()
    for tri in itertools.combinations(range(len(p)), 3):
        a, b, c = p[list(tri)]
        if abs(cross2(b - a, c - a)) < 1e-12:
            continue
        # in-circle determinant with a counter-clockwise orientation
        if cross2(b - a, c - a) < 0:
            b, c = c, b
        dets = []
        for q in range(len(p)):
            if q in tri:
                continue
            mat = np.array([[v[0] - p[q, 0], v[1] - p[q, 1], (v ** 2).sum() - (p[q] ** 2).sum()] for v in (a, b, c)])
            dets.append(np.linalg.det(mat))
        if max(dets) <= 0:
            out.add(tuple(sorted(tri)))
    return out


@pytest.mark.parametrize("seed,n", [(0, 12), (1, 20), (2, 30)])
def test_delaunay_matches_brute_force(seed, n):
    p = np.random.default_rng(seed).uniform(size=(n, 2))
    simplices, hull = triangulate(p)
    assert {tuple(sorted(s)) for s in simplices} == empty_circumcircle_triangles(p)
    # the triangles tile the hull
    area = sum(abs(cross2(p[b] - p[a], p[c] - p[a])) / 2 for a, b, c in simplices)
    from scipy.spatial import ConvexHull
    assert area == pytest.approx(ConvexHull(p).volume, rel=1e-12)


def test_collinear_points_need_dimension_reduction():
    t = np.linspace(0, 1, 8)
    with pytest.raises(DimensionReductionError):
        fit_pla(TrainingSample(np.column_stack([t, 2 * t]), t))


def test_four_dimensions_exceed_capacity(rng):
    with pytest.raises(CapacityError):
        fit_pla(TrainingSample(rng.uniform(size=(30, 4)), rng.normal(size=30)))


def test_outside_hull_uses_nearest_boundary_point():
    x = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    y = np.array([0.0, 1.0, 2.0, 3.0])
    m = fit_pla(TrainingSample(x, y))
    q = np.array([[0.5, -1.0], [2.0, 2.0], [0.5, 0.5]])
    flags = m.extrapolation_flags(q)
    assert flags.tolist() == [True, True, False]
    v = m.predict(q)[:, 0]
    assert v[0] == pytest.approx(0.5, abs=1e-12)
    assert v[1] == pytest.approx(3.0, abs=1e-12)


def test_one_dimensional_pla_is_linear_interpolation(rng):
    x = np.sort(rng.uniform(size=10))
    y = rng.normal(size=10)
    m = fit_pla(TrainingSample(x, y))
    q = np.linspace(x[0], x[-1], 77)
    np.testing.assert_allclose(m.predict(q)[:, 0], np.interp(q, x, y), atol=1e-12)
