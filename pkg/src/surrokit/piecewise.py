"""Non-smooth techniques: gradient boosted regression trees and piecewise-linear interpolation."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .core import InputMap, ModelOptions, SurrogateModel, accel_scale, register_model
from .errors import CapacityError, DataError, DimensionReductionError

GBRT_DEPTH = 3
GBRT_TREES = 100
GBRT_LR = 0.1
PLA_MAX_DIM = 3


# ---------------------------------------------------------------- regression trees

def _best_split(z, r):
    """Best (feature, threshold, gain) for a least-squares split, or None."""
    n = len(r)
    if n < 2:
        return None
    total = r.sum()
    base = total * total / n
    best = None
    for j in range(z.shape[1]):
        order = np.argsort(z[:, j], kind="stable")
        xs = z[order, j]
        cs = np.cumsum(r[order])[:-1]
        k = np.arange(1, n)
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        gain = cs ** 2 / k + (total - cs) ** 2 / (n - k) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[2] + 1e-15:
            best = (j, 0.5 * (xs[i] + xs[i + 1]), float(gain[i]))
    if best is None or best[2] <= 1e-14:
        return None
    return best


def fit_tree(z, r, depth):
    """Least-squares regression tree stored as flat node arrays."""
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(rows, level):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[rows].mean()) if len(rows) else 0.0)
        if level >= depth:
            return node
        split = _best_split(z[rows], r[rows])
        if split is None:
            return node
        j, t, _ = split
        go_left = z[rows, j] <= t
        feature[node], threshold[node] = j, t
        left[node] = grow(rows[go_left], level + 1)
        right[node] = grow(rows[~go_left], level + 1)
        return node

    grow(np.arange(len(r)), 0)
    return {"feature": np.array(feature, int), "threshold": np.array(threshold),
            "left": np.array(left, int), "right": np.array(right, int), "value": np.array(value)}


def tree_predict(tree, z):
    node = np.zeros(len(z), int)
    feat = tree["feature"]
    while True:
        f = feat[node]
        inner = f >= 0
        if not inner.any():
            break
        idx = np.flatnonzero(inner)
        goes_left = z[idx, f[idx]] <= tree["threshold"][node[idx]]
        node[idx] = np.where(goes_left, tree["left"][node[idx]], tree["right"][node[idx]])
    return tree["value"][node]


@register_model
class GbrtModel(SurrogateModel):
    """base + lr * sum of tree outputs, one tree list per output column."""

    technique = "gbrt"
    has_gradient = False
    is_smooth = False

    def __init__(self, input_map, base, trees, lr, options=None, meta=None):
        base = np.asarray(base, float).ravel()
        super().__init__(input_map, base.size, options, meta)
        self.base = base
        self.trees = trees
        self.lr = float(lr)

    def _predict(self, z):
        out = np.tile(self.base, (len(z), 1))
        for j, trees in enumerate(self.trees):
            for tree in trees:
                out[:, j] += self.lr * tree_predict(tree, z)
        return out

    def get_params(self):
        return {"base": self.base, "learning_rate": self.lr, "trees": self.trees}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        trees = [[{"feature": np.asarray(t["feature"], int), "threshold": np.asarray(t["threshold"], float),
                   "left": np.asarray(t["left"], int), "right": np.asarray(t["right"], int),
                   "value": np.asarray(t["value"], float)} for t in col] for col in p["trees"]]
        return cls(input_map, p["base"], trees, p["learning_rate"], options, meta)


def fit_gbrt(sample, options: ModelOptions | None = None) -> GbrtModel:
    options = options or ModelOptions(technique="gbrt")
    if sample.n < 2:
        raise DataError("GBRT needs at least two training points")
    depth = int(options.params.get("depth", GBRT_DEPTH))
    n_trees = accel_scale(int(options.params.get("trees", GBRT_TREES)), options.accelerator)
    lr = float(options.params.get("learning_rate", GBRT_LR))
    imap = InputMap.fit(sample.inputs, sample.categorical_mask, standardize=False)
    z = imap.transform(sample.inputs)
    y = sample.outputs
    base = y.mean(axis=0)
    all_trees, losses = [], []
    for j in range(y.shape[1]):
        pred = np.full(len(y), base[j])
        trees, loss = [], [float(np.sum((y[:, j] - pred) ** 2))]
        for _ in range(n_trees):
            tree = fit_tree(z, y[:, j] - pred, depth)
            pred = pred + lr * tree_predict(tree, z)
            trees.append(tree)
            loss.append(float(np.sum((y[:, j] - pred) ** 2)))
        all_trees.append(trees)
        losses.append(loss)
    meta = {"n_train": sample.n, "trees": n_trees, "depth": depth, "training_loss": losses,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return GbrtModel(imap, base, all_trees, lr, options, meta)


# ---------------------------------------------------------------- piecewise-linear interpolation

def closest_on_facets(p, facets):
    """Closest point to ``p`` over a stack of simplices ``facets`` (f x k x d).

    Returns (facet index, barycentric weights, squared distance).  Each face of
    each simplex is tried; the projection onto a face's affine hull counts only
    when its barycentric weights are non-negative.
    """
    f, k, _ = facets.shape
    best_dist = np.full(f, np.inf)
    best_w = np.zeros((f, k))
    for size in range(1, k + 1):
        for sub in itertools.combinations(range(k), size):
            v = facets[:, list(sub)]
            if size == 1:
                w = np.ones((f, 1))
            else:
                e = v[:, 1:] - v[:, :1]
                g = np.einsum("fid,fjd->fij", e, e)
                rhs = np.einsum("fid,fd->fi", e, p[None] - v[:, 0])
                c = np.linalg.solve(g, rhs[..., None])[..., 0]
                w = np.concatenate([1.0 - c.sum(axis=1, keepdims=True), c], axis=1)
            q = np.einsum("fs,fsd->fd", w, v)
            dist = np.sum((q - p) ** 2, axis=1)
            ok = (w >= -1e-12).all(axis=1) & (dist < best_dist - 1e-15)
            best_dist[ok] = dist[ok]
            full = np.zeros((f, k))
            full[:, list(sub)] = w
            best_w[ok] = full[ok]
    i = int(np.argmin(best_dist))
    return i, best_w[i], float(best_dist[i])


@register_model
class PlaModel(SurrogateModel):
    """Barycentric interpolation on a triangulation of the training inputs."""

    technique = "pla"
    has_gradient = False
    is_smooth = False

    def __init__(self, input_map, vertices, values, simplices, hull, options=None, meta=None):
        values = np.asarray(values, float)
        values = values.reshape(len(values), -1)
        super().__init__(input_map, values.shape[1], options, meta)
        self.vertices = np.asarray(vertices, float).reshape(len(values), -1)
        self.values = values
        self.simplices = np.asarray(simplices, int).reshape(-1, self.vertices.shape[1] + 1)
        self.hull = np.asarray(hull, int).reshape(-1, self.vertices.shape[1])
        # affine maps to barycentric coordinates, one per simplex
        v = self.vertices[self.simplices]                  # s x (d+1) x d
        t = np.transpose(v[:, :-1] - v[:, -1:], (0, 2, 1))  # s x d x d
        self._tinv = np.linalg.inv(t)
        self._last = v[:, -1]

    def barycentric(self, z):
        """Simplex index (-1 outside) and barycentric weights for each point."""
        n = len(z)
        simplex = np.full(n, -1)
        weights = np.zeros((n, self.simplices.shape[1]))
        for start in range(0, n, 256):
            blk = z[start:start + 256]
            c = np.einsum("sij,nsj->nsi", self._tinv, blk[:, None, :] - self._last[None])
            w = np.concatenate([c, 1.0 - c.sum(axis=2, keepdims=True)], axis=2)
            inside = (w >= -1e-10).all(axis=2)
            found = inside.any(axis=1)
            first = np.argmax(inside, axis=1)
            rows = np.flatnonzero(found)
            simplex[start + rows] = first[rows]
            weights[start + rows] = w[rows, first[rows]]
        return simplex, weights

    def _predict_flagged(self, z):
        simplex, weights = self.barycentric(z)
        out = np.zeros((len(z), self.d_out))
        inside = simplex >= 0
        if inside.any():
            idx = self.simplices[simplex[inside]]
            out[inside] = np.einsum("nk,nko->no", weights[inside], self.values[idx])
        facets = self.vertices[self.hull]
        for i in np.flatnonzero(~inside):
            # outside the hull: value at the nearest boundary point
            k, w, _ = closest_on_facets(z[i], facets)
            out[i] = w @ self.values[self.hull[k]]
        return out, ~inside

    def _predict(self, z):
        return self._predict_flagged(z)[0]

    def extrapolation_flags(self, x):
        from .core import as_2d

        return self._predict_flagged(self.input_map.transform(as_2d(x, self.d_in)))[1]

    def get_params(self):
        return {"vertices": self.vertices, "values": self.values, "simplices": self.simplices,
                "hull": self.hull}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        return cls(input_map, p["vertices"], p["values"], p["simplices"], p["hull"], options, meta)


def triangulate(points):
    """Delaunay simplices and boundary facets of ``points`` (N x d, d <= 3)."""
    pts = np.asarray(points, float)
    n, d = pts.shape
    if d == 1:
        order = np.argsort(pts[:, 0])
        simplices = np.column_stack([order[:-1], order[1:]])
        return simplices, np.array([[order[0]], [order[-1]]])
    tri = Delaunay(pts)
    return tri.simplices.copy(), tri.convex_hull.copy()


def fit_pla(sample, options: ModelOptions | None = None) -> PlaModel:
    options = options or ModelOptions(technique="pla")
    imap = InputMap.fit(sample.inputs, sample.categorical_mask, standardize=True)
    z = imap.transform(sample.inputs)
    d = z.shape[1]
    if d > PLA_MAX_DIM:
        raise CapacityError(f"PLA is limited to {PLA_MAX_DIM} input dimensions (got {d})")
    verts, inv = np.unique(z, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    vals = np.zeros((len(verts), sample.d_out))
    np.add.at(vals, inv, sample.outputs)
    vals /= np.bincount(inv, minlength=len(verts))[:, None]
    rank = np.linalg.matrix_rank(verts - verts.mean(axis=0), tol=1e-10) if len(verts) > 1 else 0
    if len(verts) < d + 1 or rank < d:
        raise DimensionReductionError(
            "training inputs are affinely dependent; reduce the input dimension or use rsm")
    try:
        simplices, hull = triangulate(verts)
    except QhullError as exc:
        raise DimensionReductionError(f"triangulation failed ({exc}); consider rsm") from exc
    meta = {"n_train": sample.n, "simplices": len(simplices),
            "input_names": sample.input_names, "output_names": sample.output_names}
    return PlaModel(imap, verts, vals, simplices, hull, options, meta)
