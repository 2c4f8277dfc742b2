"""Design-structure analysis, tensor-product approximation (TA) and incomplete-grid approximation (iTA)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import gp as _gp
from . import hda as _hda
from .core import InputMap, ModelOptions, SurrogateModel, register_model
from .errors import ConfigurationError, DataError
from .splines import BsplBasis

FILL_FLOOR = 0.05
ITA_LAMBDA = 1e-3
ALT_ROUNDS = 5
FACTOR_KINDS = ("bspl", "lr", "gp", "hda")


# ---------------------------------------------------------------- DoE structure

@dataclass
class DoeFactorization:
    partition: list          # list of sorted variable-index lists
    factor_nodes: list       # per group: array (n_g x |group|) of distinct nodes, lexicographically sorted
    grid_index: np.ndarray   # N x n_groups, row -> node index per group

    @property
    def sizes(self):
        return [len(nodes) for nodes in self.factor_nodes]

    @property
    def is_complete(self):
        return int(np.prod(self.sizes)) == len(self.grid_index)


@dataclass
class IncompleteGrid:
    axes: list               # per-axis sorted node values
    cells: np.ndarray        # N x d node indices of the observed rows
    fill: float


def _count(x, cols):
    return len(np.unique(x[:, cols], axis=0))


def _check_duplicates(x):
    _, first, counts = np.unique(x, axis=0, return_index=True, return_counts=True)
    if (counts > 1).any():
        _, inv = np.unique(x, axis=0, return_inverse=True)
        inv = np.asarray(inv).ravel()
        dup = np.flatnonzero(counts > 1)[0]
        rows = np.flatnonzero(inv == dup).tolist()
        raise DataError(f"duplicate input rows {rows} prevent factorization")


def _split(x, comps):
    """Finest Cartesian split of the variable set formed by the union of ``comps``."""
    allvars = sorted(v for c in comps for v in c)
    if len(comps) == 1:
        return [allvars]
    total = _count(x, allvars)
    for size in range(1, len(comps) // 2 + 1):
        for pick in itertools.combinations(range(len(comps)), size):
            a = sorted(v for i in pick for v in comps[i])
            b = sorted(v for i in range(len(comps)) if i not in pick for v in comps[i])
            if _count(x, a) * _count(x, b) == total:
                left = [comps[i] for i in pick]
                right = [comps[i] for i in range(len(comps)) if i not in pick]
                xa = np.unique(x[:, a], axis=0)
                xb = np.unique(x[:, b], axis=0)
                return _relabel(xa, a, left) + _relabel(xb, b, right)
    return [allvars]


def _relabel(xs, cols, comps):
    # recurse on the projected node set with local column numbering
    pos = {v: i for i, v in enumerate(cols)}
    local = [[pos[v] for v in c] for c in comps]
    return [[cols[i] for i in g] for g in _split(xs, local)]


def factorize_doe(inputs) -> DoeFactorization:
    """Finest partition of the variables such that the rows form a Cartesian product."""
    x = np.asarray(inputs, float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    _check_duplicates(x)
    # variables that are not pairwise independent must share a group
    parent = list(range(d))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    sizes = [_count(x, [j]) for j in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            if find(i) != find(j) and _count(x, [i, j]) != sizes[i] * sizes[j]:
                parent[find(j)] = find(i)
    comps = {}
    for j in range(d):
        comps.setdefault(find(j), []).append(j)
    groups = _split(x, sorted(comps.values()))
    groups = sorted(sorted(g) for g in groups)
    nodes, index = [], []
    for g in groups:
        u, inv = np.unique(x[:, g], axis=0, return_inverse=True)
        nodes.append(u)
        index.append(np.asarray(inv).ravel())
    return DoeFactorization(groups, nodes, np.column_stack(index))


def detect_incomplete_grid(inputs):
    """Per-axis node lists if the rows sit on a usefully dense full-factorial grid, else None.

    Every axis must repeat values (a scattered design with distinct coordinates
    never qualifies) and the fill ratio must reach FILL_FLOOR.
    """
    x = np.asarray(inputs, float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    axes, cells = [], []
    for j in range(d):
        u, inv = np.unique(x[:, j], return_inverse=True)
        axes.append(u)
        cells.append(np.asarray(inv).ravel())
    if any(len(a) >= n or len(a) < 2 for a in axes):
        return None
    full = math.prod(len(a) for a in axes)
    fill = n / full
    if fill < FILL_FLOOR:
        return None
    return IncompleteGrid(axes, np.column_stack(cells), fill)


# ---------------------------------------------------------------- tensor algebra

def mode_product(t, mat, axis):
    """Multiply tensor ``t`` along ``axis`` by ``mat`` (new_size x old_size)."""
    t = np.moveaxis(t, axis, 0)
    shape = t.shape
    out = mat @ t.reshape(shape[0], -1)
    return np.moveaxis(out.reshape((mat.shape[0],) + shape[1:]), 0, axis)


def _contract_points(c, rows):
    """Evaluate sum over the tensor ``c`` (q_1..q_G, m) with per-point row vectors.

    ``rows`` is a list of (n x q_g) matrices; returns (n x m).
    """
    t = np.einsum("nq,q...->n...", rows[0], c)
    for r in rows[1:]:
        t = np.einsum("nq,nq...->n...", r, t)
    return t


# ---------------------------------------------------------------- factor bases

class FactorBasis:
    """Basis functions of one factor, evaluated on its standardized coordinates."""

    kind = "base"

    def values(self, z):
        raise NotImplementedError

    def derivs(self, z, j):
        raise NotImplementedError

    def solver(self, nodes):
        b = self.values(nodes)
        return np.linalg.pinv(b)

    def to_dict(self):
        raise NotImplementedError


class ConstBasis(FactorBasis):
    kind = "const"

    def values(self, z):
        return np.ones((len(z), 1))

    def derivs(self, z, j):
        return np.zeros((len(z), 1))

    def to_dict(self):
        return {"kind": self.kind}


class BsplFactor(FactorBasis):
    kind = "bspl"

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes, float).ravel()
        self.basis = BsplBasis.interpolating(self.nodes)

    def values(self, z):
        return self.basis.evaluate(z[:, 0])[0]

    def derivs(self, z, j):
        return self.basis.evaluate(z[:, 0], derivative=True)[0]

    def solver(self, nodes):
        return np.linalg.inv(self.values(nodes))

    def to_dict(self):
        return {"kind": self.kind, "nodes": self.nodes}


class LrFactor(FactorBasis):
    kind = "lr"

    def __init__(self, dim):
        self.dim = int(dim)

    def values(self, z):
        return np.hstack([np.ones((len(z), 1)), z])

    def derivs(self, z, j):
        out = np.zeros((len(z), 1 + self.dim))
        out[:, 1 + j] = 1.0
        return out

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim}


class GpFactor(FactorBasis):
    """Kernel columns centred at the factor nodes; the solve is the regularized GP one."""

    kind = "gp"

    def __init__(self, nodes, ls, var, eta, kernel="se"):
        self.nodes = np.asarray(nodes, float).reshape(len(nodes), -1)
        self.ls = np.asarray(ls, float).ravel()
        self.var, self.eta, self.kernel = float(var), float(eta), kernel

    @classmethod
    def fit(cls, nodes, target, exact=False, seed=0, kernel="se"):
        ys = target / max(np.std(target), 1e-300)
        ys = ys - ys.mean(axis=0)
        eta_fixed = _gp.ETA_EXACT if exact else None
        theta, _ = _gp.optimize_hyperparameters(nodes, ys, kernel, eta_fixed, restarts=2, seed=seed)
        d = nodes.shape[1]
        eta = eta_fixed if exact else math.exp(theta[d + 1])
        return cls(nodes, np.exp(theta[:d]), math.exp(theta[d]), eta, kernel)

    def values(self, z):
        return self.var * _gp.correlation(z, self.nodes, self.ls, self.kernel)

    def derivs(self, z, j):
        r2 = _gp._sqdist(z, self.nodes, self.ls)
        _, dk = _gp.kernel_shape(r2, self.kernel)
        return 2.0 * self.var * dk * (z[:, j][:, None] - self.nodes[:, j][None, :]) / self.ls[j] ** 2

    def solver(self, nodes):
        k = self.values(nodes)
        k[np.diag_indices(len(k))] += self.var * self.eta
        return np.linalg.inv(k)

    def to_dict(self):
        return {"kind": self.kind, "nodes": self.nodes, "lengthscales": self.ls,
                "signal_variance": self.var, "relative_nugget": self.eta, "kernel": self.kernel}


class HdaFactor(FactorBasis):
    """Columns [1, z, units] of a fitted basis layer; ridge-regularized solve."""

    kind = "hda"

    def __init__(self, types, centers, offsets, lam, dim):
        self.types = np.asarray(types, int).ravel()
        self.centers = np.asarray(centers, float).reshape(len(self.types), dim) if len(self.types) else np.zeros((0, dim))
        self.offsets = np.asarray(offsets, float).ravel()
        self.lam = float(lam)
        self.dim = int(dim)

    @classmethod
    def fit(cls, nodes, target, seed=0, accelerator=1):
        ys = (target - target.mean(axis=0)) / max(np.std(target), 1e-300)
        p, _ = _hda.select_p(nodes, ys, accelerator, seed, max_iter=200)
        layer = _hda.fit_layer(nodes, ys, p, seed, max_iter=200)
        return cls(layer.types, layer.centers, layer.offsets, layer.lam, nodes.shape[1])

    def values(self, z):
        return _hda.design(z, self.types, self.centers, self.offsets)

    def derivs(self, z, j):
        d = self.dim
        q = 1 + d + len(self.types)
        # derivative of each column via a unit-weight layer gradient
        layer = _hda.Layer(self.types, self.centers, self.offsets, np.eye(q), self.lam)
        return _hda.layer_gradient(layer, z)[:, :, j]

    def solver(self, nodes):
        b = self.values(nodes)
        pen = np.full(b.shape[1], self.lam)
        pen[0] = 0.0
        return np.linalg.solve(b.T @ b + np.diag(pen), b.T)

    def to_dict(self):
        return {"kind": self.kind, "types": self.types, "centers": self.centers,
                "offsets": self.offsets, "lambda": self.lam, "dim": self.dim}


def factor_from_dict(d):
    kind = d["kind"]
    if kind == "const":
        return ConstBasis()
    if kind == "bspl":
        return BsplFactor(d["nodes"])
    if kind == "lr":
        return LrFactor(d["dim"])
    if kind == "gp":
        return GpFactor(d["nodes"], d["lengthscales"], d["signal_variance"], d["relative_nugget"],
                        d.get("kernel", "se"))
    if kind == "hda":
        return HdaFactor(d["types"], d["centers"], d["offsets"], d["lambda"], d["dim"])
    raise ConfigurationError(f"unknown factor technique {kind!r}")


# ---------------------------------------------------------------- models

class _TensorModel(SurrogateModel):
    """Shared evaluation for tensor-product models: coefficient tensor times per-factor bases."""

    def __init__(self, input_map, partition, factors, coef, y_mean, y_scale, options=None, meta=None,
                 blend=0.0, affine=None):
        y_mean = np.asarray(y_mean, float).ravel()
        super().__init__(input_map, y_mean.size, options, meta)
        self.partition = [list(map(int, g)) for g in partition]
        self.factors = list(factors)
        self.coef = np.asarray(coef, float)
        self.y_mean = y_mean
        self.y_scale = np.asarray(y_scale, float).ravel()
        self.blend = float(blend)
        self.affine = None if affine is None else np.asarray(affine, float).reshape(1 + input_map.dim, -1)

    def _rows(self, z):
        return [f.values(z[:, g]) for f, g in zip(self.factors, self.partition)]

    def _raw(self, z):
        return _contract_points(self.coef, self._rows(z))

    def _raw_gradient(self, z):
        rows = self._rows(z)
        g = np.zeros((len(z), self.d_out, z.shape[1]))
        for k, (f, grp) in enumerate(zip(self.factors, self.partition)):
            for local, var in enumerate(grp):
                r = list(rows)
                r[k] = f.derivs(z[:, grp], local)
                g[:, :, var] = _contract_points(self.coef, r)
        return g

    def _predict(self, z):
        out = self._raw(z)
        if self.blend:
            out = (1.0 - self.blend) * out + self.blend * (self.affine[0] + z @ self.affine[1:])
        return self.y_mean + out * self.y_scale

    def _gradient(self, z):
        g = self._raw_gradient(z)
        if self.blend:
            g = (1.0 - self.blend) * g + self.blend * self.affine[1:].T[None]
        return g * self.y_scale[None, :, None]

    def _smoothed(self, s):
        # blend toward the affine model carrying the mean gradient over the roughness probe box
        lower = np.asarray(self.meta["x_lower"], float)
        upper = np.asarray(self.meta["x_upper"], float)
        rng = np.random.default_rng(0)
        pts = lower + (upper - lower) * rng.random((1000, lower.size))
        z = self.input_map.transform(pts)
        slope = self._raw_gradient(z).mean(axis=0).T  # dim x m
        icpt = self._raw(z).mean(axis=0) - z.mean(axis=0) @ slope
        return self._clone_with(blend=float(s), affine=np.vstack([icpt, slope]))

    def get_params(self):
        return {"partition": self.partition, "factors": [f.to_dict() for f in self.factors],
                "coef_shape": list(self.coef.shape), "coefficients": self.coef.ravel(),
                "output_mean": self.y_mean, "output_scale": self.y_scale, "blend": self.blend,
                "affine": self.affine}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        coef = np.asarray(p["coefficients"], float).reshape(p["coef_shape"])
        return cls(input_map, p["partition"], [factor_from_dict(d) for d in p["factors"]], coef,
                   p["output_mean"], p["output_scale"], options, meta, p.get("blend", 0.0),
                   p.get("affine"))


@register_model
class TaModel(_TensorModel):
    technique = "ta"


@register_model
class ItaModel(_TensorModel):
    technique = "ita"


def _standardize(sample):
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    y = sample.outputs
    mean = y.mean(axis=0)
    scale = y.std(axis=0)
    scale[scale <= 1e-300] = 1.0
    return imap, z, (y - mean) / scale, mean, scale


def _box(sample):
    return {"x_lower": sample.inputs.min(axis=0).tolist(), "x_upper": sample.inputs.max(axis=0).tolist()}


def default_factor_techniques(fact: DoeFactorization):
    out = []
    for g, nodes in zip(fact.partition, fact.factor_nodes):
        if len(g) == 1:
            out.append("bspl")
        else:
            out.append("gp" if len(nodes) <= 1000 else "hda")
    return out


def _unfold(t, axis):
    return np.moveaxis(t, axis, 0).reshape(t.shape[axis], -1)


def fit_ta(sample, factorization: DoeFactorization | None = None, factor_techniques=None,
           options: ModelOptions | None = None) -> TaModel:
    """Least squares over the product of per-factor dictionaries, solved factor by factor."""
    options = options or ModelOptions(technique="ta")
    imap, z, ys, mean, scale = _standardize(sample)
    fact = factorization or factorize_doe(z)
    if not fact.is_complete:
        raise DataError("TA needs a complete Cartesian-product design")
    techs = list(factor_techniques or options.params.get("factor_techniques") or default_factor_techniques(fact))
    if len(techs) != len(fact.partition):
        raise ConfigurationError("one factor technique is needed per factor")
    sizes = fact.sizes
    m = ys.shape[1]
    ytensor = np.zeros(tuple(sizes) + (m,))
    ytensor[tuple(fact.grid_index.T)] = ys
    # factor nodes in standardized coordinates
    zn = []
    for g, idx in zip(fact.partition, fact.grid_index.T):
        nodes = np.zeros((len(np.unique(idx)), len(g)))
        nodes[idx] = z[:, g]
        zn.append(nodes)
    factors = []
    for k, (tech, g) in enumerate(zip(techs, fact.partition)):
        if tech not in FACTOR_KINDS:
            raise ConfigurationError(f"unknown factor technique {tech!r}")
        if sizes[k] == 1:
            factors.append(ConstBasis())
        elif tech == "bspl":
            if len(g) != 1:
                raise ConfigurationError(f"bspl factor needs a one-dimensional group, got {len(g)} variables")
            factors.append(BsplFactor(zn[k][:, 0]))
        elif tech == "lr":
            factors.append(LrFactor(len(g)))
        else:
            factors.append(None)  # adaptive, fitted below
    adaptive = [k for k, f in enumerate(factors) if f is None]
    for k in adaptive:
        target = _unfold(ytensor, k)
        factors[k] = _fit_adaptive(techs[k], zn[k], target, options, k)
    rounds = ALT_ROUNDS if adaptive and len(factors) > 1 else 0
    for _ in range(rounds):
        for k in adaptive:
            # refit factor k on the data smoothed along all other factors
            t = ytensor
            for h, f in enumerate(factors):
                if h != k:
                    t = mode_product(t, f.values(zn[h]) @ f.solver(zn[h]), h)
            factors[k] = _fit_adaptive(techs[k], zn[k], _unfold(t, k), options, k)
    coef = ytensor
    for k, f in enumerate(factors):
        coef = mode_product(coef, f.solver(zn[k]), k)
    meta = {"n_train": sample.n, "factor_sizes": sizes, "factor_techniques": techs,
            "input_names": sample.input_names, "output_names": sample.output_names, **_box(sample)}
    return TaModel(imap, fact.partition, factors, coef, mean, scale, options, meta)


def _fit_adaptive(tech, nodes, target, options, k):
    if tech == "gp":
        return GpFactor.fit(nodes, target, options.exact_fit, options.seed + k,
                            options.params.get("kernel", "se"))
    return HdaFactor.fit(nodes, target, options.seed + k, options.accelerator)


# ---------------------------------------------------------------- iTA

def _second_diff(n):
    if n < 3:
        return np.zeros((0, n))
    d = np.zeros((n - 2, n))
    for i in range(n - 2):
        d[i, i:i + 3] = (1.0, -2.0, 1.0)
    return d


def conjugate_gradient(apply, rhs, x0=None, tol=1e-8, max_iter=None):
    """Plain CG for a symmetric positive definite operator; stops at ||r|| <= tol * ||r_0||.

    Returns the solution and the history of residual norms and quadratic objective
    values ``0.5 x'Ax - b'x``.
    """
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - apply(x)
    p = r.copy()
    rr = float(np.sum(r * r))
    r0 = math.sqrt(rr)
    history = {"residual": [r0], "objective": [float(0.5 * np.sum(x * (rhs - r)) - np.sum(x * rhs))]}
    if r0 == 0.0:
        return x, history
    max_iter = max_iter or 10 * rhs.size
    for _ in range(max_iter):
        ap = apply(p)
        alpha = rr / float(np.sum(p * ap))
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(np.sum(r * r))
        history["residual"].append(math.sqrt(rr_new))
        history["objective"].append(float(0.5 * np.sum(x * (rhs - r)) - np.sum(x * rhs)))
        if math.sqrt(rr_new) <= tol * r0:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, history


def ita_system(bases, mask, lam):
    """Normal-equation operator of the penalized least squares on a partially observed grid.

    ``bases[a]`` is the (n_a x n_a) basis matrix at the axis nodes; ``mask`` marks
    observed cells.  Coefficients carry a trailing output axis.
    """
    diffs = [_second_diff(b.shape[1]) for b in bases]
    pens = [d.T @ d for d in diffs]
    maskx = mask[..., None]

    def forward(c):
        for a, b in enumerate(bases):
            c = mode_product(c, b, a)
        return c

    def adjoint(f):
        for a, b in enumerate(bases):
            f = mode_product(f, b.T, a)
        return f

    def apply(c):
        out = adjoint(maskx * forward(c))
        for a, pm in enumerate(pens):
            if pm.size:
                out = out + lam * mode_product(c, pm, a)
        return out

    return apply, forward, adjoint


def ita_objective(c, bases, mask, ytensor, lam):
    f = c
    for a, b in enumerate(bases):
        f = mode_product(f, b, a)
    val = float(np.sum((mask[..., None] * (f - ytensor)) ** 2))
    for a, b in enumerate(bases):
        d = _second_diff(b.shape[1])
        if d.size:
            val += lam * float(np.sum(mode_product(c, d, a) ** 2))
    return val


def fit_ita(sample, grid: IncompleteGrid | None = None, options: ModelOptions | None = None) -> ItaModel:
    """Tensor cubic B-splines on the grid axes fitted to the observed cells with a curvature penalty."""
    options = options or ModelOptions(technique="ita")
    imap, z, ys, mean, scale = _standardize(sample)
    grid = grid or detect_incomplete_grid(z)
    if grid is None:
        raise DataError("iTA needs inputs on an incomplete full-factorial grid")
    d = len(grid.axes)
    zaxes = []
    for a in range(d):
        nodes = np.zeros(len(grid.axes[a]))
        nodes[grid.cells[:, a]] = z[:, a]
        zaxes.append(nodes)
    lam = float(options.params.get("lambda", ITA_LAMBDA))
    factors = [BsplFactor(nodes) for nodes in zaxes]
    bases = [f.values(nodes[:, None]) for f, nodes in zip(factors, zaxes)]
    shape = tuple(len(a) for a in zaxes)
    mask = np.zeros(shape)
    mask[tuple(grid.cells.T)] = 1.0
    m = ys.shape[1]
    ytensor = np.zeros(shape + (m,))
    ytensor[tuple(grid.cells.T)] = ys
    apply, _, adjoint = ita_system(bases, mask, lam)
    # the penalized normal equations are ill conditioned; a loose residual leaves ~1e-6 coefficient error
    coef, history = conjugate_gradient(apply, adjoint(ytensor), tol=1e-11)
    warnings = []
    for a in range(d):
        slab = mask.sum(axis=tuple(i for i in range(d) if i != a))
        if (slab == 0).any():
            warnings.append(f"axis {a} has nodes without observations; values there are extrapolated")
    meta = {"n_train": sample.n, "fill": grid.fill, "lambda": lam, "cg_iterations": len(history["residual"]) - 1,
            "cg_residual_ratio": history["residual"][-1] / max(history["residual"][0], 1e-300),
            "warnings": warnings, "input_names": sample.input_names,
            "output_names": sample.output_names, **_box(sample)}
    return ItaModel(imap, [[a] for a in range(d)], factors, coef, mean, scale, options, meta)
