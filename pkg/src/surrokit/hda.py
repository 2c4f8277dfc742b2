"""Adaptive sigmoid/Gaussian basis expansions with ridge output weights and residual boosting."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .core import InputMap, ModelOptions, SurrogateModel, accel_scale, fold_indices, register_model
from .errors import DataError
from .linear import RIDGE_GRID

P_GRID = (0, 3, 6, 12, 25, 50, 100)
SIGMOID, GAUSSIAN = 0, 1
MAX_ITER = 500
MAX_STAGES = 10
BOOST_NU = 0.5
MIN_GAIN = 1e-3
REFINE_LAMBDA = 1e-6
SIG_MAX = 10.0
CENTER_MAX = 5.0
LOG_WIDTH_BOUNDS = (math.log(0.05), math.log(50.0))


class Layer:
    """One stage: [1, z, units] features times output weights."""

    def __init__(self, types, centers, offsets, weights, lam):
        self.types = np.asarray(types, int).ravel()
        self.centers = np.asarray(centers, float).reshape(len(self.types), -1) if len(self.types) else np.zeros((0, 0))
        self.offsets = np.asarray(offsets, float).ravel()
        self.weights = np.asarray(weights, float)
        self.lam = float(lam)

    @property
    def p(self):
        return len(self.types)

    def to_dict(self):
        return {"types": self.types, "centers": self.centers, "offsets": self.offsets,
                "weights": self.weights, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d, m):
        w = np.asarray(d["weights"], float)
        return cls(d["types"], d["centers"], d["offsets"], w.reshape(-1, m), d["lambda"])


def _units(z, types, centers, offsets):
    """Unit activations (N x p) and the pre-activation pieces needed for derivatives."""
    n = len(z)
    p = len(types)
    if p == 0:
        return np.zeros((n, 0)), None
    phi = np.empty((n, p))
    sig = types == SIGMOID
    gau = ~sig
    aux = {}
    if sig.any():
        t = z @ centers[sig].T + offsets[sig]
        phi[:, sig] = np.tanh(t)
    if gau.any():
        diff = z[:, None, :] - centers[gau][None, :, :]
        r2 = np.sum(diff ** 2, axis=2)
        s2 = np.exp(2.0 * offsets[gau])
        phi[:, gau] = np.exp(-0.5 * r2 / s2)
        aux["diff"], aux["r2"], aux["s2"] = diff, r2, s2
    return phi, aux


def design(z, types, centers, offsets):
    phi, _ = _units(z, types, centers, offsets)
    return np.hstack([np.ones((len(z), 1)), z, phi])


def _ridge(phi, y, lam):
    pen = np.full(phi.shape[1], lam)
    pen[0] = 0.0
    a = phi.T @ phi + np.diag(pen)
    try:
        return np.linalg.solve(a, phi.T @ y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, phi.T @ y, rcond=None)[0]


def _gcv_lambda(phi, y):
    """Ridge strength minimizing generalized cross-validation (intercept unpenalized)."""
    n = len(phi)
    yc = y - y.mean(axis=0)
    xc = phi[:, 1:] - phi[:, 1:].mean(axis=0)
    if xc.shape[1] == 0:
        return RIDGE_GRID[0]
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    uty = u.T @ yc
    base = np.sum(yc ** 2) - np.sum(uty ** 2)
    best, best_lam = np.inf, RIDGE_GRID[0]
    for lam in RIDGE_GRID:
        f = s ** 2 / (s ** 2 + lam)
        rss = base + np.sum(((1 - f)[:, None] * uty) ** 2)
        dof = 1 + np.sum(f)
        if dof >= n:
            continue
        g = rss / (n - dof) ** 2
        if g < best:
            best, best_lam = g, lam
    return best_lam


def _press(phi, y, lam):
    pen = np.full(phi.shape[1], lam)
    pen[0] = 0.0
    a = phi.T @ phi + np.diag(pen)
    try:
        ainv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        ainv = np.linalg.pinv(a)
    w = ainv @ (phi.T @ y)
    h = np.einsum("ij,jk,ik->i", phi, ainv, phi)
    res = (y - phi @ w) / np.maximum(1.0 - h, 1e-8)[:, None]
    return float(np.sum(res ** 2))


def _init_units(z, y, p, rng, lam):
    """Deterministic start: random directions, quantile offsets, median-distance widths.

    Unit types are chosen greedily by PRESS.
    """
    n, d = z.shape
    width = float(np.median(pdist(z[: min(n, 500)]))) if n > 1 else 1.0
    width = max(width, 1e-3)
    dirs = rng.normal(size=(p, d))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    types, centers, offsets = [], [], []
    for i in range(p):
        q = (i + 0.5) / p
        proj = z @ dirs[i]
        loc = np.quantile(proj, q)
        a = dirs[i] * (2.0 / max(np.std(proj), 1e-6))
        sig = (SIGMOID, a, -float(a @ (dirs[i] * loc)))
        idx = int(np.argmin(np.abs(proj - loc)))
        gau = (GAUSSIAN, z[idx].copy(), math.log(width))
        best = None
        for cand in (sig, gau):
            t = np.array(types + [cand[0]])
            c = np.array(centers + [cand[1]])
            o = np.array(offsets + [cand[2]])
            score = _press(design(z, t, c, o), y, lam)
            if best is None or score < best[0]:
                best = (score, cand)
        types.append(best[1][0])
        centers.append(best[1][1])
        offsets.append(best[1][2])
    return np.array(types, int), np.array(centers).reshape(p, d), np.array(offsets, float)


def _vp_loss(theta, z, y, types, lam, d):
    """Variable-projection loss: nonlinear params in, optimal ridge weights eliminated."""
    p = len(types)
    centers = theta[: p * d].reshape(p, d)
    offsets = theta[p * d:]
    phi_u, aux = _units(z, types, centers, offsets)
    phi = np.hstack([np.ones((len(z), 1)), z, phi_u])
    w = _ridge(phi, y, lam)
    res = y - phi @ w
    loss = float(np.sum(res ** 2) + lam * np.sum(w[1:] ** 2))
    # envelope theorem: d loss / d phi_u = -2 res w_u^T
    gphi = -2.0 * res @ w[1 + d:].T
    gc = np.zeros((p, d))
    go = np.zeros(p)
    sig = types == SIGMOID
    if sig.any():
        ph = phi_u[:, sig]
        gt = gphi[:, sig] * (1.0 - ph ** 2)
        gc[sig] = gt.T @ z
        go[sig] = gt.sum(axis=0)
    if (~sig).any():
        ph = phi_u[:, ~sig]
        gg = gphi[:, ~sig] * ph
        s2 = aux["s2"]
        gc[~sig] = np.einsum("nk,nkd->kd", gg, aux["diff"]) / s2[:, None]
        go[~sig] = np.sum(gg * aux["r2"], axis=0) / s2
    return loss, np.concatenate([gc.ravel(), go])


def _param_bounds(types, d):
    # keeps sigmoids from collapsing into steps and Gaussian widths finite
    sig = types == SIGMOID
    cb = [(-SIG_MAX, SIG_MAX) if s else (-CENTER_MAX, CENTER_MAX) for s in sig for _ in range(d)]
    ob = [(-4 * SIG_MAX, 4 * SIG_MAX) if s else LOG_WIDTH_BOUNDS for s in sig]
    return cb + ob


def fit_layer(z, y, p, seed=0, max_iter=MAX_ITER):
    """Fit one basis layer with ``p`` units to targets ``y`` (N x m)."""
    n, d = z.shape
    if p == 0:
        phi = np.hstack([np.ones((n, 1)), z])
        lam = _gcv_lambda(phi, y)
        return Layer([], np.zeros((0, d)), [], _ridge(phi, y, lam), lam)
    rng = np.random.default_rng(seed)
    lam0 = REFINE_LAMBDA
    types, centers, offsets = _init_units(z, y, p, rng, lam0)
    bounds = _param_bounds(types, d)
    best = None
    scale = 1.0
    for attempt in range(4):
        theta0 = np.concatenate([(centers * (scale if attempt else 1.0)).ravel(), offsets])
        res = minimize(_vp_loss, theta0, args=(z, y, types, lam0, d), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": max_iter, "ftol": 1e-10, "gtol": 1e-8})
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            if best is None or res.fun < best.fun:
                best = res
            break
        scale *= 0.5  # diverged: restart from a damped initialization
    theta = best.x if best is not None else np.concatenate([centers.ravel(), offsets])
    centers = theta[: p * d].reshape(p, d)
    offsets = theta[p * d:]
    phi = design(z, types, centers, offsets)
    lam = _gcv_lambda(phi, y)
    w = _ridge(phi, y, lam)
    return _prune(Layer(types, centers, offsets, w, lam), d)


def _prune(layer, d):
    if layer.p == 0:
        return layer
    wu = np.abs(layer.weights[1 + d:]).max(axis=1)
    top = np.abs(layer.weights).max()
    keep = wu >= 1e-12 * top
    if keep.all():
        return layer
    w = np.vstack([layer.weights[: 1 + d], layer.weights[1 + d:][keep]])
    return Layer(layer.types[keep], layer.centers[keep], layer.offsets[keep], w, layer.lam)


def layer_predict(layer, z):
    return design(z, layer.types, layer.centers, layer.offsets) @ layer.weights


def layer_gradient(layer, z):
    """d prediction / dz, shape (n, m, d)."""
    d = z.shape[1]
    w = layer.weights
    g = np.broadcast_to(w[1: 1 + d].T[None], (len(z), w.shape[1], d)).copy()
    if layer.p:
        phi, aux = _units(z, layer.types, layer.centers, layer.offsets)
        wu = w[1 + d:]
        sig = layer.types == SIGMOID
        if sig.any():
            dt = 1.0 - phi[:, sig] ** 2  # n x ps
            g += np.einsum("nk,kd,km->nmd", dt, layer.centers[sig], wu[sig])
        if (~sig).any():
            ph = phi[:, ~sig] / aux["s2"]
            g += np.einsum("nk,nkd,km->nmd", -ph, aux["diff"], wu[~sig])
    return g


def _cv_layer(z, y, p, folds, seed, max_iter):
    pred = np.empty_like(y)
    for k, test in enumerate(folds):
        mask = np.ones(len(z), bool)
        mask[test] = False
        layer = fit_layer(z[mask], y[mask], p, seed + k, max_iter)
        pred[test] = layer_predict(layer, z[test])
    return pred


def _cv_rrms(y, pred):
    dev = np.sum((y - y.mean(axis=0)) ** 2)
    if dev <= 0:
        return 0.0
    return math.sqrt(np.sum((y - pred) ** 2) / dev)


def select_p(z, y, accelerator=1, seed=0, max_iter=MAX_ITER, grid=P_GRID):
    """Basis size by 5-fold CV; the scan stops after two consecutive worsenings."""
    n = len(z)
    grid = [p for p in grid if p <= n / 2]
    grid = grid[: accel_scale(len(grid), accelerator)] or [0]
    folds = fold_indices(n, min(5, n), seed)
    scores = {}
    worse = 0
    best = None
    for p in grid:
        scores[p] = _cv_rrms(y, _cv_layer(z, y, p, folds, seed, max_iter))
        if best is None or scores[p] < scores[best] - 1e-12:
            best, worse = p, 0
        else:
            worse += 1
            if worse >= 2:
                break
    return best, scores


@register_model
class HdaModel(SurrogateModel):
    """Boosted ensemble of basis layers; output in standardized y units is sum_k nu_k * layer_k."""

    technique = "hda"

    def __init__(self, input_map, layers, nus, y_mean, y_scale, options=None, meta=None,
                 train_z=None, train_y=None):
        y_mean = np.asarray(y_mean, float).ravel()
        super().__init__(input_map, y_mean.size, options, meta)
        self.layers = list(layers)
        self.nus = [float(v) for v in nus]
        self.y_mean = y_mean
        self.y_scale = np.asarray(y_scale, float).ravel()
        self.train_z = None if train_z is None else np.asarray(train_z, float)
        self.train_y = None if train_y is None else np.asarray(train_y, float).reshape(-1, self.d_out)

    def _raw(self, z):
        out = np.zeros((len(z), self.d_out))
        for nu, layer in zip(self.nus, self.layers):
            out += nu * layer_predict(layer, z)
        return out

    def _predict(self, z):
        return self.y_mean + self._raw(z) * self.y_scale

    def _gradient(self, z):
        g = np.zeros((len(z), self.d_out, z.shape[1]))
        for nu, layer in zip(self.nus, self.layers):
            g += nu * layer_gradient(layer, z)
        return g * self.y_scale[None, :, None]

    def _smoothed(self, s):
        factor = 10.0 ** (4.0 * s)
        z, y = self.train_z, self.train_y
        layers = []
        current = np.zeros_like(y)
        for nu, layer in zip(self.nus, self.layers):
            target = y - current
            phi = design(z, layer.types, layer.centers, layer.offsets)
            lam = max(layer.lam, 1e-8) * factor
            new = Layer(layer.types, layer.centers, layer.offsets, _ridge(phi, target, lam), lam)
            layers.append(new)
            current = current + nu * layer_predict(new, z)
        return self._clone_with(layers=layers)

    def get_params(self):
        return {"layers": [layer.to_dict() for layer in self.layers], "nu": self.nus,
                "output_mean": self.y_mean, "output_scale": self.y_scale,
                "train_z": self.train_z, "train_y": self.train_y}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        layers = [Layer.from_dict(d, d_out) for d in p["layers"]]
        return cls(input_map, layers, p["nu"], p["output_mean"], p["output_scale"], options, meta,
                   p.get("train_z"), p.get("train_y"))


def _prepare(sample):
    if sample.n < 2:
        raise DataError("HDA needs at least two training points")
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    y = sample.outputs
    mean = y.mean(axis=0)
    scale = y.std(axis=0)
    scale[scale <= 1e-300] = 1.0
    return imap, z, (y - mean) / scale, mean, scale


def fit_hda(sample, options: ModelOptions | None = None) -> HdaModel:
    """Single-stage fit (a one-layer ensemble)."""
    options = options or ModelOptions(technique="hda")
    return boost_hda(sample, options.replace(params={**options.params, "stages": 1}))


def boost_hda(sample, options: ModelOptions | None = None) -> HdaModel:
    """Stagewise residual boosting of basis layers, stopped by 5-fold CV."""
    options = options or ModelOptions(technique="hda")
    imap, z, ys, mean, scale = _prepare(sample)
    seed = int(options.seed)
    max_stages = int(options.params.get("stages", MAX_STAGES))
    nu_later = float(options.params.get("nu", BOOST_NU))
    fixed_p = options.params.get("p")
    max_iter = int(options.params.get("max_iter", MAX_ITER))
    n = len(z)
    folds = fold_indices(n, min(5, n), seed)

    layers, nus, ps = [], [], []
    current = np.zeros_like(ys)
    fold_pred = np.zeros_like(ys)      # out-of-fold predictions of the ensemble so far
    fold_fit = [np.zeros((n - len(t), ys.shape[1])) for t in folds]
    best_cv = None
    history = []
    for stage in range(max_stages):
        nu = 1.0 if stage == 0 else nu_later
        resid = ys - current
        if fixed_p is not None:
            p = min(int(fixed_p), n // 2)
        else:
            p, _ = select_p(z, resid, options.accelerator, seed + 101 * stage, max_iter)
        layer = fit_layer(z, resid, p, seed + 101 * stage, max_iter)
        if max_stages == 1:
            layers, nus, ps = [layer], [nu], [p]
            break
        new_pred = fold_pred.copy()
        new_fit = []
        for k, test in enumerate(folds):
            mask = np.ones(n, bool)
            mask[test] = False
            lk = fit_layer(z[mask], ys[mask] - fold_fit[k], p, seed + 101 * stage + k, max_iter)
            new_fit.append(fold_fit[k] + nu * layer_predict(lk, z[mask]))
            new_pred[test] = fold_pred[test] + nu * layer_predict(lk, z[test])
        cv = _cv_rrms(ys, new_pred)
        history.append(cv)
        if best_cv is not None and cv > best_cv - MIN_GAIN:
            break
        best_cv = cv
        layers.append(layer)
        nus.append(nu)
        ps.append(p)
        current = current + nu * layer_predict(layer, z)
        fold_pred, fold_fit = new_pred, new_fit
    meta = {"n_train": sample.n, "stages": len(layers), "basis_sizes": ps, "cv_history": history,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return HdaModel(imap, layers, nus, mean, scale, options, meta, z, ys)
