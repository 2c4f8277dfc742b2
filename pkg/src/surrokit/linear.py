"""Response surface models: linear/quadratic features with ridge, stepwise or elastic-net estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InputMap, ModelOptions, SurrogateModel, register_model
from .errors import ConfigurationError, DataError

RIDGE_GRID = np.logspace(-8, 2, 20)
STEPWISE_MIN_GAIN = 1e-4


@dataclass
class RsmSpec:
    order: str = "linear"  # or "quadratic"
    estimator: str = "ridge"  # ridge | stepwise | elastic_net
    ridge_lambda: float | None = None  # None -> generalized cross-validation
    elastic_alpha: float | None = None
    elastic_lambda: float | None = None

    def __post_init__(self):
        if self.order not in ("linear", "quadratic"):
            raise ConfigurationError(f"unknown RSM order {self.order!r}")
        if self.estimator not in ("ridge", "stepwise", "elastic_net"):
            raise ConfigurationError(f"unknown RSM estimator {self.estimator!r}")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise ConfigurationError("ridge_lambda must be non-negative")

    @classmethod
    def from_options(cls, options: ModelOptions) -> "RsmSpec":
        p = options.params
        order = p.get("order", "linear")
        if options.require_linearity:
            order = "linear"
        return cls(order, p.get("estimator", "ridge"), p.get("ridge_lambda"),
                   p.get("elastic_alpha"), p.get("elastic_lambda"))


def _pairs(d: int, order: str):
    if order == "linear":
        return []
    sq = [(j, j) for j in range(d)]
    cross = [(j, k) for j in range(d) for k in range(j + 1, d)]
    return sq + cross


def n_features(d: int, order: str) -> int:
    return 1 + d + len(_pairs(d, order))


def expand_features(x, spec: RsmSpec | str = "linear") -> np.ndarray:
    """Feature vector(s): intercept, linear terms, squares, then cross terms."""
    order = spec if isinstance(spec, str) else spec.order
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = x[None, :] if single else x
    cols = [np.ones(z.shape[0])] + [z[:, j] for j in range(z.shape[1])]
    cols += [z[:, j] * z[:, k] for j, k in _pairs(z.shape[1], order)]
    phi = np.column_stack(cols)
    return phi[0] if single else phi


def feature_jacobian(z: np.ndarray, order: str) -> np.ndarray:
    """d(features)/dz, shape (n, n_features, d)."""
    n, d = z.shape
    jac = np.zeros((n, n_features(d, order), d))
    for j in range(d):
        jac[:, 1 + j, j] = 1.0
    for i, (j, k) in enumerate(_pairs(d, order)):
        col = 1 + d + i
        if j == k:
            jac[:, col, j] = 2.0 * z[:, j]
        else:
            jac[:, col, j] = z[:, k]
            jac[:, col, k] = z[:, j]
    return jac


def ridge_solve(phi, y, lam):
    """Ridge with an unpenalized intercept column (column 0)."""
    y = y.reshape(len(y), -1)
    if phi.shape[1] == 1:
        return y.mean(axis=0, keepdims=True)
    mu = phi[:, 1:].mean(axis=0)
    ym = y.mean(axis=0)
    a = phi[:, 1:] - mu
    gram = a.T @ a + lam * np.eye(a.shape[1])
    w = np.linalg.solve(gram, a.T @ (y - ym))
    b0 = ym - mu @ w
    return np.vstack([b0, w])


def gcv_lambda(phi, y, grid=RIDGE_GRID) -> float:
    """Ridge strength minimizing generalized cross-validation (summed over outputs)."""
    y = y.reshape(len(y), -1)
    n = phi.shape[0]
    a = phi[:, 1:] - phi[:, 1:].mean(axis=0)
    yc = y - y.mean(axis=0)
    if a.shape[1] == 0:
        return float(grid[0])
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    uty = u.T @ yc
    resid0 = max(np.sum(yc ** 2) - np.sum(uty ** 2), 0.0)
    best, best_lam = np.inf, None
    for lam in grid:
        shrink = lam / (s ** 2 + lam)
        rss = resid0 + np.sum((shrink[:, None] * uty) ** 2)
        df = 1.0 + np.sum(s ** 2 / (s ** 2 + lam))
        denom = max(n - df, 1e-12)
        score = n * rss / denom ** 2
        if best_lam is None or score < best - 1e-15 * abs(best):
            best, best_lam = score, float(lam)
    return best_lam


def loo_rrms(phi, y, lam=1e-10) -> float:
    """Leave-one-out RRMS of a ridge fit through the hat-matrix identity."""
    y = y.reshape(len(y), -1)
    n = phi.shape[0]
    if phi.shape[1] == 1:
        h = np.full(n, 1.0 / n)
        res = y - y.mean(axis=0)
    else:
        mu = phi[:, 1:].mean(axis=0)
        a = phi[:, 1:] - mu
        gram = a.T @ a + lam * np.eye(a.shape[1])
        try:
            ginv_at = np.linalg.solve(gram, a.T)
        except np.linalg.LinAlgError:
            return np.inf
        h = 1.0 / n + np.einsum("ij,ji->i", a, ginv_at)
        res = y - phi @ ridge_solve(phi, y, lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = res / (1.0 - h)[:, None]
    if not np.all(np.isfinite(loo)) or np.any(h > 1 - 1e-10):
        return np.inf
    dev = y - y.mean(axis=0)
    den = np.sum(dev ** 2, axis=0)
    den[den == 0] = 1.0
    return float(np.mean(np.sqrt(np.sum(loo ** 2, axis=0) / den)))


def stepwise_select(phi, y) -> list:
    """Forward selection by LOO-RRMS gain with backward pruning; column 0 always kept."""
    active = [0]
    score = loo_rrms(phi[:, active], y)
    candidates = list(range(1, phi.shape[1]))
    while True:
        best_gain, best_j = 0.0, None
        for j in candidates:
            if j in active:
                continue
            s = loo_rrms(phi[:, active + [j]], y)
            if score - s > best_gain:
                best_gain, best_j = score - s, j
        if best_j is None or best_gain < STEPWISE_MIN_GAIN:
            break
        active.append(best_j)
        score -= best_gain
        pruned = True
        while pruned and len(active) > 2:
            pruned = False
            for j in active[1:-1]:
                trial = [a for a in active if a != j]
                s = loo_rrms(phi[:, trial], y)
                if score - s >= STEPWISE_MIN_GAIN:
                    active, score, pruned = trial, s, True
                    break
    return sorted(active)


def elastic_net(phi, y, lam, alpha, tol=1e-10, max_sweeps=10_000, w0=None):
    """Coordinate descent for ||y - Phi w||^2 + lam*(alpha*|w|_1 + (1-alpha)*|w|^2/2).

    The intercept (column 0) is unpenalized; ``y`` is a single output.
    """
    y = np.asarray(y, float).ravel()
    mu = phi[:, 1:].mean(axis=0)
    a = phi[:, 1:] - mu
    ym = y.mean()
    r = y - ym
    q = a.shape[1]
    w = np.zeros(q) if w0 is None else np.array(w0, float)
    r = r - a @ w
    norms = np.sum(a ** 2, axis=0)
    l1 = lam * alpha / 2.0
    l2 = lam * (1.0 - alpha) / 2.0
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(q):
            if norms[j] == 0.0:
                continue
            old = w[j]
            rho = a[:, j] @ r + norms[j] * old
            new = np.sign(rho) * max(abs(rho) - l1, 0.0) / (norms[j] + l2)
            if new != old:
                r -= a[:, j] * (new - old)
                w[j] = new
                delta = max(delta, abs(new - old))
        if delta <= tol * max(1.0, np.max(np.abs(w), initial=0.0)):
            break
    b0 = ym - mu @ w
    return np.concatenate([[b0], w])


def _elastic_cv(phi, y, seed, folds=5):
    """Pick (lambda, alpha) on a 10x5 grid by k-fold CV."""
    y = np.asarray(y, float).ravel()
    n = len(y)
    folds = min(folds, n)
    a = phi[:, 1:] - phi[:, 1:].mean(axis=0)
    lam_max = 2.0 * np.max(np.abs(a.T @ (y - y.mean()))) + 1e-12
    lams = lam_max * np.logspace(0, -4, 10)
    alphas = (0.1, 0.5, 0.7, 0.9, 1.0)
    perm = np.random.default_rng(seed).permutation(n)
    parts = [perm[k::folds] for k in range(folds)]
    best = (np.inf, lams[-1], alphas[-1])
    for alpha in alphas:
        err = np.zeros(len(lams))
        for test in parts:
            train = np.setdiff1d(np.arange(n), test)
            w = None
            for i, lam in enumerate(lams):  # warm-started path
                coef = elastic_net(phi[train], y[train], lam, alpha, tol=1e-8, max_sweeps=2000,
                                   w0=None if w is None else w[1:])
                w = coef
                err[i] += np.sum((y[test] - phi[test] @ coef) ** 2)
        i = int(np.argmin(err))
        if err[i] < best[0]:
            best = (err[i], lams[i], alpha)
    return float(best[1]), float(best[2])


@register_model
class RsmModel(SurrogateModel):
    technique = "rsm"

    def __init__(self, input_map, coef, order, active, spec, train_z=None, train_y=None,
                 lam=0.0, options=None, meta=None):
        coef = np.asarray(coef, float)
        super().__init__(input_map, coef.shape[1], options, meta)
        self.coef = coef  # (len(active), d_out)
        self.order = order
        self.active = list(active)
        self.spec = spec
        self.train_z = None if train_z is None else np.asarray(train_z, float)
        self.train_y = None if train_y is None else np.asarray(train_y, float)
        self.lam = float(lam)

    def _features(self, z):
        return expand_features(z, self.order)[:, self.active]

    def _predict(self, z):
        return self._features(z) @ self.coef

    def _gradient(self, z):
        jac = feature_jacobian(z, self.order)[:, self.active, :]
        return np.einsum("nfd,fo->nod", jac, self.coef)

    def linear_coefficients(self):
        """(intercept, slopes) in original input units for a linear model without categoricals."""
        if self.order != "linear" or self.input_map.levels:
            raise ConfigurationError("raw coefficients are defined for linear continuous models only")
        full = np.zeros((1 + self.input_map.dim, self.d_out))
        full[self.active] = self.coef
        slopes = full[1:] / self.input_map.scale[:, None]
        intercept = full[0] - self.input_map.mean @ slopes
        return intercept, slopes

    def _smoothed(self, s):
        if self.train_z is None:
            return self
        phi = self._features(self.train_z)
        q = max(phi.shape[1] - 1, 1)
        a = phi[:, 1:] - phi[:, 1:].mean(axis=0) if phi.shape[1] > 1 else np.zeros((len(phi), 1))
        base = max(self.lam, 1e-3 * np.trace(a.T @ a) / q)
        lam = base * 10.0 ** (4.0 * s)
        return self._clone_with(coef=ridge_solve(phi, self.train_y, lam), lam=lam)

    def get_params(self):
        return {
            "order": self.order,
            "active": self.active,
            "coef": self.coef,
            "estimator": self.spec.estimator,
            "lambda": self.lam,
            "train_z": self.train_z,
            "train_y": self.train_y,
        }

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        spec = RsmSpec(p["order"], p.get("estimator", "ridge"))
        coef = np.asarray(p["coef"], float).reshape(len(p["active"]), d_out)
        return cls(input_map, coef, p["order"], p["active"], spec, p.get("train_z"),
                   p.get("train_y"), p.get("lambda", 0.0), options, meta)


def fit_rsm(sample, options: ModelOptions | None = None, spec: RsmSpec | None = None) -> RsmModel:
    options = options or ModelOptions(technique="rsm")
    spec = spec or RsmSpec.from_options(options)
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    y = sample.outputs
    phi = expand_features(z, spec.order)
    warnings = []
    active = list(range(phi.shape[1]))
    lam = 0.0
    if spec.estimator == "stepwise":
        if sample.n <= 2:
            raise DataError("stepwise regression needs N > 2")
        active = stepwise_select(phi, y)
        coef, lam = _ridge_with_guard(phi[:, active], y, 0.0, warnings)
    elif spec.estimator == "elastic_net":
        lam_e, alpha = spec.elastic_lambda, spec.elastic_alpha
        if lam_e is None or alpha is None:
            cv_lam, cv_alpha = _elastic_cv(phi, y[:, 0], options.seed)
            lam_e = cv_lam if lam_e is None else lam_e
            alpha = cv_alpha if alpha is None else alpha
        coef = np.column_stack([elastic_net(phi, y[:, j], lam_e, alpha) for j in range(y.shape[1])])
        lam = lam_e
    else:
        lam = gcv_lambda(phi, y) if spec.ridge_lambda is None else float(spec.ridge_lambda)
        coef, lam = _ridge_with_guard(phi, y, lam, warnings)
    meta = {"n_train": sample.n, "warnings": warnings,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return RsmModel(imap, coef, spec.order, active, spec, z, y, lam, options, meta)


def _ridge_with_guard(phi, y, lam, warnings):
    if lam == 0.0 and phi.shape[1] > 1:
        a = phi[:, 1:] - phi[:, 1:].mean(axis=0)
        if np.linalg.matrix_rank(a) < a.shape[1]:
            lam = 1e-8 * np.trace(phi.T @ phi) / phi.shape[1]
            warnings.append(f"singular design: ridge regularization forced to {lam:.3g}")
    return ridge_solve(phi, y, lam), lam


def constant_model(sample, options=None) -> RsmModel:
    """Intercept-only RSM, used as the fallback for degenerate samples."""
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    y = sample.outputs
    coef = y.mean(axis=0, keepdims=True)
    meta = {"n_train": sample.n, "warnings": ["constant model fallback"],
            "input_names": sample.input_names, "output_names": sample.output_names}
    return RsmModel(imap, coef, "linear", [0], RsmSpec(), imap.transform(sample.inputs), y, 0.0,
                    options or ModelOptions(technique="rsm"), meta)
