"""Gaussian process regression: ARD kernels, likelihood-based tuning, AE, joint outputs and a sparse variant."""

from __future__ import annotations

import math

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .core import InputMap, ModelOptions, SurrogateModel, accel_scale, register_model
from .errors import CapacityError, ConfigurationError

GP_MAX_N = 4000
SGP_MAX_INDUCING = 1000
SGP_HYPER_SUBSET = 500
LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_VAR_BOUNDS = (math.log(1e-4), math.log(1e4))
LOG_ETA_BOUNDS = (math.log(1e-10), math.log(1.0))
ETA_INIT = 1e-6
ETA_EXACT = 1e-12
ETA_MAX = 1e-4
_SQRT5 = math.sqrt(5.0)


# ---------------------------------------------------------------- kernels

def _sqdist(a, b, ls):
    a = a / ls
    b = b / ls
    d = np.sum(a ** 2, 1)[:, None] + np.sum(b ** 2, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_shape(r2, kind):
    """Unit-variance correlation and its derivative with respect to r^2."""
    if kind == "se":
        k = np.exp(-0.5 * r2)
        return k, -0.5 * k
    if kind == "matern52":
        r = np.sqrt(r2)
        e = np.exp(-_SQRT5 * r)
        return (1.0 + _SQRT5 * r + 5.0 * r2 / 3.0) * e, -(5.0 / 6.0) * (1.0 + _SQRT5 * r) * e
    raise ConfigurationError(f"unknown kernel {kind!r}")


def correlation(a, b, ls, kind="se"):
    return kernel_shape(_sqdist(a, b, ls), kind)[0]


# ---------------------------------------------------------------- likelihood

def log_marginal_likelihood(theta, z, y, kind="se", eta_fixed=None, grad=True):
    """Summed log marginal likelihood of the standardized columns of ``y``.

    ``theta`` = [log lengthscales..., log signal variance, (log relative nugget)].
    The covariance is ``var * (R + eta I)``.
    """
    n, d = z.shape
    m = y.shape[1]
    ls = np.exp(theta[:d])
    var = math.exp(theta[d])
    eta = eta_fixed if eta_fixed is not None else math.exp(theta[d + 1])
    r2 = _sqdist(z, z, ls)
    corr, dcorr = kernel_shape(r2, kind)
    K = var * corr
    K[np.diag_indices(n)] += var * eta
    try:
        cf = cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return (-np.inf, np.zeros_like(theta)) if grad else -np.inf
    alpha = cho_solve(cf, y, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    lml = -0.5 * np.sum(y * alpha) - 0.5 * m * logdet - 0.5 * m * n * math.log(2 * math.pi)
    if not grad:
        return lml
    kinv = cho_solve(cf, np.eye(n), check_finite=False)
    w = alpha @ alpha.T - m * kinv
    g = np.zeros_like(theta)
    base = var * dcorr
    for j in range(d):
        diff = (z[:, j][:, None] - z[:, j][None, :]) ** 2 / ls[j] ** 2
        g[j] = 0.5 * np.sum(w * (base * (-2.0 * diff)))
    g[d] = 0.5 * np.sum(w * K)
    if eta_fixed is None:
        g[d + 1] = 0.5 * var * eta * np.trace(w)
    return lml, g


def optimize_hyperparameters(z, y, kind="se", eta_fixed=None, restarts=5, seed=0):
    """Multistart L-BFGS-B maximization of the log marginal likelihood."""
    d = z.shape[1]
    bounds = [LOG_LS_BOUNDS] * d + [LOG_VAR_BOUNDS]
    # short lengthscales keep K well conditioned; long ones on dense designs
    # drift into a collapsed optimum
    x0 = [math.log(0.5)] * d + [0.0]
    if eta_fixed is None:
        bounds.append(LOG_ETA_BOUNDS)
        x0.append(math.log(ETA_INIT))
    rng = np.random.default_rng(seed)
    starts = [np.array(x0)]
    for _ in range(restarts - 1):
        s = np.array(x0, float)
        s[:d] = rng.uniform(math.log(0.1), math.log(3.0), d)
        if eta_fixed is None:
            s[d + 1] = rng.uniform(math.log(1e-8), math.log(1e-2))
        starts.append(s)

    def objective(th):
        val, g = log_marginal_likelihood(th, z, y, kind, eta_fixed)
        if not np.isfinite(val):
            return 1e25, np.zeros_like(th)
        return -val, -g

    best = None
    for s in starts:
        res = minimize(objective, s, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    return best.x, -best.fun


# ---------------------------------------------------------------- model

@register_model
class GpModel(SurrogateModel):
    """Exact GP posterior on standardized inputs and per-output standardized values."""

    technique = "gp"
    has_ae = True

    def __init__(self, input_map, z, y_std, ls, var, eta, y_mean, y_scale, kind="se",
                 options=None, meta=None, alpha=None, technique=None):
        y_std = np.asarray(y_std, float).reshape(len(z), -1)
        super().__init__(input_map, y_std.shape[1], options, meta)
        if technique:
            self.technique = technique
        self.z = np.asarray(z, float)
        self.y_std = y_std
        self.ls = np.asarray(ls, float).ravel()
        self.var = float(var)
        self.eta = float(eta)
        self.y_mean = np.asarray(y_mean, float).ravel()
        self.y_scale = np.asarray(y_scale, float).ravel()
        self.kind = kind
        self._cf = None
        self.alpha = self._solve_alpha() if alpha is None else np.asarray(alpha, float).reshape(self.y_std.shape)

    def _kernel_matrix(self):
        K = self.var * correlation(self.z, self.z, self.ls, self.kind)
        K[np.diag_indices(len(self.z))] += self.var * self.eta
        return K

    def _factor(self):
        if self._cf is None:
            self._cf = cho_factor(self._kernel_matrix(), lower=True, check_finite=False)
        return self._cf

    def _solve_alpha(self):
        warnings = self.meta.setdefault("warnings", [])
        eta = self.eta
        while True:
            try:
                self._cf = None
                cf = self._factor()
                break
            except np.linalg.LinAlgError:
                if eta >= ETA_MAX:
                    raise
                eta = min(max(eta * 10.0, 1e-10), ETA_MAX)
                self.eta = eta
                warnings.append(f"ill-conditioned kernel: nugget escalated to {eta:.1e}*variance")
        alpha = cho_solve(cf, self.y_std, check_finite=False)
        if self.eta <= 1e-10:
            # interpolation mode: iterative refinement against the nugget-free kernel
            k0 = self.var * correlation(self.z, self.z, self.ls, self.kind)
            for _ in range(5):
                alpha = alpha + cho_solve(cf, self.y_std - k0 @ alpha, check_finite=False)
        return alpha

    def _cross(self, z):
        r2 = _sqdist(z, self.z, self.ls)
        return kernel_shape(r2, self.kind)

    def _predict(self, z):
        k, _ = self._cross(z)
        return self.y_mean + (self.var * k @ self.alpha) * self.y_scale

    def _gradient(self, z):
        _, dk = self._cross(z)
        diff = (z[:, None, :] - self.z[None, :, :]) / self.ls ** 2  # n x N x d
        dkz = 2.0 * self.var * dk[:, :, None] * diff
        g = np.einsum("nkd,ko->nod", dkz, self.alpha)
        return g * self.y_scale[None, :, None]

    def posterior_std(self, z):
        k, _ = self._cross(z)
        v = solve_triangular(self._factor()[0], (self.var * k).T, lower=True, check_finite=False)
        var = self.var * (1.0 + self.eta) - np.sum(v ** 2, axis=0)
        return np.sqrt(np.maximum(var, 0.0))

    def _ae(self, z):
        return self.posterior_std(z)[:, None] * self.y_scale[None, :]

    def _smoothed(self, s):
        eta = self.eta + 0.1 * s / self.var
        return GpModel(self.input_map, self.z, self.y_std, self.ls, self.var, eta, self.y_mean,
                       self.y_scale, self.kind, self.options, dict(self.meta), technique=self.technique)

    def get_params(self):
        return {"kernel": self.kind, "lengthscales": self.ls, "signal_variance": self.var,
                "relative_nugget": self.eta, "inputs": self.z, "values": self.y_std,
                "weights": self.alpha, "output_mean": self.y_mean, "output_scale": self.y_scale,
                "technique": self.technique}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        return cls(input_map, p["inputs"], p["values"], p["lengthscales"], p["signal_variance"],
                   p["relative_nugget"], p["output_mean"], p["output_scale"], p.get("kernel", "se"),
                   options, meta, alpha=p["weights"], technique=p.get("technique"))


def standardize_outputs(y):
    mean = y.mean(axis=0)
    scale = y.std(axis=0)
    scale[scale <= 1e-300] = 1.0
    return (y - mean) / scale, mean, scale


def canonical_order(z, ys):
    """Row order that depends only on the row set, so fits are permutation invariant."""
    return np.lexsort(np.column_stack([z, ys]).T[::-1])


def _fit_hyper(z, ys, options, seed):
    kind = options.params.get("kernel", "se")
    nugget = options.params.get("nugget")
    eta_fixed = ETA_EXACT if options.exact_fit else (float(nugget) if nugget is not None else None)
    restarts = accel_scale(5, options.accelerator)
    theta, _ = optimize_hyperparameters(z, ys, kind, eta_fixed, restarts, seed)
    d = z.shape[1]
    eta = eta_fixed if eta_fixed is not None else math.exp(theta[d + 1])
    return np.exp(theta[:d]), math.exp(theta[d]), eta, kind


def fit_gp(sample, options: ModelOptions | None = None, technique="gp") -> GpModel:
    """Single- or joint-output GP; several outputs always share hyperparameters here."""
    options = options or ModelOptions(technique="gp")
    if sample.n > GP_MAX_N:
        raise CapacityError(f"GP is limited to N <= {GP_MAX_N} training points (got {sample.n}); use sgp")
    sample = sample.subset(canonical_order(sample.inputs, sample.outputs))
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    ys, mean, scale = standardize_outputs(sample.outputs)
    ls, var, eta, kind = _fit_hyper(z, ys, options, options.seed)
    meta = {"n_train": sample.n, "warnings": [], "joint": sample.d_out > 1,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return GpModel(imap, z, ys, ls, var, eta, mean, scale, kind, options, meta, technique=technique)


def joint_fit_gp(sample, options: ModelOptions | None = None) -> GpModel:
    """Shared kernel across all outputs: one factorization, m right-hand sides."""
    return fit_gp(sample, options)


# ---------------------------------------------------------------- sparse GP

@register_model
class SgpModel(SurrogateModel):
    """Deterministic-training-conditional (Nystrom) GP on M inducing inputs.

    Stores the inducing inputs, hyperparameters and the sufficient statistics
    ``A A^T`` and ``A y`` with ``A = L^-1 K_mn``; these are all the
    prediction, AE and smoothing need.
    """

    technique = "sgp"
    has_ae = True

    def __init__(self, input_map, zm, ls, var, eta, aat, ay, y_mean, y_scale, kind="se",
                 options=None, meta=None):
        ay = np.asarray(ay, float)
        ay = ay.reshape(len(zm), -1)
        super().__init__(input_map, ay.shape[1], options, meta)
        self.zm = np.asarray(zm, float)
        self.ls = np.asarray(ls, float).ravel()
        self.var, self.eta = float(var), float(eta)
        self.aat = np.asarray(aat, float).reshape(len(zm), len(zm))
        self.ay = ay
        self.y_mean = np.asarray(y_mean, float).ravel()
        self.y_scale = np.asarray(y_scale, float).ravel()
        self.kind = kind
        m = len(self.zm)
        kmm = self.var * correlation(self.zm, self.zm, self.ls, kind)
        kmm[np.diag_indices(m)] += self.var * 1e-8
        self._L = np.linalg.cholesky(kmm)
        noise = self.var * self.eta
        self._noise = noise
        bmat = noise * np.eye(m) + self.aat
        self._LB = np.linalg.cholesky(bmat)
        u = cho_solve((self._LB, True), self.ay)
        self.w = solve_triangular(self._L.T, u, lower=False)

    def _predict(self, z):
        k = self.var * correlation(z, self.zm, self.ls, self.kind)
        return self.y_mean + (k @ self.w) * self.y_scale

    def _gradient(self, z):
        _, dk = kernel_shape(_sqdist(z, self.zm, self.ls), self.kind)
        diff = (z[:, None, :] - self.zm[None, :, :]) / self.ls ** 2
        dkz = 2.0 * self.var * dk[:, :, None] * diff
        return np.einsum("nkd,ko->nod", dkz, self.w) * self.y_scale[None, :, None]

    def _ae(self, z):
        k = self.var * correlation(z, self.zm, self.ls, self.kind)
        a = solve_triangular(self._L, k.T, lower=True)
        b = solve_triangular(self._LB, a, lower=True)
        var = self.var * (1.0 + self.eta) - np.sum(a ** 2, 0) + self._noise * np.sum(b ** 2, 0)
        return np.sqrt(np.maximum(var, 0.0))[:, None] * self.y_scale[None, :]

    def _smoothed(self, s):
        eta = self.eta + 0.1 * s / self.var
        return SgpModel(self.input_map, self.zm, self.ls, self.var, eta, self.aat, self.ay,
                        self.y_mean, self.y_scale, self.kind, self.options, dict(self.meta))

    def get_params(self):
        return {"kernel": self.kind, "lengthscales": self.ls, "signal_variance": self.var,
                "relative_nugget": self.eta, "inducing": self.zm, "aat": self.aat, "ay": self.ay,
                "output_mean": self.y_mean, "output_scale": self.y_scale}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        return cls(input_map, p["inducing"], p["lengthscales"], p["signal_variance"],
                   p["relative_nugget"], p["aat"], p["ay"], p["output_mean"], p["output_scale"],
                   p.get("kernel", "se"), options, meta)


def fit_sgp(sample, options: ModelOptions | None = None):
    options = options or ModelOptions(technique="sgp")
    m_max = int(options.params.get("inducing", SGP_MAX_INDUCING))
    if sample.n <= m_max:
        # the inducing set is the whole training set: the exact GP posterior
        return fit_gp(sample, options, technique="sgp")
    sample = sample.subset(canonical_order(sample.inputs, sample.outputs))
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    ys, mean, scale = standardize_outputs(sample.outputs)
    rng = np.random.default_rng(options.seed)
    sub = rng.choice(sample.n, SGP_HYPER_SUBSET, replace=False) if sample.n > SGP_HYPER_SUBSET else slice(None)
    ls, var, eta, kind = _fit_hyper(z[sub], ys[sub], options, options.seed)
    eta = max(eta, 1e-8)
    zm, _ = kmeans2(z, z[rng.choice(sample.n, m_max, replace=False)], iter=20, minit="matrix",
                    missing="warn")
    zm = np.unique(zm, axis=0)
    m = len(zm)
    kmm = var * correlation(zm, zm, ls, kind)
    kmm[np.diag_indices(m)] += var * 1e-8
    L = np.linalg.cholesky(kmm)
    aat = np.zeros((m, m))
    ay = np.zeros((m, ys.shape[1]))
    for start in range(0, sample.n, 2000):
        blk = slice(start, start + 2000)
        a = solve_triangular(L, var * correlation(zm, z[blk], ls, kind), lower=True)
        aat += a @ a.T
        ay += a @ ys[blk]
    meta = {"n_train": sample.n, "warnings": [], "inducing": m,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return SgpModel(imap, zm, ls, var, eta, aat, ay, mean, scale, kind, options, meta)
