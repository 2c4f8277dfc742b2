"""Mixture of approximations: Gaussian-mixture partition of (x, y), local models, smooth gating."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .core import (InputMap, ModelOptions, SurrogateModel, as_2d, model_from_record,
                   model_to_record, register_model, smooth_model)
from .errors import DataError, UnsupportedCapabilityError

K_MAX = 5
TAU = 0.01
EM_RESTARTS = 10
EM_ITER = 300
COV_FLOOR = 1e-6
BETAS = tuple(2.0 ** k for k in range(9))
GATE_TOL = 1e-3


# ---------------------------------------------------------------- Gaussian mixture

def _log_gauss(u, mean, cov):
    """Log density of each row of ``u`` under N(mean, cov)."""
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (u - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(diff ** 2, axis=0) + logdet + u.shape[1] * math.log(2 * math.pi))


def _estep(u, weights, means, covs):
    logp = np.column_stack([math.log(w) + _log_gauss(u, m, c) for w, m, c in zip(weights, means, covs)])
    norm = logsumexp(logp, axis=1)
    return np.exp(logp - norm[:, None]), float(norm.sum())


def em_fit(u, k, rng, max_iter=EM_ITER, tol=1e-10):
    """One EM run from a k-means++-style start; returns (weights, means, covs, loglik) or None."""
    n, dim = u.shape
    centers = [u[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((u - c) ** 2, axis=1) for c in centers], axis=0)
        prob = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(u[rng.choice(n, p=prob)])
    means = np.array(centers)
    covs = np.array([np.cov(u.T).reshape(dim, dim) + COV_FLOOR * np.eye(dim)] * k)
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    for _ in range(max_iter):
        resp, ll = _estep(u, weights, means, covs)
        nk = resp.sum(axis=0)
        if (nk < 1.0).any():
            return None  # a component collapsed below one point
        weights = nk / n
        means = (resp.T @ u) / nk[:, None]
        for j in range(k):
            diff = u - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + COV_FLOOR * np.eye(dim)
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            break
        prev = ll
    _, ll = _estep(u, weights, means, covs)
    return weights, means, covs, ll


def n_gmm_params(k, dim):
    return (k - 1) + k * dim + k * dim * (dim + 1) // 2


def bic(loglik, k, dim, n):
    return -2.0 * loglik + n_gmm_params(k, dim) * math.log(n)


def select_mixture(u, k_max=K_MAX, restarts=EM_RESTARTS, seed=0):
    """EM fits for K = 1..k_max; the K with the lowest BIC wins."""
    n, dim = u.shape
    rng = np.random.default_rng(seed)
    table = {}
    best = None
    for k in range(1, k_max + 1):
        fit = None
        for _ in range(restarts if k > 1 else 1):
            cand = em_fit(u, k, rng)
            if cand is not None and (fit is None or cand[3] > fit[3]):
                fit = cand
        if fit is None or fit[0].min() < 1.0 / n:
            table[k] = math.inf
            continue
        table[k] = bic(fit[3], k, dim, n)
        if best is None or table[k] < best[0]:
            best = (table[k], k, fit)
    return best[2], table


# ---------------------------------------------------------------- gating

def gate_logits(z, weights, means, covs, beta, offsets=None):
    d = z.shape[1]
    lg = np.column_stack([math.log(w) + _log_gauss(z, m[:d], c[:d, :d]) for w, m, c in zip(weights, means, covs)])
    if offsets is not None:
        lg = lg + offsets
    return beta * lg


def gates(z, weights, means, covs, beta, offsets=None):
    lg = gate_logits(z, weights, means, covs, beta, offsets)
    return np.exp(lg - logsumexp(lg, axis=1, keepdims=True))


def margin_offsets(base, resp, confident=0.9, bound=50.0):
    """Per-component log-offsets maximizing the worst logit margin of confidently assigned points.

    A linear program in (offsets, t); the first offset is pinned to 0.  This
    moves the x-marginal decision boundaries to the middle of the gaps between
    parts without changing the shape of the gates.
    """
    n, k = base.shape
    if k == 1:
        return np.zeros(1)
    label = resp.argmax(axis=1)
    rows, rhs = [], []
    for i in np.flatnonzero(resp.max(axis=1) > confident):
        c = label[i]
        for j in range(k):
            if j != c:
                row = np.zeros(k + 1)
                row[c] -= 1.0
                row[j] += 1.0
                row[k] = 1.0
                rows.append(row[1:])
                rhs.append(base[i, c] - base[i, j])
    if not rows:
        return np.zeros(k)
    cost = np.zeros(k)
    cost[-1] = -1.0
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(-bound, bound)] * (k - 1) + [(None, None)], method="highs")
    if not res.success:
        return np.zeros(k)
    return np.r_[0.0, res.x[: k - 1]]


def gate_gradient(z, g, means, covs, beta):
    """d g_k / d z, shape (n, K, d)."""
    d = z.shape[1]
    dlog = np.stack([-np.linalg.solve(c[:d, :d], (z - m[:d]).T).T for m, c in zip(means, covs)], axis=1)
    mean_dlog = np.einsum("nk,nkd->nd", g, dlog)
    return beta * g[:, :, None] * (dlog - mean_dlog[:, None, :])


@register_model
class MoaModel(SurrogateModel):
    """Prediction = sum_k g_k(x) f_k(x) with x-marginal mixture gates."""

    technique = "moa"

    def __init__(self, input_map, weights, means, covs, beta, locals_, tau=TAU, options=None, meta=None,
                 offsets=None):
        super().__init__(input_map, locals_[0].d_out, options, meta)
        self.weights = np.asarray(weights, float).ravel()
        k = self.weights.size
        self.means = np.asarray(means, float).reshape(k, -1)
        dim = self.means.shape[1]
        self.covs = np.asarray(covs, float).reshape(k, dim, dim)
        self.beta = float(beta)
        self.offsets = np.zeros(k) if offsets is None else np.asarray(offsets, float).ravel()
        self.local_models = list(locals_)
        self.tau = float(tau)
        self.has_gradient = all(m.has_gradient for m in self.local_models)
        self.has_ae = all(m.has_ae for m in self.local_models)
        self.is_smooth = all(m.is_smooth for m in self.local_models)

    def gating(self, x):
        z = self.input_map.transform(as_2d(x, self.d_in))
        return gates(z, self.weights, self.means, self.covs, self.beta, self.offsets)

    def predict(self, x):
        x = as_2d(x, self.d_in)
        g = self.gating(x)
        preds = np.stack([m.predict(x) for m in self.local_models], axis=1)  # n x K x m
        return np.einsum("nk,nkm->nm", g, preds)

    def gradient(self, x):
        if not self.has_gradient:
            raise UnsupportedCapabilityError("technique has no gradient")
        x = as_2d(x, self.d_in)
        z = self.input_map.transform(x)
        g = gates(z, self.weights, self.means, self.covs, self.beta, self.offsets)
        dg = gate_gradient(z, g, self.means, self.covs, self.beta) @ self.input_map.jacobian  # n x K x d_in
        preds = np.stack([m.predict(x) for m in self.local_models], axis=1)
        grads = np.stack([m.gradient(x) for m in self.local_models], axis=1)  # n x K x m x d_in
        return np.einsum("nkd,nkm->nmd", dg, preds) + np.einsum("nk,nkmd->nmd", g, grads)

    def accuracy(self, x):
        if not self.has_ae:
            raise UnsupportedCapabilityError("technique has no accuracy evaluation")
        x = as_2d(x, self.d_in)
        g = self.gating(x)
        preds = np.stack([m.predict(x) for m in self.local_models], axis=1)
        aes = np.stack([m.accuracy(x) for m in self.local_models], axis=1)
        mean = np.einsum("nk,nkm->nm", g, preds)
        second = np.einsum("nk,nkm->nm", g, aes ** 2 + (preds - mean[:, None, :]) ** 2)
        return np.sqrt(np.maximum(second, 0.0))

    def _smoothed(self, s):
        return self._clone_with(local_models=[smooth_model(m, s) for m in self.local_models])

    def get_params(self):
        return {"weights": self.weights, "means": self.means, "covariances": self.covs,
                "beta": self.beta, "offsets": self.offsets, "tau": self.tau,
                "local_models": [model_to_record(m) for m in self.local_models]}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        locals_ = [model_from_record(r) for r in p["local_models"]]
        return cls(input_map, p["weights"], p["means"], p["covariances"], p["beta"], locals_,
                   p.get("tau", TAU), options, meta, p.get("offsets"))


def _local_sets(resp, tau, min_size):
    sets = []
    for k in range(resp.shape[1]):
        rows = np.flatnonzero(resp[:, k] > tau)
        if len(rows) < min_size:
            rows = np.sort(np.argsort(-resp[:, k], kind="stable")[:min_size])
        sets.append(rows)
    return sets


def fit_moa(sample, options: ModelOptions | None = None) -> MoaModel:
    """Partition by a BIC-selected mixture in (x, y), then fit one local model per part."""
    from .api import train
    from .selector import decision_tree_select

    options = options or ModelOptions(technique="moa")
    if sample.n < 20:
        raise DataError("MoA needs at least 20 training points")
    k_max = int(options.params.get("k_max", K_MAX))
    tau = float(options.params.get("tau", TAU))
    imap = InputMap.fit(sample.inputs, sample.categorical_mask)
    z = imap.transform(sample.inputs)
    y = sample.outputs
    ys = (y - y.mean(axis=0)) / np.where(y.std(axis=0) > 0, y.std(axis=0), 1.0)
    u = np.hstack([z, ys])
    fixed_k = options.params.get("k")
    if fixed_k is not None:
        (weights, means, covs, _), table = select_mixture_fixed(u, int(fixed_k), options.seed)
    else:
        (weights, means, covs, _), table = select_mixture(u, k_max, EM_RESTARTS, options.seed)
    resp, _ = _estep(u, weights, means, covs)
    sets = _local_sets(resp, tau, sample.d_in + 2)
    local_opts = options.replace(technique="auto", params={}, smoothing=0.0, hints=frozenset())
    locals_ = []
    techs = []
    for rows in sets:
        part = sample.subset(rows)
        tech = decision_tree_select(part, local_opts)
        techs.append(tech)
        locals_.append(train(part, local_opts.replace(technique=tech)))
    # gate boundaries centred in the gaps between parts, then the mildest sharpening
    # whose training error is within GATE_TOL * Var(y) of the best one
    offsets = margin_offsets(gate_logits(z, weights, means, covs, 1.0), resp)
    preds = np.stack([m.predict(sample.inputs) for m in locals_], axis=1)
    errs = []
    for beta in BETAS:
        g = gates(z, weights, means, covs, beta, offsets)
        errs.append(float(np.mean((np.einsum("nk,nkm->nm", g, preds) - y) ** 2)))
    tol = GATE_TOL * float(np.mean(np.var(y, axis=0)))
    beta = next(b for b, e in zip(BETAS, errs) if e <= min(errs) + tol)
    meta = {"n_train": sample.n, "k": len(weights), "bic": {str(k): v for k, v in table.items()},
            "local_techniques": techs, "local_sizes": [len(s) for s in sets], "beta": beta,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return MoaModel(imap, weights, means, covs, beta, locals_, tau, options, meta, offsets)


def select_mixture_fixed(u, k, seed=0):
    rng = np.random.default_rng(seed)
    fit = None
    for _ in range(EM_RESTARTS if k > 1 else 1):
        cand = em_fit(u, k, rng)
        if cand is not None and (fit is None or cand[3] > fit[3]):
            fit = cand
    if fit is None:
        raise DataError(f"mixture with {k} components degenerates on this sample")
    return fit, {k: bic(fit[3], k, u.shape[1], len(u))}
