"""1-D splines with adaptive tension, and the cubic B-spline basis used by tensor factors.

A tension spline on ``[x_i, x_{i+1}]`` with tension ``sigma`` lies in
span{1, x, sinh(sigma*u), cosh(sigma*u)} with ``u = (x - x_i)/h``.  It is written as

    f(u) = y_i (1-u) + y_{i+1} u + h^2 (A psi(1-u) + B psi(u)),
    psi(u) = (sinh(sigma u)/sinh(sigma) - u) / sigma^2,

where ``A`` and ``B`` are the end second derivatives.  ``sigma = 0`` gives the
cubic and ``sigma -> inf`` the linear interpolant.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from .core import InputMap, ModelOptions, SurrogateModel, register_model
from .errors import ConfigurationError, DataError

TENSION_START = 0.1
TENSION_CAP = 1e3
_SERIES = 1e-2


# ---------------------------------------------------------------- tension kernels

def _sinh_ratio(u, s):
    """sinh(s*u)/sinh(s) for u in [0, 1], stable for large s."""
    u = np.asarray(u, float)
    if s < _SERIES:
        return u + s * s * (u ** 3 - u) / 6.0
    return np.exp(s * (u - 1.0)) * (-np.expm1(-2.0 * s * u)) / (-np.expm1(-2.0 * s))


def _cosh_ratio(u, s):
    """cosh(s*u)/sinh(s)."""
    u = np.asarray(u, float)
    return np.exp(s * (u - 1.0)) * (1.0 + np.exp(-2.0 * s * u)) / (-np.expm1(-2.0 * s))


def psi(u, s):
    u = np.asarray(u, float)
    if s == 0.0:
        return (u ** 3 - u) / 6.0
    if s < _SERIES:
        return (u ** 3 - u) / 6.0 + s * s * (3 * u ** 5 - 10 * u ** 3 + 7 * u) / 360.0
    return (_sinh_ratio(u, s) - u) / (s * s)


def dpsi(u, s):
    u = np.asarray(u, float)
    if s == 0.0:
        return (3 * u ** 2 - 1.0) / 6.0
    if s < _SERIES:
        return (3 * u ** 2 - 1.0) / 6.0 + s * s * (15 * u ** 4 - 30 * u ** 2 + 7) / 360.0
    return (s * _cosh_ratio(u, s) - 1.0) / (s * s)


def _ab(s):
    """psi'(0) and psi'(1)."""
    return float(dpsi(0.0, s)), float(dpsi(1.0, s))


# ---------------------------------------------------------------- spline construction

def _end_moments(h, slope, d0, d1, s):
    a, b = _ab(s)
    p, q = (d0 - slope) / h, (d1 - slope) / h
    det = a * a - b * b
    return (p * b - a * q) / det, (a * p - b * q) / det


def c2_derivatives(x, y, tension):
    """Knot derivatives of the natural C2 tension spline."""
    h = np.diff(x)
    sl = np.diff(y) / h
    n = x.size
    if n == 2:
        return np.array([sl[0], sl[0]])
    ab = np.array([_ab(s) for s in tension])
    a, b = ab[:, 0], ab[:, 1]
    m = n - 2
    band = np.zeros((3, m))
    band[1] = h[:-1] * b[:-1] + h[1:] * b[1:]
    band[0, 1:] = -h[1:-1] * a[1:-1]
    band[2, :-1] = -h[1:-1] * a[1:-1]
    rhs = sl[1:] - sl[:-1]
    mom = np.zeros(n)
    mom[1:-1] = solve_banded((1, 1), band, rhs)
    d = np.empty(n)
    d[:-1] = sl + h * (-mom[:-1] * b + mom[1:] * a)
    d[-1] = sl[-1] + h[-1] * (-mom[-2] * a[-1] + mom[-1] * b[-1])
    return d


def _local_shape(sl):
    """Per-interval flags (increasing, decreasing, convex, concave) from neighbouring slopes."""
    k = sl.size
    inc, dec, vex, cav = (np.zeros(k, bool) for _ in range(4))
    for i in range(k):
        nb = sl[max(i - 1, 0): i + 2]
        inc[i] = np.all(nb >= 0)
        dec[i] = np.all(nb <= 0)
        if k > 1:
            left = sl[i - 1] if i > 0 else sl[i]
            right = sl[i + 1] if i < k - 1 else sl[i]
            vex[i] = left <= sl[i] <= right and left < right
            cav[i] = left >= sl[i] >= right and left > right
    return inc, dec, vex, cav


def _deriv_extremes(h, slope, A, B, s):
    """Min and max of f' over one interval."""
    us = [0.0, 1.0]
    if A * B < 0:
        g = lambda u: A * _sinh_ratio(1.0 - u, s) + B * _sinh_ratio(u, s)  # noqa: E731
        if s == 0.0:
            us.append(A / (A - B))
        else:
            try:
                us.append(brentq(g, 0.0, 1.0, xtol=1e-14))
            except ValueError:
                pass
    u = np.asarray(us)
    fp = slope + h * (-A * dpsi(1.0 - u, s) + B * dpsi(u, s))
    return fp.min(), fp.max()


def _violations(x, y, d, tension, shape):
    h = np.diff(x)
    sl = np.diff(y) / h
    inc, dec, vex, cav = shape
    scale = max(np.max(np.abs(sl)), 1e-300)
    tol = 1e-12 * scale
    bad = np.zeros(sl.size, bool)
    for i in range(sl.size):
        A, B = _end_moments(h[i], sl[i], d[i], d[i + 1], tension[i])
        lo, hi = _deriv_extremes(h[i], sl[i], A, B, tension[i])
        if inc[i] and lo < -tol or dec[i] and hi > tol:
            bad[i] = True
        if vex[i] and min(A, B) < -tol / h[i] or cav[i] and max(A, B) > tol / h[i]:
            bad[i] = True
    return bad


def adaptive_tension(x, y, cap=TENSION_CAP, max_rounds=200):
    """Choose per-interval tensions (and, if needed, knot derivatives) preserving local shape.

    Returns ``(derivatives, tensions, shape_ok)``.
    """
    h = np.diff(x)
    sl = np.diff(y) / h
    shape = _local_shape(sl)
    tension = np.zeros(sl.size)
    d = c2_derivatives(x, y, tension)
    c1 = False
    for _ in range(max_rounds):
        bad = _violations(x, y, d, tension, shape)
        if not bad.any():
            return d, tension, True
        raise_mask = bad & (tension < cap)
        if raise_mask.any():
            tension[raise_mask] = np.where(tension[raise_mask] == 0.0, TENSION_START,
                                           np.minimum(2.0 * tension[raise_mask], cap))
            if not c1:
                d = c2_derivatives(x, y, tension)
            continue
        if c1:
            # pull the end derivatives of the offending intervals halfway to the chord slope
            for i in np.flatnonzero(bad):
                d[i] = 0.5 * (d[i] + sl[i])
                d[i + 1] = 0.5 * (d[i + 1] + sl[i])
            continue
        # tension alone cannot fix these intervals: constrain knot derivatives to the slope range
        c1 = True
        for i in np.flatnonzero(bad):
            for k in (i, i + 1):
                if k == 0:
                    d[k] = sl[0]
                elif k == x.size - 1:
                    d[k] = sl[-1]
                else:
                    d[k] = np.clip(d[k], min(sl[k - 1], sl[k]), max(sl[k - 1], sl[k]))
        for i in np.flatnonzero(bad):
            if sl[i] == 0.0:
                d[i] = d[i + 1] = 0.0
    return d, tension, not _violations(x, y, d, tension, shape).any()


class TensionSpline:
    """Piecewise tension spline in Hermite form; linear extrapolation outside the knots."""

    def __init__(self, knots, values, derivs, tensions):
        self.knots = np.asarray(knots, float)
        self.values = np.asarray(values, float)
        self.derivs = np.asarray(derivs, float)
        self.tensions = np.asarray(tensions, float)
        h = np.diff(self.knots)
        sl = np.diff(self.values) / h
        self._h, self._sl = h, sl
        self._AB = np.array([_end_moments(h[i], sl[i], self.derivs[i], self.derivs[i + 1],
                                          self.tensions[i]) for i in range(h.size)])

    def _locate(self, t):
        i = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, self.knots.size - 2)
        return i

    def __call__(self, t, nu=0):
        t = np.asarray(t, float)
        out = np.empty_like(t)
        x0, x1 = self.knots[0], self.knots[-1]
        left, right = t < x0, t > x1
        inside = ~(left | right)
        if nu == 0:
            out[left] = self.values[0] + self.derivs[0] * (t[left] - x0)
            out[right] = self.values[-1] + self.derivs[-1] * (t[right] - x1)
        elif nu == 1:
            out[left] = self.derivs[0]
            out[right] = self.derivs[-1]
        else:
            out[left | right] = 0.0
        ti = t[inside]
        idx = self._locate(ti)
        res = np.empty_like(ti)
        for i in np.unique(idx):
            m = idx == i
            h, s = self._h[i], self.tensions[i]
            A, B = self._AB[i]
            u = (ti[m] - self.knots[i]) / h
            if nu == 0:
                res[m] = (self.values[i] * (1 - u) + self.values[i + 1] * u
                          + h * h * (A * psi(1 - u, s) + B * psi(u, s)))
            elif nu == 1:
                res[m] = self._sl[i] + h * (-A * dpsi(1 - u, s) + B * dpsi(u, s))
            else:
                res[m] = A * _sinh_ratio(1 - u, s) + B * _sinh_ratio(u, s)
        out[inside] = res
        return out


@register_model
class SpltModel(SurrogateModel):
    technique = "splt"

    def __init__(self, input_map, spline, line=(0.0, 0.0), blend=0.0, options=None, meta=None):
        super().__init__(input_map, 1, options, meta)
        self.spline = spline
        self.line = tuple(float(v) for v in line)
        self.blend = float(blend)

    def _predict(self, z):
        t = z[:, 0]
        f = self.spline(t)
        if self.blend:
            f = (1 - self.blend) * f + self.blend * (self.line[0] + self.line[1] * t)
        return f[:, None]

    def _gradient(self, z):
        g = self.spline(z[:, 0], nu=1)
        if self.blend:
            g = (1 - self.blend) * g + self.blend * self.line[1]
        return g[:, None, None]

    def _smoothed(self, s):
        return self._clone_with(blend=s)

    def get_params(self):
        sp = self.spline
        return {"knots": sp.knots, "values": sp.values, "derivs": sp.derivs,
                "tensions": sp.tensions, "line": list(self.line), "blend": self.blend}

    @classmethod
    def from_params(cls, p, input_map, d_out, options, meta):
        sp = TensionSpline(p["knots"], p["values"], p["derivs"], p["tensions"])
        return cls(input_map, sp, p.get("line", (0.0, 0.0)), p.get("blend", 0.0), options, meta)


def fit_splt(sample, options: ModelOptions | None = None):
    options = options or ModelOptions(technique="splt")
    if sample.d_in != 1:
        raise ConfigurationError("SPLT is a one-dimensional technique")
    if sample.d_out != 1:
        raise ConfigurationError("fit_splt expects a single output")
    imap = InputMap.fit(sample.inputs)
    t = imap.transform(sample.inputs)[:, 0]
    y = sample.outputs[:, 0]
    knots, inv = np.unique(t, return_inverse=True)
    values = np.bincount(inv.ravel(), weights=y) / np.bincount(inv.ravel())
    warnings = []
    if knots.size < len(t):
        warnings.append("duplicate inputs averaged before knot construction")
    if knots.size < 2:
        from .linear import constant_model

        model = constant_model(sample, options)
        model.meta["warnings"].append("SPLT needs two distinct knots")
        return model
    cap = float(options.params.get("tension_cap", TENSION_CAP))
    d, tension, ok = adaptive_tension(knots, values, cap=cap)
    if not ok:
        warnings.append("shape preservation not reached at the tension cap")
    line = np.polyfit(knots, values, 1)[::-1] if knots.size > 1 else (values[0], 0.0)
    meta = {"n_train": sample.n, "warnings": warnings,
            "input_names": sample.input_names, "output_names": sample.output_names}
    return SpltModel(imap, TensionSpline(knots, values, d, tension), line, 0.0, options, meta)


# ---------------------------------------------------------------- B-spline basis

class BsplBasis:
    """B-spline basis of a given degree over an arbitrary non-decreasing knot vector."""

    def __init__(self, knots, degree=3):
        self.knots = np.asarray(knots, float)
        self.degree = int(degree)
        self.n = self.knots.size - self.degree - 1
        if self.n < 1:
            raise ConfigurationError("knot vector too short for the requested degree")
        self.lo = self.knots[self.degree]
        self.hi = self.knots[self.n]

    @classmethod
    def clamped(cls, breakpoints, degree=3):
        b = np.asarray(breakpoints, float)
        return cls(np.r_[[b[0]] * degree, b, [b[-1]] * degree], degree)

    @classmethod
    def interpolating(cls, nodes, degree=3):
        """Not-a-knot basis whose size equals the number of nodes."""
        nodes = np.asarray(nodes, float)
        if nodes.size < 2:
            raise DataError("a B-spline factor needs at least two nodes")
        if degree != 3:
            raise ConfigurationError("only cubic interpolating bases are supported")
        # fewer than 4 nodes: a single Bezier piece of degree n-1
        p = min(3, nodes.size - 1)
        inner = nodes[2:-2] if p == 3 else nodes[:0]
        knots = np.r_[[nodes[0]] * (p + 1), inner, [nodes[-1]] * (p + 1)]
        return cls(knots, p)

    def _span(self, t):
        p = self.degree
        return np.clip(np.searchsorted(self.knots, t, side="right") - 1, p, self.n - 1)

    def _local(self, t, span, p):
        U = self.knots
        m = t.size
        N = np.zeros((m, p + 1))
        N[:, 0] = 1.0
        left = np.zeros((m, p + 1))
        right = np.zeros((m, p + 1))
        for j in range(1, p + 1):
            left[:, j] = t - U[span + 1 - j]
            right[:, j] = U[span + j] - t
            saved = np.zeros(m)
            for r in range(j):
                den = right[:, r + 1] + left[:, j - r]
                with np.errstate(divide="ignore", invalid="ignore"):
                    temp = np.where(den != 0, N[:, r] / den, 0.0)
                N[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            N[:, j] = saved
        return N

    def evaluate(self, t, derivative=False):
        """Dense basis matrix (len(t) x n); also returns the out-of-range flags.

        With ``derivative=True`` returns the matrix of first derivatives instead.
        Points outside [lo, hi] are clamped to the boundary.
        """
        t = np.atleast_1d(np.asarray(t, float))
        outside = (t < self.lo) | (t > self.hi)
        tc = np.clip(t, self.lo, self.hi)
        span = self._span(tc)
        p = self.degree
        out = np.zeros((t.size, self.n))
        rows = np.arange(t.size)
        if not derivative:
            vals = self._local(tc, span, p)
            for r in range(p + 1):
                out[rows, span - p + r] = vals[:, r]
            return out, outside
        if p == 0:
            return out, outside
        lower = self._local(tc, span, p - 1)  # degree p-1 functions span-p+1 .. span
        U = self.knots
        for r in range(p + 1):
            i = span - p + r
            term = np.zeros(t.size)
            if r >= 1:
                den = U[i + p] - U[i]
                term += np.where(den > 0, p * lower[:, r - 1] / np.where(den > 0, den, 1), 0.0)
            if r <= p - 1:
                den = U[i + p + 1] - U[i + 1]
                term -= np.where(den > 0, p * lower[:, r] / np.where(den > 0, den, 1), 0.0)
            out[rows, i] = term
        out[outside] = 0.0
        return out, outside


def eval_bspl_basis(basis: BsplBasis, t):
    """Basis values at a single point plus an extrapolation flag."""
    vals, outside = basis.evaluate([t])
    return vals[0], bool(outside[0])
