"""Inverting the master operator and the induced transport.

For a one-cut equilibrium measure on [a, b] = [m - r, m + r] with density
S(x) sigma(x), write x = m + r v and xi = sum c_n T_n(v) on the support. The
finite Hilbert transform of T_n against the Chebyshev weight is pi U_{n-1}, so

    psi(x) = -(1 / (pi r S(x))) sum_{n>=1} c_n U_{n-1}(v)        (|v| <= 1)

solves Xi_V[psi] = xi + c_xi with c_xi = -c_0. Off the support the same
equation is solved pointwise,

    psi(x) = (xi(x) + c_xi - sum_{n>=1} c_n w^{-n}) / (-zeta_V'(x)),

where w = v + sqrt(v^2 - 1), |w| > 1. Both branches meet smoothly at the edges.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy.fft import dct

from .errors import InsufficientRange, ResidualTooLarge, TooLargeT, UnsupportedMeasure

RESIDUAL_TOL = 1e-4
EDGE_DELTA = 1e-3


def _nodes(n):
    return np.cos(np.pi * (np.arange(n) + 0.5) / n)


def _fit(values):
    n = len(values)
    c = dct(values, type=2) / n
    c[0] /= 2
    return c


def _values_at_nodes(coef, n):
    """Chebyshev series evaluated at the n first-kind nodes (n >= len(coef))."""
    x = np.zeros(n)
    x[: len(coef)] = coef
    x[1:] *= 0.5
    return dct(x, type=3)


def _trim(c, rel=1e-15):
    scale = max(np.max(np.abs(c)), 1e-300)
    big = np.nonzero(np.abs(c) > rel * scale)[0]
    return c[: big[-1] + 1].copy() if len(big) else c[:1].copy()


def adaptive_chebyshev(f, lo, hi, n0=64, n_max=1 << 16, tol=1e-14):
    """Chebyshev coefficients of f on [lo, hi], doubling until the tail is negligible."""
    m, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    n = n0
    while True:
        c = _fit(np.asarray(f(m + r * _nodes(n)), dtype=float))
        scale = max(np.max(np.abs(c)), 1e-300)
        tail = np.max(np.abs(c[-max(4, n // 8):]))
        if tail <= tol * scale or n >= n_max:
            return c, tail / scale
        n *= 2


def _descriptor(xi):
    d = getattr(xi, "descriptor", None)
    if d is None:
        d = getattr(xi, "__name__", repr(xi))
    return d


@dataclass
class TransportMap:
    a: float
    b: float
    xi_coef: np.ndarray
    psi_coef: np.ndarray
    left: tuple        # (lo, a, coef) interpolant of psi on [lo, a]
    right: tuple       # (b, hi, coef)
    c_xi: float
    residual: float = float("nan")
    residual_std: float = float("nan")
    continuity_gap: tuple = (float("nan"), float("nan"))
    descriptor: object = None
    xi: Optional[Callable] = field(default=None, repr=False, compare=False)
    eq: object = field(default=None, repr=False, compare=False)

    @property
    def m(self):
        return 0.5 * (self.a + self.b)

    @property
    def r(self):
        return 0.5 * (self.b - self.a)

    @property
    def box(self):
        return self.left[0], self.right[1]

    def d(self, x, k=0):
        """k-th derivative of psi (k <= 4 is the supported range)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        ins = (x >= self.a) & (x <= self.b)
        if ins.any():
            c = cheb.chebder(self.psi_coef, k) / self.r**k if k else self.psi_coef
            out[ins] = cheb.chebval((x[ins] - self.m) / self.r, c)
        for lo, hi, coef in (self.left, self.right):
            sel = (x >= lo) & (x <= hi) & ~ins
            if sel.any():
                mm, rr = 0.5 * (lo + hi), 0.5 * (hi - lo)
                c = cheb.chebder(coef, k) / rr**k if k else coef
                out[sel] = cheb.chebval((x[sel] - mm) / rr, c)
        far = (x < self.left[0]) | (x > self.right[1])
        if far.any():
            if self.xi is None or self.eq is None:
                raise ValueError("evaluation outside the working box needs the source test function")
            xf = x[far]
            if k == 0:
                out[far] = _outside_direct(self, xf)
            else:
                h = 1e-3 * (1 + np.abs(xf))
                st = np.arange(-k, k + 1, 2)
                w = np.array([_fd_weight(k, j) for j in st])
                vals = np.array([_outside_direct(self, xf + 0.5 * j * h) for j in st])
                out[far] = (w @ vals) / h**k
        return out

    def __call__(self, x):
        return self.d(x, 0)

    def sup_derivative(self, k=1, n=2001):
        lo, hi = self.box
        return float(np.max(np.abs(self.d(np.linspace(lo, hi, n), k))))

    def to_dict(self):
        return {
            "support": [self.a, self.b],
            "xi_coef": self.xi_coef.tolist(),
            "psi_coef": self.psi_coef.tolist(),
            "left": [self.left[0], self.left[1], list(self.left[2])],
            "right": [self.right[0], self.right[1], list(self.right[2])],
            "c_xi": self.c_xi,
            "residual": self.residual,
            "residual_std": self.residual_std,
            "continuity_gap": list(self.continuity_gap),
            "descriptor": self.descriptor,
        }

    @classmethod
    def from_dict(cls, d, xi=None, eq=None):
        return cls(d["support"][0], d["support"][1], np.asarray(d["xi_coef"]),
                   np.asarray(d["psi_coef"]),
                   (d["left"][0], d["left"][1], np.asarray(d["left"][2])),
                   (d["right"][0], d["right"][1], np.asarray(d["right"][2])),
                   d["c_xi"], d["residual"], d["residual_std"], tuple(d["continuity_gap"]),
                   d["descriptor"], xi, eq)


def _fd_weight(k, j):
    # central differences on the half-integer stencil j/2 * h, j in -k..k step 2
    from math import comb
    i = (j + k) // 2
    return (-1) ** (k - i) * comb(k, i)


def _minus_zeta_prime(eq, x):
    g = eq.measure.cauchy(np.asarray(x, dtype=float) + 0j).real
    return g - eq.potential.d(x, 1)


def _outside_raw(xi, eq, a, b, xi_coef, c_xi, x):
    m, r = 0.5 * (a + b), 0.5 * (b - a)
    v = (x - m) / r
    w = v + np.sign(v) * np.sqrt(v * v - 1)
    c = np.asarray(xi_coef, dtype=float).copy()
    c[0] = 0.0
    s = np.polynomial.polynomial.polyval(1.0 / w, c)
    return (np.asarray(xi(x), dtype=float) + c_xi - s) / _minus_zeta_prime(eq, x)


def _outside_direct(tm, x):
    """Off-support branch with the near-edge values replaced by interpolation."""
    return _outside_eval(tm.xi, tm.eq, tm.a, tm.b, tm.xi_coef, tm.psi_coef, tm.c_xi, x)


def _outside_eval(xi, eq, a, b, xi_coef, psi_coef, c_xi, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = _outside_raw(xi, eq, a, b, xi_coef, c_xi, np.where((x > a) & (x < b), b + 1.0, x))
    for edge, side in ((a, -1.0), (b, 1.0)):
        near = (side * (x - edge) >= 0) & (np.abs(x - edge) < EDGE_DELTA)
        if not near.any():
            continue
        # cubic through the inside limit at the edge and three outside points
        xs = edge + side * EDGE_DELTA * np.array([1.0, 2.0, 3.0])
        ys = _outside_raw(xi, eq, a, b, xi_coef, c_xi, xs)
        y0 = cheb.chebval(side, psi_coef)
        px = np.concatenate([[edge], xs])
        py = np.concatenate([[y0], ys])
        coef = np.polyfit(px - edge, py, 3)
        out[near] = np.polyval(coef, x[near] - edge)
    return out


def master_operator(psi, eq, potential, x, M=None):
    """Xi_V[psi](x) = -psi(x) V'(x) + int (psi(x) - psi(y)) / (x - y) dmu_V(y)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if M is None:
        deg = len(getattr(psi, "psi_coef", np.zeros(256)))
        M = max(512, 2 * deg + 64)
    y, w = eq.measure.nodes(M)
    py = _psi_at_nodes(psi, eq, y, M)
    px = np.asarray(psi(x), dtype=float)
    dpx = np.asarray(_derivative(psi, x), dtype=float)
    out = np.empty_like(x)
    for i0 in range(0, len(x), 256):
        xs = x[i0:i0 + 256]
        dx = xs[:, None] - y[None, :]
        close = np.abs(dx) < 1e-9 * (1 + np.abs(xs[:, None]))
        with np.errstate(divide="ignore", invalid="ignore"):
            q = (px[i0:i0 + 256, None] - py[None, :]) / np.where(close, 1.0, dx)
        q = np.where(close, dpx[i0:i0 + 256, None], q)
        out[i0:i0 + 256] = q @ w
    return -px * potential.d(x, 1) + out


def _psi_at_nodes(psi, eq, y, M):
    # the quadrature nodes of a one-cut measure are the first-kind Chebyshev
    # nodes of the support, where a DCT evaluates the series in O(M log M)
    coef = getattr(psi, "psi_coef", None)
    if coef is not None and len(eq.support) == 1 and tuple(eq.support[0]) == (psi.a, psi.b) \
            and M >= len(coef) and len(y) == M:
        return _values_at_nodes(coef, M)
    return np.asarray(psi(y), dtype=float)


def _derivative(psi, x):
    if hasattr(psi, "d"):
        return psi.d(x, 1)
    h = 1e-6 * (1 + np.abs(x))
    return (psi(x + h) - psi(x - h)) / (2 * h)


def solve_transport(xi, eq, potential=None, box_factor=1.5, tol=RESIDUAL_TOL, cache=None,
                    check=True):
    """psi with Xi_V[psi] = xi + c_xi on the working box U."""
    potential = eq.potential if potential is None else potential
    if len(eq.support) != 1:
        raise UnsupportedMeasure("transport is implemented for one-cut equilibrium measures")
    a, b = eq.support[0]
    m, r = 0.5 * (a + b), 0.5 * (b - a)
    s_coef = np.asarray(eq.s_coef[0], dtype=float)
    sv = cheb.chebval(np.linspace(-1, 1, 2001), s_coef)
    if np.min(sv) <= 1e-8:
        raise UnsupportedMeasure("S vanishes on the support (critical equilibrium measure)")
    lo, hi = eq.working_box(box_factor)
    key = (potential.label, json.dumps(_descriptor(xi), sort_keys=True, default=str), box_factor)
    if cache is not None:
        hit = cache.get("transport", key)
        if hit is not None:
            return TransportMap.from_dict(hit, xi, eq)
    xi_coef, _ = adaptive_chebyshev(xi, a, b, tol=1e-13)
    xi_coef = _trim(xi_coef, 1e-16)
    c_xi = -float(xi_coef[0])
    # inside: psi(v) = -K'(v) / (pi r S(v)), K = sum c_n / n T_n
    n = np.arange(len(xi_coef))
    K = np.zeros(len(xi_coef))
    K[1:] = xi_coef[1:] / n[1:]
    Kp = cheb.chebder(K) if len(K) > 1 else np.zeros(1)
    npts = 1 << int(np.ceil(np.log2(len(Kp) + len(s_coef) + 64)))
    vals = -_values_at_nodes(Kp, npts) / (np.pi * r * _values_at_nodes(s_coef, npts))
    psi_coef = _trim(_fit(vals), 1e-16)
    # outside interpolants on [lo, a] and [b, hi]
    def outside(x):
        return _outside_eval(xi, eq, a, b, xi_coef, psi_coef, c_xi, x)
    left_c, _ = adaptive_chebyshev(outside, lo, a, n0=64, n_max=4096, tol=1e-13)
    right_c, _ = adaptive_chebyshev(outside, b, hi, n0=64, n_max=4096, tol=1e-13)
    tm = TransportMap(a, b, xi_coef, psi_coef, (lo, a, _trim(left_c)), (b, hi, _trim(right_c)),
                      c_xi, descriptor=_descriptor(xi), xi=xi, eq=eq)
    # continuity at the edges: inside limit vs outside formula one step out
    gaps = []
    for edge, side in ((a, -1.0), (b, 1.0)):
        xin = cheb.chebval(side, psi_coef)
        xo = _outside_raw(xi, eq, a, b, xi_coef, c_xi, np.array([edge + side * EDGE_DELTA]))[0]
        slope = float(tm.d(np.array([edge - side * 1e-9]), 1)[0])
        gaps.append(abs(xin + side * EDGE_DELTA * slope - xo))
    tm.continuity_gap = tuple(float(g) for g in gaps)
    # residual on U
    xs_in = m + r * np.cos(np.linspace(0, np.pi, 301))
    xs_out = np.concatenate([np.linspace(lo, a, 60, endpoint=False), np.linspace(hi, b, 60, endpoint=False)])
    xs = np.concatenate([xs_in, xs_out])
    res = master_operator(tm, eq, potential, xs) - np.asarray(xi(xs), dtype=float) - c_xi
    tm.residual = float(np.max(np.abs(res)))
    d = eq.bulk_margin
    bulk = (xs_in > a + d) & (xs_in < b - d)
    tm.residual_std = float(np.std(res[: len(xs_in)][bulk]))
    if check and tm.residual > tol:
        raise ResidualTooLarge(f"master-operator residual {tm.residual:.2e} > {tol:.0e}")
    if cache is not None:
        cache.put("transport", key, tm.to_dict())
    return tm


# ------------------------------------------------------------ flow, tau


def _check_t(tm, t):
    sup = tm.sup_derivative(1)
    if abs(t) * sup >= 0.5:
        raise TooLargeT(f"|t| sup|psi'| = {abs(t) * sup:.3f} >= 1/2")
    return sup


def transport_flow(tm, t, x):
    """phi_t(x) = x + t psi(x)."""
    _check_t(tm, t)
    x = np.asarray(x, dtype=float)
    return x + t * tm(x)


def push_forward_mass_check(tm, t, n_quad=None):
    """|mass of phi_t # mu_V - 1|, integrating the pushed density in the image variable.

    The pushed density rho(x) / phi_t'(x) at y = phi_t(x) is divided by its
    square-root edge factor, spline-interpolated onto a Chebyshev grid in y and
    integrated with the second-kind Gauss-Chebyshev rule.
    """
    from scipy.interpolate import CubicSpline
    _check_t(tm, t)
    if t == 0:
        return 0.0
    a, b, m, r = tm.a, tm.b, tm.m, tm.r
    nx = 1 << int(np.ceil(np.log2(max(8192, 4 * len(tm.psi_coef)))))
    u = _nodes(nx)[::-1]
    x = m + r * u
    psi = _values_at_nodes(tm.psi_coef, nx)[::-1]
    dpsi = _values_at_nodes(cheb.chebder(tm.psi_coef) / r, nx)[::-1] if len(tm.psi_coef) > 1 else 0 * x
    y = x + t * psi
    pa, pb = a + t * cheb.chebval(-1.0, tm.psi_coef), b + t * cheb.chebval(1.0, tm.psi_coef)
    g = tm.eq.density(x) / (1 + t * dpsi) / np.sqrt((y - pa) * (pb - y))
    mm, rr = 0.5 * (pa + pb), 0.5 * (pb - pa)
    if n_quad is None:
        n_quad = max(4096, len(tm.psi_coef) // 2)
    th = np.arange(1, n_quad + 1) * np.pi / (n_quad + 1)
    yq = mm + rr * np.cos(th)
    gq = CubicSpline(y, g)(yq)
    mass = rr * rr * float(np.sum(np.sin(th) ** 2 * gq)) * np.pi / (n_quad + 1)
    return abs(mass - 1.0)


def _log_ratio_integral(tm, t, x, M=None):
    """int -log(1 + t D_psi(x, y)) dmu_V(y), D_psi the divided difference of psi."""
    eq = tm.eq
    if M is None:
        M = max(512, 2 * len(tm.psi_coef) + 64)
    y, w = eq.measure.nodes(M)
    py = _psi_at_nodes(tm, eq, y, M)
    px = tm(x)
    dpx = tm.d(x, 1)
    out = np.empty(len(x))
    for i0 in range(0, len(x), 256):
        xs = x[i0:i0 + 256]
        dx = xs[:, None] - y[None, :]
        close = np.abs(dx) < 1e-9 * (1 + np.abs(xs[:, None]))
        with np.errstate(divide="ignore", invalid="ignore"):
            q = (px[i0:i0 + 256, None] - py[None, :]) / np.where(close, 1.0, dx)
        q = np.where(close, dpx[i0:i0 + 256, None], q)
        out[i0:i0 + 256] = -np.log1p(t * q) @ w
    return out


def energy_difference(tm, eq, potential, xi, t, x, M=None):
    """tau_t(x): change of the effective potential along the flow, centred at first order.

    tau_t(x) = int -log|phi(x)-phi(y)| dmu + V_t(phi(x)) - h(x) - V(x) + t c_xi,
    which is O(t^2) because Xi_V[psi] = xi + c_xi.
    """
    _check_t(tm, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if t == 0:
        return np.zeros_like(x)
    px = x + t * tm(x)
    return (_log_ratio_integral(tm, t, x, M) + potential(px) + t * np.asarray(xi(px), dtype=float)
            - potential(x) + t * tm.c_xi)


# ------------------------------------------------------------ decay


def decay_profile(tm, k, L, z, n=400):
    """Log-log fit of |psi^(k)(x)| against |x - z| outside 2 supp(xi) within U."""
    lo, hi = tm.box
    x = np.linspace(lo, hi, 20 * n + 1)
    dist = np.abs(x - z)
    sup_inside = float(np.max(np.abs(tm.d(x[dist <= L], k)))) * L**k if np.any(dist <= L) else float("nan")
    vals = np.abs(tm.d(x, k))
    if np.max(np.abs(tm(x))) < 1e-12:
        return {"exponent": float("nan"), "trivial": True, "sup_inside_scaled": 0.0}
    sel = (dist >= 2 * L) & (x > tm.a) & (x < tm.b) & (vals > 0)
    # stay away from the edges, where S and sigma vary at order one
    sel &= (x > tm.a + 0.2 * tm.r) & (x < tm.b - 0.2 * tm.r)
    if sel.sum() < 8 or dist[sel].max() / dist[sel].min() < 4:
        raise InsufficientRange("too little room outside 2 supp(xi) to fit a decay exponent")
    # far-field window: beyond 4L, where the bump looks like a point source
    far = sel & (dist >= 4 * L)
    use = far if far.sum() >= 8 and dist[far].max() / dist[far].min() >= 4 else sel
    slope, icpt = np.polyfit(np.log(dist[use]), np.log(vals[use]), 1)
    return {"exponent": float(-slope), "intercept": float(icpt), "trivial": False,
            "sup_inside_scaled": sup_inside, "range": [float(dist[use].min()), float(dist[use].max())],
            "points": int(use.sum())}


def cache_key_hash(key):
    return hashlib.sha256(json.dumps(key, default=str).encode()).hexdigest()[:16]
