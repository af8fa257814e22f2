"""Equilibrium measure of a confining potential.

Convention: I_V(mu) = 1/2 int int -log|x-y| dmu dmu + int V dmu, and the
minimizer satisfies h^mu + V = c_V on its support, h^mu(x) = int -log|x-y| dmu.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as cheb
from numpy.polynomial import polynomial as poly
from scipy import optimize
from scipy.fft import dct
from scipy.linalg import matmul_toeplitz, solve_toeplitz

from .errors import MultiCutDetected, NoConvergence, NonConfining, NotAProbability
from .measure import CellPiece, ChebPiece, Measure, cell_kernel

EL_TOL = 1e-3
MASS_TOL = 1e-8


def _fd(f, x, k):
    x = np.asarray(x, dtype=float)
    h = 1e-3 * (1 + np.abs(x)) ** 0.5 * 10 ** (-1.0 / k)
    if k == 1:
        return (f(x + h) - f(x - h)) / (2 * h)
    if k == 2:
        return (f(x + h) - 2 * f(x) + f(x - h)) / h**2
    return (f(x + 2 * h) - 2 * f(x + h) + 2 * f(x - h) - f(x - 2 * h)) / (2 * h**3)


@dataclass(frozen=True)
class Potential:
    """Confinement V with derivatives; missing derivatives use finite differences."""

    v: Callable
    v1: Optional[Callable] = None
    v2: Optional[Callable] = None
    v3: Optional[Callable] = None
    label: str = "custom"
    coeffs: Optional[tuple] = None

    @classmethod
    def polynomial(cls, coeffs, label=None):
        """V(x) = sum coeffs[k] x^k."""
        c = tuple(float(a) for a in coeffs)
        p = poly.Polynomial(c)
        d1, d2, d3 = p.deriv(1), p.deriv(2), p.deriv(3)
        if label is None:
            label = "poly(" + ",".join(f"{a:g}" for a in c) + ")"
        return cls(v=p, v1=d1, v2=d2, v3=d3, label=label, coeffs=c)

    @classmethod
    def quadratic(cls):
        return cls.polynomial([0.0, 0.0, 1.0], label="quadratic")

    def __call__(self, x):
        return np.asarray(self.v(np.asarray(x, dtype=float)), dtype=float)

    def d(self, x, k=1):
        f = {1: self.v1, 2: self.v2, 3: self.v3}[k]
        x = np.asarray(x, dtype=float)
        if f is not None:
            return np.asarray(f(x), dtype=float) + 0 * x
        return _fd(self.v, x, k)

    def check_growth(self):
        r = np.array([10.0, 100.0, 1000.0])
        for sign in (1.0, -1.0):
            x = sign * r
            g = self(x) - np.log(r)
            if not (np.all(np.isfinite(g)) and np.all(np.diff(g) > 0)):
                raise NonConfining(f"V(x) - log|x| is not increasing along {sign:+.0f}x for {self.label}")

    def to_dict(self):
        if self.coeffs is None:
            return {"label": self.label}
        return {"label": self.label, "coeffs": list(self.coeffs)}


def _cheb_points(n):
    return np.cos(np.pi * (np.arange(n) + 0.5) / n)


def _cheb_fit(values):
    """Coefficients of the interpolant through values at first-kind nodes."""
    n = len(values)
    c = dct(values, type=2) / n
    c[0] /= 2
    return c


def _trim(c, tol=1e-15):
    big = np.nonzero(np.abs(c) > tol * np.max(np.abs(c)))[0]
    return c[: big[-1] + 1] if len(big) else c[:1]


@dataclass(frozen=True)
class EquilibriumMeasure:
    measure: Measure
    s_coef: tuple          # Chebyshev coefficients of S per interval (in u)
    c_v: float
    bulk_margin: float
    potential: Potential
    method: str = "analytic-one-cut"
    el_residual: float = float("nan")
    grid_residual: float = float("nan")
    grid: Optional[dict] = field(default=None, compare=False)

    @property
    def support(self):
        return self.measure.support

    @property
    def endpoints(self):
        return self.support[0][0], self.support[-1][1]

    def density(self, x):
        return self.measure.density(x)

    def sigma(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.ones_like(x)
        for a, b in self.support:
            out *= np.sqrt(np.abs(x - a) * np.abs(x - b))
        return out

    def s_factor(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        for (a, b), c in zip(self.support, self.s_coef):
            m, r = 0.5 * (a + b), 0.5 * (b - a)
            sel = (x >= a) & (x <= b)
            out[sel] = cheb.chebval((x[sel] - m) / r, c)
        return out

    def log_potential(self, x):
        return self.measure.log_potential(x)

    def effective_potential(self, x):
        return self.measure.log_potential(x) + self.potential(x) - self.c_v

    def bulk(self):
        return [(a + self.bulk_margin, b - self.bulk_margin) for a, b in self.support]

    def working_box(self, factor=1.5):
        a, b = self.endpoints
        m, r = 0.5 * (a + b), 0.5 * (b - a)
        return m - factor * r, m + factor * r

    def integrate(self, f, **kw):
        return self.measure.integrate(f, **kw)

    def to_dict(self):
        return {
            "support": self.support,
            "measure": self.measure.to_dict(),
            "s_coef": [list(map(float, c)) for c in self.s_coef],
            "c_V": self.c_v,
            "bulk_margin": self.bulk_margin,
            "label": self.potential.label,
            "potential": self.potential.to_dict(),
            "method": self.method,
            "grid": self.grid,
            "tolerances": {"el": EL_TOL, "mass": MASS_TOL},
            "residual": self.el_residual,
            "grid_residual": self.grid_residual,
        }

    @classmethod
    def from_dict(cls, d, potential):
        return cls(
            measure=Measure.from_dict(d["measure"]),
            s_coef=tuple(np.asarray(c) for c in d["s_coef"]),
            c_v=d["c_V"], bulk_margin=d["bulk_margin"], potential=potential,
            method=d["method"], el_residual=d["residual"],
            grid_residual=d.get("grid_residual", float("nan")), grid=d.get("grid"),
        )


def _one_cut_conditions(potential, m, r, M=256):
    u = _cheb_points(M)
    y = m + r * u
    dv = potential.d(y, 1)
    e1 = np.mean(dv)
    e2 = np.mean(r * u * dv) - 1.0
    return np.array([e1, e2])


def _s_values(potential, a, b, x, M=256):
    """S(x) = (1/pi^2) int (V'(x)-V'(y)) / ((x-y) sigma(y)) dy, Gauss-Chebyshev."""
    m, r = 0.5 * (a + b), 0.5 * (b - a)
    y = m + r * _cheb_points(M)
    dx = x[:, None] - y[None, :]
    close = np.abs(dx) < 1e-12 * max(1.0, r)
    num = potential.d(x, 1)[:, None] - potential.d(y, 1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(close, 0.0, num / np.where(close, 1.0, dx))
    if close.any():
        ii, jj = np.nonzero(close)
        q[ii, jj] = potential.d(y[jj], 2)
    return (np.pi / M) * q.sum(axis=1) / np.pi**2


def _cheb_measure_from_s(a, b, s_coef):
    r = 0.5 * (b - a)
    F = r * r * cheb.chebmul(s_coef, [0.5, 0.0, -0.5])
    return ChebPiece(float(a), float(b), F)


def _finish(potential, piece, s_coef, method, grid=None, grid_residual=float("nan"),
            check=True):
    mass = piece.mass
    if abs(mass - 1.0) > MASS_TOL:
        if check:
            raise NoConvergence(f"equilibrium mass {mass:.12f} differs from 1")
    measure = Measure((piece,))
    a, b = piece.a, piece.b
    d = 0.25 * (b - a)
    xb = np.linspace(a + d, b - d, 11)
    c_v = float(np.mean(measure.log_potential(xb) + potential(xb)))
    eq = EquilibriumMeasure(measure, (np.asarray(s_coef),), c_v, d, potential, method,
                            grid=grid, grid_residual=grid_residual)
    xs = np.linspace(a + d, b - d, 401)
    res = float(np.max(np.abs(eq.effective_potential(xs))))
    lo, hi = eq.working_box()
    xo = np.concatenate([np.linspace(lo, a, 100, endpoint=False), np.linspace(b, hi, 101)[1:]])
    blo, bhi = _sublevel_box(potential)
    xo = np.concatenate([xo, np.linspace(min(blo, lo), max(bhi, hi), 2001)])
    xo = xo[(xo < a) | (xo > b)]
    off = float(np.min(eq.effective_potential(xo)))
    eq = EquilibriumMeasure(measure, (np.asarray(s_coef),), c_v, d, potential, method,
                            el_residual=res, grid=grid, grid_residual=grid_residual)
    if check and off < -EL_TOL and method == "analytic-one-cut":
        raise MultiCutDetected(f"effective potential {off:.2e} < 0 off the one-cut support")
    if check and (res > EL_TOL or off < -EL_TOL):
        raise NoConvergence(f"Euler-Lagrange residual {res:.2e}, min off-support {off:.2e}")
    return eq


def _initial_interval(potential):
    box = 1.0
    for _ in range(40):
        xs = np.linspace(-box, box, 2001)
        vals = potential(xs)
        i = int(np.argmin(vals))
        if 0 < i < len(xs) - 1:
            break
        box *= 2
    x0 = xs[i]
    k = float(potential.d(np.array([x0]), 2)[0])
    r = np.sqrt(2.0 / k) if k > 1e-8 else 1.0
    return x0, r


def solve_analytic(potential, n_nodes=256):
    x0, r0 = _initial_interval(potential)
    sol = optimize.root(lambda p: _one_cut_conditions(potential, p[0], np.exp(p[1]), n_nodes),
                        [x0, np.log(r0)], method="hybr", tol=1e-14)
    if np.max(np.abs(sol.fun)) > 1e-10:
        coarse = solve_discretized(potential, 512, check=False)
        a, b = coarse.endpoints
        sol = optimize.root(lambda p: _one_cut_conditions(potential, p[0], np.exp(p[1]), n_nodes),
                            [0.5 * (a + b), np.log(0.5 * (b - a))], method="hybr", tol=1e-14)
        if np.max(np.abs(sol.fun)) > 1e-10:
            raise NoConvergence("one-cut endpoint equations did not converge")
    m, r = sol.x[0], np.exp(sol.x[1])
    a, b = m - r, m + r
    s_vals = _s_values(potential, a, b, m + r * _cheb_points(n_nodes), n_nodes)
    s_coef = _trim(_cheb_fit(s_vals), 1e-14)
    probe = np.cos(np.linspace(0, np.pi, 2001)[1:-1])
    if np.min(cheb.chebval(probe, s_coef)) <= 0:
        raise MultiCutDetected("S vanishes inside the candidate support; supply measure data")
    return _finish(potential, _cheb_measure_from_s(a, b, s_coef), s_coef, "analytic-one-cut")


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _kkt_polish(col, vbar, lo, hi, max_iter=200):
    """Exact minimizer of 1/2 m'Am + vbar'm on the simplex with contiguous support."""
    n = len(vbar)
    for _ in range(max_iter):
        c = col[: hi - lo]
        y1 = solve_toeplitz(c, np.ones(hi - lo))
        y2 = solve_toeplitz(c, vbar[lo:hi])
        lam = (1.0 + y2.sum()) / y1.sum()
        m = np.zeros(n)
        m[lo:hi] = lam * y1 - y2
        grad = matmul_toeplitz(col, m) + vbar
        neg = np.nonzero(m[lo:hi] < 0)[0]
        new_lo, new_hi = lo, hi
        if len(neg):
            mid = (hi - lo) // 2
            left = neg[neg < mid]
            right = neg[neg >= mid]
            if len(left):
                new_lo = lo + left[-1] + 1
            if len(right):
                new_hi = lo + right[0]
        else:
            while new_lo > 0 and grad[new_lo - 1] < lam:
                new_lo -= 1
            while new_hi < n and grad[new_hi] < lam:
                new_hi += 1
        if (new_lo, new_hi) == (lo, hi):
            return m, lam
        lo, hi = new_lo, new_hi
    raise NoConvergence("active-set iteration for the discretized energy did not settle")


def _discrete_pass(potential, lo_x, hi_x, n, pg_iter=300):
    h = (hi_x - lo_x) / n
    edges = lo_x + h * np.arange(n + 1)
    # cell averages of V by 3-point Gauss
    g = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
    wg = np.array([5.0, 8.0, 5.0]) / 18.0
    mids = 0.5 * (edges[:-1] + edges[1:])
    vbar = (potential(mids[:, None] + 0.5 * h * g[None, :]) * wg[None, :]).sum(axis=1)
    # kernel per unit mass; a constant shift does not change the constrained minimizer
    col = cell_kernel(np.arange(n), h) / h**2 + np.log(hi_x - lo_x) + 2.0
    # accelerated projected gradient warm start
    lip = col[0] + 2 * np.sum(np.abs(col[1:]))
    m = _project_simplex(-vbar / lip + 1.0 / n)
    y, tk = m.copy(), 1.0
    for _ in range(pg_iter):
        grad = matmul_toeplitz(col, y) + vbar
        m_new = _project_simplex(y - grad / lip)
        tk_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        y = m_new + (tk - 1) / tk_new * (m_new - m)
        m, tk = m_new, tk_new
    pos = np.nonzero(m > 1e-6 * m.max())[0]
    m, lam = _kkt_polish(col, vbar, int(pos[0]), int(pos[-1]) + 1)
    return edges, m / h, lam


def _edge_fit(x, rho, side):
    """Endpoint from a square-root fit rho^2 ~ alpha |x - e| on cells near the edge."""
    k = 12
    xs, r2 = (x[1:k + 1], rho[1:k + 1] ** 2) if side == "left" else (x[-k - 1:-1], rho[-k - 1:-1] ** 2)
    slope, icpt = np.polyfit(xs, r2, 1)
    return -icpt / slope


def _sublevel_box(potential, level=20.0):
    """Interval {V - min V <= level} around the global minimizer."""
    vmin_x, _ = _initial_interval(potential)
    vmin = float(potential(np.array([vmin_x]))[0])
    f = lambda x: float(potential(np.array([x]))[0]) - vmin - level
    ends = []
    for sign in (-1.0, 1.0):
        span = 1.0
        while f(vmin_x + sign * span) < 0:
            span *= 1.5
        ends.append(optimize.brentq(f, *sorted((vmin_x, vmin_x + sign * span))))
    return ends[0], ends[1]


def solve_discretized(potential, grid_size=4096, check=True, s_degree=12):
    potential.check_growth()
    lo_x, hi_x = _sublevel_box(potential)
    edges, rho, _ = _discrete_pass(potential, lo_x, hi_x, grid_size)
    sup = np.nonzero(rho > 1e-6 * rho.max())[0]
    a0, b0 = edges[sup[0]], edges[sup[-1] + 1]
    c, r = 0.5 * (a0 + b0), 0.5 * (b0 - a0)
    # second pass on the support dilated by 1.5
    edges, rho, lam = _discrete_pass(potential, c - 1.5 * r, c + 1.5 * r, grid_size)
    h = edges[1] - edges[0]
    mids = 0.5 * (edges[:-1] + edges[1:])
    sup = np.nonzero(rho > 1e-6 * rho.max())[0]
    xs, rs = mids[sup], rho[sup]
    a = _edge_fit(xs, rs, "left")
    b = _edge_fit(xs, rs, "right")
    m_, r_ = 0.5 * (a + b), 0.5 * (b - a)
    # residual of the raw discrete solution on the bulk (cell centres)
    cells = Measure((CellPiece(edges[0], h, rho),))
    d = 0.25 * (b - a)
    bulk = (mids > a + d) & (mids < b - d)
    raw = cells.log_potential(mids[bulk]) + potential(mids[bulk])
    grid_res = float(np.max(np.abs(raw - np.mean(raw))))
    # smooth factor S = rho / sigma fitted away from the edges
    inner = (mids > a + 0.05 * (b - a)) & (mids < b - 0.05 * (b - a)) & (rho > 0)
    u = (mids[inner] - m_) / r_
    s_obs = rho[inner] / (r_ * np.sqrt(1 - u * u))
    s_coef = cheb.chebfit(u, s_obs, s_degree)
    piece = _cheb_measure_from_s(a, b, s_coef)
    scale = 1.0 / piece.mass
    s_coef = s_coef * scale
    piece = _cheb_measure_from_s(a, b, s_coef)
    grid = {"x0": float(edges[0]), "h": float(h), "density": rho.tolist()}
    return _finish(potential, piece, s_coef, "discretized-minimization", grid=grid,
                   grid_residual=grid_res, check=check)


def solve_equilibrium(potential, grid_size=4096, method="analytic-one-cut", cache=None):
    """Equilibrium measure of ``potential``; optional ``cache`` is a JsonCache."""
    if grid_size < 256:
        raise ValueError("grid_size must be at least 256")
    potential.check_growth()
    key = (potential.label, int(grid_size), method)
    if cache is not None:
        hit = cache.get("equilibrium", key)
        if hit is not None:
            return EquilibriumMeasure.from_dict(hit, potential)
    if method == "analytic-one-cut":
        eq = solve_analytic(potential, n_nodes=max(256, min(grid_size, 1024)))
    elif method == "discretized-minimization":
        eq = solve_discretized(potential, grid_size)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cache is not None:
        cache.put("equilibrium", key, eq.to_dict())
    return eq


def from_measure_data(potential, intervals, s_funcs, n_cheb=64):
    """Equilibrium data supplied by the caller (multi-cut allowed), then validated."""
    intervals = sorted((float(a), float(b)) for a, b in intervals)
    pieces, coefs = [], []
    for (a, b), s in zip(intervals, s_funcs):
        m, r = 0.5 * (a + b), 0.5 * (b - a)
        u = _cheb_points(n_cheb)
        x = m + r * u
        sig = np.ones_like(x)
        for a2, b2 in intervals:
            sig *= np.sqrt(np.abs(x - a2) * np.abs(x - b2))
        # F(u) = r rho sqrt(1-u^2)
        F = r * np.asarray(s(x), dtype=float) * sig * np.sqrt(1 - u * u)
        pieces.append(ChebPiece(a, b, _trim(_cheb_fit(F), 1e-15)))
        coefs.append(_trim(_cheb_fit(np.asarray(s(x), dtype=float)), 1e-15))
    measure = Measure(tuple(pieces))
    if abs(measure.mass - 1) > 1e-6:
        raise NotAProbability(f"supplied measure has mass {measure.mass:.8f}")
    d = 0.25 * min(b - a for a, b in intervals)
    xb = np.concatenate([np.linspace(a + d, b - d, 11) for a, b in intervals])
    c_v = float(np.mean(measure.log_potential(xb) + potential(xb)))
    eq = EquilibriumMeasure(measure, tuple(coefs), c_v, d, potential, "user-supplied")
    res = float(np.max(np.abs(eq.effective_potential(xb))))
    if res > EL_TOL:
        raise NoConvergence(f"supplied measure violates Euler-Lagrange: residual {res:.2e}")
    return EquilibriumMeasure(measure, tuple(coefs), c_v, d, potential, "user-supplied",
                              el_residual=res)


def energy_functional(density, potential, mass_tol=1e-6):
    """I_V for a piecewise-constant density given as (x0, h, values) or a CellPiece."""
    piece = density if isinstance(density, CellPiece) else CellPiece(*density)
    rho = np.asarray(piece.rho, dtype=float)
    if np.any(rho < 0):
        raise NotAProbability("density has negative cells")
    if abs(piece.mass - 1.0) > mass_tol:
        raise NotAProbability(f"density has mass {piece.mass:.8f}")
    x, w = piece.nodes(8 * len(rho))
    return 0.5 * piece.self_energy() + float(np.dot(w, potential(x)))


def energy(eq):
    """I_V(mu_V) for a solved equilibrium measure."""
    return 0.5 * eq.measure.self_energy() + eq.integrate(eq.potential)


def blow_up(eq_or_measure, n):
    """mu'(x) = mu_V(x/n): support scaled by n, mass n."""
    if n < 1:
        raise ValueError("blow-up factor must be >= 1")
    measure = eq_or_measure.measure if isinstance(eq_or_measure, EquilibriumMeasure) else eq_or_measure
    return measure.scaled(float(n))
