"""Next-order energies, truncated fields and local energies.

Points live on the real axis of the plane. With z = x + iy and
G(z) = int dmu(t) / (z - t) the Cauchy transform of the background, the
gradient of u = g * (sum delta_{x_i} - mu), g = -log|.|, is

    E_x + i E_y = conj( G(z) - sum_i 1 / (z - x_i) ),

and truncating charge i at radius eta_i (smearing it on a circle) removes its
term inside the disk. Field energies are integrals of |G - sum 1/(z-x_i)|^2.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numba
import numpy as np
from scipy.special import roots_laguerre, roots_legendre

from .errors import (CoincidentPoints, MassMismatch, SingularEvaluation,
                     TruncationTooLarge, WindowTooThin)


@dataclass
class EnergyBreakdown:
    form: str
    total: float
    pair_sum: float = 0.0
    cross_term: float = 0.0
    background_term: float = 0.0
    field_integral: float = 0.0
    self_energy_sum: float = 0.0
    f_correction: float = 0.0
    count: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# ------------------------------------------------------------- distances


def _sorted(points):
    x = np.sort(np.asarray(points, dtype=float))
    if len(x) > 1 and np.any(np.diff(x) == 0):
        raise CoincidentPoints("coincident points")
    return x


def nearest_gap(x):
    """Distance to the nearest other point (inf for a single point); x sorted."""
    n = len(x)
    d = np.full(n, np.inf)
    if n > 1:
        g = np.diff(x)
        d[:-1] = g
        d[1:] = np.minimum(d[1:], g)
    return d


def minimal_distances(points):
    x = np.asarray(points, dtype=float)
    order = np.argsort(x)
    d = np.empty(len(x))
    d[order] = nearest_gap(x[order])
    return 0.25 * np.minimum(d, 1.0)


def local_minimal_distances(points, window):
    """r~_i: neighbours restricted to the window, 1/4 near its boundary."""
    lo, hi = window
    x = np.asarray(points, dtype=float)
    inside = (x >= lo) & (x <= hi)
    xin = np.sort(x[inside])
    out = np.full(len(x), 0.25)
    for i, xi in enumerate(x):
        if min(abs(xi - lo), abs(xi - hi)) < 0.5:
            continue
        k = np.searchsorted(xin, xi)
        cand = []
        for j in (k - 1, k, k + 1):
            if 0 <= j < len(xin) and xin[j] != xi:
                cand.append(abs(xin[j] - xi))
        out[i] = 0.25 * min(min(cand) if cand else 1.0, 1.0)
    return out


def truncation_function(eta, x):
    """(g(x) - g(eta))_+ with g = -log|.|; +inf at x = 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        val = np.log(eta) - np.log(np.abs(x))
    return np.maximum(val, 0.0)


def discrepancy(points, measure, interval):
    a, b = interval
    x = np.asarray(points, dtype=float)
    if b <= a:
        return 0.0
    count = np.count_nonzero((x >= a) & (x <= b))
    mass = float(measure.cdf(np.array([b]))[0] - measure.cdf(np.array([a]))[0])
    return count - mass


# ------------------------------------------------------------- sum form


def next_order_energy(points, measure, mass_tol=1e-6):
    """F(X, mu) = 1/2 int int_{x != y} g d(sum delta - mu)^2 for mu of mass N."""
    x = _sorted(points)
    n = len(x)
    if abs(measure.mass - n) > mass_tol * max(n, 1):
        raise MassMismatch(f"measure mass {measure.mass:.8f} != number of points {n}")
    pair = 2.0 * float(-np.sum(np.log(np.abs(x[:, None] - x[None, :])[np.triu_indices(n, 1)])))
    cross = -2.0 * float(np.sum(measure.log_potential(x)))
    bg = measure.self_energy()
    return EnergyBreakdown("sum", 0.5 * (pair + cross + bg), pair_sum=pair, cross_term=cross,
                           background_term=bg, count=n)


def next_order_energy_global(points, eq):
    """F_N(X_N, mu_V) = F(X', mu') - N log N / 2, blown-up by N."""
    n = len(points)
    e = next_order_energy(n * np.asarray(points, dtype=float), eq.measure.scaled(float(n)))
    e.meta["F_N"] = e.total - 0.5 * n * np.log(n)
    return e


def splitting_check(points, potential, eq):
    """H_N - [N^2 I_V(mu_V) + N sum zeta_V(x_i) + F_N(X_N, mu_V)]."""
    from .equilibrium import energy
    from .sampler import hamiltonian
    x = np.asarray(points, dtype=float)
    n = len(x)
    h = hamiltonian(x, potential)
    f_n = next_order_energy_global(x, eq).meta["F_N"]
    return h - (n * n * energy(eq) + n * float(np.sum(eq.effective_potential(x))) + f_n)


# ------------------------------------------------------------- fields


@numba.njit(cache=True)
def _charge_sum(zr, zi, xs, eta2, out_r, out_i):
    for k in range(zr.shape[0]):
        sr = 0.0
        si = 0.0
        for j in range(xs.shape[0]):
            dx = zr[k] - xs[j]
            dy = zi[k]
            r2 = dx * dx + dy * dy
            if r2 >= eta2[j]:
                sr += dx / r2
                si -= dy / r2
        out_r[k] = sr
        out_i[k] = si


def field_complex(z, points, eta, measure):
    """G(z) - sum over untruncated charges of 1/(z - x_i)."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    xs = np.asarray(points, dtype=float)
    out_r = np.empty(len(z))
    out_i = np.empty(len(z))
    _charge_sum(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag), xs,
                np.asarray(eta, dtype=float) ** 2, out_r, out_i)
    return measure.cauchy(z) - (out_r + 1j * out_i)


def electric_field(points, measure, point, eta=None):
    """grad u_eta at X = (x, y); eta=None means no truncation."""
    x, y = point
    xs = np.asarray(points, dtype=float)
    eta = np.zeros(len(xs)) if eta is None else np.asarray(eta, dtype=float)
    r = np.hypot(x - xs, y)
    if np.any((r == 0) & (eta == 0)):
        raise SingularEvaluation(f"field evaluated at an untruncated charge ({x}, {y})")
    z = complex(x, y)
    g = measure.cauchy(np.array([z]))[0]
    if y == 0:
        g = complex(g.real, 0.0)  # average of the two sides of the line
    keep = r > eta
    s = np.sum(1.0 / (z - xs[keep])) if keep.any() else 0.0
    f = g - s
    return float(f.real), float(-f.imag)


# ------------------------------------------------------------- quadrature


@lru_cache(maxsize=None)
def _gl(n):
    t, w = roots_legendre(n)
    return t, w


def _panel(a, b, n):
    t, w = _gl(n)
    return 0.5 * (a + b) + 0.5 * (b - a) * t, 0.5 * (b - a) * w


def _tail(a, scale, n, direction):
    """Nodes for int_a^{+-inf} via x = a + dir*scale*tau/(1-tau)."""
    xs, ws = [], []
    for lo, hi in ((0.0, 0.5), (0.5, 0.8), (0.8, 0.95), (0.95, 1.0)):
        tau, w = _panel(lo, hi, n)
        xs.append(a + direction * scale * tau / (1 - tau))
        ws.append(w * scale / (1 - tau) ** 2)
    return np.concatenate(xs), np.concatenate(ws)


def _graded_y(y0, y1, h0, n):
    ys, ws = [], []
    a, h = y0, max(h0, 1e-12)
    while a < y1 - 1e-14:
        b = min(a + h, y1)
        if y1 - b < 0.5 * h:
            b = y1
        y, w = _panel(a, b, n)
        ys.append(y)
        ws.append(w)
        a, h = b, 2 * h
    if not ys:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(ys), np.concatenate(ws)


def _tensor(xn, xw, yn, yw):
    X, Y = np.meshgrid(xn, yn, indexing="ij")
    W = np.outer(xw, yw)
    return (X + 1j * Y).ravel(), W.ravel()


def _patch_nodes(xc, eta, X0, X1, Yt, n):
    """Polar nodes about (xc, 0) covering the rectangle [X0,X1]x[0,Yt]."""
    corners = [(X0, 0.0), (X1, 0.0), (X0, Yt), (X1, Yt)]
    angs = {0.0, np.pi}
    for cx, cy in corners:
        if (cx, cy) != (xc, 0.0):
            a = np.arctan2(cy, cx - xc)
            if 0 <= a <= np.pi:
                angs.add(float(a))
    angs = sorted(angs)
    zs, ws = [], []
    t, wt = _gl(n)
    for a0, a1 in zip(angs[:-1], angs[1:]):
        if a1 - a0 < 1e-14:
            continue
        th = 0.5 * (a0 + a1) + 0.5 * (a1 - a0) * t
        wth = 0.5 * (a1 - a0) * wt
        c, s = np.cos(th), np.sin(th)
        lo = np.zeros_like(th)
        hi = np.where(s > 1e-300, Yt / np.maximum(s, 1e-300), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            pos, neg = c > 1e-15, c < -1e-15
            lo = np.where(pos, np.maximum(lo, (X0 - xc) / np.where(pos, c, 1)), lo)
            hi = np.where(pos, np.minimum(hi, (X1 - xc) / np.where(pos, c, 1)), hi)
            lo = np.where(neg, np.maximum(lo, (X1 - xc) / np.where(neg, c, 1)), lo)
            hi = np.where(neg, np.minimum(hi, (X0 - xc) / np.where(neg, c, 1)), hi)
        vert = ~(pos | neg)
        if np.any(vert & ((xc < X0) | (xc > X1))):
            hi = np.where(vert & ((xc < X0) | (xc > X1)), lo, hi)
        ok = hi > lo
        if not ok.any():
            continue
        # radial segments split at eta: [lo, min(hi, eta)] plain, [max(lo, eta), hi] in log r
        for k in np.nonzero(ok)[0]:
            r_lo, r_hi = lo[k], hi[k]
            segs = []
            if r_lo < eta:
                segs.append(("lin", r_lo, min(r_hi, eta)))
            if r_hi > eta:
                segs.append(("log", max(r_lo, eta), r_hi))
            for kind, p, q in segs:
                if q <= p:
                    continue
                if kind == "lin":
                    r, wr = _panel(p, q, n)
                    jac = wr * r
                else:
                    lp, lq = np.log(max(p, 1e-300)), np.log(q)
                    u, wu = _panel(lp, lq, n)
                    r = np.exp(u)
                    jac = wu * r * r
                zs.append(xc + r * c[k] + 1j * r * s[k])
                ws.append(jac * wth[k])
    if not zs:
        return np.zeros(0, complex), np.zeros(0)
    return np.concatenate(zs), np.concatenate(ws)


def _upper_half_nodes(points, eta, support_edges, xlo, xhi, ytop, order=8):
    """Quadrature nodes for [xlo,xhi] x [0,ytop] (bounds may be infinite)."""
    xs = np.asarray(points, dtype=float)
    gap = nearest_gap(xs)
    half = np.minimum(np.where(np.isfinite(gap), gap / 2, 1.0), 1.0)
    zs, ws = [], []
    y1 = min(1.0, ytop)
    finite_edges = [e for e in support_edges if xlo <= e <= xhi]
    # patches
    rects = []
    for xc, s, et in zip(xs, half, eta):
        X0, X1 = max(xc - s, xlo), min(xc + s, xhi)
        Yt = min(s, ytop)
        if X1 <= X0 or Yt <= 0:
            continue
        rects.append((X0, X1, Yt))
        z, w = _patch_nodes(xc, et, X0, X1, Yt, order)
        zs.append(z)
        ws.append(w)
    rects.sort()
    # low layer strips
    brk = set(finite_edges)
    for X0, X1, _ in rects:
        brk.update((X0, X1))
    extent_lo = min([*brk, *(xs if len(xs) else [0.0])], default=0.0)
    extent_hi = max([*brk, *(xs if len(xs) else [0.0])], default=0.0)
    core_lo = xlo if np.isfinite(xlo) else extent_lo - 1.0
    core_hi = xhi if np.isfinite(xhi) else extent_hi + 1.0
    brk.update((core_lo, core_hi))
    brk = np.array(sorted(b for b in brk if core_lo <= b <= core_hi))
    r_lo = np.array([r[0] for r in rects])
    r_hi = np.array([r[1] for r in rects])
    r_top = np.array([r[2] for r in rects])
    for a, b in zip(brk[:-1], brk[1:]):
        if b - a < 1e-13:
            continue
        mid = 0.5 * (a + b)
        cover = np.nonzero((r_lo <= mid) & (r_hi >= mid))[0] if len(rects) else []
        yb = float(r_top[cover[0]]) if len(cover) else 0.0
        if yb >= y1:
            continue
        xn, xw = _panel(a, b, order)
        yn, yw = _graded_y(yb, y1, min(b - a, y1 - yb), order)
        z, w = _tensor(xn, xw, yn, yw)
        zs.append(z)
        ws.append(w)
    width = max(core_hi - core_lo, 1.0)
    yn, yw = _graded_y(0.0, y1, 0.25, order)
    for side, edge in ((-1, core_lo), (1, core_hi)):
        if np.isfinite(xlo if side < 0 else xhi):
            continue
        xn, xw = _tail(edge, 1.0 + 0.1 * width, order, side)
        z, w = _tensor(xn, xw, yn, yw)
        zs.append(z)
        ws.append(w)
    # upper bands
    if ytop > y1:
        if np.isfinite(ytop):
            ymax = ytop
        else:
            ymax = max(16.0, 8.0 * width)
        lo_y = y1
        while lo_y < ymax - 1e-12:
            hi_y = min(2 * lo_y, ymax)
            hb = hi_y - lo_y
            a = core_lo if np.isfinite(xlo) else core_lo - 2 * hi_y
            b = core_hi if np.isfinite(xhi) else core_hi + 2 * hi_y
            npan = max(1, int(np.ceil((b - a) / max(hb, 0.5))))
            edges = np.linspace(a, b, npan + 1)
            t, w = _gl(order)
            xn = (0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * t).ravel()
            xw = (0.5 * np.diff(edges)[:, None] * w).ravel()
            yn, yw = _panel(lo_y, hi_y, order)
            z, ww = _tensor(xn, xw, yn, yw)
            zs.append(z)
            ws.append(ww)
            for side, edge in ((-1, a), (1, b)):
                if np.isfinite(xlo if side < 0 else xhi):
                    continue
                xt, xtw = _tail(edge, hi_y, order, side)
                z, ww = _tensor(xt, xtw, yn, yw)
                zs.append(z)
                ws.append(ww)
            lo_y = hi_y
        if not np.isfinite(ytop):
            # y = ymax / tau, x = xc + y tan(alpha)
            xc = 0.5 * (core_lo + core_hi)
            tau, wt = _panel(0.0, 1.0, 2 * order)
            al, wa = _panel(-0.5 * np.pi, 0.5 * np.pi, 4 * order)
            T, A = np.meshgrid(tau, al, indexing="ij")
            Y = ymax / T
            X = xc + Y * np.tan(A)
            W = np.outer(wt, wa) * (ymax / T**2) * (Y / np.cos(A) ** 2)
            zs.append((X + 1j * Y).ravel())
            ws.append(W.ravel())
    return np.concatenate(zs), np.concatenate(ws)


def _support_edges(measure):
    out = []
    for a, b in measure.support:
        out.extend((a, b))
    return out


def field_energy_integral(points, measure, eta, rect=(-np.inf, np.inf, np.inf), order=8):
    """int over rect x [-ytop, ytop] of |grad u_eta|^2 (twice the upper half)."""
    xlo, xhi, ytop = rect
    z, w = _upper_half_nodes(points, eta, _support_edges(measure), xlo, xhi, ytop, order)
    f = field_complex(z, points, eta, measure)
    return 2.0 * float(np.dot(w, (f.real**2 + f.imag**2)))


@lru_cache(maxsize=None)
def _laguerre(n):
    s, w = roots_laguerre(n)
    return s, w


def f_correction(points, eta, measure, n=40):
    """int f_{eta_i}(x - x_i) dmu(x) per point, via t = eta e^{-s} and Gauss-Laguerre."""
    x = np.asarray(points, dtype=float)
    eta = np.asarray(eta, dtype=float)
    s, w = _laguerre(n)
    t = eta[:, None] * np.exp(-s)[None, :]
    vals = measure.density((x[:, None] + t).ravel()) + measure.density((x[:, None] - t).ravel())
    vals = vals.reshape(t.shape)
    return eta * (vals @ (w * s))


def renormalized_energy_field_form(points, measure, eta=None, order=16, check=True):
    """(1/4pi)(int_{R^2} |grad u_eta|^2 - 2 pi sum g(eta_i)) - sum int f_{eta_i}(x-x_i) dmu."""
    x = _sorted(points)
    r = minimal_distances(x)
    eta = r.copy() if eta is None else np.asarray(eta, dtype=float)
    if check and np.any(eta > r * (1 + 1e-12)):
        raise TruncationTooLarge("truncation radius exceeds the minimal distance")
    integral = field_energy_integral(x, measure, eta, order=order)
    self_sum = float(np.sum(-np.log(eta)))
    fc = float(np.sum(f_correction(x, eta, measure)))
    total = (integral - 2 * np.pi * self_sum) / (4 * np.pi) - fc
    p = float(np.sum(x) - measure.integrate(lambda t: t))
    R = max(np.max(np.abs(x)), max(abs(e) for e in _support_edges(measure)))
    return EnergyBreakdown("field", total, field_integral=integral, self_energy_sum=self_sum,
                           f_correction=fc, count=len(x),
                           meta={"dipole_moment": p, "tail_bound_beyond_extent": p * p / (4 * (2 * R) ** 2),
                                 "order": order})


def local_energy(points, measure, window, L=None, order=8):
    """True local energy F^Omega on Omega x [-L, L] with truncation r~."""
    lo, hi = window
    x = _sorted(points)
    L = (hi - lo) if L is None else float(L)
    rt = local_minimal_distances(x, window)
    inside = (x >= lo) & (x <= hi)
    if inside.any() and L < np.max(rt[inside]):
        raise WindowTooThin(f"L={L} below the largest truncation radius")
    integral = field_energy_integral(x, measure, rt, rect=(lo, hi, L), order=order)
    self_sum = float(np.sum(-np.log(rt[inside])))
    fc = float(np.sum(f_correction(x[inside], rt[inside], measure)))
    total = (integral - 2 * np.pi * self_sum) / (4 * np.pi) - fc
    return EnergyBreakdown("local", total, field_integral=integral, self_energy_sum=self_sum,
                           f_correction=fc, count=int(inside.sum()),
                           meta={"window": [lo, hi], "L": L, "order": order})
