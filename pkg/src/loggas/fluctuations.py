"""Test functions, linear statistics, H^{1/2} norms and Laplace expansion terms.

The H^{1/2} norm is normalised as the Dirichlet energy of the harmonic
extension to the upper half-plane divided by 2 pi, which in Fourier variables
(xi^(k) = int xi e^{-ikx} dx) reads

    ||xi||^2 = (1 / 4 pi^2) int |k| |xi^(k)|^2 dk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import chebyshev as cheb
from numpy.polynomial import polynomial as P
from scipy.integrate import quad

from .errors import NonDecayingSpectrum, TooLargeT


# ----------------------------------------------------------- bump profile


@lru_cache(maxsize=None)
def _bump_polys(p, kmax=6):
    """theta^(k) = theta * q_k(u) / (1-u^2)^(2k) for theta = exp(p - p/(1-u^2))."""
    s = Polynomial([1.0, 0.0, -1.0])
    u = Polynomial([0.0, 1.0])
    q = [Polynomial([1.0])]
    for k in range(kmax):
        qk = q[-1]
        q.append(qk.deriv() * s * s + 4 * k * u * s * qk - 2 * p * u * qk)
    return tuple(q)


def bump_profile(u, k=0, p=1.0):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    ui = u[inside]
    s = 1 - ui * ui
    th = np.exp(p - p / s)
    out[inside] = th * _bump_polys(float(p))[k](ui) / s ** (2 * k)
    return out


@lru_cache(maxsize=None)
def bump_ck_norm(k, p=1.0, n=200001):
    """max_{j <= k} sup |theta^(j)|, computed once on a fine grid."""
    u = np.linspace(-1, 1, n)
    return float(max(np.max(np.abs(bump_profile(u, j, p))) for j in range(k + 1)))


# ----------------------------------------------------------- test functions


@dataclass(frozen=True)
class TestFunction:
    """Kinds: rescaled_bump(z, L, p), kappa(a, h), zeta(a, h), polynomial(coeffs, lo, hi).

    ``scale`` composes with x -> scale * x, e.g. kappa_{a,h}(N x).
    """

    kind: str
    params: tuple
    scale: float = 1.0

    __test__ = False  # not a pytest class

    @classmethod
    def bump(cls, z=0.0, L=1.0, p=1.0):
        return cls("rescaled_bump", (float(z), float(L), float(p)))

    @classmethod
    def kappa(cls, a, h, scale=1.0):
        return cls("kappa", (float(a), float(h)), float(scale))

    @classmethod
    def zeta(cls, a, h, scale=1.0):
        return cls("zeta", (float(a), float(h)), float(scale))

    @classmethod
    def polynomial(cls, coeffs, lo=-np.inf, hi=np.inf):
        return cls("polynomial", (tuple(float(c) for c in coeffs), float(lo), float(hi)))

    @property
    def descriptor(self):
        return {"kind": self.kind, "params": list(self.params), "scale": self.scale}

    @property
    def smoothness(self):
        if self.kind == "polynomial":
            lo, hi = self.params[1:]
            return "C^inf" if np.isinf(lo) and np.isinf(hi) else "discontinuous"
        return "C^inf"

    @property
    def support(self):
        if self.kind == "rescaled_bump":
            z, L, _ = self.params
            return ((z - L) / self.scale, (z + L) / self.scale)
        if self.kind == "polynomial":
            return self.params[1], self.params[2]
        return -np.inf, np.inf

    def d(self, x, k=0):
        y = self.scale * np.asarray(x, dtype=float)
        fac = self.scale**k
        if self.kind == "rescaled_bump":
            z, L, p = self.params
            return fac * bump_profile((y - z) / L, k, p) / L**k
        if self.kind in ("kappa", "zeta"):
            a, h = self.params
            c = a + 1j * h
            g = (-1) ** k * factorial(k) / (y - c) ** (k + 1)
            val = 2 * np.pi * g.real if self.kind == "kappa" else -2 * np.pi * g.imag
            return fac * val
        coeffs, lo, hi = self.params
        c = np.asarray(coeffs)
        for _ in range(k):
            c = P.polyder(c) if len(c) > 1 else np.zeros(1)
        val = P.polyval(y, c)
        return fac * np.where((y >= lo) & (y <= hi), val, 0.0)

    def __call__(self, x):
        return self.d(x, 0)

    def ck_norm(self, k):
        """max_{j<=k} sup|xi^(j)|; for bumps this is L^{-j}-weighted from the cached profile."""
        if self.kind == "rescaled_bump":
            z, L, p = self.params
            return max(bump_ck_norm(j, p) / (L / self.scale) ** j for j in range(k + 1))
        if self.kind in ("kappa", "zeta"):
            a, h = self.params
            return max(2 * np.pi * factorial(j) * self.scale**j / h ** (j + 1) for j in range(k + 1))
        lo, hi = self.support
        x = np.linspace(lo, hi, 20001)
        return float(max(np.max(np.abs(self.d(x, j))) for j in range(k + 1)))


# ----------------------------------------------------------- fluctuations


_mean_cache = {}


def mean_against(xi, eq):
    key = (json.dumps(getattr(xi, "descriptor", repr(xi)), sort_keys=True), eq.potential.label, eq.method)
    if key not in _mean_cache:
        _mean_cache[key] = eq.integrate(xi, rtol=1e-13)
    return _mean_cache[key]


def fluct(points, xi, eq):
    """sum xi(x_i) - N int xi dmu_V."""
    x = np.asarray(getattr(points, "points", points), dtype=float)
    return float(np.sum(xi(x)) - len(x) * mean_against(xi, eq))


def fluct_many(values_fn, points, eq, mean):
    x = np.asarray(points, dtype=float)
    return float(np.sum(values_fn(x)) - len(x) * mean)


# ----------------------------------------------------------- H^{1/2}


def h_half_norm(xi, pad=32, n_support=1024, decay_tol=1e-6):
    """||xi||_{H^{1/2}} (not squared), spectrally."""
    kind = getattr(xi, "kind", None)
    if kind in ("kappa", "zeta"):
        # |xi^(k)| = 2 pi^2 e^{-h|k|/scale}/scale for both kernels
        a, h = xi.params
        hh = h / xi.scale
        amp = 2 * np.pi**2 / xi.scale
        val = 2 * quad(lambda k: k * (amp * np.exp(-hh * k)) ** 2, 0, np.inf)[0]
        return float(np.sqrt(val / (4 * np.pi**2)))
    lo, hi = xi.support
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonDecayingSpectrum("spectral norm needs a compactly supported test function")
    width = hi - lo
    mid = 0.5 * (lo + hi)
    n = int(pad * n_support)
    dx = width / n_support
    x = mid + dx * (np.arange(n) - n // 2)
    f = np.asarray(xi(x), dtype=float)
    if not np.any(f):
        return 0.0
    fh = dx * np.fft.rfft(f)
    a2 = np.abs(fh) ** 2
    dk = 2 * np.pi / (n * dx)
    k = dk * np.arange(len(fh))
    g = k * a2
    # the integrand k |xi^|^2 must be negligible on the upper half of the grid
    if g[len(g) // 2:].sum() > decay_tol * g.sum():
        raise NonDecayingSpectrum("Fourier transform does not decay on the grid")
    trap = dk * (np.sum(g) - 0.5 * g[0])
    # Euler-Maclaurin: g(0) = 0 and g'(0) = |xi^(0)|^2, the one-sided kink
    trap += dk * dk / 12 * a2[0]
    return float(np.sqrt(2 * trap / (4 * np.pi**2)))


def h_half_norm_halfplane(xi, n_t=1500, R_factor=60.0, order=8):
    """||xi|| from (1/2pi) int_{y>0} |grad xi~|^2 with xi~ the harmonic extension.

    grad of the extension is the derivative of the Cauchy integral
    Phi'(z) = (1/(pi i)) int xi'(t) / (t - z) dt, so |grad xi~|^2 = |Phi'|^2.
    The half-plane is truncated to [mid-R, mid+R] x [0, R]; the thin strip
    next to the axis, where the t-rule cannot resolve the kernel, uses its
    midpoint value.
    """
    from scipy.special import roots_legendre
    lo, hi = xi.support
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    tg, wg = roots_legendre(n_t)
    t = mid + half * tg
    wt = half * wg * np.asarray(xi.d(t, 1), dtype=float)
    R = R_factor * half
    gl, gw = roots_legendre(order)

    def panels(edges):
        e = np.asarray(edges)
        nodes = (0.5 * (e[:-1, None] + e[1:, None]) + 0.5 * np.diff(e)[:, None] * gl).ravel()
        w = (0.5 * np.diff(e)[:, None] * gw).ravel()
        return nodes, w

    y0 = 0.02 * half
    yn, yw = panels(np.geomspace(y0, R, 25))
    yn, yw = np.concatenate([[0.5 * y0], yn]), np.concatenate([[y0], yw])
    xe_out = half * np.geomspace(0.05, R / half, 20)
    xe = np.concatenate([lo - xe_out[::-1], np.linspace(lo, hi, 21), hi + xe_out])
    xn, xw = panels(xe)
    total = 0.0
    for y, wy in zip(yn, yw):
        z = xn + 1j * y
        phi = (wt[None, :] / (t[None, :] - z[:, None])).sum(axis=1) / (np.pi * 1j)
        total += wy * np.dot(xw, np.abs(phi) ** 2)
    return float(np.sqrt(total / (2 * np.pi)))


# ----------------------------------------------------------- Laplace terms


@dataclass
class LaplaceExpansionTerms:
    main1: float
    error1: float
    error2: float
    error3: float
    s: float
    t: float
    beta: float
    n: int
    convention: str = "exact"
    meta: dict = field(default_factory=dict)

    def log_prefactor(self):
        """-beta N^2 Main1 + N Error1."""
        return -self.beta * self.n**2 * self.main1 + self.n * self.error1

    def to_json(self):
        d = dict(self.__dict__)
        return json.dumps(d, sort_keys=True, default=float)


def _divided(psi_x, psi_y, dpsi_x, x, y):
    dx = x[:, None] - y[None, :]
    close = np.abs(dx) < 1e-12 * (1 + np.abs(x[:, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (psi_x[:, None] - psi_y[None, :]) / np.where(close, 1.0, dx)
    return np.where(close, dpsi_x[:, None], q)


def _quad_nodes(eq, tm, M=None):
    if M is None:
        M = int(min(max(1024, len(tm.psi_coef) // 4), 4096))
    return eq.measure.nodes(M)


class LaplaceExpansion:
    """Configuration-independent parts of the expansion for fixed (xi, s, beta, N).

    convention="exact" uses the prefactors for which
        E[e^{s Fluct}] = exp(-beta N^2 Main1 + N Error1) E[exp(-beta(Error2 + Error3))]
    holds exactly: Error1 = (1 - beta/2) int log phi', Error2 = 1/2 int int l dfluct^2
    with the diagonal l(x, x) = -log phi'(x) included, and
    Error3 = Fluct((1/2 - 1/beta) log phi' + N tau_t).
    convention="literal" uses (1 - beta), no 1/2 with i = j excluded, and (1 - 1/beta).
    Here l(x, y) = -log((phi_t(x) - phi_t(y)) / (x - y)) and t = -s/(beta N).
    """

    def __init__(self, eq, potential, xi, tm, s, beta, n, convention="exact", M=None):
        from .transport import _check_t
        if convention not in ("exact", "literal"):
            raise ValueError(f"unknown convention {convention!r}")
        self.eq, self.potential, self.xi, self.tm = eq, potential, xi, tm
        self.s, self.beta, self.n, self.convention = float(s), float(beta), int(n), convention
        self.t = -s / (beta * n)
        if s == 0:
            self.main1 = self.error1 = 0.0
            return
        _check_t(tm, self.t)
        t = self.t
        y, w = _quad_nodes(eq, tm, M)
        self.y, self.w = y, w
        py, dpy = tm(y), tm.d(y, 1)
        self.py = py
        ell_mm = 0.0
        for i0 in range(0, len(y), 1024):
            D = _divided(py[i0:i0 + 1024], py, dpy[i0:i0 + 1024], y[i0:i0 + 1024], y)
            ell_mm += w[i0:i0 + 1024] @ (-np.log1p(t * D)) @ w
        self.ell_mm = float(ell_mm)
        phi_y = y + t * py
        v_shift = float(w @ (potential(phi_y) + t * xi(phi_y) - potential(y)))
        self.main1 = 0.5 * self.ell_mm + v_shift - t * mean_against(xi, eq)
        self.logdphi_mean = float(w @ np.log1p(t * dpy))
        c1 = (1 - beta / 2) if convention == "exact" else (1 - beta)
        self.error1 = c1 * self.logdphi_mean
        self.c3 = (0.5 - 1 / beta) if convention == "exact" else (1 - 1 / beta)
        tau_y = self._tau(y)
        self.g_mean = self.c3 * self.logdphi_mean + n * float(w @ tau_y)

    def _tau(self, x):
        from .transport import energy_difference
        return energy_difference(self.tm, self.eq, self.potential, self.xi, self.t, x, M=len(self.y))

    def point_functions(self, x):
        """l(x, .) against mu and the Error3 integrand at the points x."""
        tm, t = self.tm, self.t
        px, dpx = tm(x), tm.d(x, 1)
        ell_pm = np.empty(len(x))
        for i0 in range(0, len(x), 256):
            sl = slice(i0, i0 + 256)
            ell_pm[sl] = (-np.log1p(t * _divided(px[sl], self.py, dpx[sl], x[sl], self.y))) @ self.w
        g = self.c3 * np.log1p(t * dpx) + self.n * self._tau(x)
        return px, dpx, ell_pm, g

    def errors(self, configs):
        """(Error2, Error3) for a batch of configurations, shape (B, N)."""
        X = np.atleast_2d(np.asarray(configs, dtype=float))
        B, n = X.shape
        if self.s == 0:
            return np.zeros(B), np.zeros(B)
        uniq, inv = np.unique(X.ravel(), return_inverse=True)
        px, dpx, ell_pm, g = (a[inv].reshape(B, n) for a in self.point_functions(uniq))
        t = self.t
        dx = X[:, :, None] - X[:, None, :]
        same = dx == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            D = (px[:, :, None] - px[:, None, :]) / np.where(same, 1.0, dx)
        D = np.where(same, dpx[:, :, None], D)
        ell_pp = -np.log1p(t * D)
        if self.convention == "exact":
            e2 = 0.5 * (ell_pp.sum(axis=(1, 2)) - 2 * n * ell_pm.sum(axis=1) + n * n * self.ell_mm)
        else:
            off = ell_pp.sum(axis=(1, 2)) - np.trace(ell_pp, axis1=1, axis2=2)
            e2 = off - 2 * n * ell_pm.sum(axis=1) + n * n * self.ell_mm
        e3 = g.sum(axis=1) - n * self.g_mean
        return e2, e3

    def terms(self, points):
        x = np.asarray(getattr(points, "points", points), dtype=float)
        e2, e3 = self.errors(x[None, :])
        return LaplaceExpansionTerms(float(self.main1), float(self.error1), float(e2[0]), float(e3[0]),
                                     self.s, self.t, self.beta, self.n, self.convention,
                                     meta={"nodes": len(getattr(self, "y", ()))})


def laplace_terms(points, eq, potential, xi, tm, s, beta, convention="exact", M=None):
    """Main1, Error1, Error2, Error3 for one configuration (see LaplaceExpansion)."""
    x = np.asarray(getattr(points, "points", points), dtype=float)
    return LaplaceExpansion(eq, potential, xi, tm, s, beta, len(x), convention, M).terms(x)


def anisotropy(points, tm, eq, M=None):
    """int int (psi(x)-psi(y))/(x-y) dfluct dfluct, diagonal psi'(x_i) included."""
    x = np.asarray(getattr(points, "points", points), dtype=float)
    n = len(x)
    y, w = _quad_nodes(eq, tm, M)
    py, dpy = tm(y), tm.d(y, 1)
    px, dpx = tm(x), tm.d(x, 1)
    mm = 0.0
    for i0 in range(0, len(y), 1024):
        D = _divided(py[i0:i0 + 1024], py, dpy[i0:i0 + 1024], y[i0:i0 + 1024], y)
        mm += w[i0:i0 + 1024] @ D @ w
    pp = _divided(px, px, dpx, x, x).sum()
    pm = (_divided(px, py, dpx, x, y) @ w).sum()
    return float(pp - 2 * n * pm + n * n * mm)


def mean_prediction(tm, eq, beta, convention="literal"):
    """Predicted limit of E Fluct: c(beta) int psi' dmu_V.

    literal: c = 1 - 1/beta. corrected: c = 1/2 - 1/beta, which is what the
    exact change of variables gives (it vanishes at beta = 2).
    """
    a, b = eq.support[0]
    r = 0.5 * (b - a)
    d = cheb.chebder(tm.psi_coef) / r if len(tm.psi_coef) > 1 else np.zeros(1)
    y, w = eq.measure.nodes(max(512, 2 * len(d) + 8))
    val = float(w @ cheb.chebval((y - 0.5 * (a + b)) / r, d))
    c = (1 - 1 / beta) if convention == "literal" else (0.5 - 1 / beta)
    return c * val, val


def psi_pairing(tm, xi, eq):
    """int -xi' psi dmu_V, which equals 2 ||xi||^2_{H^{1/2}}."""
    return -eq.integrate(lambda y: xi.d(y, 1) * tm(y), rtol=1e-10)


def empirical_log_laplace(values, s):
    """log mean exp(s X), computed stably."""
    v = np.asarray(values, dtype=float)
    a = s * v
    m = np.max(a)
    return float(m + np.log(np.mean(np.exp(a - m))))


def check_t(tm, s, beta, n):
    t = -s / (beta * n)
    if abs(t) * tm.sup_derivative(1) >= 0.5:
        raise TooLargeT(f"t = {t:.3g} violates |t psi'| < 1/2")
    return t
