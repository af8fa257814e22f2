"""Absolutely continuous measures on the line built from simple pieces.

Every piece knows its logarithmic potential h(x) = -int log|x-y| dmu(y), its
self energy int int -log|x-y| dmu dmu and its Cauchy transform
G(z) = int dmu(t)/(z-t), all in closed form. Three kinds of piece are used:

* ``ChebPiece``: rho(y) dy = F(u) du / sqrt(1-u^2) with y = m + r u and F a
  Chebyshev series. Square-root edges (rho = S sigma) give F = r^2 S (1-u^2).
* ``UniformPiece``: constant density on an interval.
* ``CellPiece``: piecewise constant density on a uniform grid of cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as cheb
from numpy.polynomial import polynomial as poly
from scipy.linalg import matmul_toeplitz
from scipy.special import roots_legendre


def _xlogx_minus_x(t):
    t = np.asarray(t, dtype=float)
    out = -t.copy()
    nz = t != 0
    out[nz] += t[nz] * np.log(np.abs(t[nz]))
    return out


def _cell_phi(t):
    # antiderivative used for the cell-cell log kernel
    t = np.asarray(t, dtype=float)
    out = -0.75 * t * t
    nz = t != 0
    out[nz] += 0.5 * t[nz] ** 2 * np.log(np.abs(t[nz]))
    return out


def cell_kernel(k, h):
    """int int -log|x - y| over two cells of width h whose offsets differ by k*h."""
    k = np.asarray(k, dtype=float)
    return -(_cell_phi((k + 1) * h) - 2 * _cell_phi(k * h) + _cell_phi((k - 1) * h))


def _as_array(x):
    return np.atleast_1d(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ChebPiece:
    a: float
    b: float
    coef: np.ndarray

    @property
    def m(self):
        return 0.5 * (self.a + self.b)

    @property
    def r(self):
        return 0.5 * (self.b - self.a)

    @property
    def mass(self):
        return np.pi * self.coef[0]

    def density(self, x):
        x = _as_array(x)
        u = (x - self.m) / self.r
        out = np.zeros_like(x)
        inside = np.abs(u) < 1
        ui = u[inside]
        out[inside] = cheb.chebval(ui, self.coef) / (self.r * np.sqrt(1 - ui * ui))
        return out

    def log_potential(self, x):
        x = _as_array(x)
        d = np.asarray(self.coef, dtype=float)
        n = np.arange(len(d))
        dn = np.zeros_like(d)
        dn[1:] = d[1:] / n[1:]
        v = (x - self.m) / self.r
        total = np.empty_like(v)
        inside = np.abs(v) <= 1
        vi = v[inside]
        total[inside] = -np.pi * d[0] * np.log(2) - np.pi * cheb.chebval(vi, dn)
        vo = v[~inside]
        w = vo + np.sign(vo) * np.sqrt(vo * vo - 1)
        total[~inside] = np.pi * d[0] * np.log(np.abs(w) / 2) - np.pi * poly.polyval(1 / w, dn)
        return -np.pi * d[0] * np.log(self.r) - total

    def self_energy(self):
        d = np.asarray(self.coef, dtype=float)
        n = np.arange(1, len(d))
        return (np.pi**2 * d[0] ** 2 * np.log(2 / self.r)
                + 0.5 * np.pi**2 * np.sum(d[1:] ** 2 / n))

    def cauchy(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        zeta = (z - self.m) / self.r
        s = np.sqrt(zeta - 1) * np.sqrt(zeta + 1)
        q = zeta - s
        return np.pi * poly.polyval(q, self.coef) / (self.r * s)

    def nodes(self, M):
        k = np.arange(1, M + 1)
        u = np.cos((2 * k - 1) * np.pi / (2 * M))
        return self.m + self.r * u, (np.pi / M) * cheb.chebval(u, self.coef)

    def cdf(self, x):
        x = _as_array(x)
        v = np.clip((x - self.m) / self.r, -1, 1)
        th = np.arccos(v)
        d = np.asarray(self.coef, dtype=float)
        out = d[0] * (np.pi - th)
        for n in range(1, len(d)):
            out -= d[n] * np.sin(n * th) / n
        return out

    def scaled(self, n):
        lo, hi = sorted((n * self.a, n * self.b))
        c = np.asarray(self.coef, dtype=float) * abs(n)
        if n < 0:
            c = c * (-1.0) ** np.arange(len(c))
        return ChebPiece(lo, hi, c)

    def shifted(self, c):
        return ChebPiece(self.a + c, self.b + c, self.coef)

    def to_dict(self):
        return {"kind": "cheb", "a": self.a, "b": self.b, "coef": list(map(float, self.coef))}


@dataclass(frozen=True)
class UniformPiece:
    a: float
    b: float
    rho: float

    @property
    def mass(self):
        return self.rho * (self.b - self.a)

    def density(self, x):
        x = _as_array(x)
        return np.where((x >= self.a) & (x <= self.b), self.rho, 0.0)

    def log_potential(self, x):
        x = _as_array(x)
        return -self.rho * (_xlogx_minus_x(x - self.a) - _xlogx_minus_x(x - self.b))

    def self_energy(self):
        ell = self.b - self.a
        return self.rho**2 * ell**2 * (1.5 - np.log(ell))

    def cauchy(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return self.rho * (np.log(z - self.a) - np.log(z - self.b))

    def nodes(self, M):
        t, w = roots_legendre(M)
        half = 0.5 * (self.b - self.a)
        return self.a + half * (t + 1), self.rho * half * w

    def cdf(self, x):
        x = _as_array(x)
        return self.rho * (np.clip(x, self.a, self.b) - self.a)

    def scaled(self, n):
        lo, hi = sorted((n * self.a, n * self.b))
        return UniformPiece(lo, hi, self.rho)

    def shifted(self, c):
        return UniformPiece(self.a + c, self.b + c, self.rho)

    def to_dict(self):
        return {"kind": "uniform", "a": self.a, "b": self.b, "rho": self.rho}


@dataclass(frozen=True)
class CellPiece:
    x0: float
    h: float
    rho: np.ndarray

    @property
    def edges(self):
        return self.x0 + self.h * np.arange(len(self.rho) + 1)

    @property
    def a(self):
        return self.x0

    @property
    def b(self):
        return self.x0 + self.h * len(self.rho)

    @property
    def mass(self):
        return float(np.sum(self.rho) * self.h)

    def density(self, x):
        x = _as_array(x)
        k = np.floor((x - self.x0) / self.h).astype(int)
        ok = (k >= 0) & (k < len(self.rho))
        out = np.zeros_like(x)
        out[ok] = self.rho[k[ok]]
        return out

    def _jumps(self):
        r = np.concatenate([[0.0], self.rho, [0.0]])
        return np.diff(r)

    def log_potential(self, x):
        x = _as_array(x)
        jumps = self._jumps()
        e = self.edges
        out = np.empty_like(x)
        for i0 in range(0, len(x), 512):
            xi = x[i0:i0 + 512]
            out[i0:i0 + 512] = -(_xlogx_minus_x(xi[:, None] - e[None, :]) @ jumps)
        return out

    def self_energy(self):
        n = len(self.rho)
        col = cell_kernel(np.arange(n), self.h)
        return float(self.rho @ matmul_toeplitz(col, self.rho))

    def cauchy(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        jumps = self._jumps()
        return np.log(z[:, None] - self.edges[None, :]) @ jumps

    def nodes(self, M):
        p = max(2, min(8, M // max(len(self.rho), 1)))
        t, w = roots_legendre(p)
        e = self.edges[:-1]
        x = (e[:, None] + 0.5 * self.h * (t[None, :] + 1)).ravel()
        wt = (self.rho[:, None] * 0.5 * self.h * w[None, :]).ravel()
        return x, wt

    def cdf(self, x):
        x = _as_array(x)
        cum = np.concatenate([[0.0], np.cumsum(self.rho) * self.h])
        pos = np.clip((x - self.x0) / self.h, 0, len(self.rho))
        k = np.minimum(np.floor(pos).astype(int), len(self.rho) - 1)
        return cum[k] + (pos - k) * self.h * self.rho[k]

    def scaled(self, n):
        if n < 0:
            return CellPiece(n * self.b, -n * self.h, self.rho[::-1].copy())
        return CellPiece(n * self.x0, n * self.h, self.rho)

    def shifted(self, c):
        return CellPiece(self.x0 + c, self.h, self.rho)

    def to_dict(self):
        return {"kind": "cells", "x0": self.x0, "h": self.h, "rho": list(map(float, self.rho))}


def piece_from_dict(d):
    if d["kind"] == "cheb":
        return ChebPiece(d["a"], d["b"], np.asarray(d["coef"], dtype=float))
    if d["kind"] == "uniform":
        return UniformPiece(d["a"], d["b"], d["rho"])
    if d["kind"] == "cells":
        return CellPiece(d["x0"], d["h"], np.asarray(d["rho"], dtype=float))
    raise ValueError(f"unknown piece kind {d['kind']!r}")


@dataclass(frozen=True)
class Measure:
    """Sum of pieces. Total mass is arbitrary (1 for mu_V, N after blow-up)."""

    pieces: tuple

    @property
    def mass(self):
        return float(sum(p.mass for p in self.pieces))

    @property
    def support(self):
        return [(float(p.a), float(p.b)) for p in self.pieces]

    def density(self, x):
        return sum(p.density(x) for p in self.pieces)

    def log_potential(self, x):
        return sum(p.log_potential(x) for p in self.pieces)

    def cauchy(self, z):
        return sum(p.cauchy(z) for p in self.pieces)

    def cdf(self, x):
        return sum(p.cdf(x) for p in self.pieces)

    def nodes(self, M=512):
        xs, ws = zip(*(p.nodes(M) for p in self.pieces))
        return np.concatenate(xs), np.concatenate(ws)

    def integrate(self, f, rtol=1e-12, M=256, max_nodes=1 << 17):
        """int f dmu, doubling the node count until two levels agree."""
        x, w = self.nodes(M)
        prev = float(np.dot(w, f(x)))
        while M < max_nodes:
            M *= 2
            x, w = self.nodes(M)
            cur = float(np.dot(w, f(x)))
            if abs(cur - prev) <= rtol * (1 + abs(cur)):
                return cur
            prev = cur
        return prev

    def self_energy(self):
        total = sum(p.self_energy() for p in self.pieces)
        for i, p in enumerate(self.pieces):
            for q in self.pieces[i + 1:]:
                total += 2 * Measure((q,)).integrate(p.log_potential, rtol=1e-10)
        return float(total)

    def scaled(self, n):
        return Measure(tuple(p.scaled(n) for p in self.pieces))

    def shifted(self, c):
        return Measure(tuple(p.shifted(c) for p in self.pieces))

    def to_dict(self):
        return {"pieces": [p.to_dict() for p in self.pieces]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(piece_from_dict(p) for p in d["pieces"]))


def semicircle(a=-1.0, b=1.0, mass=1.0):
    """Semicircle law on [a, b]: F(u) = (mass/pi)(1 - T_2(u))."""
    return Measure((ChebPiece(a, b, np.array([mass / np.pi, 0.0, -mass / np.pi])),))


def lebesgue(a, b):
    return Measure((UniformPiece(a, b, 1.0),))
