"""Samplers for the Gibbs measure exp(-beta H_N) dX_N.

H_N(X) = 1/2 sum_{i != j} -log|x_i - x_j| + N sum_i V(x_i).

For V(x) = x^2 we use the beta-Hermite tridiagonal model, whose eigenvalue law
is proportional to prod|l_i - l_j|^beta exp(-sum l_i^2 / 2). Putting
l = c x and matching exp(-c^2 x^2 / 2) with exp(-beta N x^2) gives
c = sqrt(2 beta N). For general polynomial V a single-site Metropolis chain is
used.
"""
from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from .errors import CoincidentPoints, EigensolverFailure, InvalidBeta, NotBurnedIn

DEFLATE_TOL = 1e-14
MAX_QL_ITER = 64


@dataclass(frozen=True)
class Configuration:
    points: np.ndarray
    beta: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.sort(np.asarray(self.points, dtype=float))
        if len(pts) > 1 and np.any(np.diff(pts) <= 0):
            raise CoincidentPoints("configuration has coincident points")
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return len(self.points)

    def to_csv(self):
        lines = ["x"] + [repr(float(x)) for x in self.points]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, beta, provenance=None):
        rows = text.strip().splitlines()
        return cls(np.array([float(r) for r in rows[1:]]), beta, provenance or {})

    def to_bytes(self):
        header = {"n": self.n, "beta": self.beta, "seed": self.provenance.get("seed"),
                  "sampler": self.provenance.get("sampler")}
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(b"LGCF")
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        buf.write(np.asarray(self.points, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != b"LGCF":
            raise ValueError("not a configuration container")
        (hl,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hl].decode())
        pts = np.frombuffer(blob[8 + hl:], dtype="<f8")
        if len(pts) != header["n"]:
            raise ValueError("container length does not match header")
        return cls(pts.copy(), header["beta"], {"seed": header["seed"], "sampler": header["sampler"]})


def hamiltonian(points, potential):
    x = np.asarray(points, dtype=float)
    n = len(x)
    diff = np.abs(x[:, None] - x[None, :])[np.triu_indices(n, 1)]
    if np.any(diff == 0):
        raise CoincidentPoints("coincident points")
    return float(-np.sum(np.log(diff)) + n * np.sum(potential(x)))


def log_density_unnormalized(config, potential):
    """-beta H_N; pairs counted once."""
    return -config.beta * hamiltonian(config.points, potential)


# ---------------------------------------------------------------- tridiagonal


@numba.njit(cache=True)
def _ql_eigenvalues(d, e, tol, max_iter):
    """Implicit-shift QL on a symmetric tridiagonal matrix; returns status.

    d: diagonal (overwritten with eigenvalues), e: sub-diagonal with e[n-1] = 0.
    """
    n = d.shape[0]
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= tol * dd:
                    break
                m += 1
            if m == l:
                break
            if it == max_iter:
                return -1
            it += 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return 0


def tridiagonal_eigenvalues(diag, off):
    d = np.array(diag, dtype=float)
    e = np.zeros_like(d)
    e[: len(off)] = off
    status = _ql_eigenvalues(d, e, DEFLATE_TOL, MAX_QL_ITER)
    if status != 0 or not np.all(np.isfinite(d)):
        raise EigensolverFailure("QL iteration did not converge")
    return np.sort(d)


def hermite_matrix(n, beta, rng):
    diag = rng.normal(0.0, np.sqrt(2.0), size=n) / np.sqrt(2.0)
    dof = beta * np.arange(n - 1, 0, -1)
    off = np.sqrt(rng.chisquare(dof)) / np.sqrt(2.0) if n > 1 else np.zeros(0)
    return diag, off


def sample_tridiagonal(n, beta, seed):
    if not beta > 0:
        raise InvalidBeta(f"beta must be positive, got {beta}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    diag, off = hermite_matrix(n, beta, rng)
    lam = tridiagonal_eigenvalues(diag, off)
    x = lam / np.sqrt(2.0 * beta * n)
    return Configuration(x, float(beta), {"sampler": "tridiagonal", "seed": int(seed),
                                          "sweeps": 0, "acceptance": 1.0})


# ----------------------------------------------------------------------- mcmc


@dataclass(frozen=True)
class McmcParams:
    sweeps: int = 0            # 0 means burn_in + 10 N
    burn_in: int = 0           # 0 means 100 N
    proposal_sigma: float = 0.0   # 0 means 1/N start
    target_acceptance: float = 0.35
    adapt_every: int = 10

    def resolved(self, n):
        burn = self.burn_in if self.burn_in > 0 else 100 * n
        sweeps = self.sweeps if self.sweeps > 0 else burn + 10 * n
        sigma = self.proposal_sigma if self.proposal_sigma > 0 else 1.0 / n
        return replace(self, sweeps=sweeps, burn_in=burn, proposal_sigma=sigma)


@numba.njit(cache=True)
def _horner(c, x):
    acc = 0.0
    for k in range(c.shape[0] - 1, -1, -1):
        acc = acc * x + c[k]
    return acc


@numba.njit(cache=True)
def _sweeps(x, coeffs, beta, sigma, normals, uniforms):
    n = x.shape[0]
    accepted = 0
    for s in range(normals.shape[0]):
        for i in range(n):
            xi = x[i]
            y = xi + sigma * normals[s, i]
            dh = n * (_horner(coeffs, y) - _horner(coeffs, xi))
            for j in range(n):
                if j != i:
                    dy = abs(y - x[j])
                    if dy == 0.0:
                        dh = np.inf
                        break
                    dh += np.log(abs(xi - x[j]) / dy)
            if np.log(uniforms[s, i]) < -beta * dh:
                x[i] = y
                accepted += 1
    return accepted


def _initial_state(eq, n, rng):
    q = (np.arange(n) + rng.random(n)) / n
    a, b = eq.endpoints
    grid = np.linspace(a, b, 4097)
    cdf = eq.measure.cdf(grid)
    cdf = cdf / cdf[-1]
    return np.interp(q, cdf, grid)


def sample_mcmc(potential, n, beta, seed, params=McmcParams(), eq=None, record=None):
    """Single-site Metropolis; ``record`` (list) receives the state after each production sweep."""
    if not beta > 0:
        raise InvalidBeta(f"beta must be positive, got {beta}")
    p = params.resolved(n)
    if p.sweeps < p.burn_in:
        raise NotBurnedIn(f"sweeps={p.sweeps} < burn_in={p.burn_in}")
    if potential.coeffs is None:
        raise NotImplementedError("MCMC sampler requires a polynomial potential")
    if eq is None:
        from .equilibrium import solve_equilibrium
        eq = solve_equilibrium(potential)
    coeffs = np.asarray(potential.coeffs, dtype=float)
    rng = np.random.default_rng(seed)
    x = _initial_state(eq, n, rng)
    sigma = p.proposal_sigma
    done = 0
    acc_rate = 0.0
    while done < p.burn_in:
        k = min(p.adapt_every, p.burn_in - done)
        acc = _sweeps(x, coeffs, float(beta), sigma, rng.standard_normal((k, n)), rng.random((k, n)))
        acc_rate = acc / (k * n)
        sigma *= np.exp(acc_rate - p.target_acceptance)
        done += k
    prod = p.sweeps - p.burn_in
    if prod > 0:
        if record is None:
            acc = _sweeps(x, coeffs, float(beta), sigma, rng.standard_normal((prod, n)), rng.random((prod, n)))
        else:
            acc = 0
            for _ in range(prod):
                acc += _sweeps(x, coeffs, float(beta), sigma, rng.standard_normal((1, n)), rng.random((1, n)))
                record.append(np.sort(x))
        acc_rate = acc / (prod * n)
    return Configuration(x, float(beta), {"sampler": "mcmc", "seed": int(seed), "sweeps": int(p.sweeps),
                                          "burn_in": int(p.burn_in), "acceptance": float(acc_rate),
                                          "proposal_sigma": float(sigma)})


# ------------------------------------------------------------------- replicas


def derive_seed(seed, k):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(k),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ReplicaSpec:
    n: int
    beta: float
    seed: int
    sampler: str = "tridiagonal"
    potential_coeffs: Optional[tuple] = None
    mcmc: McmcParams = McmcParams()


def _one(spec, k):
    s = derive_seed(spec.seed, k)
    if spec.sampler == "tridiagonal":
        return sample_tridiagonal(spec.n, spec.beta, s)
    from .equilibrium import Potential, solve_equilibrium
    pot = Potential.polynomial(spec.potential_coeffs or (0.0, 0.0, 1.0))
    eq = _eq_cache.get(pot.label)
    if eq is None:
        eq = _eq_cache[pot.label] = solve_equilibrium(pot)
    return sample_mcmc(pot, spec.n, spec.beta, s, spec.mcmc, eq=eq)


_eq_cache = {}


def _chunk(args):
    spec, ks = args
    return [_one(spec, k) for k in ks]


def map_replicas(fn, items, workers=1):
    """Order-preserving map; runs in a process pool when workers > 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def sample_replicas(spec, count, workers=1):
    if count < 1:
        raise ValueError("count must be >= 1")
    ks = list(range(count))
    chunks = [(spec, ks[i:i + 32]) for i in range(0, count, 32)]
    out = map_replicas(_chunk, chunks, workers)
    return [c for chunk in out for c in chunk]
