"""Effective coefficients and the constant-coefficient limit equations.

The coefficients are averages under the invariant measure of the environment
seen from the walker:

* ``abar_i = E[w_i / tr w]`` (so ``sum_i abar_i = 1``),
* ``bbar = E[1 / tr w]``,
* ``psibar = E[psi / tr w]``.

They are estimated by time averages along walks, each replica in a fresh
implicit environment.  The limit problems

    ``1/2 tr(abar D^2 u) = f psibar`` in the unit ball, ``u = g`` on the sphere,
    ``1/2 tr(abar D^2 u) + bbar d_t u = f psibar`` in ``B_1 x [0, 1)``,

are discretised on a Cartesian grid of spacing ``h`` with Shortley-Weller
stencils: an arm that would leave the ball is shortened to the exact
intersection with the sphere, where ``g`` is imposed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .environment import EnvironmentLaw, ObservableSpec
from .errors import ConfigurationError, DomainError, NonConvergenceError
from .walk import STREAM_ENVIRONMENT, STREAM_WALK, implicit_horizon_walks, stream_seed

BURN_FRACTION = 0.1
CONTINUUM_TOL = 1e-13
CONTINUUM_MAX_ITERS = 200_000
CFL_FACTOR = 0.9
MAX_SNAPSHOTS = 1025


@dataclass
class EffectiveCoefficients:
    abar: np.ndarray
    bbar: float
    psibar: float
    se: dict = field(default_factory=lambda: {"abar": None, "bbar": 0.0, "psibar": 0.0})
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abar = np.asarray(self.abar, dtype=float)
        if self.se.get("abar") is None:
            self.se["abar"] = [0.0] * self.abar.size

    @property
    def dimension(self) -> int:
        return self.abar.size

    @classmethod
    def exact(cls, abar, bbar: float, psibar: float) -> "EffectiveCoefficients":
        return cls(np.asarray(abar, dtype=float), float(bbar), float(psibar), provenance={"source": "exact"})

    @classmethod
    def for_constant_law(cls, law: EnvironmentLaw, psi: ObservableSpec) -> "EffectiveCoefficients":
        """Coefficients of a deterministic environment, read off the single weight vector."""
        if law.family != "constant":
            raise ConfigurationError("exact coefficients need a constant law")
        w = law.constant_vector()
        tr = w.sum()
        return cls.exact(w / tr, 1.0 / tr, float(psi.evaluate(w[None, :])[0]) / tr)

    def to_dict(self) -> dict:
        return {"abar": self.abar.tolist(), "bbar": self.bbar, "psibar": self.psibar,
                "se": {"abar": list(map(float, self.se["abar"])), "bbar": float(self.se["bbar"]),
                       "psibar": float(self.se["psibar"])},
                "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "EffectiveCoefficients":
        return cls(np.asarray(data["abar"], dtype=float), float(data["bbar"]), float(data["psibar"]),
                   dict(data.get("se", {})), dict(data.get("provenance", {})))


def estimate_effective(law: EnvironmentLaw, psi: ObservableSpec, horizon: int, replicas: int,
                       walks_per_replica: int, seed: int, burn_fraction: float = BURN_FRACTION) -> EffectiveCoefficients:
    """Time averages of ``w / tr w``, ``1 / tr w`` and ``psi / tr w`` along walks.

    Replica ``r`` runs ``walks_per_replica`` walks from the origin in the
    environment with seed ``stream_seed(seed, 3, r)``.  The first
    ``burn_fraction`` of each path is discarded.  Standard errors are taken
    across replicas (across walks when there is a single replica).
    """
    if horizon < 1 or replicas < 1 or walks_per_replica < 1:
        raise ConfigurationError("horizon, replicas and walks_per_replica must be positive")
    d = law.dimension
    burn = int(math.floor(burn_fraction * horizon))
    if burn >= horizon:
        raise ConfigurationError("burn-in consumes the whole horizon")
    obs = [ObservableSpec("coord_ratio", i + 1) for i in range(d)]
    obs += [ObservableSpec("inv_trace"), ObservableSpec("psi_over_trace", inner=psi)]
    per_walk = []
    for r in range(replicas):
        sample = implicit_horizon_walks(law, stream_seed(seed, STREAM_ENVIRONMENT, r), np.zeros(d, dtype=np.int64),
                                        horizon, walks_per_replica, stream_seed(seed, STREAM_WALK, r), obs, burn=burn)
        per_walk.append(sample.sums / (horizon - burn))
    per_walk = np.stack(per_walk)  # (replicas, walks, observables)
    units = per_walk.mean(axis=1) if replicas > 1 else per_walk[0]
    mean = units.mean(axis=0)
    se = units.std(axis=0, ddof=1) / math.sqrt(units.shape[0]) if units.shape[0] > 1 else np.zeros(units.shape[1])
    abar = mean[:d]
    if d == 1:
        abar = np.ones(1)
        se[:1] = 0.0
    if abs(abar.sum() - 1.0) > 1e-12:
        raise ArithmeticError(f"trace identity violated: sum(abar) = {abar.sum()!r}")
    prov = {"law": law.as_dict(), "psi": str(psi), "horizon": int(horizon), "burn": burn,
            "replicas": int(replicas), "walks_per_replica": int(walks_per_replica), "seed": int(seed)}
    return EffectiveCoefficients(abar, float(mean[d]), float(mean[d + 1]),
                                 {"abar": se[:d].tolist(), "bbar": float(se[d]), "psibar": float(se[d + 1])}, prov)


def estimate_mean(law: EnvironmentLaw, psi: ObservableSpec, horizon: int, replicas: int,
                  walks_per_replica: int, seed: int, burn_fraction: float = BURN_FRACTION) -> tuple[float, float]:
    """Long-run average ``E[psi]`` under the invariant measure, with its standard error."""
    d = law.dimension
    burn = int(math.floor(burn_fraction * horizon))
    vals = []
    for r in range(replicas):
        s = implicit_horizon_walks(law, stream_seed(seed, STREAM_ENVIRONMENT, r), np.zeros(d, dtype=np.int64),
                                   horizon, walks_per_replica, stream_seed(seed, STREAM_WALK, r), [psi], burn=burn)
        vals.append(s.sums[:, 0] / (horizon - burn))
    vals = np.concatenate(vals)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


# ----------------------------------------------------------------------- the grid


@dataclass
class ContinuumGrid:
    """Grid nodes ``h k`` strictly inside the unit ball and their stencil arms.

    ``neighbors[k, 2i]`` / ``[k, 2i+1]`` index the node at ``+h e_i`` / ``-h e_i``
    or are -1 when that arm is cut by the sphere; ``arms`` holds the arm
    lengths and ``boundary_points`` the cut points on the sphere.
    """

    h: float
    dimension: int
    half: int
    nodes: np.ndarray  # integer multi-indices, (n, d)
    neighbors: np.ndarray
    arms: np.ndarray
    boundary_points: np.ndarray  # (n, 2d, d), NaN where the arm is regular
    lookup: np.ndarray  # full grid (2 half + 1)^d -> node index or -1

    @property
    def points(self) -> np.ndarray:
        return self.nodes * self.h

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def near_boundary(self) -> np.ndarray:
        return np.any(self.neighbors < 0, axis=1)


def _inside_unit(k: np.ndarray, h: float) -> np.ndarray:
    inv = 1.0 / h
    m = round(inv)
    norm2 = (k.astype(np.int64) ** 2).sum(axis=-1)
    if abs(inv - m) < 1e-9 * inv:
        return norm2 < m * m
    return norm2 * h * h < 1.0


def build_grid(h: float, dimension: int) -> ContinuumGrid:
    if not 0.0 < h <= 0.1:
        raise ConfigurationError(f"grid spacing must lie in (0, 0.1], got {h}")
    d = dimension
    half = int(math.ceil(1.0 / h)) + 1
    axes = [np.arange(-half, half + 1)] * d
    full = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    inside = _inside_unit(full, h)
    nodes = full[inside]
    lookup = np.full(full.shape[0], -1, dtype=np.int64)
    lookup[inside] = np.arange(nodes.shape[0])
    shape = (2 * half + 1,) * d

    def flat(k):
        return np.ravel_multi_index(tuple((k + half).T), shape)

    n = nodes.shape[0]
    nbr = np.empty((n, 2 * d), dtype=np.int64)
    arms = np.full((n, 2 * d), h)
    bpts = np.full((n, 2 * d, d), np.nan)
    x = nodes * h
    r2 = (x ** 2).sum(axis=1)
    for i in range(d):
        for s, sign in ((0, 1), (1, -1)):
            col = 2 * i + s
            k = nodes.copy()
            k[:, i] += sign
            idx = lookup[flat(k)]
            nbr[:, col] = idx
            cut = idx < 0
            xi = x[cut, i]
            arm = -sign * xi + np.sqrt(xi ** 2 + 1.0 - r2[cut])
            arms[cut, col] = np.minimum(arm, h)
            p = x[cut].copy()
            p[:, i] += sign * arms[cut, col]
            bpts[cut, col] = p / np.linalg.norm(p, axis=1, keepdims=True)
    return ContinuumGrid(h, d, half, nodes, nbr, arms, bpts, lookup)


def _stencil(grid: ContinuumGrid, abar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shortley-Weller weights: ``1/2 sum_i abar_i D_i^2 u = sum_j c_j u_j - c0 u``."""
    d = grid.dimension
    coef = np.empty_like(grid.arms)
    for i in range(d):
        hp, hm = grid.arms[:, 2 * i], grid.arms[:, 2 * i + 1]
        coef[:, 2 * i] = abar[i] / (hp * (hp + hm))
        coef[:, 2 * i + 1] = abar[i] / (hm * (hp + hm))
    return coef, coef.sum(axis=1)


@nb.njit(cache=True)
def _sor(u, nbr, coef, c0, bval, rhs, tol, max_iters, omega):
    n, m = nbr.shape
    it = 0
    res = np.inf
    while it < max_iters:
        res = 0.0
        for k in range(n):
            s = 0.0
            for j in range(m):
                idx = nbr[k, j]
                s += coef[k, j] * (u[idx] if idx >= 0 else bval[k, j])
            new = (s - rhs[k]) / c0[k]
            r = abs(new - u[k])
            if r > res:
                res = r
            u[k] += omega * (new - u[k])
        it += 1
        if res <= tol:
            break
    # true residual of the final iterate
    res = 0.0
    for k in range(n):
        s = 0.0
        for j in range(m):
            idx = nbr[k, j]
            s += coef[k, j] * (u[idx] if idx >= 0 else bval[k, j])
        r = abs((s - rhs[k]) / c0[k] - u[k])
        if r > res:
            res = r
    return it, res


@dataclass
class ContinuumSolution:
    """Grid values of a limit-equation solution.

    ``values`` has shape ``(n_nodes,)`` for the elliptic problem and
    ``(n_times, n_nodes)`` for the parabolic one, with ``times`` ascending in
    ``[0, 1]``.  ``boundary`` records how the sphere was treated.
    """

    grid: ContinuumGrid
    values: np.ndarray
    g: object = field(repr=False)
    times: np.ndarray | None = None
    boundary: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def parabolic(self) -> bool:
        return self.times is not None

    def _boundary_values(self, xi: np.ndarray, t: float | None) -> np.ndarray:
        return np.asarray(self.g(xi) if t is None else self.g(xi, np.full(xi.shape[0], t)), dtype=float)

    def full_grid(self, level: int | None = None) -> np.ndarray:
        """Values on the whole square grid, NaN at nodes outside the ball."""
        grid = self.grid
        u = self.values if level is None else self.values[level]
        full = np.full(grid.lookup.shape[0], np.nan)
        inside = grid.lookup >= 0
        full[inside] = u[grid.lookup[inside]]
        return full.reshape((2 * grid.half + 1,) * grid.dimension)

    def _local_fit(self, q: np.ndarray, full: np.ndarray, t: float | None) -> float:
        """Least-squares quadratic through grid values and boundary data near ``q``.

        Uses interior nodes within ``2.5 h`` of ``q`` and the sphere cut points
        of their stencil arms; exact whenever the solution is a quadratic.
        """
        grid = self.grid
        d = grid.dimension
        h = grid.h
        centre = np.round(q / h).astype(np.int64)
        offsets = np.stack([m.ravel() for m in np.meshgrid(*[np.arange(-3, 4)] * d, indexing="ij")], axis=-1)
        k = centre + offsets
        ok = np.all(np.abs(k) <= grid.half, axis=1)
        k = k[ok]
        vals = full[tuple((k + grid.half).T)]
        idx = grid.lookup[np.ravel_multi_index(tuple((k + grid.half).T), full.shape)]
        near = (idx >= 0) & (np.linalg.norm(k * h - q, axis=1) <= 2.5 * h)
        pts = [k[near] * h]
        data = [vals[near]]
        nodes = idx[near]
        cut = grid.neighbors[nodes] < 0
        if cut.any():
            bp = grid.boundary_points[nodes][cut]
            pts.append(bp)
            data.append(self._boundary_values(bp, t))
        pts = np.concatenate(pts)
        data = np.concatenate(data)
        z = (pts - q) / h
        cols = [np.ones(len(z))] + [z[:, i] for i in range(d)]
        cols += [z[:, i] * z[:, j] for i in range(d) for j in range(i, d)]
        coef, *_ = np.linalg.lstsq(np.stack(cols, axis=1), data, rcond=None)
        return float(coef[0])

    def _interpolate(self, full: np.ndarray, x: np.ndarray, t: float | None = None) -> np.ndarray:
        grid = self.grid
        d = grid.dimension
        s = x / grid.h + grid.half
        base = np.clip(np.floor(s).astype(np.int64), 0, 2 * grid.half - 1)
        frac = s - base
        out = np.zeros(x.shape[0])
        for corner in range(1 << d):
            idx = []
            weight = np.ones(x.shape[0])
            for j in range(d):
                bit = (corner >> j) & 1
                idx.append(base[:, j] + bit)
                weight = weight * (frac[:, j] if bit else 1.0 - frac[:, j])
            out += weight * full[tuple(idx)]
        for k in np.flatnonzero(~np.isfinite(out)):
            out[k] = self._local_fit(x[k], full, t)
        return out

    def evaluate(self, x, t=None, return_flags: bool = False):
        """Interpolate at points of the closed ball (and times in ``[0, 1]``).

        Grid cells inside the ball use multilinear interpolation; cells cut by
        the sphere use a local quadratic fit to nearby nodes and boundary
        data.  Points outside the ball are moved radially onto the sphere and
        times are clamped to ``[0, 1]``; ``return_flags`` also returns which
        queries were clamped.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.grid.dimension:
            raise DomainError(f"query dimension {x.shape[1]} != grid dimension {self.grid.dimension}")
        norm = np.linalg.norm(x, axis=1)
        clamped = norm > 1.0
        if clamped.any():
            x = x.copy()
            x[clamped] /= norm[clamped, None]
        if not self.parabolic:
            out = self._interpolate(self.full_grid(), x)
            return (out, clamped) if return_flags else out
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        tc = np.clip(t, 0.0, 1.0)
        clamped = clamped | (tc != t)
        pos = np.clip(np.searchsorted(self.times, tc, side="right") - 1, 0, len(self.times) - 2)
        out = np.empty(x.shape[0])
        order = np.argsort(pos, kind="stable")
        levels, starts = np.unique(pos[order], return_index=True)
        for level, sel in zip(levels, np.split(order, starts[1:])):
            lo = self._interpolate(self.full_grid(level), x[sel], float(self.times[level]))
            hi = self._interpolate(self.full_grid(level + 1), x[sel], float(self.times[level + 1]))
            w = (tc[sel] - self.times[level]) / (self.times[level + 1] - self.times[level])
            out[sel] = (1.0 - w) * lo + w * hi
        return (out, clamped) if return_flags else out

    def dump_csv(self, path) -> None:
        d = self.grid.dimension
        pts = self.grid.points
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            if not self.parabolic:
                out.writerow([f"x{j + 1}" for j in range(d)] + ["value"])
                for p, v in zip(pts, self.values):
                    out.writerow([*map(repr, p.tolist()), repr(float(v))])
            else:
                out.writerow([f"x{j + 1}" for j in range(d)] + ["t", "value"])
                for level, t in enumerate(self.times):
                    for p, v in zip(pts, self.values[level]):
                        out.writerow([*map(repr, p.tolist()), repr(float(t)), repr(float(v))])


def _check_abar(coeffs: EffectiveCoefficients, d: int | None = None) -> np.ndarray:
    abar = np.asarray(coeffs.abar, dtype=float)
    if not np.all(abar > 0):
        raise ConfigurationError("abar must be positive")
    if d is not None and abar.size != d:
        raise ConfigurationError(f"abar has {abar.size} entries for dimension {d}")
    return abar


def sor_factor(h: float) -> float:
    """Relaxation factor ``2 / (1 + sin(pi h / 2))`` of the model problem on a domain of width 2."""
    return 2.0 / (1.0 + math.sin(math.pi * h / 2.0))


def solve_effective_elliptic(coeffs: EffectiveCoefficients, f, g, h: float = 1.0 / 64,
                             tol: float = CONTINUUM_TOL, max_iters: int = CONTINUUM_MAX_ITERS,
                             omega: float | None = None) -> ContinuumSolution:
    """``1/2 tr(abar D^2 u) = f psibar`` in the unit ball with ``u = g`` on the sphere.

    The discrete system is a convex-combination fixed point
    ``u = sum_j (c_j / c0) u_j - f psibar / c0``, relaxed by SOR sweeps until
    the fixed-point defect is at most ``tol``.
    """
    abar = _check_abar(coeffs)
    grid = build_grid(h, abar.size)
    coef, c0 = _stencil(grid, abar)
    pts = grid.points
    rhs = np.asarray(f(pts), dtype=float) * coeffs.psibar
    bval = np.zeros_like(coef)
    cut = grid.neighbors < 0
    if cut.any():
        bval[cut] = np.asarray(g(grid.boundary_points[cut]), dtype=float)
    u = np.zeros(grid.n)
    w = sor_factor(h) if omega is None else omega
    it, res = _sor(u, grid.neighbors, coef, c0, bval, rhs, float(tol), int(max_iters), float(w))
    if res > tol * 10:
        raise NonConvergenceError("continuum sweeps did not reach tolerance", res, it)
    meta = {"scheme": "shortley-weller", "near_boundary": int(grid.near_boundary.sum()), "iterations": int(it),
            "residual": float(res)}
    return ContinuumSolution(grid, u, g, None, meta)


@nb.njit(cache=True)
def _parabolic_steps(u, nbr, coef, c0, lam, stiff, bvals, rhs, first, stride, out):
    """Step ``u`` backward from level ``first + len(bvals) - 1`` down to level ``first``.

    ``bvals[j]`` and ``rhs[j]`` belong to time level ``first + j``.  Regular
    nodes step explicitly; nodes whose explicit weight ``1 - lam c0`` would be
    negative use the point-implicit update with new-time neighbour values.
    Levels divisible by ``stride`` are copied into ``out[level // stride]``.
    """
    n, m = nbr.shape
    new = np.empty(n)
    stiff_idx = np.flatnonzero(stiff)
    for j in range(bvals.shape[0] - 1, 0, -1):
        bo = bvals[j]
        bn = bvals[j - 1]
        for k in range(n):
            if stiff[k]:
                new[k] = u[k]
                continue
            acc = 0.0
            for c in range(m):
                idx = nbr[k, c]
                acc += coef[k, c] * (u[idx] if idx >= 0 else bo[k, c])
            new[k] = u[k] + lam * (acc - c0[k] * u[k] - rhs[j, k])
        for _ in range(200):
            change = 0.0
            scale = 1.0
            for k in stiff_idx:
                acc = 0.0
                for c in range(m):
                    idx = nbr[k, c]
                    acc += coef[k, c] * (new[idx] if idx >= 0 else bn[k, c])
                v = (u[k] + lam * (acc - rhs[j - 1, k])) / (1.0 + lam * c0[k])
                change = max(change, abs(v - new[k]))
                scale = max(scale, abs(v))
                new[k] = v
            if change <= 1e-15 * scale:
                break
        for k in range(n):
            u[k] = new[k]
        level = first + j - 1
        if level % stride == 0:
            out[level // stride] = u


def solve_effective_parabolic(coeffs: EffectiveCoefficients, f, g, h: float = 1.0 / 64,
                              dt: float | None = None, chunk: int = 256) -> ContinuumSolution:
    """``1/2 tr(abar D^2 u) + bbar d_t u = f psibar`` on ``B_1 x [0, 1)``, terminal data at ``t = 1``.

    ``u(t - dt) = u(t) + (dt / bbar) (1/2 tr(abar D_h^2 u(t)) - f psibar)``.
    The step must satisfy ``dt <= bbar h^2 / sum(abar)``, the monotonicity
    limit at regular nodes; the default is 0.9 of it.  The step is shrunk so
    that a whole number of steps covers the unit interval.  ``f(x, t)`` and
    ``g(xi, t)`` take arrays.
    """
    abar = _check_abar(coeffs)
    bbar = float(coeffs.bbar)
    if not bbar > 0:
        raise ConfigurationError("bbar must be positive")
    limit = bbar * h * h / abar.sum()
    if dt is None:
        dt = CFL_FACTOR * limit
    if dt > limit * (1.0 + 1e-12):
        raise ConfigurationError(f"time step {dt:g} violates the monotonicity bound {limit:g}")
    steps = int(math.ceil(1.0 / dt - 1e-9))
    stride = max(1, int(math.ceil(steps / (MAX_SNAPSHOTS - 1))))
    steps = stride * int(math.ceil(steps / stride))
    dt = 1.0 / steps
    grid = build_grid(h, abar.size)
    coef, c0 = _stencil(grid, abar)
    lam = dt / bbar
    stiff = 1.0 - lam * c0 < 0.0
    pts = grid.points
    cut = grid.neighbors < 0
    bp = grid.boundary_points[cut]

    def data(levels):
        bv = np.zeros((len(levels),) + coef.shape)
        rv = np.empty((len(levels), grid.n))
        for j, level in enumerate(levels):
            t = level / steps
            rv[j] = np.asarray(f(pts, np.full(grid.n, t)), dtype=float) * coeffs.psibar
            if cut.any():
                bv[j][cut] = np.asarray(g(bp, np.full(bp.shape[0], t)), dtype=float)
        return bv, rv

    out = np.empty((steps // stride + 1, grid.n))
    u = np.asarray(g(pts, np.ones(grid.n)), dtype=float).copy()
    out[-1] = u
    hi = steps
    while hi > 0:
        lo = max(0, hi - chunk)
        bv, rv = data(range(lo, hi + 1))
        _parabolic_steps(u, grid.neighbors, coef, c0, lam, stiff, bv, rv, lo, stride, out)
        hi = lo
    times = np.arange(0, steps + 1, stride) / steps
    meta = {"scheme": "shortley-weller", "dt": dt, "steps": steps, "stiff_nodes": int(stiff.sum()),
            "near_boundary": int(grid.near_boundary.sum())}
    return ContinuumSolution(grid, out, g, times, meta)


@dataclass
class ScaledSolution:
    """``x -> u(x / R)`` (and ``(x, n) -> u(x / R, n / R^2)``) on lattice points."""

    solution: ContinuumSolution
    R: float
    clamped: int = 0

    def __call__(self, x, n=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)) / self.R
        t = None if n is None else np.asarray(n, dtype=float) / (self.R * self.R)
        values, flags = self.solution.evaluate(x, t, return_flags=True)
        self.clamped = int(flags.sum())
        return values


def scale_to_lattice(solution: ContinuumSolution, R) -> ScaledSolution:
    return ScaledSolution(solution, float(R))
