"""Lattice domains, fields on them, and the discrete operators.

Domains store an explicit, lexicographically sorted list of interior sites
followed by their discrete boundary; a field is a flat array over that
closure.  ``neighbors[k, 2*i]`` and ``neighbors[k, 2*i + 1]`` give the closure
indices of ``x_k + e_i`` and ``x_k - e_i``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .environment import Environment
from .errors import ConfigurationError, DomainError


def exact_square(R) -> Fraction:
    """``R**2`` as an exact rational.

    Integers and ``Fraction`` inputs are exact.  Floats are treated as their
    exact binary value, except that a square within a few ulps of an integer
    snaps to that integer (``sqrt(2)**2 -> 2``).
    """
    if isinstance(R, (int, np.integer)):
        return Fraction(int(R)) ** 2
    if isinstance(R, Fraction):
        return R * R
    r2 = Fraction(float(R)) ** 2
    k = round(r2)
    if k and abs(r2 - k) <= 4 * math.ulp(float(k)):
        return Fraction(k)
    return r2


def time_extent(R) -> int:
    """``ceil(R^2)``, the number of time levels of the cylinder ``K_R``."""
    return math.ceil(exact_square(R))


def _unit_vectors(d: int) -> np.ndarray:
    return np.eye(d, dtype=np.int64)


def _sorted_unique(sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, sites.shape[-1] if np.ndim(sites) > 1 else 1)
    return np.unique(sites, axis=0)


@dataclass(eq=False)
class LatticeDomain:
    """A finite site set ``B`` together with its discrete boundary."""

    kind: str
    sites: np.ndarray
    boundary: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sites = np.ascontiguousarray(self.sites, dtype=np.int64)
        self.boundary = np.ascontiguousarray(self.boundary, dtype=np.int64)
        self.closure = np.vstack([self.sites, self.boundary])
        d = self.dimension
        self._lo = self.closure.min(axis=0)
        shape = self.closure.max(axis=0) - self._lo + 1
        self._grid = np.full(tuple(shape), -1, dtype=np.int64)
        self._grid[tuple((self.closure - self._lo).T)] = np.arange(len(self.closure))
        nbr = np.empty((len(self.sites), 2 * d), dtype=np.int64)
        for i, e in enumerate(_unit_vectors(d)):
            nbr[:, 2 * i] = self._lookup(self.sites + e)
            nbr[:, 2 * i + 1] = self._lookup(self.sites - e)
        self.neighbors = nbr
        for a in (self.sites, self.boundary, self.closure, self.neighbors):
            a.setflags(write=False)

    @classmethod
    def from_sites(cls, sites, kind: str = "sites", **params) -> "LatticeDomain":
        """Domain with the given interior and its discrete boundary."""
        sites = np.asarray(sites, dtype=np.int64)
        if sites.ndim == 1:
            sites = sites[:, None]
        interior = _sorted_unique(sites)
        if len(interior) == 0:
            raise ConfigurationError("a domain needs at least one site")
        d = interior.shape[1]
        shifts = np.concatenate([_unit_vectors(d), -_unit_vectors(d)])
        cand = _sorted_unique((interior[:, None, :] + shifts[None, :, :]).reshape(-1, d))
        inside = _member(cand, interior)
        return cls(kind, interior, cand[~inside], dict(params))

    # -- lookups
    @property
    def dimension(self) -> int:
        return self.sites.shape[1]

    @property
    def n_interior(self) -> int:
        return len(self.sites)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary)

    @property
    def n_closure(self) -> int:
        return len(self.closure)

    def _lookup(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self._lo
        ok = np.all((rel >= 0) & (rel < np.array(self._grid.shape)), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        out[ok] = self._grid[tuple(rel[ok].T)]
        return out

    def index(self, x) -> int:
        """Closure index of site ``x``."""
        k = self._lookup(np.asarray(x, dtype=np.int64).reshape(1, -1))[0]
        if k < 0:
            raise DomainError(f"site {tuple(np.ravel(x))} is not in the closure of this domain")
        return int(k)

    def indices(self, pts) -> np.ndarray:
        k = self._lookup(np.asarray(pts, dtype=np.int64).reshape(-1, self.dimension))
        if np.any(k < 0):
            bad = np.asarray(pts).reshape(-1, self.dimension)[k < 0][0]
            raise DomainError(f"site {tuple(bad)} is not in the closure of this domain")
        return k

    def is_interior(self, x) -> bool:
        k = self._lookup(np.asarray(x, dtype=np.int64).reshape(1, -1))[0]
        return 0 <= k < self.n_interior

    def translated(self, shift) -> "LatticeDomain":
        shift = np.asarray(shift, dtype=np.int64)
        params = dict(self.params, center=tuple(np.asarray(self.params.get("center", (0,) * self.dimension)) + shift))
        return LatticeDomain(self.kind, self.sites + shift, self.boundary + shift, params)

    def diameter(self) -> float:
        """Euclidean diameter of the closure."""
        pts = self.closure.astype(float)
        if len(pts) > 64 and self.dimension > 1:
            from scipy.spatial import ConvexHull

            try:
                pts = pts[ConvexHull(pts).vertices]
            except Exception:  # degenerate (collinear) point sets
                pass
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1).max()))

    def is_connected(self) -> bool:
        """Nearest-neighbour connectivity of the interior."""
        seen = np.zeros(self.n_interior, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            k = stack.pop()
            for j in self.neighbors[k]:
                if j < self.n_interior and not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return bool(seen.all())


def _member(points: np.ndarray, sorted_set: np.ndarray) -> np.ndarray:
    """Row membership of ``points`` in ``sorted_set`` (both int arrays)."""
    lo = np.minimum(points.min(axis=0), sorted_set.min(axis=0))
    hi = np.maximum(points.max(axis=0), sorted_set.max(axis=0))
    shape = tuple(hi - lo + 1)
    keys_set = np.ravel_multi_index(tuple((sorted_set - lo).T), shape)
    keys = np.ravel_multi_index(tuple((points - lo).T), shape)
    return np.isin(keys, keys_set)


def _integer_cube(half: int, d: int) -> np.ndarray:
    axis = np.arange(-half, half + 1)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def ball(R, d: int, center=None) -> LatticeDomain:
    """``B_R = {x in Z^d : |x| < R}``, compared exactly on ``|x|^2`` vs ``R^2``."""
    if not R > 0:
        raise ConfigurationError("ball radius must be positive")
    r2 = exact_square(R)
    pts = _integer_cube(math.ceil(float(R)), d)
    norm2 = (pts ** 2).sum(axis=1)
    # integer n satisfies n < R^2 exactly when n < ceil(R^2)
    inside = norm2 < math.ceil(r2)
    dom = LatticeDomain.from_sites(pts[inside], "ball", radius=R)
    if center is not None:
        dom = dom.translated(center)
    return dom


def cube(side, d: int, center=None) -> LatticeDomain:
    """``box_r = {x : |x|_inf < r/2}`` (optionally shifted to ``center``)."""
    pts = _integer_cube(math.ceil(side / 2), d)
    pts = pts[np.all(2 * np.abs(pts) < side, axis=1)]
    dom = LatticeDomain.from_sites(pts, "cube", side=side)
    if center is not None:
        dom = dom.translated(center)
    return dom


def triadic_cube(n: int, d: int, center=None) -> LatticeDomain:
    """``Q_n``: the cube of side ``3^n`` (``3^(n d)`` sites)."""
    if n < 0:
        raise ConfigurationError("triadic level must be >= 0")
    dom = cube(3 ** n, d, center)
    dom.kind = "triadic"
    dom.params["level"] = n
    return dom


def subcube_of(x, m: int) -> tuple:
    """Centre ``y in 3^m Z^d`` of the level-``m`` triadic cube containing ``x``."""
    side = 3 ** m
    half = (side - 1) // 2
    return tuple(int(side * ((int(v) + half) // side)) for v in np.ravel(x))


# ---------------------------------------------------------------------- space-time


@dataclass(eq=False)
class SpaceTimeDomain:
    """The cylinder ``K_R = B_R x {0, ..., N - 1}`` with ``N = ceil(R^2)``.

    Values live on ``(time level, closure index)``; the closure of the cylinder
    contains interior sites at levels ``0..N`` and spatial boundary sites at
    levels ``1..N``.
    """

    radius: object
    space: LatticeDomain
    levels: int

    @property
    def dimension(self) -> int:
        return self.space.dimension

    def valid_mask(self) -> np.ndarray:
        """Boolean ``(levels + 1, n_closure)`` mask of points of the closure."""
        mask = np.ones((self.levels + 1, self.space.n_closure), dtype=bool)
        mask[0, self.space.n_interior:] = False
        return mask

    def interior_points(self) -> list[tuple]:
        return [(tuple(x), n) for n in range(self.levels) for x in self.space.sites]

    def lateral_boundary(self) -> list[tuple]:
        return [(tuple(x), n) for n in range(1, self.levels + 1) for x in self.space.boundary]

    def time_boundary(self) -> list[tuple]:
        return [(tuple(x), self.levels) for x in self.space.sites]

    def parabolic_boundary(self) -> list[tuple]:
        return self.lateral_boundary() + self.time_boundary()

    def contains(self, x, n) -> bool:
        k = self.space._lookup(np.asarray(x, dtype=np.int64).reshape(1, -1))[0]
        if k < 0 or not 0 <= n <= self.levels:
            return False
        return k < self.space.n_interior or n >= 1


def cylinder(R, d: int) -> SpaceTimeDomain:
    if not R > 0:
        raise ConfigurationError("cylinder radius must be positive")
    return SpaceTimeDomain(R, ball(R, d), time_extent(R))


# -------------------------------------------------------------------------- fields


@dataclass(eq=False)
class LatticeField:
    """Real values on the closure of a domain, in the domain's canonical order."""

    domain: LatticeDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.domain.n_closure,):
            raise ConfigurationError(f"field has {self.values.shape} values, domain closure has {self.domain.n_closure}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("field values must be finite")

    @classmethod
    def from_function(cls, domain: LatticeDomain, fn) -> "LatticeField":
        """Evaluate ``fn`` on the ``(n, d)`` closure coordinate array."""
        return cls(domain, np.asarray(fn(domain.closure.astype(float)), dtype=float))

    def __getitem__(self, x) -> float:
        return float(self.values[self.domain.index(x)])

    @property
    def interior(self) -> np.ndarray:
        return self.values[: self.domain.n_interior]

    @property
    def on_boundary(self) -> np.ndarray:
        return self.values[self.domain.n_interior:]

    def dump_csv(self, path) -> None:
        d = self.domain.dimension
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["value"])
            for x, v in zip(self.domain.closure, self.values):
                w.writerow([*map(int, x), repr(float(v))])


@dataclass(eq=False)
class SpaceTimeField:
    """Values on the closure of a cylinder; entries outside it are NaN."""

    domain: SpaceTimeDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        shape = (self.domain.levels + 1, self.domain.space.n_closure)
        if self.values.shape != shape:
            raise ConfigurationError(f"space-time field needs shape {shape}, got {self.values.shape}")
        mask = self.domain.valid_mask()
        if not np.all(np.isfinite(self.values[mask])):
            raise ConfigurationError("space-time field values must be finite on the closure")
        self.values[~mask] = np.nan

    @classmethod
    def from_function(cls, domain: SpaceTimeDomain, fn) -> "SpaceTimeField":
        """``fn(x, n)`` is called with ``(m, d)`` coordinates and ``(m,)`` levels."""
        space = domain.space
        levels = np.arange(domain.levels + 1)
        x = np.broadcast_to(space.closure[None, :, :], (len(levels), space.n_closure, space.dimension))
        n = np.broadcast_to(levels[:, None], (len(levels), space.n_closure))
        vals = np.asarray(fn(x.reshape(-1, space.dimension).astype(float), n.ravel().astype(float)), dtype=float)
        vals = vals.reshape(len(levels), space.n_closure).copy()
        vals[~domain.valid_mask()] = 0.0
        return cls(domain, vals)

    def __getitem__(self, key) -> float:
        x, n = key
        if not self.domain.contains(x, n):
            raise DomainError(f"point {(tuple(np.ravel(x)), n)} is not in the closed cylinder")
        return float(self.values[n, self.domain.space.index(x)])

    def dump_csv(self, path) -> None:
        d = self.domain.dimension
        space = self.domain.space
        mask = self.domain.valid_mask()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["n", "value"])
            for n in range(self.domain.levels + 1):
                for k, x in enumerate(space.closure):
                    if mask[n, k]:
                        w.writerow([*map(int, x), n, repr(float(self.values[n, k]))])


# ----------------------------------------------------------------------- operators


def domain_weights(env: Environment, domain: LatticeDomain) -> np.ndarray:
    """Environment weights at the interior sites of ``domain``."""
    return env.weights_at(domain.sites)


def _second_differences(values: np.ndarray, domain: LatticeDomain) -> np.ndarray:
    """``u(x + e_i) + u(x - e_i) - 2 u(x)`` per interior site and coordinate."""
    nbr = domain.neighbors
    centre = values[..., : domain.n_interior]
    return values[..., nbr[:, 0::2]] + values[..., nbr[:, 1::2]] - 2.0 * centre[..., None]


def tr_hessian(env: Environment, field: LatticeField) -> np.ndarray:
    """``tr(w(x) grad^2 u)`` at every interior site."""
    w = domain_weights(env, field.domain)
    return (w * _second_differences(field.values, field.domain)).sum(axis=-1)


def generator(env: Environment, field: LatticeField) -> np.ndarray:
    """``L_w u(x) = sum_y w(x, y) [u(y) - u(x)]`` at every interior site."""
    w = domain_weights(env, field.domain)
    return (w * _second_differences(field.values, field.domain)).sum(axis=-1) / (2.0 * w.sum(axis=-1))


def _interior_index(field_domain: LatticeDomain, x) -> int:
    k = field_domain.index(x)
    if k >= field_domain.n_interior:
        raise DomainError(f"site {tuple(np.ravel(x))} is a boundary site; operators need an interior site")
    return k


def apply_tr_hessian(env: Environment, field: LatticeField, x) -> float:
    k = _interior_index(field.domain, x)
    w = env.weights_at([x])[0]
    u = field.values
    nbr = field.domain.neighbors[k]
    return float(sum(w[i] * (u[nbr[2 * i]] + u[nbr[2 * i + 1]] - 2.0 * u[k]) for i in range(len(w))))


def apply_L(env: Environment, field: LatticeField, x) -> float:
    w = env.weights_at([x])[0]
    return apply_tr_hessian(env, field, x) / (2.0 * w.sum())


def parabolic_raw(env: Environment, field: SpaceTimeField) -> np.ndarray:
    """``1/2 tr(w grad^2 u(x, n+1)) + u(x, n+1) - u(x, n)`` on the interior of ``K_R``.

    Returns an array of shape ``(levels, n_interior)``.
    """
    space = field.domain.space
    w = domain_weights(env, space)
    nxt = field.values[1:]
    lap = (w * _second_differences(nxt, space)).sum(axis=-1)
    ni = space.n_interior
    return 0.5 * lap + nxt[:, :ni] - field.values[:-1, :ni]


def apply_parabolic(env: Environment, field: SpaceTimeField, x, n) -> tuple[float, float]:
    """Raw parabolic operator at ``(x, n)`` and its normalisation by ``1 + tr w(x)``."""
    space = field.domain.space
    k = _interior_index(space, x)
    if not 0 <= n < field.domain.levels:
        raise DomainError(f"time level {n} is not interior to the cylinder (0..{field.domain.levels - 1})")
    w = env.weights_at([x])[0]
    u1 = field.values[n + 1]
    nbr = space.neighbors[k]
    lap = sum(w[i] * (u1[nbr[2 * i]] + u1[nbr[2 * i + 1]] - 2.0 * u1[k]) for i in range(len(w)))
    raw = float(0.5 * lap + u1[k] - field.values[n, k])
    return raw, raw / (1.0 + w.sum())


def sites_of(domain: LatticeDomain) -> Iterable[tuple]:
    return (tuple(map(int, x)) for x in domain.sites)
