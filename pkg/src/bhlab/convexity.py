"""Discrete subdifferentials, their volumes, and ABP-type inequality checks.

For ``u`` on ``B u dB`` and ``x`` in ``B`` the cell ``du(x; B)`` is the set of
slopes ``p`` with ``p . (y - x) <= u(y) - u(x)`` for every ``y`` in the
closure.  The constraints from the ``2d`` neighbours already confine ``p`` to
the box ``prod_i [u(x) - u(x - e_i), u(x + e_i) - u(x)]``, which is empty as
soon as a second difference is negative.  Volumes are then

* d = 1: the length of an interval intersection,
* d = 2: the shoelace area of the box clipped by every other half-plane,
* d = 3: hit-or-miss Monte Carlo inside the box, with a standard error.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.optimize

from . import rng
from .environment import Environment, ObservableSpec
from .errors import DomainError
from .lattice import LatticeDomain, LatticeField, SpaceTimeField, generator, triadic_cube
from .solver import DEFAULT_TOL, solve_corrector, expected_exit_time

MC_TARGET_REL = 0.01
MC_MAX_SAMPLES = 1 << 18
MC_BATCH = 4096


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _tolerance(u: np.ndarray) -> float:
    scale = float(np.max(np.abs(u))) if u.size else 0.0
    return 1e-12 * (1.0 + scale)


# ------------------------------------------------------------------ numba kernels


@nb.njit(cache=True)
def _clip(px, py, m, ax, ay, b, tol, qx, qy):
    """Sutherland-Hodgman step: keep the part of polygon ``p`` with ``a . z <= b``."""
    k = 0
    for i in range(m):
        j = i + 1 if i + 1 < m else 0
        si = ax * px[i] + ay * py[i] - b
        sj = ax * px[j] + ay * py[j] - b
        in_i = si <= tol
        in_j = sj <= tol
        if in_i:
            qx[k] = px[i]
            qy[k] = py[i]
            k += 1
        if in_i != in_j:
            t = si / (si - sj)
            t = min(max(t, 0.0), 1.0)
            qx[k] = px[i] + t * (px[j] - px[i])
            qy[k] = py[i] + t * (py[j] - py[i])
            k += 1
    return k


@nb.njit(cache=True)
def _polygon(lo0, hi0, lo1, hi1, ax, ay, b, tol):
    """Box ``[lo0, hi0] x [lo1, hi1]`` clipped by all half-planes; returns ``(xs, ys, count)``."""
    cap = 4 + ax.shape[0] + 1
    px = np.empty(cap)
    py = np.empty(cap)
    qx = np.empty(cap)
    qy = np.empty(cap)
    px[0], py[0] = lo0, lo1
    px[1], py[1] = hi0, lo1
    px[2], py[2] = hi0, hi1
    px[3], py[3] = lo0, hi1
    m = 4
    for c in range(ax.shape[0]):
        # skip constraints slack at every vertex
        worst = -np.inf
        for i in range(m):
            s = ax[c] * px[i] + ay[c] * py[i] - b[c]
            if s > worst:
                worst = s
        if worst <= tol:
            continue
        m = _clip(px, py, m, ax[c], ay[c], b[c], tol, qx, qy)
        px, qx = qx, px
        py, qy = qy, py
        if m == 0:
            break
    return px, py, m


@nb.njit(cache=True)
def _shoelace(px, py, m):
    s = 0.0
    for i in range(m):
        j = i + 1 if i + 1 < m else 0
        s += px[i] * py[j] - px[j] * py[i]
    return abs(s) * 0.5


@nb.njit(cache=True)
def _box_from_neighbors(xc, coords, b, d):
    """Neighbour box ``[lo, hi]`` from constraints with ``a = +-e_i``; NaN-free by construction."""
    lo = np.full(d, -np.inf)
    hi = np.full(d, np.inf)
    for k in range(coords.shape[0]):
        dist = 0
        axis = -1
        sign = 0
        for j in range(d):
            diff = coords[k, j] - xc[j]
            if diff != 0:
                dist += abs(diff)
                axis = j
                sign = diff
        if dist == 1:
            if sign > 0:
                hi[axis] = min(hi[axis], b[k])
            else:
                lo[axis] = max(lo[axis], -b[k])
    return lo, hi


@nb.njit(cache=True)
def _cell_volume_1d(xc, coords, b, tol):
    lo = -np.inf
    hi = np.inf
    for k in range(coords.shape[0]):
        a = coords[k, 0] - xc[0]
        if a > 0:
            hi = min(hi, b[k] / a)
        elif a < 0:
            lo = max(lo, b[k] / a)
        elif b[k] < -tol:
            return 0.0, True
    if lo > hi + tol:
        return 0.0, True
    return max(hi - lo, 0.0), False


@nb.njit(cache=True)
def _cell_volume_2d(xc, coords, b, tol):
    lo, hi = _box_from_neighbors(xc, coords, b, 2)
    for j in range(2):
        if lo[j] > hi[j] + tol or not np.isfinite(lo[j]) or not np.isfinite(hi[j]):
            return 0.0, lo[j] > hi[j] + tol
    n = coords.shape[0]
    ax = np.empty(n)
    ay = np.empty(n)
    bb = np.empty(n)
    m = 0
    for k in range(n):
        a0 = coords[k, 0] - xc[0]
        a1 = coords[k, 1] - xc[1]
        if a0 == 0 and a1 == 0:
            if b[k] < -tol:
                return 0.0, True
            continue
        if abs(a0) + abs(a1) == 1:
            continue
        ax[m] = a0
        ay[m] = a1
        bb[m] = b[k]
        m += 1
    px, py, cnt = _polygon(lo[0], hi[0], lo[1], hi[1], ax[:m], ay[:m], bb[:m], tol)
    if cnt == 0:
        return 0.0, True
    return _shoelace(px, py, cnt), False


@nb.njit(cache=True)
def _cell_volume_mc(xc, coords, b, tol, seed, cell, target, max_samples, batch):
    d = xc.shape[0]
    lo, hi = _box_from_neighbors(xc, coords, b, d)
    box = 1.0
    for j in range(d):
        if lo[j] > hi[j] + tol:
            return 0.0, 0.0, 1
        if not (np.isfinite(lo[j]) and np.isfinite(hi[j])):
            return np.nan, np.nan, -1
        box *= max(hi[j] - lo[j], 0.0)
    # prune constraints that hold on the whole box
    n = coords.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    for k in range(n):
        worst = -b[k]
        for j in range(d):
            a = coords[k, j] - xc[j]
            worst += max(a * lo[j], a * hi[j])
        keep[k] = worst > tol
    if box == 0.0:
        return 0.0, 0.0, 0
    hits = 0
    total = 0
    p = np.empty(d)
    while total < max_samples:
        for s in range(batch):
            for j in range(d):
                u = rng.to_unit(rng.hash2(seed, cell, (total + s) * d + j))
                p[j] = lo[j] + (hi[j] - lo[j]) * u
            ok = True
            for k in range(n):
                if keep[k]:
                    dot = 0.0
                    for j in range(d):
                        dot += (coords[k, j] - xc[j]) * p[j]
                    if dot > b[k] + tol:
                        ok = False
                        break
            if ok:
                hits += 1
        total += batch
        frac = hits / total
        if hits > 0 and math.sqrt((1.0 - frac) / (frac * total)) <= target:
            break
    frac = hits / total
    se = box * math.sqrt(frac * (1.0 - frac) / total)
    return box * frac, se, 0 if hits > 0 else 2


@nb.njit(cache=True)
def _all_volumes(coords, u, cells, tol, seed, target, max_samples, batch):
    d = coords.shape[1]
    n = cells.shape[0]
    vol = np.zeros(n)
    se = np.zeros(n)
    empty = np.zeros(n, dtype=np.bool_)
    unknown = np.zeros(n, dtype=np.bool_)
    b = np.empty(u.shape[0])
    for c in range(n):
        x = cells[c]
        for k in range(u.shape[0]):
            b[k] = u[k] - u[x]
        if d == 1:
            vol[c], empty[c] = _cell_volume_1d(coords[x], coords, b, tol)
        elif d == 2:
            vol[c], empty[c] = _cell_volume_2d(coords[x], coords, b, tol)
        else:
            v, s, flag = _cell_volume_mc(coords[x], coords, b, tol, seed, x, target, max_samples, batch)
            vol[c] = v
            se[c] = s
            empty[c] = flag == 1
            unknown[c] = flag == 2
    return vol, se, empty, unknown


# ------------------------------------------------------------------------- cells


@dataclass
class SubdifferentialCell:
    """``{p : p . a_k <= b_k for all k}`` with its volume.

    ``vertices`` holds the clipped polygon for d = 2 and the interval end
    points for d = 1.
    """

    site: tuple
    normals: np.ndarray = field(repr=False)
    bounds: np.ndarray = field(repr=False)
    volume: float
    se: float = 0.0
    empty: bool = False
    vertices: np.ndarray | None = field(default=None, repr=False)

    def contains(self, p, tol: float = 1e-12) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(self.normals @ p <= self.bounds + tol))

    def to_dict(self) -> dict:
        return {"site": list(self.site), "volume": self.volume, "se": self.se, "empty": self.empty}


def _closure_arrays(field: LatticeField, domain: LatticeDomain | None):
    dom = field.domain if domain is None else domain
    if dom is not field.domain:
        values = np.array([field[tuple(z)] for z in dom.closure])
    else:
        values = np.asarray(field.values, dtype=float)
    return dom, dom.closure.astype(np.float64), values


def _unknown_emptiness(normals, bounds, lo, hi) -> bool:
    """LP feasibility of the cell, for Monte Carlo cells that recorded no hit."""
    res = scipy.optimize.linprog(np.zeros(normals.shape[1]), A_ub=normals, b_ub=bounds,
                                 bounds=list(zip(lo, hi)), method="highs")
    return res.status == 2


def subdifferential(field: LatticeField, x, domain: LatticeDomain | None = None, seed: int = 0) -> SubdifferentialCell:
    """The cell ``du(x; B)`` over ``B = domain`` (default: the field's own domain)."""
    dom, coords, u = _closure_arrays(field, domain)
    x = tuple(int(v) for v in x)
    if not dom.is_interior(x):
        raise DomainError(f"{x} is not an interior site of the domain")
    k = dom.index(x)
    a = coords - coords[k]
    b = u - u[k]
    mask = np.any(a != 0, axis=1)
    tol = _tolerance(u)
    d = dom.dimension
    cells = np.array([k], dtype=np.int64)
    vol, se, empty, unknown = _all_volumes(coords, u, cells, tol, np.uint64(seed), MC_TARGET_REL,
                                           MC_MAX_SAMPLES, MC_BATCH)
    verts = None
    if not empty[0]:
        if d == 1:
            up = b[mask][a[mask, 0] > 0] / a[mask][a[mask, 0] > 0, 0]
            dn = b[mask][a[mask, 0] < 0] / a[mask][a[mask, 0] < 0, 0]
            verts = np.array([dn.max(), up.min()])
        elif d == 2:
            lo, hi = _box_from_neighbors(coords[k], coords, b, 2)
            far = mask & (np.abs(a).sum(axis=1) != 1)
            px, py, m = _polygon(lo[0], hi[0], lo[1], hi[1], a[far, 0].copy(), a[far, 1].copy(),
                                 b[far].copy(), tol)
            verts = np.stack([px[:m], py[:m]], axis=-1)
        elif unknown[0]:
            lo, hi = _box_from_neighbors(coords[k], coords, b, d)
            empty[0] = _unknown_emptiness(a[mask], b[mask], lo, hi)
    return SubdifferentialCell(x, a[mask], b[mask], float(vol[0]), float(se[0]), bool(empty[0]), verts)


@dataclass
class CellVolumes:
    """Per-site cell volumes over a set of sites."""

    sites: np.ndarray
    volumes: np.ndarray
    se: np.ndarray
    empty: np.ndarray

    @property
    def total(self) -> float:
        return float(self.volumes.sum())

    @property
    def total_se(self) -> float:
        return float(np.sqrt((self.se ** 2).sum()))

    def dump_json(self, path) -> None:
        rows = [{"site": s.tolist(), "volume": float(v), "se": float(e), "empty": bool(m)}
                for s, v, e, m in zip(self.sites, self.volumes, self.se, self.empty)]
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1)


def cell_volumes(field: LatticeField, domain: LatticeDomain | None = None, sites=None, seed: int = 0) -> CellVolumes:
    """Volumes of ``du(x; B)`` for every interior ``x`` (or the given ``sites``)."""
    dom, coords, u = _closure_arrays(field, domain)
    idx = np.arange(dom.n_interior) if sites is None else dom.indices(sites)
    if np.any(idx >= dom.n_interior):
        raise DomainError("cells are only defined at interior sites")
    vol, se, empty, unknown = _all_volumes(coords, u, idx.astype(np.int64), _tolerance(u), np.uint64(seed),
                                           MC_TARGET_REL, MC_MAX_SAMPLES, MC_BATCH)
    for c in np.flatnonzero(unknown):
        k = idx[c]
        a = coords - coords[k]
        b = u - u[k]
        mask = np.any(a != 0, axis=1)
        lo, hi = _box_from_neighbors(coords[k], coords, b, dom.dimension)
        empty[c] = _unknown_emptiness(a[mask], b[mask], lo, hi)
    return CellVolumes(dom.closure[idx], vol, se, empty)


def subdifferential_volume(field: LatticeField, domain: LatticeDomain | None = None, subset=None, seed: int = 0) -> float:
    """``|du(A; B)|`` as the sum of per-site volumes (cells overlap in null sets only)."""
    return cell_volumes(field, domain, subset, seed).total


def ellipticity_box_violations(env: Environment, field: LatticeField, volumes: CellVolumes | None = None,
                         tol: float = 1e-9) -> list[tuple]:
    """Sites whose cell escapes the ellipticity box or is nonempty although ``L_w u <= 0``.

    After translating so that a member of the cell sits at the origin, the cell
    must lie in ``[-(L_w u)_+ / kappa, (L_w u)_+ / kappa]^d``; equivalently its
    extent along each axis is at most ``(L_w u)_+ / kappa``.  The volume bound
    ``(2 (L_w u)_+ / kappa)^d`` is checked as well.
    """
    dom = field.domain
    lu = generator(env, field)
    kappa = env.kappa
    vols = volumes if volumes is not None else cell_volumes(field)
    bad = []
    for k in range(dom.n_interior):
        x = tuple(dom.sites[k])
        cell = subdifferential(field, x)
        lp = max(lu[k], 0.0)
        scale = tol * (1.0 + abs(lu[k]) / kappa)
        if cell.empty:
            continue
        if lu[k] <= 0.0 and cell.volume > scale:
            bad.append(x)
            continue
        if vols.volumes[k] > (2.0 * lp / kappa) ** dom.dimension + scale + 3.0 * vols.se[k]:
            bad.append(x)
            continue
        if cell.vertices is not None:
            verts = np.atleast_2d(cell.vertices.reshape(len(cell.vertices), -1))
            extent = verts.max(axis=0) - verts.min(axis=0)
        else:
            lo, hi = _box_from_neighbors(dom.closure[k].astype(float), dom.closure.astype(float),
                                         field.values - field.values[k], dom.dimension)
            extent = hi - lo
        if np.any(extent > lp / kappa + scale):
            bad.append(x)
    return bad


def has_supporting_plane(field: LatticeField, x) -> bool:
    """Whether an affine function touches ``u`` from below at ``x`` over the closure (LP)."""
    dom = field.domain
    k = dom.index(x)
    a = dom.closure - dom.closure[k]
    b = field.values - field.values[k]
    mask = np.any(a != 0, axis=1)
    res = scipy.optimize.linprog(np.zeros(dom.dimension), A_ub=a[mask].astype(float), b_ub=b[mask],
                                 bounds=[(None, None)] * dom.dimension, method="highs")
    return res.status == 0


# --------------------------------------------------------------------------- ABP


@dataclass
class ABPReport:
    M: float
    rhs: float
    volume: float
    diameter: float
    holds: bool
    volume_se: float = 0.0

    def to_dict(self) -> dict:
        return {"M": self.M, "rhs": self.rhs, "volume": self.volume, "volume_se": self.volume_se,
                "diameter": self.diameter, "holds": self.holds}


def abp_check(field: LatticeField, tol: float = 1e-9) -> ABPReport:
    """``M = min_dB u - min_B u`` against ``diam(B u dB) (|du(B)| / v_d)^(1/d)``.

    If ``M > 0`` every slope of norm below ``M / diam`` is attained by a
    supporting plane at an interior minimiser, so ``du(B)`` contains that
    ball.  For d = 3 the volume is taken at its upper 3-SE value.
    """
    dom = field.domain
    d = dom.dimension
    M = float(field.on_boundary.min() - field.interior.min())
    vols = cell_volumes(field)
    vol = vols.total + 3.0 * vols.total_se
    diam = dom.diameter()
    rhs = diam * (vol / unit_ball_volume(d)) ** (1.0 / d)
    return ABPReport(M, rhs, vols.total, diam, bool(M <= rhs + tol * (1.0 + abs(M))), vols.total_se)


# --------------------------------------------------------------------- parabolic


@nb.njit(cache=True)
def _parabolic_volumes(coords, u, valid, n_int, levels, tol):
    """Per-point ``(u(x, n+1) - u(x, n))_+ |du(x, n; K)|`` over interior points, d <= 2.

    ``u`` and ``valid`` have shape ``(levels + 1, n_closure)``.
    """
    n_clo = coords.shape[0]
    d = coords.shape[1]
    future = np.full((levels + 1, n_clo), np.inf)
    for n in range(levels - 1, -1, -1):
        for k in range(n_clo):
            v = future[n + 1, k]
            if valid[n + 1, k] and u[n + 1, k] < v:
                v = u[n + 1, k]
            future[n, k] = v
    out = np.zeros((levels, n_int))
    cells = np.zeros((levels, n_int))
    b = np.empty(n_clo)
    for n in range(levels):
        for x in range(n_int):
            dt = u[n + 1, x] - u[n, x]
            for k in range(n_clo):
                b[k] = future[n, k] - u[n, x]
            if d == 1:
                vol, empty = _cell_volume_1d(coords[x], coords, b, tol)
            else:
                vol, empty = _cell_volume_2d(coords[x], coords, b, tol)
            if not empty:
                cells[n, x] = vol
                out[n, x] = max(dt, 0.0) * vol
    return out, cells


def parabolic_volumes(field: SpaceTimeField) -> tuple[np.ndarray, np.ndarray]:
    """``(|Du(x, n)|, |du(x, n; K)|)`` for every interior point, shape ``(levels, n_interior)``."""
    dom = field.domain
    space = dom.space
    if space.dimension > 2:
        raise DomainError("parabolic cell volumes are implemented for d <= 2")
    vals = np.where(np.isfinite(field.values), field.values, 0.0)
    return _parabolic_volumes(space.closure.astype(np.float64), vals, dom.valid_mask(), space.n_interior,
                              dom.levels, _tolerance(vals))


def parabolic_cell_volume(field: SpaceTimeField, x, n) -> float:
    """``|Du(x, n)| = (u(x, n+1) - u(x, n))_+ |du(x, n; K_R)|``."""
    dom = field.domain
    if not (0 <= n < dom.levels and dom.space.is_interior(tuple(x))):
        raise DomainError(f"({tuple(x)}, {n}) is not an interior point of the cylinder")
    vols, _ = parabolic_volumes(field)
    return float(vols[n, dom.space.index(tuple(x))])


def parabolic_abp_constant(d: int) -> float:
    """``C`` with ``|Lambda| = M^(d+1) R^-d / C^(d+1)`` for the cone ``R|xi| < h < M/2``."""
    return (unit_ball_volume(d) / (2.0 ** (d + 1) * (d + 1))) ** (-1.0 / (d + 1))


@dataclass
class ParabolicABPReport:
    M: float
    rhs: float
    mass: float
    constant: float
    holds: bool

    def to_dict(self) -> dict:
        return {"M": self.M, "rhs": self.rhs, "mass": self.mass, "constant": self.constant, "holds": self.holds}


def parabolic_abp_check(field: SpaceTimeField, tol: float = 1e-9) -> ParabolicABPReport:
    """``min_{dK} u <= min_K u + C R^(d/(d+1)) (sum |Du|)^(1/(d+1))``."""
    dom = field.domain
    d = dom.space.dimension
    ni = dom.space.n_interior
    vals = field.values
    interior_min = float(vals[:-1, :ni].min())
    lateral = vals[1:, ni:]
    boundary_min = float(min(lateral.min() if lateral.size else np.inf, vals[-1, :ni].min()))
    M = boundary_min - interior_min
    mass = float(parabolic_volumes(field)[0].sum())
    c = parabolic_abp_constant(d)
    rhs = c * float(dom.radius) ** (d / (d + 1)) * mass ** (1.0 / (d + 1))
    return ParabolicABPReport(M, rhs, mass, c, bool(M <= rhs + tol * (1.0 + abs(M))))


# --------------------------------------------------------------------------- mu


@dataclass
class MuEstimate:
    n: int
    s: float
    mu_hat: float
    mu_hat_star: float
    se: float = 0.0
    se_star: float = 0.0

    def bound(self, psi_sup: float, kappa: float, d: int) -> float:
        """``2^d ((2 |psi|_inf + s)_+ / kappa)^d``."""
        return 2.0 ** d * (max(2.0 * psi_sup + self.s, 0.0) / kappa) ** d

    def row(self) -> list:
        return [self.n, self.s, self.mu_hat, self.mu_hat_star]


def canonical_solutions(env: Environment, n: int, s: float, psi: ObservableSpec, mean: float,
                        center=None, tol: float = DEFAULT_TOL) -> tuple[LatticeField, LatticeField]:
    """``u_n = phi_n - s E[tau]`` and ``u*_n = -phi_n - s E[tau]`` on ``Q_n`` with zero boundary.

    ``L_w u_n = psi - mean + s`` and ``L_w u*_n = -(psi - mean) + s``.
    """
    cube = triadic_cube(n, env.dimension, center)
    phi = solve_corrector(env, cube, psi, mean, tol=tol)
    tau = expected_exit_time(env, cube, tol=tol)
    u = LatticeField(cube, phi.values - s * tau.values)
    u_star = LatticeField(cube, -phi.values - s * tau.values)
    return u, u_star


def mu_hat(env: Environment, n: int, s: float, psi: ObservableSpec, mean: float, center=None,
           seed: int = 0) -> MuEstimate:
    """Normalised subdifferential mass of the canonical exact solutions on ``Q_n``.

    This is one member of the super-solution family, so it bounds the
    supremal quantity from below.
    """
    if n < 1:
        raise DomainError("mu_hat needs n >= 1")
    u, u_star = canonical_solutions(env, n, s, psi, mean, center)
    count = u.domain.n_interior
    a = cell_volumes(u, seed=seed)
    b = cell_volumes(u_star, seed=seed)
    return MuEstimate(n, float(s), a.total / count, b.total / count, a.total_se / count, b.total_se / count)


def dump_mu_csv(path, estimates) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["n", "s", "mu_hat", "mu_hat_star"])
        for e in estimates:
            out.writerow([e.n, repr(e.s), repr(e.mu_hat), repr(e.mu_hat_star)])
