"""Discrete Dirichlet problems for ``L_w`` and the parabolic operator.

Elliptic problems ``L_w u = r`` in ``B``, ``u = g`` on ``dB`` are solved by
Gauss-Seidel sweeps of the fixed point ``u(x) <- sum_y w(x, y) u(y) - r(x)``.
The sweep is a contraction because the walk killed on ``dB`` leaves every
finite domain, so it converges from any start.  A dense elimination solve of
the same linear system serves as an independent check on small domains.

The parabolic problem is solved exactly by one backward pass over the time
levels.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numba as nb
import numpy as np
import scipy.linalg

from .environment import Environment, ObservableSpec, jump_probabilities
from .errors import ConfigurationError, NonConvergenceError
from .lattice import (
    LatticeDomain,
    LatticeField,
    SpaceTimeDomain,
    SpaceTimeField,
    ball,
    cylinder,
    domain_weights,
    exact_square,
    parabolic_raw,
)

DEFAULT_TOL = 1e-11
DEFAULT_MAX_ITERS = 2_000_000
DIRECT_LIMIT = 4000


@dataclass
class SolveReport:
    iterations: int
    residual: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass(eq=False)
class EllipticProblem:
    """``L_w u = rhs`` on ``domain``, ``u = boundary`` on its discrete boundary.

    ``rhs`` is indexed like ``domain.sites`` and ``boundary`` like
    ``domain.boundary``.
    """

    env: Environment
    domain: LatticeDomain
    rhs: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        self.rhs = np.broadcast_to(np.asarray(self.rhs, dtype=float), (self.domain.n_interior,)).copy()
        self.boundary = np.broadcast_to(np.asarray(self.boundary, dtype=float), (self.domain.n_boundary,)).copy()
        if not (np.all(np.isfinite(self.rhs)) and np.all(np.isfinite(self.boundary))):
            raise ConfigurationError("right-hand side and boundary data must be finite")

    def probabilities(self) -> np.ndarray:
        return jump_probabilities(domain_weights(self.env, self.domain))

    def initial_field(self) -> np.ndarray:
        u = np.zeros(self.domain.n_closure)
        u[self.domain.n_interior:] = self.boundary
        return u


BOUNDARY_MAPS = ("radial", "extension")


def _check_map(boundary_map: str) -> None:
    if boundary_map not in BOUNDARY_MAPS:
        raise ConfigurationError(f"boundary_map must be one of {BOUNDARY_MAPS}, got {boundary_map!r}")


def dirichlet_problem(env: Environment, R, f, g, psi: ObservableSpec, domain: LatticeDomain | None = None,
                      boundary_map: str = "radial") -> EllipticProblem:
    """The scaled problem ``1/2 tr(w grad^2 u) = f(x/R) psi(x) / R^2`` in ``B_R``, ``u = g(x/|x|)`` outside.

    Dividing by ``tr w`` gives ``L_w u = f(x/R) psi(x) / (R^2 tr w(x))``.
    With ``boundary_map="extension"`` the boundary values are ``g(x/R)``
    instead, which needs ``g`` defined just outside the unit sphere (every
    catalog function is).  Affine ``g`` then gives an affine solution.
    """
    _check_map(boundary_map)
    dom = domain if domain is not None else ball(R, env.dimension)
    w = domain_weights(env, dom)
    x = dom.sites.astype(float)
    r2 = float(exact_square(R))
    rhs = np.asarray(f(x / float(R)), dtype=float) * psi.evaluate(w) / (r2 * w.sum(axis=-1))
    xb = dom.boundary.astype(float)
    scale = float(R) if boundary_map == "extension" else np.linalg.norm(xb, axis=1, keepdims=True)
    bnd = np.asarray(g(xb / scale), dtype=float)
    return EllipticProblem(env, dom, rhs, bnd)


# ------------------------------------------------------------------------ kernels


@nb.njit(cache=True)
def _residual(u, nbr, prob, rhs):
    n, m = nbr.shape
    worst = 0.0
    for k in range(n):
        s = 0.0
        for j in range(m):
            s += prob[k, j] * u[nbr[k, j]]
        r = abs(s - u[k] - rhs[k])
        if r > worst:
            worst = r
    return worst


@nb.njit(cache=True)
def _sweeps(u, nbr, prob, rhs, tol, max_iters, check_every, omega):
    n, m = nbr.shape
    it = 0
    res = _residual(u, nbr, prob, rhs)
    while res > tol and it < max_iters:
        for _ in range(check_every):
            for k in range(n):
                s = 0.0
                for j in range(m):
                    s += prob[k, j] * u[nbr[k, j]]
                u[k] += omega * (s - rhs[k] - u[k])
        it += check_every
        res = _residual(u, nbr, prob, rhs)
    return it, res


def solve_elliptic(problem: EllipticProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                   initial: np.ndarray | None = None, omega: float = 1.0) -> tuple[LatticeField, SolveReport]:
    """Sweep until ``max |L_w u - rhs| <= tol`` on the interior.

    ``omega = 1`` is plain Gauss-Seidel, the monotone fixed-point iteration;
    other values give SOR, which converges for ``0 < omega < 2`` but is not
    monotone.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    if not 0.0 < omega < 2.0:
        raise ConfigurationError("relaxation factor must lie in (0, 2)")
    t0 = time.perf_counter()
    dom = problem.domain
    u = problem.initial_field()
    if initial is not None:
        u[: dom.n_interior] = np.asarray(initial, dtype=float)[: dom.n_interior]
    prob = np.ascontiguousarray(problem.probabilities())
    check = int(max(1, min(64, dom.n_interior // 50 + 1)))
    it, res = _sweeps(u, dom.neighbors, prob, problem.rhs, float(tol), int(max_iters), check, float(omega))
    report = SolveReport(int(it), float(res), time.perf_counter() - t0)
    if res > tol:
        raise NonConvergenceError("elliptic sweeps did not reach tolerance", res, it)
    return LatticeField(dom, u), report


def tolerance_for_error(domain: LatticeDomain, error: float) -> float:
    """Residual tolerance that guarantees ``max |u - u_exact| <= error``.

    The iteration error ``e`` solves ``L_w e = r`` with zero boundary data, so
    ``|e| <= max|r| max_x E^x[tau]``.  Optional stopping of the martingale
    ``|X_t - c|^2 - t`` gives ``E^x[tau] <= max_{y in dB} |y - c|^2`` for any
    ``c``; the centre of the bounding box is used.
    """
    lo, hi = domain.closure.min(axis=0), domain.closure.max(axis=0)
    c = 0.5 * (lo + hi)
    reach = float(((domain.boundary - c) ** 2).sum(axis=1).max())
    return float(error) / max(reach, 1.0)


def dense_system(problem: EllipticProblem) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``A = I - P`` restricted to the interior and ``b = P_boundary g - rhs``."""
    dom = problem.domain
    n = dom.n_interior
    prob = problem.probabilities()
    a = np.eye(n)
    b = -problem.rhs.copy()
    rows = np.repeat(np.arange(n), prob.shape[1])
    cols = dom.neighbors.ravel()
    p = prob.ravel()
    inner = cols < n
    np.add.at(a, (rows[inner], cols[inner]), -p[inner])
    np.add.at(b, rows[~inner], p[~inner] * problem.boundary[cols[~inner] - n])
    return a, b


def solve_elliptic_direct(problem: EllipticProblem) -> LatticeField:
    """Dense LU solve of the same linear system (at most 4000 interior sites).

    After eliminating the boundary, ``I - P`` is a nonsingular M-matrix
    (weakly diagonally dominant and irreducibly connected to the boundary),
    so the factorisation always succeeds.
    """
    dom = problem.domain
    if dom.n_interior > DIRECT_LIMIT:
        raise ConfigurationError(f"direct solve refused: {dom.n_interior} sites exceeds {DIRECT_LIMIT}")
    a, b = dense_system(problem)
    u = problem.initial_field()
    u[: dom.n_interior] = scipy.linalg.solve(a, b)
    return LatticeField(dom, u)


def solve_corrector(env: Environment, domain: LatticeDomain, psi: ObservableSpec, mean: float,
                    tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS, omega: float = 1.0) -> LatticeField:
    """Corrector ``phi``: ``L_w phi = psi - mean`` in ``domain``, zero outside."""
    rhs = psi.evaluate(domain_weights(env, domain)) - mean
    field, _ = solve_elliptic(EllipticProblem(env, domain, rhs, 0.0), tol, max_iters, omega=omega)
    return field


def expected_exit_time(env: Environment, domain: LatticeDomain, tol: float = DEFAULT_TOL,
                       max_iters: int = DEFAULT_MAX_ITERS, omega: float = 1.0) -> LatticeField:
    """``t(x) = E^x[tau]``, the solution of ``L_w t = -1``, ``t = 0`` outside."""
    field, _ = solve_elliptic(EllipticProblem(env, domain, -1.0, 0.0), tol, max_iters, omega=omega)
    return field


# ---------------------------------------------------------------------- parabolic


@dataclass(eq=False)
class ParabolicProblem:
    """``1/2 tr(w grad^2 u(x, n+1)) + u(x, n+1) - u(x, n) = rhs(x, n)`` on ``K_R``.

    ``rhs`` has shape ``(levels, n_interior)``.  ``boundary`` has the shape of
    a space-time field; only its entries on the parabolic boundary are read.
    """

    env: Environment
    domain: SpaceTimeDomain
    rhs: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        space = self.domain.space
        self.rhs = np.broadcast_to(np.asarray(self.rhs, dtype=float), (self.domain.levels, space.n_interior)).copy()
        shape = (self.domain.levels + 1, space.n_closure)
        self.boundary = np.broadcast_to(np.asarray(self.boundary, dtype=float), shape).copy()
        ni = space.n_interior
        if not (np.all(np.isfinite(self.boundary[1:, ni:])) and np.all(np.isfinite(self.boundary[-1, :ni]))):
            raise ConfigurationError("boundary data must be finite on the parabolic boundary")

    def is_monotone(self) -> bool:
        """The backward recursion is a convex combination iff ``tr w <= 1`` on ``B_R``."""
        return bool(np.all(domain_weights(self.env, self.domain.space).sum(axis=-1) <= 1.0 + 1e-15))


def parabolic_boundary_argument(x: np.ndarray, n: np.ndarray):
    """Map lattice points to ``(x / (|x| v sqrt n), n / (|x|^2 v n))`` on the unit cylinder's boundary."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    norm2 = (x ** 2).sum(axis=-1)
    scale = np.sqrt(np.maximum(norm2, n))
    with np.errstate(invalid="ignore", divide="ignore"):
        xi = np.where(scale[..., None] > 0, x / scale[..., None], 0.0)
        t = np.where(np.maximum(norm2, n) > 0, n / np.maximum(norm2, n), 0.0)
    return xi, t


def parabolic_dirichlet_problem(env: Environment, R, f, g, psi: ObservableSpec,
                                boundary_map: str = "radial") -> ParabolicProblem:
    """Scaled parabolic problem with forcing ``f(x/R, n/R^2) psi(x) / R^2``.

    ``f(x, t)`` and ``g(xi, t)`` take coordinate arrays ``(m, d)`` and times
    ``(m,)``.  Boundary values are read through
    :func:`parabolic_boundary_argument`, or at ``(x/R, n/R^2)`` with
    ``boundary_map="extension"``.
    """
    _check_map(boundary_map)
    if boundary_map == "extension":
        def where(x, n):
            return x / float(R), n / r2
    else:
        where = parabolic_boundary_argument
    dom = cylinder(R, env.dimension)
    space = dom.space
    r = float(R)
    r2 = float(exact_square(R))
    w = domain_weights(env, space)
    psi_x = psi.evaluate(w)
    levels = np.arange(dom.levels)
    xs = np.repeat(space.sites[None, :, :].astype(float), dom.levels, axis=0).reshape(-1, space.dimension)
    ts = np.repeat(levels, space.n_interior).astype(float)
    fx = np.asarray(f(xs / r, ts / r2), dtype=float).reshape(dom.levels, space.n_interior)
    rhs = fx * psi_x[None, :] / r2
    bnd = np.zeros((dom.levels + 1, space.n_closure))
    ni = space.n_interior
    lat_x = np.repeat(space.boundary[None, :, :].astype(float), dom.levels, axis=0).reshape(-1, space.dimension)
    lat_n = np.repeat(np.arange(1, dom.levels + 1), space.n_boundary).astype(float)
    xi, t = where(lat_x, lat_n)
    bnd[1:, ni:] = np.asarray(g(xi, t), dtype=float).reshape(dom.levels, space.n_boundary)
    xi, t = where(space.sites.astype(float), np.full(ni, float(dom.levels)))
    bnd[-1, :ni] = np.asarray(g(xi, t), dtype=float)
    return ParabolicProblem(env, dom, rhs, bnd)


def solve_parabolic(problem: ParabolicProblem) -> tuple[SpaceTimeField, SolveReport]:
    """Exact backward recursion from the terminal level.

    ``u(x, n) = u(x, n+1) + 1/2 tr(w grad^2 u(x, n+1)) - rhs(x, n)``, i.e.
    ``u(x, n) = sum_i (w_i/2) [u(x + e_i, n+1) + u(x - e_i, n+1)] + (1 - tr w) u(x, n+1) - rhs(x, n)``.
    """
    t0 = time.perf_counter()
    dom = problem.domain
    space = dom.space
    ni = space.n_interior
    w = domain_weights(problem.env, space)
    plus, minus = space.neighbors[:, 0::2], space.neighbors[:, 1::2]
    u = problem.boundary.copy()
    for n in range(dom.levels - 1, -1, -1):
        nxt = u[n + 1]
        centre = nxt[:ni]
        lap = (w * (nxt[plus] + nxt[minus] - 2.0 * centre[:, None])).sum(axis=-1)
        u[n, :ni] = centre + 0.5 * lap - problem.rhs[n]
    field = SpaceTimeField(dom, u)
    res = float(np.max(np.abs(parabolic_raw(problem.env, field) - problem.rhs))) if dom.levels else 0.0
    return field, SolveReport(dom.levels, res, time.perf_counter() - t0)
