"""Random walks in a balanced environment and Monte Carlo path functionals.

Walk ``k`` of a batch draws its ``t``-th uniform from the counter-based key
``(stream seed, k, t)``, so every path can be replayed on its own and batches
split across workers reproduce the serial result exactly.  Each uniform picks
one of the ``2d`` moves by inverse CDF over the fixed order
``+e_1, -e_1, ..., +e_d, -e_d`` (the lazy chain appends "stay" last).

Batched walks run either on a stored :class:`Environment` (quenched runs, the
walk must stay inside the box) or on an *implicit* environment whose weights
are regenerated from the hash at each visited site.  The implicit weights are
bit-identical to what :func:`sample_environment` would store, but no box is
needed, which suits long annealed runs over many fresh environments.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng
from .environment import (
    FAMILY_CODES,
    OBS_CONST,
    OBS_COORD_RATIO,
    OBS_INV_TRACE,
    OBS_TRACE,
    Environment,
    EnvironmentLaw,
    ObservableSpec,
)
from .errors import ConfigurationError, DomainError, TruncationError
from .lattice import LatticeDomain, domain_weights

# purpose tags for derived stream seeds
STREAM_WALK = 1
STREAM_LAZY = 2
STREAM_ENVIRONMENT = 3
STREAM_REFERENCE = 4

TRUNCATION_DELTA = 1e-6


def stream_seed(seed: int, *tags) -> int:
    """Derive an independent 64-bit stream seed from a master seed and tags."""
    return int(rng.hash_keys(int(seed), *tags))


def required_radius(horizon: int, walks: int, dimension: int, delta: float = TRUNCATION_DELTA) -> int:
    """Sup-radius that ``walks`` walks of ``horizon`` steps leave with probability at most ``delta``.

    Each coordinate is a martingale with increments in ``{-1, 0, 1}``, so
    Doob plus Azuma give ``P(max_k |X_k^i| >= r) <= 2 exp(-r^2 / 2n)``; a union
    bound over coordinates and walks fixes ``r``.
    """
    if horizon <= 0:
        return 0
    return int(math.ceil(math.sqrt(2.0 * horizon * math.log(2.0 * dimension * max(walks, 1) / delta))))


@dataclass
class WalkStream:
    """Uniform variates of one walk: draw ``t`` is keyed by ``(seed, walk, t)``."""

    seed: int
    walk: int = 0
    counter: int = 0

    def next_uniform(self) -> float:
        u = rng.uniform2(np.uint64(self.seed), self.walk, self.counter)
        self.counter += 1
        return float(u)


@dataclass
class PathFunctionalEstimate:
    mean: float
    se: float
    n: int
    truncated: int = 0
    values: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, values, truncated: int = 0) -> "PathFunctionalEstimate":
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return cls(float(v.mean()), se, int(v.size), int(truncated), v)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n": self.n, "truncated": self.truncated}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ------------------------------------------------------------------ numba kernels


@nb.njit(cache=True, inline="always")
def _choose(w, u):
    """Index ``2i`` (move ``+e_i``) or ``2i + 1`` (move ``-e_i``) for the uniform ``u``."""
    d = w.shape[0]
    tr = 0.0
    for i in range(d):
        tr += w[i]
    acc = 0.0
    for i in range(d):
        half = w[i] / (2.0 * tr)
        acc += half
        if u < acc:
            return 2 * i
        acc += half
        if u < acc:
            return 2 * i + 1
    return 2 * d - 1


@nb.njit(cache=True, inline="always")
def _choose_lazy(w, u):
    """As :func:`_choose` with probabilities ``w_i / (2 (1 + tr w))`` and "stay" (``2d``) last."""
    d = w.shape[0]
    tr = 0.0
    for i in range(d):
        tr += w[i]
    acc = 0.0
    for i in range(d):
        q = w[i] / (2.0 * (1.0 + tr))
        acc += q
        if u < acc:
            return 2 * i
        acc += q
        if u < acc:
            return 2 * i + 1
    return 2 * d


@nb.njit(cache=True, inline="always")
def _observe(w, code, param, div):
    d = w.shape[0]
    tr = 0.0
    for i in range(d):
        tr += w[i]
    if code == OBS_CONST:
        v = param
    elif code == OBS_TRACE:
        v = tr
    elif code == OBS_INV_TRACE:
        v = 1.0 / tr
    elif code == OBS_COORD_RATIO:
        v = w[int(param)] / tr
    else:
        v = 1.0 if w[0] > param else 0.0
    for _ in range(div):
        v = v / tr
    return v


@nb.njit(cache=True, inline="always")
def _flat(x, lo, shape):
    """Row-major offset of ``x`` in the box, or -1 outside."""
    idx = 0
    for j in range(x.shape[0]):
        r = x[j] - lo[j]
        if r < 0 or r >= shape[j]:
            return -1
        idx = idx * shape[j] + r
    return idx


@nb.njit(cache=True, inline="always")
def _implicit_weights(env_seed, x, family, lparams, out):
    """Weights at ``x`` regenerated from the site hash (same keys as dense sampling)."""
    d = x.shape[0]
    for i in range(d):
        if family == 0:
            out[i] = lparams[i]
            continue
        h = rng.mix64(np.uint64(env_seed) + rng.GOLDEN)
        h = rng._absorb(h, i)
        for j in range(d):
            h = rng._absorb(h, x[j])
        u = rng.to_unit(h)
        if family == 1:
            out[i] = lparams[0] + (lparams[1] - lparams[0]) * u
        else:
            out[i] = lparams[0] if u < lparams[2] else lparams[1]


@nb.njit(cache=True)
def _horizon_kernel(w, lo, shape, implicit, family, lparams, env_seed, start, walk_seed, first, count,
                    horizon, codes, params, divs, burn, paths):
    d = start.shape[0]
    n_obs = codes.shape[0]
    record = paths.shape[0] > 0
    sums = np.zeros((count, n_obs))
    final = np.empty((count, d), dtype=np.int64)
    steps = np.empty(count, dtype=np.int64)
    truncated = np.zeros(count, dtype=np.bool_)
    wt = np.empty(d)
    x = np.empty(d, dtype=np.int64)
    for k in range(count):
        for j in range(d):
            x[j] = start[j]
            if record:
                paths[k, 0, j] = x[j]
        t = 0
        while t < horizon:
            if implicit:
                _implicit_weights(env_seed, x, family, lparams, wt)
            else:
                idx = _flat(x, lo, shape)
                if idx < 0:
                    truncated[k] = True
                    break
                for j in range(d):
                    wt[j] = w[idx, j]
            if t >= burn:
                for o in range(n_obs):
                    sums[k, o] += _observe(wt, codes[o], params[o], divs[o])
            u = rng.to_unit(rng.hash2(walk_seed, first + k, t))
            c = _choose(wt, u)
            if c % 2 == 0:
                x[c // 2] += 1
            else:
                x[c // 2] -= 1
            t += 1
            if record:
                for j in range(d):
                    paths[k, t, j] = x[j]
        steps[k] = t
        for j in range(d):
            final[k, j] = x[j]
    return sums, final, steps, truncated


@nb.njit(cache=True)
def _exit_kernel(w, lo, shape, inside, running, terminal, start, walk_seed, first, count, max_steps):
    d = start.shape[0]
    tau = np.zeros(count, dtype=np.int64)
    exit_idx = np.full(count, -1, dtype=np.int64)
    run_sum = np.zeros(count)
    term = np.zeros(count)
    truncated = np.zeros(count, dtype=np.bool_)
    x = np.empty(d, dtype=np.int64)
    for k in range(count):
        for j in range(d):
            x[j] = start[j]
        idx = _flat(x, lo, shape)
        t = 0
        while idx >= 0 and inside[idx] and t < max_steps:
            run_sum[k] += running[idx]
            u = rng.to_unit(rng.hash2(walk_seed, first + k, t))
            c = _choose(w[idx], u)
            if c % 2 == 0:
                x[c // 2] += 1
            else:
                x[c // 2] -= 1
            t += 1
            idx = _flat(x, lo, shape)
        tau[k] = t
        if idx < 0:
            truncated[k] = True
        elif not inside[idx]:
            exit_idx[k] = idx
            term[k] = terminal[idx]
    return tau, exit_idx, run_sum, term, truncated


# ------------------------------------------------------------------------ helpers


def _obs_arrays(observables) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    codes, params, divs = [], [], []
    for spec in observables:
        c, p, k = spec.kernel_code()
        codes.append(c)
        params.append(p)
        divs.append(k)
    return (np.asarray(codes, dtype=np.int64), np.asarray(params, dtype=float),
            np.asarray(divs, dtype=np.int64))


def _law_arrays(law: EnvironmentLaw) -> tuple[int, np.ndarray]:
    if law.family == "constant":
        return FAMILY_CODES["constant"], law.constant_vector().astype(float)
    return FAMILY_CODES[law.family], np.asarray(law.params, dtype=float)


def _dense_arrays(env: Environment):
    return (env.weights.reshape(-1, env.dimension), np.asarray(env.box.lo, dtype=np.int64),
            np.asarray(env.box.shape, dtype=np.int64))


def _start(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size != d:
        raise DomainError(f"start site {tuple(x)} has wrong dimension for d={d}")
    return x


def _apply_move(x: tuple, c: int) -> tuple:
    y = list(x)
    y[c // 2] += 1 if c % 2 == 0 else -1
    return tuple(y)


def _weights_for_step(env: Environment, x) -> np.ndarray:
    if not env.box.contains(np.asarray(x)):
        raise TruncationError(f"walk reached site {tuple(x)} outside environment box {env.box}")
    w = env.weights_at([x])[0]
    return np.ascontiguousarray(w)


# --------------------------------------------------------------------- single steps


def step(env: Environment, x, stream: WalkStream) -> tuple:
    """One move of the walk from ``x``, consuming one uniform of ``stream``."""
    x = tuple(int(v) for v in x)
    w = _weights_for_step(env, x)
    return _apply_move(x, int(_choose(w, stream.next_uniform())))


def lazy_step(env: Environment, x, stream: WalkStream) -> tuple:
    """One spatial move of the lazy space-time chain; returns ``x`` itself on "stay".

    The chain stays with probability ``1 / (1 + tr w(x))`` and moves to
    ``x +- e_i`` with probability ``w_i / (2 (1 + tr w(x)))``; its time
    coordinate always advances by one.
    """
    x = tuple(int(v) for v in x)
    w = _weights_for_step(env, x)
    c = int(_choose_lazy(w, stream.next_uniform()))
    return x if c == 2 * len(x) else _apply_move(x, c)


def lazy_probabilities(weights) -> np.ndarray:
    """Lazy-chain kernel in outcome order ``+e_1, -e_1, ..., +e_d, -e_d, stay``."""
    w = np.asarray(weights, dtype=float)
    tr = w.sum()
    return np.append(np.repeat(w / (2.0 * (1.0 + tr)), 2), 1.0 / (1.0 + tr))


def run_until_exit(env: Environment, start, domain: LatticeDomain, stream: WalkStream,
                   max_steps: int | None = None) -> tuple[tuple, int]:
    """Walk until the first time ``tau`` outside ``domain``; returns ``(X_tau, tau)``.

    With ``max_steps`` the walk is stopped at ``tau ^ max_steps`` and the
    returned site may still be interior.
    """
    x = tuple(int(v) for v in start)
    t = 0
    cap = math.inf if max_steps is None else max_steps
    while domain.is_interior(x) and t < cap:
        x = step(env, x, stream)
        t += 1
    return x, t


# ------------------------------------------------------------------ batched walks


@dataclass
class HorizonSample:
    """Per-walk results of a fixed-horizon batch."""

    sums: np.ndarray  # (walks, observables), sums over steps burn..horizon-1
    final: np.ndarray  # (walks, d)
    steps: np.ndarray
    truncated: np.ndarray
    paths: np.ndarray | None = None


def horizon_walks(env: Environment, start, horizon: int, walks: int, seed: int, observables=(),
                  burn: int = 0, first_walk: int = 0, record_paths: bool = False,
                  allow_truncation: bool = False) -> HorizonSample:
    """Run ``walks`` walks of ``horizon`` steps on a stored environment.

    ``seed`` is used directly as the walk stream seed; walk ``k`` of the batch
    is global walk ``first_walk + k``.
    """
    d = env.dimension
    x0 = _start(start, d)
    if not env.box.contains(x0):
        raise DomainError(f"start {tuple(x0)} outside environment box")
    w, lo, shape = _dense_arrays(env)
    codes, params, divs = _obs_arrays(observables)
    paths = np.zeros((walks, horizon + 1, d) if record_paths else (0, 1, d), dtype=np.int64)
    sums, final, steps, trunc = _horizon_kernel(
        w, lo, shape, False, 0, np.zeros(3), np.uint64(0), x0, np.uint64(seed), int(first_walk), int(walks),
        int(horizon), codes, params, divs, int(burn), paths)
    if trunc.any() and not allow_truncation:
        raise TruncationError(f"{int(trunc.sum())} of {walks} walks reached the edge of box {env.box}")
    return HorizonSample(sums, final, steps, trunc, paths if record_paths else None)


def implicit_horizon_walks(law: EnvironmentLaw, env_seed: int, start, horizon: int, walks: int, seed: int,
                           observables=(), burn: int = 0, first_walk: int = 0) -> HorizonSample:
    """As :func:`horizon_walks` on the environment ``sample_environment(law, ., env_seed)`` of all of Z^d."""
    d = law.dimension
    x0 = _start(start, d)
    family, lparams = _law_arrays(law)
    codes, params, divs = _obs_arrays(observables)
    sums, final, steps, trunc = _horizon_kernel(
        np.zeros((1, d)), np.zeros(d, dtype=np.int64), np.ones(d, dtype=np.int64), True, family, lparams,
        np.uint64(env_seed), x0, np.uint64(seed), int(first_walk), int(walks), int(horizon),
        codes, params, divs, int(burn), np.zeros((0, 1, d), dtype=np.int64))
    return HorizonSample(sums, final, steps, trunc)


@dataclass
class ExitSample:
    tau: np.ndarray
    exit_sites: np.ndarray  # (walks, d); rows of capped walks hold the start
    running: np.ndarray
    terminal: np.ndarray
    stopped: np.ndarray  # exited B (as opposed to being capped at max_steps)


def exit_walks(env: Environment, start, domain: LatticeDomain, walks: int, seed: int,
               running=None, terminal=None, max_steps: int | None = None, first_walk: int = 0) -> ExitSample:
    """Walks stopped on leaving ``domain`` (or at ``max_steps``).

    ``running`` (indexed like ``domain.sites``) is summed over the path up to
    but excluding the exit time, and ``terminal`` (indexed like
    ``domain.boundary``) is read at the exit site.
    """
    d = env.dimension
    x0 = _start(start, d)
    closure = domain.closure
    if not np.all(env.box.contains(closure)):
        raise TruncationError("environment box does not cover the domain and its boundary")
    w, lo, shape = _dense_arrays(env)
    n_box = env.box.size
    flat_int = env.flat_index(domain.sites)
    flat_bnd = env.flat_index(domain.boundary)
    inside = np.zeros(n_box, dtype=np.bool_)
    inside[flat_int] = True
    run = np.zeros(n_box)
    term = np.zeros(n_box)
    if running is not None:
        run[flat_int] = np.broadcast_to(np.asarray(running, dtype=float), (domain.n_interior,))
    if terminal is not None:
        term[flat_bnd] = np.broadcast_to(np.asarray(terminal, dtype=float), (domain.n_boundary,))
    cap = np.iinfo(np.int64).max if max_steps is None else int(max_steps)
    tau, idx, rs, ts, trunc = _exit_kernel(w, lo, shape, inside, run, term, x0, np.uint64(seed),
                                           int(first_walk), int(walks), cap)
    if trunc.any():
        raise TruncationError(f"{int(trunc.sum())} walks left environment box {env.box}")
    stopped = idx >= 0
    sites = np.tile(x0, (walks, 1))
    if stopped.any():
        sites[stopped] = np.stack(np.unravel_index(idx[stopped], env.box.shape), axis=-1) + np.asarray(env.box.lo)
    return ExitSample(tau, sites, rs, ts, stopped)


# ----------------------------------------------------------- Monte Carlo estimators


def feynman_kac_elliptic(env: Environment, x, domain: LatticeDomain, f, psi: ObservableSpec, g, R,
                         samples: int, seed: int, first_walk: int = 0) -> PathFunctionalEstimate:
    """Monte Carlo value of ``E^x[g(X_tau/|X_tau|)] - R^-2 E^x[sum_{i<tau} f(X_i/R) psi(w(X_i))]``.

    This represents the solution of ``L_w u = f psi / R^2`` with ``u = g(x/|x|)``
    on the boundary.  For the form ``1/2 tr(w grad^2 u) = f psi / R^2`` pass
    ``psi_over_trace(psi)``, since ``L_w`` carries the extra ``1 / tr w``.
    ``f`` takes an ``(m, d)`` coordinate array, ``g`` an ``(m, d)`` array of
    unit vectors.
    """
    if samples < 1:
        raise ConfigurationError("samples must be at least 1")
    r = float(R)
    wts = domain_weights(env, domain)
    running = np.asarray(f(domain.sites / r), dtype=float) * psi.evaluate(wts) / r ** 2
    xb = domain.boundary.astype(float)
    terminal = np.asarray(g(xb / np.linalg.norm(xb, axis=1, keepdims=True)), dtype=float)
    sample = exit_walks(env, x, domain, samples, stream_seed(seed, STREAM_WALK), running, terminal,
                        first_walk=first_walk)
    return PathFunctionalEstimate.from_samples(sample.terminal - sample.running)


def environment_process_average(env: Environment, x, horizon: int, psi: ObservableSpec, samples: int,
                                seed: int, domain: LatticeDomain | None = None) -> PathFunctionalEstimate:
    """Estimate ``(1/n) E^x[sum_{i<T} psi(w(X_i))]`` with ``T = n`` or ``T = tau ^ n``.

    Each walk contributes its own path sum divided by ``n``.  Before any walk
    runs, the box is checked to be large enough that leaving it within ``n``
    steps has probability below ``1e-6`` for the whole batch.
    """
    if horizon < 1 or samples < 1:
        raise ConfigurationError("horizon and samples must be positive")
    if domain is not None:
        running = psi.evaluate(env.weights_at(domain.sites))
        sample = exit_walks(env, x, domain, samples, stream_seed(seed, STREAM_WALK), running, None,
                            max_steps=horizon)
        return PathFunctionalEstimate.from_samples(sample.running / horizon)
    need = required_radius(horizon, samples, env.dimension) + 1
    have = env.box.radius_about(np.asarray(x))
    if have < need:
        raise TruncationError(
            f"box radius {have} about {tuple(x)} is below the {need} needed for {samples} walks of {horizon} steps")
    sample = horizon_walks(env, x, horizon, samples, stream_seed(seed, STREAM_WALK), [psi])
    return PathFunctionalEstimate.from_samples(sample.sums[:, 0] / horizon)


def dump_paths(path, paths: np.ndarray, first_walk: int = 0) -> None:
    """CSV ``walk_index,step,x1,..,xd`` from a ``(walks, steps + 1, d)`` array."""
    walks, steps, d = paths.shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["walk_index", "step"] + [f"x{j + 1}" for j in range(d)])
        for k in range(walks):
            for t in range(steps):
                out.writerow([first_walk + k, t, *paths[k, t].tolist()])


def sample_paths(env: Environment, start, horizon: int, walks: int, seed: int) -> np.ndarray:
    """Recorded positions of ``walks`` walks, shape ``(walks, horizon + 1, d)``."""
    return horizon_walks(env, start, horizon, walks, stream_seed(seed, STREAM_WALK), record_paths=True).paths


__all__ = [
    "WalkStream", "PathFunctionalEstimate", "HorizonSample", "ExitSample", "step", "lazy_step",
    "lazy_probabilities", "run_until_exit", "horizon_walks", "implicit_horizon_walks", "exit_walks",
    "feynman_kac_elliptic", "environment_process_average", "required_radius", "stream_seed",
    "dump_paths", "sample_paths",
]
