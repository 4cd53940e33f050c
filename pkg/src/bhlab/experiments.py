"""Rate experiments: ladders of independent cells, medians, power-law fits.

Every experiment is a deterministic function of its arguments and a master
seed.  Cells ``(scale, replica)`` draw their environment from
``stream_seed(seed, 3, replica)`` and their walks from streams tagged with the
cell, so a cell's value does not depend on which worker ran it or on which
other cells exist.  Reference quantities (``E_Q psi``, ``abar``) come from
separate runs keyed by ``stream_seed(seed, 4)``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import binom

from .effective import (EffectiveCoefficients, estimate_effective, estimate_mean, scale_to_lattice,
                        solve_effective_elliptic, solve_effective_parabolic)
from .environment import Box, Environment, EnvironmentLaw, ObservableSpec, jump_probabilities, sample_environment
from .errors import BHLabError, ConfigurationError, DomainError, NonConvergenceError, RateFitError
from .lattice import ball, cube
from .solver import (DEFAULT_MAX_ITERS, DEFAULT_TOL, dirichlet_problem, parabolic_dirichlet_problem,
                     solve_corrector, solve_elliptic, solve_parabolic)
from .convexity import mu_hat
from .walk import (STREAM_ENVIRONMENT, STREAM_REFERENCE, STREAM_WALK, environment_process_average,
                   horizon_walks, implicit_horizon_walks, required_radius, stream_seed)

log = logging.getLogger(__name__)

ZERO_TOL = 1e-9  # ladders at or below this are "exactly zero" rows


# --------------------------------------------------------------------------- fits


@dataclass
class RateFit:
    """Least-squares line through ``(log scale, log statistic)``.

    With ``semilog`` the abscissa is the scale itself (exponential decay).
    """

    pairs: list
    slope: float
    intercept: float
    r2: float
    excluded: int = 0
    semilog: bool = False

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "points": [[float(a), float(b)] for a, b in self.pairs], "excluded": self.excluded,
                "abscissa": "scale" if self.semilog else "log(scale)"}


def fit_rate(pairs, semilog: bool = False) -> RateFit:
    """OLS of ``log y`` on ``log x`` (or on ``x`` when ``semilog``).

    Nonpositive or non-finite statistics are dropped with a warning; fewer
    than three remaining points is an error.
    """
    pairs = [(float(x), float(y)) for x, y in pairs]
    keep = [(x, y) for x, y in pairs if math.isfinite(y) and y > 0.0]
    dropped = len(pairs) - len(keep)
    if dropped:
        warnings.warn(f"rate fit: dropped {dropped} nonpositive or non-finite statistic(s)", RuntimeWarning,
                      stacklevel=2)
    if len(keep) < 3:
        raise RateFitError(f"rate fit needs at least 3 positive statistics, have {len(keep)}")
    x = np.array([p[0] for p in keep])
    if not semilog:
        if np.any(x <= 0):
            raise RateFitError("log-log fit needs positive scales")
        x = np.log(x)
    y = np.log(np.array([p[1] for p in keep]))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(pairs, float(slope), float(intercept), float(r2), dropped, semilog)


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


# ------------------------------------------------------------------------ results


@dataclass
class ExperimentResult:
    """A ladder table, its per-scale summary and the acceptance checks."""

    name: str
    columns: list
    rows: list
    ladder: list  # [(scale, statistic)]
    fit: RateFit | None
    checks: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.checks.values())

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(self.columns)
            for row in self.rows:
                out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

    def summary(self, config_digest: str = "", seed: int | None = None) -> dict:
        return {
            "experiment": self.name,
            "fit": None if self.fit is None else self.fit.to_dict(),
            "ladder": [[float(a), float(b)] for a, b in self.ladder],
            "config_digest": config_digest,
            "seed": seed,
            "checks": {k: bool(v) for k, v in self.checks.items()},
            "passed": self.passed,
            "notes": list(self.notes),
            **self.extra,
        }

    def write(self, outdir, config_digest: str = "", seed: int | None = None) -> dict:
        from pathlib import Path

        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self.write_csv(outdir / f"{self.name}.csv")
        summary = self.summary(config_digest, seed)
        with open(outdir / f"{self.name}.json", "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return summary


def _ladder_check(result_ladder, fit, checks: dict, slope_check: bool = True) -> None:
    """Decreasing medians and negative slope, or an exactly-zero ladder."""
    stats = [s for _, s in result_ladder]
    zero = bool(stats) and all(math.isfinite(s) and abs(s) <= ZERO_TOL for s in stats)
    checks["decreasing"] = zero or strictly_decreasing(stats)
    if slope_check and len(stats) >= 3:
        checks["slope_negative"] = zero or (fit is not None and fit.slope < 0.0)


def _try_fit(ladder, notes: list, semilog: bool = False) -> RateFit | None:
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = fit_rate(ladder, semilog=semilog)
        notes.extend(str(w.message) for w in caught)
        return fit
    except RateFitError as exc:
        notes.append(str(exc))
        return None


def map_cells(fn, jobs: list, workers: int = 1) -> list:
    """``[fn(j) for j in jobs]``, optionally on a process pool; order is preserved."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(fn, jobs))


def _medians(rows, scale_col: int, stat_col: int, scales) -> list:
    out = []
    for s in scales:
        vals = [r[stat_col] for r in rows if r[scale_col] == s and math.isfinite(r[stat_col])]
        out.append((s, float(np.median(vals)) if vals else float("nan")))
    return out


def _check_ladder(ladder, name: str = "ladder") -> list:
    # two rungs are accepted (no fit is possible); three or more give a RateFit
    ladder = list(ladder)
    if len(ladder) < 2:
        raise ConfigurationError(f"{name} needs at least 2 entries")
    if not strictly_decreasing(ladder[::-1]):
        raise ConfigurationError(f"{name} must be strictly increasing")
    return ladder


def _sample_for(law: EnvironmentLaw, sites: np.ndarray, seed: int, margin: int = 0) -> Environment:
    return sample_environment(law, Box.covering(sites, margin), seed)


# --------------------------------------------------------------------- references


def reference_coefficients(law: EnvironmentLaw, psi: ObservableSpec, horizon: int, replicas: int,
                           walks: int, seed: int) -> EffectiveCoefficients:
    """``abar``, ``bbar``, ``psibar`` from a run disjoint from every experiment cell."""
    if law.family == "constant":
        return EffectiveCoefficients.for_constant_law(law, psi)
    return estimate_effective(law, psi, int(horizon), int(replicas), int(walks), stream_seed(seed, STREAM_REFERENCE))


def reference_mean(law: EnvironmentLaw, psi: ObservableSpec, horizon: int, replicas: int, walks: int,
                   seed: int) -> tuple[float, float]:
    """``E_Q psi`` and its standard error; exact for constant laws and constant ``psi``."""
    if psi.kind == "const":
        return float(psi.param), 0.0
    if law.family == "constant":
        return float(psi.evaluate(law.constant_vector()[None, :])[0]), 0.0
    return estimate_mean(law, psi, int(horizon), int(replicas), int(walks), stream_seed(seed, STREAM_REFERENCE))


# ---------------------------------------------------------------- homogenization


def _elliptic_cell(job):
    law, R, replica, seed, f, g, psi, ubar, tol, max_iters, boundary = job
    dom = ball(R, law.dimension)
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    env = _sample_for(law, dom.closure, env_seed)
    target = scale_to_lattice(ubar, R)(dom.sites)
    problem = dirichlet_problem(env, R, f, g, psi, dom, boundary_map=boundary)
    try:
        # the rescaled effective solution is a warm start; convergence is judged on the residual
        field_, rep = solve_elliptic(problem, tol, max_iters, initial=target)
    except NonConvergenceError as exc:
        return [R, replica, env_seed, float("nan"), exc.iterations, float(exc.residual), "nonconvergence"]
    err = float(np.max(np.abs(field_.interior - target)))
    return [R, replica, env_seed, err, rep.iterations, rep.residual, "ok"]


def homog_error_elliptic(law: EnvironmentLaw, R_ladder, f, g, psi: ObservableSpec, replicas: int, seed: int,
                         coeffs: EffectiveCoefficients | None = None, h: float = 1.0 / 64,
                         tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                         reference: dict | None = None, workers: int = 1,
                         boundary: str = "extension") -> ExperimentResult:
    """``max_{B_R} |u - ubar(x/R)|`` over an R ladder.

    ``ubar`` is solved once for the reference coefficients.  Lattice solves
    use Gauss-Seidel to the residual tolerance ``tol``.  ``boundary`` selects
    lattice boundary values ``g(x/R)`` (``"extension"``, exact for affine
    data) or ``g(x/|x|)`` (``"radial"``).
    """
    ladder = _check_ladder(R_ladder, "R ladder")
    if coeffs is None:
        ref = {"horizon": 10 * int(max(ladder)) ** 2, "replicas": 16, "walks": 4, **(reference or {})}
        coeffs = reference_coefficients(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
    ubar = solve_effective_elliptic(coeffs, f, g, h)
    jobs = [(law, R, r, seed, f, g, psi, ubar, tol, max_iters, boundary) for R in ladder for r in range(replicas)]
    rows = map_cells(_elliptic_cell, jobs, workers)
    notes = [f"cell R={r[0]} replica={r[1]} failed: {r[6]}" for r in rows if r[6] != "ok"]
    med = _medians(rows, 0, 3, ladder)
    fit = _try_fit(med, notes)
    checks = {}
    _ladder_check(med, fit, checks)
    extra = {"coefficients": coeffs.to_dict(), "continuum": ubar.boundary}
    return ExperimentResult("homog_elliptic", ["R", "replica", "env_seed", "max_error", "iterations", "residual",
                                               "status"], rows, med, fit, checks, extra, notes)


def _parabolic_cell(job):
    law, R, replica, seed, f, g, psi, ubar, boundary = job
    space = ball(R, law.dimension)
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    env = _sample_for(law, space.closure, env_seed)
    problem = parabolic_dirichlet_problem(env, R, f, g, psi, boundary_map=boundary)
    if not problem.is_monotone():
        raise ConfigurationError("parabolic recursion needs tr w <= 1 on the whole support")
    field_, rep = solve_parabolic(problem)
    dom = problem.domain
    ni = space.n_interior
    scaled = scale_to_lattice(ubar, R)
    levels = np.arange(dom.levels)
    x = np.tile(space.sites, (dom.levels, 1))
    n = np.repeat(levels, ni)
    approx = scaled(x, n).reshape(dom.levels, ni)
    err = float(np.max(np.abs(field_.values[:-1, :ni] - approx)))
    return [R, replica, env_seed, err, dom.levels, rep.residual, "ok"]


def homog_error_parabolic(law: EnvironmentLaw, R_ladder, f, g, psi: ObservableSpec, replicas: int, seed: int,
                          coeffs: EffectiveCoefficients | None = None, h: float | None = None,
                          reference: dict | None = None, workers: int = 1,
                          boundary: str = "extension") -> ExperimentResult:
    """``max_{K_R} |u(x, n) - ubar(x/R, n/R^2)|`` over an R ladder.

    ``boundary`` is as in :func:`homog_error_elliptic`; ``"radial"`` uses
    the cylinder parameterisation ``(x/(|x| v sqrt n), n/(|x|^2 v n))``.
    """
    ladder = _check_ladder(R_ladder, "R ladder")
    if not law.satisfies_two_sided_bound():
        raise ConfigurationError("parabolic experiments need the two-sided bound kappa I <= w <= I/kappa")
    if law.trace_bounds()[1] > 1.0:
        raise ConfigurationError("parabolic recursion needs tr w <= 1 on the whole support")
    if coeffs is None:
        ref = {"horizon": 10 * int(max(ladder)) ** 2, "replicas": 16, "walks": 4, **(reference or {})}
        coeffs = reference_coefficients(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
    if h is None:
        h = 1.0 / 256 if law.dimension == 1 else 1.0 / 32
    ubar = solve_effective_parabolic(coeffs, f, g, h)
    jobs = [(law, R, r, seed, f, g, psi, ubar, boundary) for R in ladder for r in range(replicas)]
    rows = map_cells(_parabolic_cell, jobs, workers)
    notes = []
    med = _medians(rows, 0, 3, ladder)
    fit = _try_fit(med, notes)
    checks = {}
    _ladder_check(med, fit, checks)
    extra = {"coefficients": coeffs.to_dict(), "continuum": ubar.boundary}
    return ExperimentResult("homog_parabolic", ["R", "replica", "env_seed", "max_error", "levels", "residual",
                                                "status"], rows, med, fit, checks, extra, notes)


# ------------------------------------------------------------------- corrector


def _corrector_cell(job):
    law, R, replica, seed, psi, mean, tol, max_iters = job
    dom = cube(R, law.dimension)
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    env = _sample_for(law, dom.closure, env_seed)
    try:
        phi = solve_corrector(env, dom, psi, mean, tol, max_iters)
    except NonConvergenceError:
        return [R, replica, env_seed, float("nan"), "nonconvergence"]
    return [R, replica, env_seed, float(np.max(np.abs(phi.values))) / float(R) ** 2, "ok"]


def corrector_sublinearity(law: EnvironmentLaw, R_ladder, psi: ObservableSpec, replicas: int, seed: int,
                           mean: float | None = None, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                           reference: dict | None = None, workers: int = 1) -> ExperimentResult:
    """``max |phi| / R^2`` on cubes of side ``R``, ``L_w phi = psi - E_Q psi``."""
    ladder = _check_ladder(R_ladder, "R ladder")
    extra = {}
    if mean is None:
        ref = {"horizon": 10 * int(max(ladder)) ** 2, "replicas": 32, "walks": 4, **(reference or {})}
        mean, se = reference_mean(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
        extra["reference"] = {"mean": mean, "se": se, **ref}
    jobs = [(law, R, r, seed, psi, mean, tol, max_iters) for R in ladder for r in range(replicas)]
    rows = map_cells(_corrector_cell, jobs, workers)
    notes = [f"cell R={r[0]} replica={r[1]} failed: {r[4]}" for r in rows if r[4] != "ok"]
    med = _medians(rows, 0, 3, ladder)
    fit = _try_fit(med, notes)
    checks = {}
    _ladder_check(med, fit, checks)
    return ExperimentResult("corrector", ["R", "replica", "env_seed", "max_phi_over_R2", "status"],
                            rows, med, fit, checks, extra, notes)


# ------------------------------------------------------------------ ergodicity


def _ergodicity_cell(job):
    law, ladder, replica, seed, psi, walks, mean = job
    d = law.dimension
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    radius = required_radius(max(ladder), walks, d) + 1
    env = sample_environment(law, Box.centered(radius, d), env_seed)
    rows = []
    origin = np.zeros(d, dtype=np.int64)
    for k, n in enumerate(ladder):
        est = environment_process_average(env, origin, n, psi, walks, stream_seed(seed, replica, k))
        rows.append([n, replica, env_seed, est.mean, est.se, abs(est.mean - mean)])
    return rows


def ergodicity_rate(law: EnvironmentLaw, n_ladder, psi: ObservableSpec, replicas: int, walks: int, seed: int,
                    mean: float | None = None, reference: dict | None = None, workers: int = 1) -> ExperimentResult:
    """``|(1/n) sum_{i<n} E_w psi(w_i) - E_Q psi|`` over a horizon ladder.

    The quenched expectation is a ``walks``-sample average in each replica
    environment.  The reference is a 100-times longer annealed run.  A single
    decay exponent is fitted; how it trades off against the tail exponent of
    the deviation is not resolved by this statistic.
    """
    ladder = _check_ladder([int(n) for n in n_ladder], "n ladder")
    extra = {}
    if mean is None:
        ref = {"horizon": 100 * max(ladder), "replicas": 64, "walks": 2, **(reference or {})}
        mean, se = reference_mean(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
        extra["reference"] = {"mean": mean, "se": se, **ref}
    jobs = [(law, ladder, r, seed, psi, int(walks), float(mean)) for r in range(replicas)]
    rows = [row for block in map_cells(_ergodicity_cell, jobs, workers) for row in block]
    rows.sort(key=lambda r: (r[0], r[1]))
    notes = ["single exponent fitted; the (alpha, p) trade-off of the tail bound is not resolved"]
    med = _medians(rows, 0, 5, ladder)
    fit = _try_fit(med, notes)
    checks = {}
    _ladder_check(med, fit, checks, slope_check=False)
    return ExperimentResult("ergodicity", ["n", "replica", "env_seed", "average", "se", "deviation"],
                            rows, med, fit, checks, extra, notes)


# ---------------------------------------------------------------- Berry-Esseen


def kolmogorov_statistic(samples, sigma: float) -> float:
    """``sup_r |F_N(r) - Phi(r / sigma)|`` evaluated at the jumps of the empirical CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ConfigurationError("no samples")
    cdf = ndtr(x / sigma)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    return float(max(upper.max(), lower.max(), 0.0))


def projected_step_pmf(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact law of ``X_n . e_1`` for the simple random walk on ``Z^d``.

    Each step moves along ``e_1`` with probability ``1/d``, by ``+-1`` with
    equal odds, so ``X_n . e_1 = 2 Bin(K, 1/2) - K`` with ``K ~ Bin(n, 1/d)``.
    For ``d = 2`` this is ``Bin(2n, 1/2) - n``.
    """
    support = np.arange(-n, n + 1)
    if d == 1:
        pmf = np.zeros(support.size)
        k = np.arange(n + 1)
        pmf[2 * k] = binom.pmf(k, n, 0.5)
        return support, pmf
    if d == 2:
        return support, binom.pmf(support + n, 2 * n, 0.5)
    pmf = np.zeros(support.size)
    for K, wK in enumerate(binom.pmf(np.arange(n + 1), n, 1.0 / d)):
        j = np.arange(K + 1)
        pmf[2 * j - K + n] += wK * binom.pmf(j, K, 0.5)
    return support, pmf


def exact_kolmogorov_distance(n: int, d: int) -> float:
    """``sup_r |P(X_n . e_1 / sqrt n <= r) - Phi(r sqrt d)|`` for the simple random walk."""
    support, pmf = projected_step_pmf(n, d)
    cdf = np.cumsum(pmf)
    before = np.concatenate([[0.0], cdf[:-1]])
    target = ndtr(support / math.sqrt(n) / math.sqrt(1.0 / d))
    return float(max(np.abs(cdf - target).max(), np.abs(before - target).max()))


def dkw_bound(walks: int, delta: float = 1e-6) -> float:
    """Radius ``sqrt(log(2/delta) / (2N))`` of the Dvoretzky-Kiefer-Wolfowitz band."""
    return math.sqrt(math.log(2.0 / delta) / (2.0 * walks))


def berry_esseen(source, n_ladder, direction, coeffs: EffectiveCoefficients, walks: int, seed: int,
                 environments: int = 5, workers: int = 1) -> ExperimentResult:
    """Kolmogorov distance of ``X_n . l / sqrt n`` to ``N(0, l^T abar l)``.

    ``source`` is a fixed :class:`Environment` (one column of cells) or an
    :class:`EnvironmentLaw`, in which case ``environments`` realisations
    are simulated implicitly on all of Z^d and the statistic is their median.
    """
    ladder = [int(n) for n in n_ladder]
    if len(ladder) < 2 or not strictly_decreasing(ladder[::-1]):
        raise ConfigurationError("n ladder must be strictly increasing with at least 2 entries")
    ell = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(ell) - 1.0) > 1e-12:
        raise ConfigurationError("direction must be a unit vector")
    abar = np.asarray(coeffs.abar, dtype=float)
    sigma = math.sqrt(float(ell @ np.diag(abar) @ ell) if abar.ndim == 1 else float(ell @ abar @ ell))
    law = source.law if isinstance(source, Environment) else source
    if isinstance(source, Environment) or law.family == "constant":
        environments = 1
    jobs = []
    for k, n in enumerate(ladder):
        for e in range(environments):
            jobs.append((source, n, k, e, ell, sigma, int(walks), seed))
    rows = map_cells(_be_cell, jobs, workers)
    notes = []
    med = _medians(rows, 0, 4, ladder)
    fit = _try_fit(med, notes) if len(ladder) >= 3 else None
    checks = {"last_below_first": med[-1][1] < med[0][1]}
    extra = {"sigma": sigma, "direction": ell.tolist()}
    if law.family == "constant" and np.allclose(law.constant_vector(), law.constant_vector()[0]) \
            and np.count_nonzero(ell) == 1:
        exact = {n: exact_kolmogorov_distance(n, law.dimension) for n in ladder}
        band = dkw_bound(walks)
        extra["oracle"] = {"exact": {str(n): v for n, v in exact.items()}, "dkw_band": band}
        checks["oracle_agreement"] = all(abs(s - exact[n]) <= band for n, s in med)
    return ExperimentResult("berry_esseen", ["n", "environment", "env_seed", "walks", "statistic"],
                            rows, med, fit, checks, extra, notes)


def _be_cell(job):
    source, n, k, e, ell, sigma, walks, seed = job
    walk_seed = stream_seed(seed, STREAM_WALK, k, e)
    if isinstance(source, Environment):
        sample = horizon_walks(source, np.zeros(source.dimension, dtype=np.int64), n, walks, walk_seed)
        env_seed = source.seed
    else:
        env_seed = stream_seed(seed, STREAM_ENVIRONMENT, e)
        sample = implicit_horizon_walks(source, env_seed, np.zeros(source.dimension, dtype=np.int64), n, walks,
                                        walk_seed)
    proj = sample.final.astype(float) @ ell / math.sqrt(n)
    return [n, e, env_seed, walks, kolmogorov_statistic(proj, sigma)]


# ---------------------------------------------------------------------- census


@dataclass
class CensusReport:
    R: float
    R0: float
    threshold: float
    bad: int
    total: int
    alpha: float
    flags: np.ndarray | None = None
    worst: float = 0.0  # largest functional / its threshold

    @property
    def fraction(self) -> float:
        return self.bad / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"R": self.R, "R0": self.R0, "threshold": self.threshold, "bad": self.bad, "total": self.total,
                "fraction": self.fraction, "alpha": self.alpha, "worst": self.worst}


def census_functionals(env: Environment, centers: np.ndarray, R0, psi: ObservableSpec,
                       refs: EffectiveCoefficients) -> np.ndarray:
    """``|E^x[sum_{i<sigma} (zeta(w_i) - ref)]|`` for each centre and each ``zeta``.

    ``sigma`` is the exit time from ``B_R0(x)``.  The expectation is the
    solution at ``x`` of ``L_w v = -(zeta - ref)`` with zero boundary data, so
    each ball costs one dense factorisation shared by all ``d + 1``
    right-hand sides.  Columns: ``psi / tr w``, then ``w_i / tr w``.
    """
    d = env.dimension
    tmpl = ball(R0, d)
    m = tmpl.n_interior
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    reach = (tmpl.closure[None, :, :] + centers[:, None, :]).reshape(-1, d)
    if not np.all(env.box.contains(reach)):
        raise DomainError(f"census balls of radius {R0:g} leave environment box {env.box}")
    origin = tmpl.index(np.zeros(d, dtype=np.int64))
    nbr = tmpl.neighbors
    inner = nbr < m
    rows_idx = np.repeat(np.arange(m), nbr.shape[1]).reshape(m, -1)[inner]
    cols_idx = nbr[inner]
    ref = np.concatenate([[refs.psibar], np.asarray(refs.abar, dtype=float)])
    out = np.empty((centers.shape[0], d + 1))
    chunk = max(1, int(4e7 // (8 * m * m)))
    for s in range(0, centers.shape[0], chunk):
        c = centers[s:s + chunk]
        k = c.shape[0]
        w = env.weights_at((tmpl.sites[None, :, :] + c[:, None, :]).reshape(-1, d)).reshape(k, m, d)
        p = jump_probabilities(w)  # (k, m, 2d)
        a = np.zeros((k, m, m))
        a[:, np.arange(m), np.arange(m)] = 1.0
        np.add.at(a, (slice(None), rows_idx, cols_idx), -p[:, inner])
        tr = w.sum(axis=-1)
        zeta = np.concatenate([psi.evaluate(w)[..., None] / tr[..., None], w / tr[..., None]], axis=-1)
        # (I - P) v = zeta - ref  <=>  L v = -(zeta - ref)
        v = np.linalg.solve(a, zeta - ref)
        out[s:s + k] = np.abs(v[:, origin, :])
    return out


def bad_point_census(env: Environment, R, gamma_census: float, threshold_c: float, psi: ObservableSpec,
                     refs: EffectiveCoefficients, alpha_census: float, keep_flags: bool = False) -> CensusReport:
    """Count sites of ``B_{R - R0}``, ``R0 = R^gamma``, where a local functional is large.

    A site is bad when some functional exceeds
    ``threshold_c * |zeta|_inf * R0^(2 - alpha)``.
    """
    if not 0.0 < gamma_census < 0.5:
        raise ConfigurationError("gamma_census must lie in (0, 1/2)")
    if not threshold_c > 0:
        raise ConfigurationError("threshold_c must be positive")
    d = env.dimension
    R0 = float(R) ** gamma_census
    inner = ball(float(R) - R0, d)
    sup = np.array([ObservableSpec("psi_over_trace", inner=psi).sup_norm(env.law)]
                   + [ObservableSpec("coord_ratio", i + 1).sup_norm(env.law) for i in range(d)])
    scale = R0 ** (2.0 - alpha_census)
    values = census_functionals(env, inner.sites, R0, psi, refs)
    limit = threshold_c * sup * scale
    ratio = values / limit
    flags = np.any(ratio > 1.0, axis=1)
    thr = float(threshold_c * scale)
    return CensusReport(float(R), R0, thr, int(flags.sum()), int(flags.size), float(alpha_census),
                        flags if keep_flags else None, float(ratio.max()) if ratio.size else 0.0)


def census_experiment(law: EnvironmentLaw, R, gamma_census: float, threshold_c: float, psi: ObservableSpec,
                      replicas: int, seed: int, alpha_census: float, coeffs: EffectiveCoefficients | None = None,
                      reference: dict | None = None, workers: int = 1, max_fraction: float = 0.1) -> ExperimentResult:
    """Median bad fraction over ``replicas`` environments on ``B_R``."""
    extra = {}
    if coeffs is None:
        ref = {"horizon": 10 * int(math.ceil(R)) ** 2, "replicas": 16, "walks": 4, **(reference or {})}
        coeffs = reference_coefficients(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
    extra["coefficients"] = coeffs.to_dict()
    jobs = [(law, R, r, seed, gamma_census, threshold_c, psi, coeffs, alpha_census) for r in range(replicas)]
    rows = map_cells(_census_cell, jobs, workers)
    med = float(np.median([r[5] for r in rows]))
    checks = {"fraction_below": med < max_fraction}
    extra["median_fraction"] = med
    return ExperimentResult("census", ["R", "replica", "env_seed", "R0", "bad", "fraction", "total", "threshold",
                                       "worst"], rows, [(float(R), med)], None, checks, extra,
                            [f"alpha_census={alpha_census:g}"])


def _census_cell(job):
    law, R, replica, seed, gamma, c, psi, coeffs, alpha = job
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    env = _sample_for(law, ball(R, law.dimension).closure, env_seed, margin=1)
    rep = bad_point_census(env, R, gamma, c, psi, coeffs, alpha)
    return [R, replica, env_seed, rep.R0, rep.bad, rep.fraction, rep.total, rep.threshold, rep.worst]


# -------------------------------------------------------------------------- mu


def _mu_cell(job):
    law, ladder, replica, seed, s, psi, mean, s_check = job
    d = law.dimension
    env_seed = stream_seed(seed, STREAM_ENVIRONMENT, replica)
    side = 3 ** max(ladder)
    env = sample_environment(law, Box.centered((side + 1) // 2, d), env_seed)
    rows = []
    for n in ladder:
        est = mu_hat(env, n, s, psi, mean, seed=stream_seed(seed, replica, n))
        row = [n, replica, env_seed, est.mu_hat, est.mu_hat_star, est.mu_hat ** 2 + est.mu_hat_star ** 2]
        if s_check is not None:
            hi = mu_hat(env, n, s_check, psi, mean, seed=stream_seed(seed, replica, n))
            row += [hi.mu_hat, hi.mu_hat_star]
        rows.append(row)
    return rows


def mu_decay(law: EnvironmentLaw, n_ladder, s: float, psi: ObservableSpec, replicas: int, seed: int,
             mean: float | None = None, s_check: float | None = None, reference: dict | None = None,
             workers: int = 1) -> ExperimentResult:
    """Cross-replica mean of ``mu_n(s)^2 + mu*_n(s)^2`` for the canonical solutions, fitted against ``n``.

    With ``s_check > s`` every replica also records the values at
    ``s_check``, which should not be smaller.
    """
    ladder = _check_ladder([int(n) for n in n_ladder], "n ladder")
    if ladder[0] < 1 or ladder[-1] > 4:
        raise ConfigurationError("mu ladder must lie in 1..4")
    extra = {}
    if mean is None:
        ref = {"horizon": 20000, "replicas": 64, "walks": 4, **(reference or {})}
        mean, se = reference_mean(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
        extra["reference"] = {"mean": mean, "se": se, **ref}
    jobs = [(law, ladder, r, seed, float(s), psi, float(mean), s_check) for r in range(replicas)]
    rows = [row for block in map_cells(_mu_cell, jobs, workers) for row in block]
    rows.sort(key=lambda r: (r[0], r[1]))
    columns = ["n", "replica", "env_seed", "mu_hat", "mu_hat_star", "statistic"]
    if s_check is not None:
        columns += ["mu_hat_check", "mu_hat_star_check"]
    ladder_stats = []
    for n in ladder:
        vals = [r[5] for r in rows if r[0] == n]
        ladder_stats.append((n, float(np.mean(vals))))
    notes = []
    fit = _try_fit(ladder_stats, notes, semilog=True)
    checks = {}
    _ladder_check(ladder_stats, fit, checks)
    if s_check is not None:
        tol = 1e-12
        checks["monotone_in_s"] = all(r[6] >= r[3] - tol and r[7] >= r[4] - tol for r in rows)
    return ExperimentResult("mu_decay", columns, rows, ladder_stats, fit, checks, extra, notes)


__all__ = [
    "RateFit", "fit_rate", "ExperimentResult", "map_cells", "reference_coefficients", "reference_mean",
    "homog_error_elliptic", "homog_error_parabolic", "corrector_sublinearity", "ergodicity_rate",
    "kolmogorov_statistic", "projected_step_pmf", "exact_kolmogorov_distance", "dkw_bound", "berry_esseen",
    "CensusReport", "census_functionals", "bad_point_census", "census_experiment", "mu_decay",
    "strictly_decreasing", "BHLabError",
]
