from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binom

from bhlab.catalog import CatalogFunction
from bhlab.effective import EffectiveCoefficients
from bhlab.environment import Box, EnvironmentLaw, ObservableSpec, sample_environment
from bhlab.errors import ConfigurationError, RateFitError
from bhlab.experiments import (ExperimentResult, bad_point_census, berry_esseen, census_functionals,
                               corrector_sublinearity, dkw_bound, exact_kolmogorov_distance, fit_rate,
                               homog_error_elliptic, homog_error_parabolic, kolmogorov_statistic, mu_decay,
                               projected_step_pmf, reference_mean)
from bhlab.lattice import ball
from bhlab.solver import EllipticProblem, solve_elliptic_direct

TRACE = ObservableSpec.parse("trace")
RATIO = ObservableSpec.parse("coord_ratio(1)")


# ------------------------------------------------------------------- rate fits


def test_fit_recovers_power_law():
    fit = fit_rate([(R, 3.0 * R ** -2.0) for R in (9, 27, 81)])
    assert fit.slope == pytest.approx(-2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12) and fit.r2 == pytest.approx(1.0)


def test_fit_constant_statistic_has_zero_slope():
    fit = fit_rate([(1, 0.5), (2, 0.5), (4, 0.5)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12) and fit.r2 == 1.0


def test_fit_with_noise():
    rng = np.random.default_rng(0)
    xs = np.geomspace(4, 400, 8)
    fit = fit_rate([(x, x ** -1.0 * (1 + 0.01 * rng.normal())) for x in xs])
    assert -1.1 <= fit.slope <= -0.9


def test_fit_semilog_and_failures():
    fit = fit_rate([(n, math.exp(-1.5 * n)) for n in (1, 2, 3)], semilog=True)
    assert fit.slope == pytest.approx(-1.5) and fit.to_dict()["abscissa"] == "scale"
    with pytest.raises(RateFitError):
        fit_rate([(1, 1.0), (2, 0.5)])
    with pytest.warns(RuntimeWarning):
        with pytest.raises(RateFitError):
            fit_rate([(1, 1.0), (2, 0.0), (3, 0.2)])
    with pytest.warns(RuntimeWarning):
        assert fit_rate([(1, 1.0), (2, -1.0), (3, 0.5), (4, 0.25)]).excluded == 1


# ----------------------------------------------------------------- Kolmogorov


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=50), st.floats(0.1, 3.0))
def test_kolmogorov_statistic_range_and_permutation(samples, sigma):
    k = kolmogorov_statistic(samples, sigma)
    assert 0.0 <= k <= 1.0
    assert kolmogorov_statistic(samples[::-1], sigma) == k


def test_kolmogorov_statistic_single_point():
    # F jumps from 0 to 1 at 0 where Phi = 1/2
    assert kolmogorov_statistic([0.0], 1.0) == pytest.approx(0.5)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_projected_pmf_matches_convolution(d):
    n = 12
    step = np.zeros(3)
    step[0] = step[2] = 1.0 / (2 * d)
    step[1] = 1.0 - 1.0 / d
    pmf = np.array([1.0])
    for _ in range(n):
        pmf = np.convolve(pmf, step)
    support, exact = projected_step_pmf(n, d)
    assert np.allclose(exact, pmf, atol=1e-15)
    assert support[0] == -n and support[-1] == n


def test_exact_distance_frozen_values():
    # d = 2: X_n . e1 = Bin(2n, 1/2) - n; sup over the jumps of the CDF
    for n, expect in ((400, 0.014100), (6400, 0.003526)):
        assert exact_kolmogorov_distance(n, 2) == pytest.approx(expect, abs=5e-7)
    k = np.arange(-50, 51)
    cdf = binom.cdf(k + 50, 100, 0.5)
    from scipy.stats import norm
    t = norm.cdf(k / math.sqrt(50) / math.sqrt(0.5))
    brute = max(np.abs(cdf - t).max(), np.abs(np.concatenate([[0.0], cdf[:-1]]) - t).max())
    assert exact_kolmogorov_distance(50, 2) == pytest.approx(brute, abs=1e-15)


def test_dkw_bound():
    assert dkw_bound(100_000) == pytest.approx(math.sqrt(math.log(2e6) / 2e5))


def test_berry_esseen_argument_checks():
    law = EnvironmentLaw.constant(1.0, 2)
    c = EffectiveCoefficients.for_constant_law(law, TRACE)
    with pytest.raises(ConfigurationError):
        berry_esseen(law, [10], [1.0, 0.0], c, 10, 0)
    with pytest.raises(ConfigurationError):
        berry_esseen(law, [10, 20], [1.0, 1.0], c, 10, 0)


def test_berry_esseen_on_fixed_environment():
    law = EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)
    env = sample_environment(law, Box.centered(150, 2), 3)
    c = EffectiveCoefficients.exact([0.5, 0.5], 1.0, 1.0)
    res = berry_esseen(env, [50, 400], [1.0, 0.0], c, 2000, seed=1, environments=7)
    assert len(res.rows) == 2  # a fixed environment is one column
    assert all(0 <= r[4] <= 1 for r in res.rows)


# -------------------------------------------------------------------- census


def test_census_functional_matches_solver():
    law = EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)
    env = sample_environment(law, Box.centered(12, 2), 4)
    refs = EffectiveCoefficients.exact([0.5, 0.5], 1.0, 0.4)
    centers = np.array([[0, 0], [3, -2]])
    got = census_functionals(env, centers, 4.5, TRACE, refs)
    for c, row in zip(centers, got):
        dom = ball(4.5, 2, center=c)
        w = env.weights_at(dom.sites)
        tr = w.sum(axis=1)
        zetas = [TRACE.evaluate(w) / tr - 0.4, w[:, 0] / tr - 0.5, w[:, 1] / tr - 0.5]
        for j, z in enumerate(zetas):
            v = solve_elliptic_direct(EllipticProblem(env, dom, -z, 0.0))
            assert row[j] == pytest.approx(abs(v[tuple(c)]), abs=1e-10)


def test_census_trivial_and_monotone():
    const = sample_environment(EnvironmentLaw.constant(1.0, 2), Box.centered(30, 2), 0)
    refs = EffectiveCoefficients.exact([0.5, 0.5], 0.5, 1.0)
    rep = bad_point_census(const, 27, 0.4, 0.01, TRACE, refs, 0.3)
    assert rep.bad == 0 and rep.worst == pytest.approx(0.0, abs=1e-12)
    law = EnvironmentLaw.two_point(0.3, 3.0, 0.5, 2)
    env = sample_environment(law, Box.centered(30, 2), 1)
    est = EffectiveCoefficients.exact([0.5, 0.5], 0.9, 0.9)
    counts = [bad_point_census(env, 27, 0.4, c, TRACE, est, 0.3).bad for c in (0.01, 0.1, 1.0, 1e6)]
    assert counts == sorted(counts, reverse=True) and counts[-1] == 0
    with pytest.raises(ConfigurationError):
        bad_point_census(env, 27, 0.6, 1.0, TRACE, est, 0.3)


# ----------------------------------------------------------- ladder experiments


def test_elliptic_affine_rows_exact():
    law = EnvironmentLaw.uniform(0.5, 2.0, 2)
    g = CatalogFunction("affine", {"slope": [1.0, -0.5], "value": 0.2})
    res = homog_error_elliptic(law, [3, 5, 7], CatalogFunction("constant", {"value": 0.0}), g, TRACE, 2, 0,
                               coeffs=EffectiveCoefficients.exact([0.5, 0.5], 1.0, 1.0), h=1 / 16, tol=1e-12)
    assert all(r[3] <= 1e-9 for r in res.rows)
    assert res.passed and res.fit is None  # exact zeros cannot be fitted
    assert set(res.checks) == {"decreasing", "slope_negative"}


def test_elliptic_constant_environment_quadratic():
    # w = I: the lattice solution of L u = 1 / R^2 with g = |x|^2 is |x|^2 / R^2 exactly
    law = EnvironmentLaw.constant(1.0, 2)
    res = homog_error_elliptic(law, [3, 5], CatalogFunction("constant", {"value": 1.0}),
                               CatalogFunction("quadratic"), TRACE, 1, 0, h=1 / 32, tol=1e-12)
    # only the multilinear interpolation of the continuum solution is inexact
    assert all(r[3] <= 2 * (1 / 32) ** 2 / 4 + 1e-9 for r in res.rows)


def test_parabolic_constant_and_affine_rows():
    # in d = 1 the two-sided bound and tr w <= 1 leave w in [1/2, 1]
    law = EnvironmentLaw.uniform(0.5, 1.0, 1)
    c = EffectiveCoefficients.exact([1.0], 1.4, 1.0)
    zero = CatalogFunction("constant", {"value": 0.0})
    for g in (CatalogFunction("constant", {"value": 1.5}), CatalogFunction("affine", {"slope": [1.0]})):
        res = homog_error_parabolic(law, [3, 5], zero, g, TRACE, 2, 0, coeffs=c, h=1 / 64)
        assert all(r[3] <= 1e-9 for r in res.rows), g


def test_parabolic_rejects_large_trace():
    with pytest.raises(ConfigurationError):
        homog_error_parabolic(EnvironmentLaw.uniform(0.4, 0.8, 2), [3, 5], CatalogFunction("constant"),
                              CatalogFunction("constant"), TRACE, 1, 0)


def test_workers_do_not_change_results():
    law = EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)
    a = corrector_sublinearity(law, [3, 9], RATIO, 2, 5, mean=0.5)
    b = corrector_sublinearity(law, [3, 9], RATIO, 2, 5, mean=0.5, workers=2)
    assert a.rows == b.rows


def test_mu_decay_constant_environment():
    law = EnvironmentLaw.constant(1.0, 2)
    res = mu_decay(law, [1, 2], 0.0, RATIO, 1, 0, s_check=0.1)
    assert all(r[5] == 0.0 for r in res.rows)
    assert res.checks["decreasing"] and res.checks["monotone_in_s"]
    with pytest.raises(ConfigurationError):
        mu_decay(law, [2, 5], 0.0, RATIO, 1, 0)


def test_reference_mean_exact_cases():
    assert reference_mean(EnvironmentLaw.uniform(1, 2, 2), ObservableSpec.parse("const(3)"), 10, 1, 1, 0) == (3.0, 0.0)
    assert reference_mean(EnvironmentLaw(2, "constant", (1.0, 3.0)), RATIO, 10, 1, 1, 0) == (0.25, 0.0)


def test_ladder_validation():
    law = EnvironmentLaw.constant(1.0, 2)
    with pytest.raises(ConfigurationError):
        corrector_sublinearity(law, [9], RATIO, 1, 0, mean=0.5)
    with pytest.raises(ConfigurationError):
        corrector_sublinearity(law, [9, 3], RATIO, 1, 0, mean=0.5)


def test_result_files(tmp_path):
    res = ExperimentResult("demo", ["R", "stat"], [[3, 0.1], [9, 1 / 3]], [(3, 0.1), (9, 1 / 3)], None,
                           {"ok": True})
    summary = res.write(tmp_path, "abc", 7)
    assert (tmp_path / "demo.csv").read_text() == "R,stat\n3,0.1\n9,0.3333333333333333\n"
    assert json.loads((tmp_path / "demo.json").read_text()) == summary
    assert summary["passed"] and summary["seed"] == 7 and res.column("stat") == [0.1, 1 / 3]
