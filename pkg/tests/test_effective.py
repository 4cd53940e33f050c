from __future__ import annotations

import numpy as np
import pytest

from bhlab.catalog import CatalogFunction
from bhlab.effective import (EffectiveCoefficients, build_grid, estimate_effective, estimate_mean, scale_to_lattice,
                             solve_effective_elliptic, solve_effective_parabolic)
from bhlab.environment import EnvironmentLaw, ObservableSpec
from bhlab.errors import ConfigurationError, DomainError

TRACE = ObservableSpec.parse("trace")
HARMONIC4 = CatalogFunction("polynomial", {"terms": [[1.0, [4, 0]], [-6.0, [2, 2]], [1.0, [0, 4]]]})


def test_constant_law_coefficients_exact():
    law = EnvironmentLaw(2, "constant", (1.0, 3.0))
    exact = EffectiveCoefficients.for_constant_law(law, TRACE)
    assert np.allclose(exact.abar, [0.25, 0.75]) and exact.bbar == 0.25 and exact.psibar == 1.0
    est = estimate_effective(law, TRACE, 200, 2, 3, seed=0)
    assert np.allclose(est.abar, exact.abar, atol=1e-12)
    assert est.bbar == pytest.approx(0.25, abs=1e-12) and est.psibar == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ConfigurationError):
        EffectiveCoefficients.for_constant_law(EnvironmentLaw.uniform(1, 2, 2), TRACE)


def test_one_dimensional_coefficients():
    # in d = 1 the invariant measure is the law itself, so bbar = E[1/w]
    law = EnvironmentLaw.two_point(0.5, 1.0, 0.5, 1)
    est = estimate_effective(law, TRACE, 4000, 16, 4, seed=2)
    assert est.abar.tolist() == [1.0]
    assert abs(est.bbar - 1.5) < 4 * est.se["bbar"] + 1e-3
    # psi = trace gives psibar = 1 identically
    assert est.psibar == pytest.approx(1.0, abs=1e-12)


def test_exchangeable_law_is_isotropic():
    law = EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)
    est = estimate_effective(law, TRACE, 2000, 16, 4, seed=5)
    assert est.abar.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(est.abar[0] - 0.5) < 4 * est.se["abar"][0]
    assert est.provenance["burn"] == 200


def test_coefficient_roundtrip_and_errors():
    c = EffectiveCoefficients.exact([0.4, 0.6], 0.7, 1.2)
    back = EffectiveCoefficients.from_dict(c.to_dict())
    assert np.array_equal(back.abar, c.abar) and back.bbar == c.bbar and back.psibar == c.psibar
    with pytest.raises(ConfigurationError):
        estimate_effective(EnvironmentLaw.uniform(1, 2, 2), TRACE, 0, 1, 1, 0)
    with pytest.raises(ConfigurationError):
        estimate_effective(EnvironmentLaw.uniform(1, 2, 2), TRACE, 10, 1, 1, 0, burn_fraction=1.0)


def test_estimate_mean_constant_observable():
    m, se = estimate_mean(EnvironmentLaw.uniform(1, 2, 2), ObservableSpec.parse("const(0.3)"), 50, 2, 3, 0)
    assert m == pytest.approx(0.3) and se == pytest.approx(0.0, abs=1e-12)


def test_grid_construction():
    grid = build_grid(0.1, 2)
    assert np.all((grid.points ** 2).sum(axis=1) < 1.0)
    assert np.all(grid.arms <= 0.1 + 1e-15) and np.all(grid.arms > 0)
    cut = grid.neighbors < 0
    assert np.allclose(np.linalg.norm(grid.boundary_points[cut], axis=-1), 1.0)
    with pytest.raises(ConfigurationError):
        build_grid(0.5, 2)


@pytest.mark.parametrize("abar", [[0.5, 0.5], [0.2, 0.8]])
def test_elliptic_quadratic_exact(abar):
    # u = |x|^2 - 1 solves 1/2 tr(abar D^2 u) = sum(abar) = 1
    c = EffectiveCoefficients.exact(abar, 1.0, 2.0)
    sol = solve_effective_elliptic(c, CatalogFunction("constant", {"value": 0.5}), CatalogFunction("quadratic",
                                   {"value": -1.0}), h=1 / 16)
    assert np.max(np.abs(sol.values - ((sol.grid.points ** 2).sum(axis=1) - 1.0))) < 1e-10
    q = np.array([[0.0, 0.0], [0.3, -0.45], [0.99, 0.05], [0.6, 0.79]])
    # multilinear interpolation of |x|^2 is off by at most d h^2 / 4 between nodes
    assert np.allclose(sol.evaluate(q), (q ** 2).sum(axis=1) - 1.0, atol=2 * sol.h ** 2 / 4 + 1e-9)
    nodes = sol.grid.points[::7]
    assert np.allclose(sol.evaluate(nodes), (nodes ** 2).sum(axis=1) - 1.0, atol=1e-9)


def test_elliptic_refinement_is_second_order():
    c = EffectiveCoefficients.exact([0.5, 0.5], 1.0, 1.0)
    zero = CatalogFunction("constant", {"value": 0.0})
    errs = []
    for h in (1 / 16, 1 / 32):
        sol = solve_effective_elliptic(c, zero, HARMONIC4, h=h)
        errs.append(np.max(np.abs(sol.values - HARMONIC4(sol.grid.points))))
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_parabolic_exact_on_quadratic():
    # u = |x|^2 + t: 1/2 tr(abar 2I) + bbar = 1 + 0.5
    c = EffectiveCoefficients.exact([0.3, 0.7], 0.5, 1.5)
    sol = solve_effective_parabolic(c, CatalogFunction("constant", {"value": 1.0}),
                                    CatalogFunction("quadratic", time=1.0), h=1 / 16)
    expect = (sol.grid.points ** 2).sum(axis=1)
    for level in (0, len(sol.times) // 2):
        assert np.allclose(sol.values[level], expect + sol.times[level], atol=1e-10)
    q = np.array([[0.1, 0.2], [0.7, -0.7]])
    assert np.allclose(sol.evaluate(q, [0.25, 0.9]), (q ** 2).sum(axis=1) + [0.25, 0.9],
                       atol=2 * sol.h ** 2 / 4 + 1e-9)


def test_parabolic_cfl_enforced():
    c = EffectiveCoefficients.exact([0.5, 0.5], 0.5, 1.0)
    with pytest.raises(ConfigurationError):
        solve_effective_parabolic(c, CatalogFunction("constant"), CatalogFunction("constant"), h=1 / 16, dt=1.0)
    with pytest.raises(ConfigurationError):
        solve_effective_parabolic(EffectiveCoefficients.exact([0.5, 0.5], 0.0, 1.0), CatalogFunction("constant"),
                                  CatalogFunction("constant"), h=1 / 16)


def test_evaluate_clamps_and_scales():
    c = EffectiveCoefficients.exact([0.5, 0.5], 1.0, 1.0)
    g = CatalogFunction("affine", {"slope": [1.0, 0.0]})
    sol = solve_effective_elliptic(c, CatalogFunction("constant", {"value": 0.0}), g, h=1 / 16)
    vals, flags = sol.evaluate([[2.0, 0.0], [0.5, 0.0]], return_flags=True)
    assert flags.tolist() == [True, False] and np.allclose(vals, [1.0, 0.5], atol=1e-10)
    scaled = scale_to_lattice(sol, 10)
    assert scaled([[5, 0]])[0] == pytest.approx(0.5, abs=1e-10) and scaled.clamped == 0
    with pytest.raises(DomainError):
        sol.evaluate([[0.0, 0.0, 0.0]])


def test_dump_csv(tmp_path):
    c = EffectiveCoefficients.exact([1.0], 1.0, 1.0)
    sol = solve_effective_elliptic(c, CatalogFunction("constant"), CatalogFunction("constant", {"value": 2.0}),
                                   h=0.1)
    sol.dump_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "x1,value" and len(lines) == 1 + sol.grid.n
