from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bhlab.catalog import CatalogFunction
from bhlab.environment import Box, EnvironmentLaw, ObservableSpec, sample_environment
from bhlab.errors import ConfigurationError, NonConvergenceError
from bhlab.lattice import ball, cube, generator, parabolic_raw
from bhlab.solver import (EllipticProblem, ParabolicProblem, dense_system, dirichlet_problem, expected_exit_time,
                          parabolic_boundary_argument, parabolic_dirichlet_problem, solve_corrector,
                          solve_elliptic, solve_elliptic_direct, solve_parabolic, tolerance_for_error)

TRACE = ObservableSpec.parse("trace")


def env2(seed=0, law=None, radius=12):
    law = law or EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)
    return sample_environment(law, Box.centered(radius, law.dimension), seed)


def test_iterative_matches_direct():
    env = env2(3)
    prob = dirichlet_problem(env, 7, CatalogFunction("constant", {"value": 1.0}),
                             CatalogFunction("cosine_boundary", {"frequency": 2}), TRACE)
    it, rep = solve_elliptic(prob, tol=1e-12)
    direct = solve_elliptic_direct(prob)
    assert np.max(np.abs(it.values - direct.values)) < 1e-9
    assert rep.residual <= 1e-12
    # the solution satisfies the discrete equation
    assert np.max(np.abs(generator(env, direct) - prob.rhs)) < 1e-10


@given(st.integers(0, 2 ** 32), st.lists(st.floats(-5, 5), min_size=1, max_size=400))
def test_maximum_principle(seed, data):
    env = env2(seed % 1000, radius=7)
    dom = ball(5, 2)
    bnd = np.resize(np.asarray(data), dom.n_boundary)
    u = solve_elliptic_direct(EllipticProblem(env, dom, 0.0, bnd))
    interior = u.values[: dom.n_interior]
    assert interior.max() <= bnd.max() + 1e-10
    assert interior.min() >= bnd.min() - 1e-10


def test_subharmonic_bounded_by_boundary():
    # L u = rhs >= 0 pushes u below its boundary maximum
    env = env2(5, radius=8)
    dom = ball(6, 2)
    u = solve_elliptic_direct(EllipticProblem(env, dom, 0.01, 1.0))
    assert np.all(u.values[: dom.n_interior] <= 1.0)


@pytest.mark.parametrize("R", [3, 6, 10])
def test_exit_time_one_dimensional(R):
    env = sample_environment(EnvironmentLaw.constant(1.0, 1), Box.centered(R + 2, 1), 0)
    dom = ball(R, 1)
    t = expected_exit_time(env, dom, tol=1e-12)
    x = dom.sites[:, 0].astype(float)
    assert np.allclose(t.values[: dom.n_interior], R ** 2 - x ** 2, atol=1e-8)


def test_exit_time_independent_of_constant_scale():
    # w = c I gives the same walk for every c
    for c in (0.3, 1.0, 4.0):
        env = sample_environment(EnvironmentLaw.constant(c, 2), Box.centered(6, 2), 0)
        t = expected_exit_time(env, ball(4, 2), tol=1e-12)
        assert t[(0, 0)] == pytest.approx(expected_exit_time(
            sample_environment(EnvironmentLaw.constant(1.0, 2), Box.centered(6, 2), 0), ball(4, 2))[(0, 0)])


def test_nonconvergence_raised():
    env = env2(1)
    prob = dirichlet_problem(env, 9, CatalogFunction("constant", {"value": 1.0}),
                             CatalogFunction("quadratic"), TRACE)
    with pytest.raises(NonConvergenceError) as info:
        solve_elliptic(prob, tol=1e-12, max_iters=3)
    assert info.value.residual > 1e-12


def test_solver_argument_errors():
    env = env2()
    prob = EllipticProblem(env, ball(3, 2), 0.0, 0.0)
    with pytest.raises(ConfigurationError):
        solve_elliptic(prob, tol=0.0)
    with pytest.raises(ConfigurationError):
        solve_elliptic(prob, omega=2.5)
    with pytest.raises(ConfigurationError):
        EllipticProblem(env, ball(3, 2), np.nan, 0.0)
    with pytest.raises(ConfigurationError):
        dirichlet_problem(env, 3, CatalogFunction("constant"), CatalogFunction("constant"), TRACE,
                          boundary_map="nearest")
    with pytest.raises(ConfigurationError):
        solve_elliptic_direct(EllipticProblem(env2(radius=40), ball(38, 2), 0.0, 0.0))


def test_dense_system_is_m_matrix():
    a, _ = dense_system(EllipticProblem(env2(), ball(4, 2), 0.0, 0.0))
    off = a - np.diag(np.diag(a))
    assert np.all(off <= 0) and np.allclose(np.diag(a), 1.0)
    assert np.all(a.sum(axis=1) >= -1e-15)


def test_affine_boundary_data_extension_is_exact():
    env = env2(8)
    g = CatalogFunction("affine", {"slope": [0.3, -1.2], "value": 0.5})
    prob = dirichlet_problem(env, 6, CatalogFunction("constant", {"value": 0.0}), g, TRACE,
                             boundary_map="extension")
    u = solve_elliptic_direct(prob)
    x = u.domain.closure / 6.0
    assert np.allclose(u.values, g(x), atol=1e-12)


def test_radial_boundary_map_projects_to_sphere():
    env = env2()
    prob = dirichlet_problem(env, 4, CatalogFunction("constant"), CatalogFunction("quadratic"), TRACE)
    assert np.allclose(prob.boundary, 1.0)  # |x/|x||^2


def test_corrector_zero_for_constant_observable():
    env = env2()
    phi = solve_corrector(env, cube(9, 2), ObservableSpec.parse("const(2)"), 2.0)
    assert np.all(phi.values == 0.0)


def test_parabolic_residual_and_monotonicity():
    law = EnvironmentLaw.uniform(0.2, 0.45, 2)
    env = sample_environment(law, Box.centered(7, 2), 4)
    prob = parabolic_dirichlet_problem(env, 4, CatalogFunction("constant", {"value": 1.0}),
                                       CatalogFunction("quadratic", time=1.0), TRACE)
    assert prob.is_monotone()
    u, rep = solve_parabolic(prob)
    assert rep.residual <= 1e-12
    assert np.max(np.abs(parabolic_raw(env, u) - prob.rhs)) <= 1e-12


def test_parabolic_comparison_principle():
    # zero forcing: u lies between the extremes of its parabolic boundary data
    law = EnvironmentLaw.two_point(0.3, 0.5, 0.5, 1)
    env = sample_environment(law, Box.centered(8, 1), 2)
    prob = parabolic_dirichlet_problem(env, 5, CatalogFunction("constant", {"value": 0.0}),
                                       CatalogFunction("cosine_boundary", {"frequency": 3}), TRACE)
    u, _ = solve_parabolic(prob)
    ni = u.domain.space.n_interior
    data = np.concatenate([prob.boundary[1:, ni:].ravel(), prob.boundary[-1, :ni]])
    vals = u.values[:-1, :ni]
    assert vals.max() <= data.max() + 1e-12 and vals.min() >= data.min() - 1e-12


def test_parabolic_affine_time_data_exact_with_extension():
    law = EnvironmentLaw.uniform(0.2, 0.5, 1)
    env = sample_environment(law, Box.centered(9, 1), 0)
    g = CatalogFunction("affine", {"slope": [2.0], "value": 1.0})
    R = 6
    prob = parabolic_dirichlet_problem(env, R, CatalogFunction("constant", {"value": 0.0}), g, TRACE,
                                       boundary_map="extension")
    u, _ = solve_parabolic(prob)
    ni = u.domain.space.n_interior
    x = u.domain.space.sites[:, 0] / R
    assert np.allclose(u.values[0, :ni], 2 * x + 1.0, atol=1e-12)


def test_parabolic_boundary_argument():
    xi, t = parabolic_boundary_argument(np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]), np.array([4.0, 9.0, 0.0]))
    assert np.allclose(xi[0], [0.6, 0.8]) and t[0] == pytest.approx(4 / 25)
    assert np.allclose(xi[1], [1 / 3, 0.0]) and t[1] == pytest.approx(1.0)
    assert np.allclose(xi[2], 0.0) and t[2] == 0.0


def test_parabolic_problem_rejects_nonfinite():
    env = sample_environment(EnvironmentLaw.constant(0.4, 1), Box.centered(5, 1), 0)
    from bhlab.lattice import cylinder
    K = cylinder(3, 1)
    bnd = np.zeros((K.levels + 1, K.space.n_closure))
    bnd[-1, 0] = np.inf
    with pytest.raises(ConfigurationError):
        ParabolicProblem(env, K, 0.0, bnd)


def test_tolerance_for_error_bound():
    env = env2(4, radius=20)
    prob = dirichlet_problem(env, 15, CatalogFunction("constant", {"value": 1.0}),
                             CatalogFunction("cosine_boundary", {"frequency": 3}), TRACE)
    tol = tolerance_for_error(prob.domain, 1e-9)
    assert tol <= 1e-9 / 15 ** 2
    u, _ = solve_elliptic(prob, tol=tol)
    assert np.max(np.abs(u.values - solve_elliptic_direct(prob).values)) <= 1e-9
    # the exit-time bound behind it
    t = expected_exit_time(env, prob.domain, tol=1e-12)
    assert t.values.max() <= 1e-9 / tol
