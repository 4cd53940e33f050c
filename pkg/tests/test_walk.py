from __future__ import annotations

import math

import numpy as np
import pytest

from bhlab.catalog import CatalogFunction
from bhlab.environment import Box, EnvironmentLaw, ObservableSpec, sample_environment
from bhlab.errors import ConfigurationError, TruncationError
from bhlab.lattice import ball
from bhlab.solver import dirichlet_problem, expected_exit_time, solve_elliptic_direct
from bhlab.walk import (STREAM_WALK, WalkStream, dump_paths, environment_process_average, exit_walks,
                        feynman_kac_elliptic, horizon_walks, implicit_horizon_walks, lazy_probabilities, lazy_step,
                        required_radius, run_until_exit, sample_paths, step, stream_seed)

LAW = EnvironmentLaw.two_point(0.5, 2.0, 0.5, 2)


def env(seed=0, radius=20, law=LAW):
    return sample_environment(law, Box.centered(radius, law.dimension), seed)


def test_paths_are_reproducible_and_replayable():
    e = env(1)
    a = sample_paths(e, (0, 0), 50, 20, seed=9)
    b = sample_paths(e, (0, 0), 50, 20, seed=9)
    assert np.array_equal(a, b)
    # walk k alone, started at its global index, replays the same path
    one = horizon_walks(e, (0, 0), 50, 1, stream_seed(9, STREAM_WALK), first_walk=7, record_paths=True).paths
    assert np.array_equal(one[0], a[7])
    # and so does the scalar stepping API
    stream = WalkStream(stream_seed(9, STREAM_WALK), walk=7)
    x = (0, 0)
    for t in range(50):
        x = step(e, x, stream)
        assert x == tuple(a[7, t + 1])


def test_paths_are_nearest_neighbour():
    p = sample_paths(env(2), (3, -1), 100, 10, seed=1)
    assert np.all(np.abs(np.diff(p, axis=1)).sum(axis=-1) == 1)


def test_step_frequencies_match_kernel():
    e = env(3)
    w = e.weights_at([(0, 0)])[0]
    expected = np.repeat(w / (2 * w.sum()), 2)
    n = 200_000
    s = horizon_walks(e, (0, 0), 1, n, seed=4)
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    counts = np.array([np.all(s.final == m, axis=1).sum() for m in moves])
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(counts / n - expected) < 5 * se)


def test_lazy_kernel():
    w = np.array([0.2, 0.5])
    p = lazy_probabilities(w)
    assert p.sum() == pytest.approx(1.0)
    assert p[-1] == pytest.approx(1 / 1.7)
    e = env(5)
    stream = WalkStream(11)
    wx = e.weights_at([(0, 0)])[0]
    stays = sum(lazy_step(e, (0, 0), stream) == (0, 0) for _ in range(20_000))
    q = 1.0 / (1.0 + wx.sum())
    assert abs(stays / 20_000 - q) < 5 * math.sqrt(q * (1 - q) / 20_000)


def test_required_radius_formula():
    assert required_radius(0, 10, 2) == 0
    n, walks, d = 400, 1000, 2
    r = required_radius(n, walks, d)
    assert r == math.ceil(math.sqrt(2 * n * math.log(2 * d * walks / 1e-6)))
    # the union bound is below delta at r
    assert 2 * d * walks * math.exp(-r ** 2 / (2 * n)) <= 1e-6


def test_truncation_detected():
    e = env(0, radius=3)
    with pytest.raises(TruncationError):
        horizon_walks(e, (0, 0), 200, 50, seed=1)
    with pytest.raises(TruncationError):
        environment_process_average(e, (0, 0), 200, ObservableSpec.parse("trace"), 50, seed=1)
    out = horizon_walks(e, (0, 0), 200, 50, seed=1, allow_truncation=True)
    assert out.truncated.any()


def test_implicit_matches_stored_environment():
    e = env(13, radius=30)
    psi = [ObservableSpec.parse("coord_ratio(1)")]
    dense = horizon_walks(e, (0, 0), 100, 50, seed=3, observables=psi)
    implicit = implicit_horizon_walks(LAW, 13, (0, 0), 100, 50, seed=3, observables=psi)
    assert np.array_equal(dense.final, implicit.final)
    assert np.allclose(dense.sums, implicit.sums)


def test_exit_time_monte_carlo():
    law = EnvironmentLaw.uniform(0.5, 2.0, 2)
    e = env(7, radius=10, law=law)
    dom = ball(6, 2)
    exact = expected_exit_time(e, dom, tol=1e-12)[(1, 0)]
    sample = exit_walks(e, (1, 0), dom, 20_000, seed=5)
    assert sample.stopped.all()
    se = sample.tau.std(ddof=1) / math.sqrt(sample.tau.size)
    assert abs(sample.tau.mean() - exact) < 4 * se
    assert not np.any([dom.is_interior(x) for x in sample.exit_sites[:200]])


def test_run_until_exit_agrees_with_batch():
    e = env(8)
    dom = ball(5, 2)
    stream = WalkStream(stream_seed(2, STREAM_WALK), walk=0)
    x, t = run_until_exit(e, (0, 0), dom, stream)
    batch = exit_walks(e, (0, 0), dom, 1, stream_seed(2, STREAM_WALK))
    assert t == batch.tau[0] and x == tuple(batch.exit_sites[0])
    x, t = run_until_exit(e, (0, 0), dom, WalkStream(1), max_steps=2)
    assert t == 2


def test_feynman_kac_matches_direct_solve():
    e = env(9, radius=10)
    R = 6
    f = CatalogFunction("constant", {"value": 3.0})
    g = CatalogFunction("cosine_boundary", {"frequency": 2})
    psi = ObservableSpec.parse("trace")
    u = solve_elliptic_direct(dirichlet_problem(e, R, f, g, psi))
    est = feynman_kac_elliptic(e, (1, 1), ball(R, 2), f, ObservableSpec("psi_over_trace", inner=psi), g, R,
                               40_000, seed=3)
    assert abs(est.mean - u[(1, 1)]) < 4 * est.se
    with pytest.raises(ConfigurationError):
        feynman_kac_elliptic(e, (0, 0), ball(R, 2), f, psi, g, R, 0, seed=3)


def test_environment_average_constant_observable():
    est = environment_process_average(env(1, radius=60), (0, 0), 50, ObservableSpec.parse("const(2.5)"), 100, 0)
    assert est.mean == pytest.approx(2.5) and est.se == pytest.approx(0.0, abs=1e-12)


def test_dump_paths(tmp_path):
    p = sample_paths(env(), (0, 0), 3, 2, seed=0)
    dump_paths(tmp_path / "p.csv", p, first_walk=5)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "walk_index,step,x1,x2"
    assert len(lines) == 1 + 2 * 4 and lines[1].startswith("5,0,0,0")
