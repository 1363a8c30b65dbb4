import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from turbo_isac.estep import EstepConfig, GaussianBelief
from turbo_isac.geometry import AngularGrid, sin_bin_width
from turbo_isac.mstep import MstepConfig, gradient_q, mstep_update, run_turbo_sbi, surrogate_q
from turbo_isac.observation import (Observation, build_operator, expected_comm_power, expected_radar_power,
                                    make_pilots, noise_variance_for_snr, observe)
from turbo_isac.oracle import finite_diff
from turbo_isac.scene import HmmParams, SupportTriple, make_cdl_like_scene, sample_scene, scene_from_angles

from conftest import crandn


def _instance(seed, m=8, p=2, q=2):
    rng = np.random.default_rng(seed)
    pil = make_pilots(m, p, q, 1.0, rng)
    grid = AngularGrid(np.arcsin(np.sort(rng.uniform(-0.9, 0.9, m))))
    belief = GaussianBelief(crandn(rng, 2 * m), rng.uniform(0.01, 0.5, 2 * m))
    op = build_operator(pil, grid, 1)
    y_r, y_c = op.apply(*np.split(crandn(rng, 2 * m), 2))
    obs = Observation(y_r + 0.3 * crandn(rng, y_r.size), y_c + 0.3 * crandn(rng, y_c.size), 0.2, 0.5)
    return pil, grid, belief, obs


def _q(grid, belief, pil, obs):
    return surrogate_q(grid, belief, pil.downlink(1), pil.up, obs)


def test_q_zero_at_perfect_fit():
    pil, grid, belief, _ = _instance(0)
    op = build_operator(pil, grid, 1)
    xr, xc = np.split(belief.mean, 2)
    y_r, y_c = op.apply(xr, xc)
    b0 = GaussianBelief(belief.mean, np.zeros_like(belief.var))
    assert _q(grid, b0, pil, Observation(y_r, y_c, 0.1, 0.1)) == pytest.approx(0.0, abs=1e-20)


def test_q_residual_quadratic():
    pil, grid, belief, obs = _instance(1)
    b0 = GaussianBelief(belief.mean, np.zeros_like(belief.var))
    op = build_operator(pil, grid, 1)
    fx_r, fx_c = op.apply(*np.split(belief.mean, 2))
    q1 = _q(grid, b0, pil, obs)
    obs2 = Observation(fx_r + 2 * (obs.y_r - fx_r), fx_c + 2 * (obs.y_c - fx_c), obs.noise_var_r, obs.noise_var_c)
    assert _q(grid, b0, pil, obs2) == pytest.approx(4 * q1, rel=1e-12)


def test_gradient_zero_for_zero_belief():
    pil, grid, belief, obs = _instance(2)
    zero = GaussianBelief(np.zeros_like(belief.mean), np.zeros_like(belief.var))
    g = gradient_q(grid, zero, pil.downlink(1), pil.up, obs)
    np.testing.assert_array_equal(g, 0.0)


def test_gradient_stationary_at_truth():
    m = 8
    grid = AngularGrid.uniform(m)
    sc = scene_from_angles(m, comm_angles=[grid.theta[2]], comm_gains=[1.0 + 0.5j])
    pil = make_pilots(m, 1, 1, 1.0, 0)
    obs = observe(sc, pil, 1, 0.0, 0.0, 0)
    belief = GaussianBelief(np.concatenate([sc.x_r, sc.x_c]), np.zeros(2 * m))
    g = gradient_q(grid, belief, pil.downlink(1), pil.up, obs, noise_floor=1.0)
    assert abs(g[2]) < 1e-10
    fd = finite_diff(lambda th: surrogate_q(AngularGrid(th), belief, pil.downlink(1), pil.up, obs, 1.0),
                     grid.theta, 1e-6)
    assert abs(fd[2]) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    pil, grid, belief, obs = _instance(seed)
    g = gradient_q(grid, belief, pil.downlink(1), pil.up, obs)
    fd = finite_diff(lambda th: _q(AngularGrid(th), belief, pil, obs), grid.theta, 1e-6)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


def test_q_line_integral_matches_gradient():
    pil, grid, belief, obs = _instance(11)
    rng = np.random.default_rng(0)
    d = rng.standard_normal(grid.m_tilde) * 1e-3
    ts = np.linspace(0, 1, 201)
    slopes = [gradient_q(AngularGrid(grid.theta + t * d), belief, pil.downlink(1), pil.up, obs) @ d for t in ts]
    integral = trapezoid(slopes, ts)
    diff = _q(AngularGrid(grid.theta + d), belief, pil, obs) - _q(grid, belief, pil, obs)
    assert abs(integral - diff) <= 1e-4 * max(1.0, abs(diff))


def test_mstep_zero_gradient_keeps_grid():
    grid = AngularGrid.uniform(4)
    new, info = mstep_update(grid, np.zeros(4), MstepConfig(), q_fn=lambda th: 0.0)
    assert new is grid and not info["accepted"]


def test_mstep_quadratic_increases():
    grid = AngularGrid(np.array([0.2]))
    q = lambda th: -float((th[0] - 0.5) ** 2)
    g = np.array([-2 * (0.2 - 0.5)])
    new, info = mstep_update(grid, g, MstepConfig(), q_fn=q)
    assert info["accepted"] and q(new.theta) > q(grid.theta)


def test_mstep_exhausted_backtracking_returns_unchanged():
    grid = AngularGrid(np.array([0.2, 0.4]))
    new, info = mstep_update(grid, np.array([1.0, 1.0]), MstepConfig(max_backtracks=5), q_fn=lambda th: -th.sum())
    assert np.array_equal(new.theta, grid.theta) and not info["accepted"]


def test_mstep_rejects_nonfinite_gradient():
    with pytest.raises(ValueError):
        mstep_update(AngularGrid.uniform(2), np.array([np.nan, 0.0]))


@pytest.mark.parametrize("seed", range(100))
def test_mstep_accepted_q_never_decreases(seed):
    pil, grid, belief, obs = _instance(seed, m=6, p=1, q=1)
    dp, up = pil.downlink(1), pil.up
    g = gradient_q(grid, belief, dp, up, obs)
    q_fn = lambda th: surrogate_q(AngularGrid(th), belief, dp, up, obs)
    new, info = mstep_update(grid, g, MstepConfig(), q_fn=q_fn)
    assert q_fn(new.theta) >= q_fn(grid.theta)
    # sorted grids stay sorted under the step cap
    assert np.all(np.diff(new.theta) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_mstep_keeps_angles_inside(seed):
    rng = np.random.default_rng(seed)
    grid = AngularGrid(np.sort(rng.uniform(-1.5, 1.5, 5)))
    g = rng.standard_normal(5) * 1e3
    new, _ = mstep_update(grid, g, MstepConfig(), q_fn=lambda th: float(g @ th))
    assert np.all(np.abs(new.theta) < np.pi / 2)


def test_mstep_config_validation():
    with pytest.raises(ValueError):
        MstepConfig(c1=1.5)
    with pytest.raises(ValueError):
        MstepConfig(beta=0.0)


def _noise_20db(k, l, m):
    return (noise_variance_for_snr(expected_radar_power(k, 1.0, 1.0, m), 20.0),
            noise_variance_for_snr(expected_comm_power(l, 1.0, m), 20.0))


def test_turbo_on_grid_high_snr():
    m = 16
    g = AngularGrid.uniform(m).theta
    sc = scene_from_angles(m, [g[2]], [1.2], [g[12]], [0.8j], [g[7]], [-0.9], [1.1])
    pil = make_pilots(m, 4, 4, 1.0, 0)
    obs = observe(sc, pil, 1, *_noise_20db(2, 2, m), 1)
    params = HmmParams(0.1, 0.4, 0.67, 0.67)
    res = run_turbo_sbi(pil, obs, params)
    act = sc.support.s
    assert np.max(np.abs(res.grid.theta - sc.grid_truth.theta)[act]) <= 1e-3
    assert np.array_equal(res.support.pi_r > 0.5, sc.support.s_r)
    assert np.array_equal(res.support.pi_c > 0.5, sc.support.s_c)
    # closing E step: trace Q values never decrease within an M step
    for row in res.trace:
        if row["q_value"] is not None:
            assert row["q_value"] >= row["q_before"]


def _separated_scene(m, rng):
    # five AoAs at least three bins apart, each jittered by up to half a bin
    idx = np.sort(rng.choice(np.arange(1, m - 1, 4), 5, replace=False)) + rng.integers(0, 2, 5)
    sup = SupportTriple.from_sets(m, idx[:3], idx[2:])
    return sample_scene(HmmParams(0.5, 0.5, 1, 1), sup, AngularGrid.uniform(m), 1.0, rng)


@pytest.mark.slow
def test_turbo_offgrid_beats_fixed_grid():
    m = 32
    rng = np.random.default_rng(0)
    err_dyn, err_fix = [], []
    params = HmmParams(5 / 27 / 4, 1 / 4, 0.6, 0.6)
    for _ in range(10):
        sc = _separated_scene(m, rng)
        pil = make_pilots(m, 4, 4, 1.0, rng)
        obs = observe(sc, pil, 1, *_noise_20db(3, 3, m), rng)
        dyn = run_turbo_sbi(pil, obs, params, mstep=MstepConfig(max_outer=300))
        fix = run_turbo_sbi(pil, obs, params, fixed_grid=True)
        act = sc.support.s
        err_dyn.append((np.sin(dyn.grid.theta) - sc.grid_truth.sines())[act])
        err_fix.append((np.sin(fix.grid.theta) - sc.grid_truth.sines())[act])
    err_dyn, err_fix = np.concatenate(err_dyn), np.concatenate(err_fix)
    bin_w = sin_bin_width(m)
    assert np.sqrt(np.mean(err_dyn ** 2)) <= 0.1 * bin_w
    assert np.mean(err_fix ** 2) >= 3 * np.mean(err_dyn ** 2)


@pytest.mark.slow
def test_turbo_empty_scene_false_detections():
    m = 32
    pil = make_pilots(m, 1, 1, 1.0, 0)
    params = HmmParams(0.05 * 0.5 / 0.95, 0.5, 0.7, 0.7)
    assert abs(params.steady_state - 0.05) < 1e-12
    clean = 0
    for seed in range(200):
        obs = observe(scene_from_angles(m), pil, 1, 0.05, 0.05, seed)
        # grid updates restricted to indices with support probability above 0.1
        res = run_turbo_sbi(pil, obs, params, mstep=MstepConfig(update_floor=0.1))
        clean += not (np.any(res.support.pi_r > 0.5) or np.any(res.support.pi_c > 0.5))
    assert clean >= 190


def test_turbo_estep_config_passthrough():
    m = 8
    pil = make_pilots(m, 1, 1, 1.0, 0)
    obs = observe(make_cdl_like_scene(0.5, 2, 2, m, 0), pil, 1, 0.1, 0.1, 0)
    res = run_turbo_sbi(pil, obs, HmmParams(0.2, 0.4, 0.7, 0.7), estep=EstepConfig(max_iter=3),
                        mstep=MstepConfig(max_outer=2))
    assert res.outer_iterations <= 2 and len(res.trace) <= 2
    assert all(r["estep_iterations"] <= 3 for r in res.trace)
