import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats
from scipy.integrate import trapezoid

from rmparametrix.diffusions import (density_p, frozen_density_p_tilde, frozen_density_q_tilde,
                                     g_sigma, gaussian_transition, sample_limit_sde,
                                     simulate_cutoff_sde, substep_plan, two_sided_constants)
from rmparametrix.chains import SimulationError
from rmparametrix.estimate import kde, stderr_ratio, DensityGrid
from rmparametrix.flows import DriftField, backward_flow_limit, solve_theta_bar
from rmparametrix.model import CutoffRule, build_grid, harmonic_schedule, linear_model, sine_model

import oracles

NONLINEAR = sine_model(1.0, 0.2, sigma=1.0, theta0=1.0)
OU = linear_model(sigma=1.0, theta0=0.0)          # A = -1/2
BROWNIAN = linear_model(sigma=1.0, theta0=0.0, slope=0.5)   # A = 0


def field_for(model, N, horizon=1.0, cutoff=CutoffRule()):
    return DriftField.build(model, build_grid(harmonic_schedule(N, horizon)), cutoff=cutoff)


# ---------------------------------------------------------------------------
# limit density


def test_zero_drift_density_is_heat_kernel():
    flows = solve_theta_bar(BROWNIAN, 1.0)
    y = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(density_p(0.2, 0.9, 0.4, y, flows), g_sigma(0.7, y - 0.4, 1.0),
                               rtol=1e-9)


def test_ou_density_closed_form():
    flows = solve_theta_bar(OU, 1.0)
    mean, var = oracles.ou_transition(0.0, 1.0, -0.5, 1.0)
    assert var == pytest.approx(1 - math.exp(-1))
    assert float(density_p(0.0, 1.0, 0.0, 0.0, flows)) == pytest.approx(
        float(oracles.normal_pdf(0.0, mean, var)), rel=1e-9)
    for x, y in [(1.0, -0.5), (-2.0, 1.5)]:
        m, v = oracles.ou_transition(x, 0.6, -0.5, 1.0)
        assert float(density_p(0.3, 0.9, x, y, flows)) == pytest.approx(
            float(oracles.normal_pdf(y, m, v)), rel=1e-9)


def test_ou_density_matches_kde_of_exact_draws():
    flows = solve_theta_bar(OU, 1.0)
    draws = sample_limit_sde(0.0, 1.0, 0.0, 200_000, 21, flows)
    y = np.linspace(-2.5, 2.5, 26)
    est = kde(draws, grid=([0.0], y))
    exact = DensityGrid([0.0], y, density_p(0.0, 1.0, 0.0, y, flows))
    assert stderr_ratio(est, exact) < 3.0


@given(st.floats(0, 0.8), st.floats(0.05, 0.5), st.floats(-2, 2))
def test_limit_density_normalized(t, tau, x):
    flows = solve_theta_bar(NONLINEAR, 1.5)
    T = t + tau
    val, _ = integrate.quad(lambda y: float(density_p(t, T, x, y, flows)), -np.inf, np.inf,
                            epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_density_requires_order():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    with pytest.raises(ValueError):
        density_p(0.5, 0.5, 0.0, 0.0, flows)


def test_two_sided_gaussian_bounds_hold():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    t, T = 0.1, 0.9
    x = np.linspace(-3, 3, 31)[:, None]
    y = np.linspace(-3, 3, 31)[None, :]
    vals = density_p(t, T, x, y, flows)
    theta = backward_flow_limit(flows, T, y.ravel(), [t])[0][None, :]
    c1, c2 = two_sided_constants(vals, T - t, theta - x)
    assert math.isfinite(c1) and math.isfinite(c2)


def test_variance_tends_to_brownian_as_drift_vanishes():
    flows = solve_theta_bar(BROWNIAN, 1.0)
    tr = gaussian_transition(0.0, 0.8, 0.0, flows)
    assert float(tr.variance) == pytest.approx(0.8, rel=1e-9)


# ---------------------------------------------------------------------------
# exact sampler


def test_sampler_moments():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    tr = gaussian_transition(0.2, 1.0, 1.5, flows)
    d = sample_limit_sde(0.2, 1.0, 1.5, 100_000, 3, flows)
    assert abs(d.mean() - float(tr.mean)) < 4 * math.sqrt(float(tr.variance) / d.size)
    assert abs(d.var() - float(tr.variance)) < 4 * float(tr.variance) * math.sqrt(2 / d.size)


def test_sampler_without_drift_has_brownian_variance():
    flows = solve_theta_bar(BROWNIAN, 1.0)
    d = sample_limit_sde(0.0, 0.5, 0.0, 100_000, 4, flows)
    assert abs(d.var() - 0.5) < 4 * 0.5 * math.sqrt(2 / d.size)


def test_sampler_chapman_kolmogorov():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    n = 40_000
    direct = sample_limit_sde(0.0, 1.0, 0.8, n, 5, flows)
    mid = sample_limit_sde(0.0, 0.4, 0.8, n, 6, flows)
    tr = gaussian_transition(0.4, 1.0, mid, flows)
    rng = np.random.default_rng(7)
    two = tr.mean + np.sqrt(tr.variance) * rng.standard_normal(n)
    assert stats.ks_2samp(direct, two).pvalue > 0.01


def test_sampler_thread_invariant():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    a = sample_limit_sde(0.0, 1.0, 0.0, 100_000, 8, flows, threads=1)
    b = sample_limit_sde(0.0, 1.0, 0.0, 100_000, 8, flows, threads=3)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# cut-off diffusion


def test_noise_free_cutoff_sde_is_euler_on_the_plan():
    model = sine_model(1.0, 0.2, sigma=0.0, theta0=1.0)
    field = field_for(model, 50, horizon=0.5)
    draws = simulate_cutoff_sde(field, 0.0, 1.2, 1000, 1, substeps=4)
    assert np.all(draws == draws[0])
    cells, dts, _ = substep_plan(field, 0.0, 4)
    x = 1.2
    for c, h in zip(cells, dts):
        x = x + float(field.cutoff_drift_at_index(c, x)) * h
    assert draws[0] == pytest.approx(x, rel=1e-13)
    # and close to the forward ODE solved cell by cell
    z = 1.2
    grid = field.grid
    for k in range(grid.m_of_n):
        sol = integrate.solve_ivp(lambda t, v: field.cutoff_drift_at_index(k, v),
                                  (0, grid.gammas[k + 1]), [z], rtol=1e-12, atol=1e-14)
        z = sol.y[0, -1]
    fine = simulate_cutoff_sde(field, 0.0, 1.2, 1000, 1, substeps=64)
    assert abs(fine[0] - z) < 1e-3


def test_cutoff_sde_approaches_limit_law():
    flows_model = NONLINEAR
    dists = []
    for N in (20, 2000):
        field = field_for(flows_model, N, horizon=0.5)
        xs = simulate_cutoff_sde(field, 0.0, 1.0, 40_000, 30, substeps=1)
        exact = sample_limit_sde(0.0, field.grid.T_N, 1.0, 40_000, 31, field.flows)
        dists.append(stats.ks_2samp(xs, exact).statistic)
    assert dists[1] < dists[0]


def test_cutoff_sde_substep_halving_is_stable():
    field = field_for(NONLINEAR, 100, horizon=0.5)
    y = np.linspace(-2, 3, 21)
    a = kde(simulate_cutoff_sde(field, 0.0, 0.5, 200_000, 40, substeps=2), grid=([0.5], y))
    b = kde(simulate_cutoff_sde(field, 0.0, 0.5, 200_000, 41, substeps=4), grid=([0.5], y))
    assert stderr_ratio(a, b) < 4.0


def test_cutoff_sde_explosion_guard():
    unstable = sine_model(-3.0, 0.0, sigma=1.0, theta0=0.0)
    field = field_for(unstable, 10, horizon=3.0, cutoff=CutoffRule(scale=1e3))
    with pytest.raises(SimulationError):
        simulate_cutoff_sde(field, 0.0, 5.0, 1000, 1)


# ---------------------------------------------------------------------------
# frozen densities


def test_frozen_density_mode_on_flow():
    flows = solve_theta_bar(NONLINEAR, 1.0)
    theta = float(backward_flow_limit(flows, 1.0, [0.7], [0.3])[0, 0])
    assert float(frozen_density_p_tilde(0.3, 1.0, theta, 0.7, flows)) == pytest.approx(
        1 / math.sqrt(2 * math.pi * 0.7), rel=1e-8)


def test_frozen_cutoff_density_integrates_in_x():
    field = field_for(NONLINEAR, 100)
    T = field.grid.T_N
    x = np.linspace(-15, 15, 6001)
    val = trapezoid(frozen_density_q_tilde(0.2, T, x, np.full(x.size, 1.1), field), x)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_frozen_gap_bound_constant_is_stable():
    constants = []
    for N in (100, 1000, 10000):
        field = field_for(NONLINEAR, N)
        T = field.grid.T_N
        x = np.linspace(-3, 3, 13)[:, None]
        y = np.linspace(-3, 3, 13)[None, :]
        rate = field.a_N * math.sqrt(field.grid.gamma0)
        obs, env = [], []
        for t in (0.0, 0.4, 0.8):
            tau = T - t
            gap = np.abs(frozen_density_p_tilde(t, T, x, y, field.flows)
                         - frozen_density_q_tilde(t, T, x, y, field))
            theta = backward_flow_limit(field.flows, T, y.ravel(), [t])[0][None, :]
            growth = np.exp(tau**2 * rate**2 * y**2)
            env.append(math.sqrt(tau) * rate * np.abs(y) * growth
                       * g_sigma(tau, (theta - x) / 2, 1.0))
            obs.append(gap)
        o = np.concatenate([a.ravel() for a in obs])
        e = np.concatenate([a.ravel() for a in env])
        keep = e > 0
        assert np.all(o[~keep] < 1e-300)
        ratio = o[keep] / e[keep]
        constants.append(float(np.max(ratio)))
    # a single constant covers every N: the fitted value does not grow
    assert constants[0] >= constants[1] >= constants[2] > 0


def test_frozen_semigroup_by_quadrature():
    # frozen law with freezing pair (T, y): increments of the limit flow plus sigma dW
    flows = solve_theta_bar(NONLINEAR, 1.0)
    T, y = 1.0, 0.9
    t, u, s, x, w = 0.1, 0.45, 0.8, -0.3, 0.6
    at = dict(zip((t, u, s), backward_flow_limit(flows, T, [y], [t, u, s])[:, 0]))
    flow = at.__getitem__
    step = lambda a, b, frm, to: float(g_sigma(b - a, to - frm - (flow(b) - flow(a)), 1.0))
    val, _ = integrate.quad(lambda z: step(t, u, x, z) * step(u, s, z, w), -np.inf, np.inf,
                            epsabs=1e-13)
    assert val == pytest.approx(step(t, s, x, w), rel=1e-8)
