import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from rmparametrix.chains import (SimulationError, _simulate_coupled, beta_term, beta_terms,
                                 coupling_experiment, epsilon_n, renormalize,
                                 renormalized_step, simulate_V, simulate_rm, sv_diagnostics)
from rmparametrix.estimate import fit_rate
from rmparametrix.flows import DriftField, solve_theta_bar
from rmparametrix.model import (INNOVATIONS, CutoffRule, build_grid, check_innovations,
                                constant_schedule, harmonic_schedule, linear_model, sine_model)
from rmparametrix.sampling import seed_sequence

GAUSS = INNOVATIONS["gaussian"]()
LOGISTIC = INNOVATIONS["logistic"]()
NONLINEAR = sine_model(1.0, 0.2, sigma=1.0, theta0=1.0)


def field_for(model, N, horizon=1.0, cutoff=CutoffRule()):
    return DriftField.build(model, build_grid(harmonic_schedule(N, horizon)), cutoff=cutoff)


# ---------------------------------------------------------------------------
# raw recursion


def test_zero_sigma_freezes_iterates():
    model = sine_model(1.0, 0.2, sigma=0.0, theta0=0.7)
    paths = simulate_rm(model, harmonic_schedule(1), 200, 5, GAUSS, n_paths=3)
    assert np.all(paths == 0.7)


def test_linear_recursion_settles_at_target():
    model = linear_model(sigma=2.0, theta0=1.0)
    paths = simulate_rm(model, harmonic_schedule(1), 5000, seed_sequence(2), GAUSS,
                        n_paths=10_000)
    final = paths[:, -1]
    assert abs(final.mean()) < 4 * final.std() / math.sqrt(final.size)


def test_noise_free_recursion_is_explicit_euler():
    sched = harmonic_schedule(20)
    paths = simulate_rm(NONLINEAR, sched, 300, 0, GAUSS, noise_free=True)[0]
    theta = NONLINEAR.theta0
    for k in range(300):
        theta = theta + sched.gamma(20 + k + 1) * (-NONLINEAR.sigma * float(NONLINEAR.m(theta)))
        assert paths[k + 1] == pytest.approx(theta, rel=1e-14, abs=1e-300)


def test_recursion_reports_blow_up():
    unstable = sine_model(-1.0, 0.0, sigma=1.0, theta0=1.0)
    with pytest.raises(SimulationError):
        simulate_rm(unstable, constant_schedule(5.0), 2000, 0, noise_free=True)


def test_same_stream_same_paths():
    a = simulate_rm(NONLINEAR, harmonic_schedule(5), 50, 9, LOGISTIC, n_paths=4)
    b = simulate_rm(NONLINEAR, harmonic_schedule(5), 50, 9, LOGISTIC, n_paths=4)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# renormalized chain


def test_renormalize_on_the_ode_is_zero():
    field = field_for(NONLINEAR, 50)
    grid = field.grid
    tb = field.flows.theta_bar(grid.points)
    ens = renormalize(tb[None, :], field.flows, grid)
    assert ens.kind == "U"
    assert np.all(ens.paths == 0)


@pytest.mark.parametrize("schedule", [harmonic_schedule(30, 1.0), constant_schedule(0.01, 1.0)],
                         ids=["harmonic", "constant"])
def test_one_step_decomposition_reproduced(schedule):
    grid = build_grid(schedule)
    field = DriftField.build(NONLINEAR, grid, cutoff=CutoffRule(scale=math.inf))
    M = grid.m_of_n
    rng = np.random.default_rng(4)
    eta = LOGISTIC.sample(rng, (M, 5))
    theta = np.empty((5, M + 1))
    theta[:, 0] = NONLINEAR.theta0
    for k in range(M):
        theta[:, k + 1] = theta[:, k] - grid.gammas[k + 1] * NONLINEAR.sigma * (
            NONLINEAR.m(theta[:, k]) - eta[k])
    u = renormalize(theta, field.flows, grid).paths
    beta = beta_terms(field)
    if schedule.name == "constant":
        assert np.all(field.alpha == 0)
    for k in range(M):
        rebuilt = renormalized_step(k, u[:, k], NONLINEAR.sigma * eta[k], field, beta[k])
        np.testing.assert_allclose(rebuilt, u[:, k + 1], atol=1e-9)


def test_beta_vanishes_at_equilibrium():
    model = sine_model(1.0, 0.2, theta0=0.0)
    assert np.all(beta_terms(field_for(model, 100)) == 0.0)


def test_beta_matches_independent_checkpoints():
    field = field_for(NONLINEAR, 100)
    grid = field.grid
    ref = solve_ivp(lambda t, y: [-math.sin(y[0]) * 0.2 - y[0]], (0, 1.1), [1.0], method="LSODA",
                    rtol=1e-12, atol=1e-14, dense_output=True)
    for k in (0, 10, 50, grid.m_of_n - 1):
        t0, t1 = grid.points[k], grid.points[k] + grid.gammas[k + 1]
        a, b = ref.sol(t0)[0], ref.sol(t1)[0]
        g = grid.gammas[k + 1]
        direct = math.sqrt(g) * (-(a + 0.2 * math.sin(a)) - (b - a) / g)
        assert beta_term(k, field) == pytest.approx(direct, abs=1e-9 / math.sqrt(g))


def test_beta_sum_scales_like_sqrt_gamma0():
    g0, sums = [], []
    for N in (100, 1000, 10000, 100000):
        field = field_for(NONLINEAR, N, horizon=0.2)
        g0.append(field.grid.gamma0)
        sums.append(float(np.sum(np.abs(beta_terms(field)))))
    fit = fit_rate(g0, sums)
    assert 0.45 < fit.slope < 0.55


# ---------------------------------------------------------------------------
# cut-off chain


def test_uncut_chain_differs_from_U_by_deterministic_drift():
    model = linear_model(sigma=1.0, theta0=1.0)
    field = field_for(model, 100, cutoff=CutoffRule(scale=math.inf))
    beta = beta_terms(field)
    _, _, exited, u, v = _simulate_coupled(field, GAUSS, beta, 2000, 3, 1)
    d = 0.0
    for k in range(field.grid.m_of_n):
        c = float(field.coefficient_at_index(k, 0.0))
        d = d * (1 + c * field.grid.gammas[k + 1]) + beta[k]
    np.testing.assert_allclose(u - v, d, atol=1e-10)
    assert not exited.any()


def test_zero_drift_chain_is_scaled_random_walk():
    model = sine_model(0.0, 0.0, sigma=1.3, theta0=0.0)
    field = DriftField.build(model, build_grid(constant_schedule(0.02, 1.0)))
    ens = simulate_V(field, LOGISTIC, 0.0, 50_000, 6)
    var = ens.paths[:, 0].var()
    expected = 1.3**2 * field.grid.T_N
    assert abs(var - expected) < 4 * expected * math.sqrt(2 / 50_000) * 1.5


def test_chain_variance_approaches_limit_variance():
    field = field_for(NONLINEAR, 2000, horizon=0.5)
    ens = simulate_V(field, LOGISTIC, 0.0, 40_000, 8)
    v = ens.paths[:, 0]
    target = float(field.flows.gaussian_variance(0.0, field.grid.T_N))
    se = v.var() * math.sqrt((np.mean(v**4) / v.var() ** 2 - 1) / v.size)
    assert abs(v.var() - target) < 4 * se + 2 * field.grid.gamma0


def test_simulate_V_reproducible_and_thread_invariant():
    field = field_for(NONLINEAR, 300, horizon=0.2)
    a = simulate_V(field, LOGISTIC, 0.5, 70_000, 12, threads=1)
    b = simulate_V(field, LOGISTIC, 0.5, 70_000, 12, threads=4)
    assert np.array_equal(a.paths, b.paths)


def test_simulate_V_records_requested_steps():
    field = field_for(NONLINEAR, 100, horizon=0.5)
    M = field.grid.m_of_n
    full = simulate_V(field, GAUSS, 0.2, 1000, 1, record="all")
    some = simulate_V(field, GAUSS, 0.2, 1000, 1, record=np.array([0, 3, M]))
    assert full.paths.shape == (1000, M + 1)
    np.testing.assert_array_equal(some.paths, full.paths[:, [0, 3, M]])
    assert np.all(full.paths[:, 0] == 0.2)


def test_simulate_V_rejects_bad_range():
    field = field_for(NONLINEAR, 100, horizon=0.5)
    with pytest.raises(SimulationError):
        simulate_V(field, GAUSS, 0.0, 10, 1, k0=5, k1=5)


# ---------------------------------------------------------------------------
# coupling


def test_coupling_exceed_zero_when_bound_dominates():
    model = linear_model(sigma=1.0, theta0=1.0)
    sched = lambda N: harmonic_schedule(N, 0.5)
    rep = coupling_experiment(model, GAUSS, sched, [100, 400], CutoffRule(scale=1e6), 500, 5)
    for i, N in enumerate(rep.shifts):
        field = field_for(model, N, horizon=0.5, cutoff=CutoffRule(scale=1e6))
        growth = np.prod(1 + rep.lipschitz[i] * field.grid.gammas[1: field.grid.m_of_n + 1])
        assert rep.C * math.sqrt(rep.gamma0[i]) >= growth * rep.beta_sums[i]
        assert rep.prob_exceed[i] == 0.0
        assert rep.exit_fraction[i] == 0.0
    assert rep.pathwise_violations == [0, 0]


def test_coupling_events_are_nested():
    rep = coupling_experiment(NONLINEAR, LOGISTIC, lambda N: harmonic_schedule(N, 1.0),
                              [2, 5, 10], CutoffRule(scale=0.6), 2000, 17)
    assert sum(rep.exit_fraction) > 0
    for pe, ef, se in zip(rep.prob_exceed, rep.exit_fraction, rep.exceed_stderr):
        assert 0 <= pe <= 1
        assert pe <= ef + 2 * max(se, 1 / 2000)
    assert rep.pathwise_violations == [0, 0, 0]


def test_coupling_requires_paths():
    with pytest.raises(SimulationError):
        coupling_experiment(NONLINEAR, GAUSS, lambda N: harmonic_schedule(N), [10], CutoffRule(),
                            50, 1)


# ---------------------------------------------------------------------------
# Stroock-Varadhan quantities


def test_sv_moments_converge():
    gaps = []
    for N in (100, 1600):
        field = field_for(NONLINEAR, N)
        worst_a = worst_b = 0.0
        for t in (0.0, 0.5, 0.9):
            for x in (-2.0, 0.0, 1.0, 2.0):
                a, b, _ = sv_diagnostics(t, x, field, LOGISTIC, 0.5)
                A = float(field.limit_drift(t))
                worst_a = max(worst_a, abs(a - 1.0))
                worst_b = max(worst_b, abs(b - A * x))
        gaps.append((worst_a, worst_b))
    assert gaps[1][0] < gaps[0][0] / 4
    assert gaps[1][1] < gaps[0][1] / 4


def test_sv_jump_term_vanishes_for_fixed_epsilon():
    deltas = []
    for N in (100, 400, 1600):
        field = field_for(NONLINEAR, N)
        deltas.append(max(sv_diagnostics(t, 2.0, field, LOGISTIC, 0.25)[2] for t in (0.0, 0.5)))
    assert deltas[0] > deltas[1] > deltas[2]


@pytest.mark.parametrize("name", ["gaussian", "logistic"])
def test_sv_jump_term_obeys_ninth_moment_bound(name):
    inn = INNOVATIONS[name]()
    m9 = check_innovations(inn)["ninth_abs_moment"]
    for N in (100, 1600):
        field = field_for(NONLINEAR, N)
        eps = epsilon_n(field.grid)
        for t in (0.0, 0.6):
            for x in (-2.0, 0.5, 2.0):
                k = int(field.grid.index(t))
                g = field.grid.gammas[k + 1]
                drift = abs(float(field.cutoff_drift_at_index(k, x)))
                bound = 2**8 * ((drift * g) ** 9 + g**4.5 * m9) / (g * eps**9)
                assert sv_diagnostics(t, x, field, inn, eps)[2] <= bound


def test_epsilon_n_definition():
    grid = build_grid(harmonic_schedule(100))
    assert epsilon_n(grid) == pytest.approx(grid.gammas[grid.m_of_n] ** 0.375)


@given(st.floats(0.0, 0.95), st.floats(-3, 3))
def test_sv_outputs_are_sane(t, x):
    field = field_for(NONLINEAR, 200)
    a, b, d = sv_diagnostics(t, x, field, GAUSS, 0.3)
    assert 0 < a < 2 and math.isfinite(b) and d >= 0
