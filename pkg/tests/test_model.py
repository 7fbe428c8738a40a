import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rmparametrix.model import (INNOVATIONS, AssumptionError, CutoffRule, ModelSpec,
                                StepSchedule, alpha, build_grid, check_innovations,
                                constant_schedule, grid_alpha, harmonic_schedule, linear_model,
                                log_harmonic_schedule, power_schedule, sine_model,
                                validate_assumptions)
from rmparametrix.sampling import seed_sequence

import oracles


def unshifted_harmonic(horizon=1.0):
    return StepSchedule(lambda n: 1.0 / np.asarray(n, dtype=float), 0, horizon, "harmonic")


# ---------------------------------------------------------------------------
# grids


def test_log_harmonic_grid_is_increasing_and_partitions_pass():
    sched = log_harmonic_schedule(100, 1.0)
    grid = build_grid(sched)
    assert np.all(np.diff(grid.points) > 0)
    assert grid.points[-1] >= 1.0 * (1 - 1e-12)
    assert grid.points[-2] < 1.0
    report = validate_assumptions(linear_model(), sched, INNOVATIONS["gaussian"](), CutoffRule())
    assert report["A-3"]["passed"]


def test_constant_steps_give_arithmetic_grid():
    grid = build_grid(constant_schedule(0.1, 1.0))
    assert grid.m_of_n == 10
    np.testing.assert_allclose(grid.points, np.arange(11) * 0.1, atol=1e-14)


def test_grid_length_matches_partial_sum_loop():
    sched = harmonic_schedule(50, 0.5)
    grid = build_grid(sched)
    assert grid.m_of_n == oracles.first_reaching_index(lambda n: 1.0 / n, 50, 0.5)


@given(st.integers(min_value=1, max_value=5000), st.floats(min_value=0.05, max_value=2.0))
def test_grid_matches_partial_sums_for_any_shift(shift, horizon):
    grid = build_grid(harmonic_schedule(shift, horizon))
    assert grid.m_of_n == oracles.first_reaching_index(lambda n: 1.0 / n, shift, horizon)
    assert grid.gammas.size == grid.m_of_n + 2
    np.testing.assert_allclose(np.diff(grid.points), grid.gammas[1:-1], rtol=1e-8)


@given(st.integers(min_value=2, max_value=10**5))
def test_build_grid_is_deterministic(shift):
    a = build_grid(log_harmonic_schedule(shift, 0.3))
    b = build_grid(log_harmonic_schedule(shift, 0.3))
    assert np.array_equal(a.points, b.points) and np.array_equal(a.gammas, b.gammas)


def test_grid_rejects_increasing_steps():
    growing = StepSchedule(lambda n: 0.01 * np.asarray(n, dtype=float), 1, 1.0)
    with pytest.raises(AssumptionError):
        build_grid(growing)


def test_grid_reports_unreachable_horizon():
    with pytest.raises(AssumptionError):
        build_grid(power_schedule(1, 2.0, horizon=5.0), max_steps=10_000)


def test_grid_index_is_left_closed():
    grid = build_grid(constant_schedule(0.25, 1.0))
    assert grid.index(0.0) == 0
    assert grid.index(0.25) == 1
    assert grid.index(0.2499) == 0
    assert grid.index(1.0) == 4


# ---------------------------------------------------------------------------
# alpha


def test_alpha_constant_steps_is_zero():
    sched = constant_schedule(0.1)
    assert np.all(alpha(np.arange(20), sched) == 0.0)


def test_alpha_harmonic_closed_form():
    k = 10
    expected = (k + 1) * (math.sqrt(k + 1) - math.sqrt(k)) / math.sqrt(k)
    assert alpha(k, unshifted_harmonic()) == pytest.approx(expected, rel=1e-13)
    assert alpha(k, unshifted_harmonic()) == pytest.approx(oracles.harmonic_alpha(k), rel=1e-13)
    assert expected == pytest.approx(0.5369, abs=5e-5)


@given(st.integers(min_value=1, max_value=10**6))
def test_alpha_harmonic_matches_extended_precision(k):
    assert alpha(k, unshifted_harmonic()) == pytest.approx(oracles.harmonic_alpha(k), rel=1e-9)


def test_alpha_harmonic_tends_to_half_monotonically():
    k = np.array([10, 100, 1000, 10**4, 10**5, 10**6])
    dev = np.abs(alpha(k, unshifted_harmonic()) - 0.5)
    assert np.all(np.diff(dev) < 0)
    assert dev[-1] < 1e-5


def test_alpha_log_harmonic_tracks_log_growth():
    # gamma_n = 1/(n ln n) gives alpha ~ (ln n + 1)/2, not 1/2
    sched = log_harmonic_schedule(2)
    for n in (10**3, 10**5, 10**7):
        a = float(alpha(n - 2, sched))
        assert a == pytest.approx(0.5 * (math.log(n) + 1), rel=2e-3)


def test_grid_alpha_agrees_with_schedule_alpha():
    sched = log_harmonic_schedule(500, 0.2)
    grid = build_grid(sched)
    k = np.arange(grid.m_of_n + 1)
    np.testing.assert_allclose(grid_alpha(grid), alpha(k, sched), rtol=1e-12)


# ---------------------------------------------------------------------------
# assumptions


def test_gaussian_innovation_passes_tail_check():
    assert check_innovations(INNOVATIONS["gaussian"]())["passed"]


@pytest.mark.parametrize("name", sorted(INNOVATIONS))
def test_shipped_innovations_are_standardized(name):
    rep = check_innovations(INNOVATIONS[name]())
    assert rep["passed"]
    assert max(rep["moment_errors"]) < 1e-8
    assert math.isfinite(rep["ninth_abs_moment"])


@pytest.mark.parametrize("name", sorted(INNOVATIONS))
def test_innovation_moments_agree_with_sampler(name):
    inn = INNOVATIONS[name]()
    rng = np.random.Generator(np.random.Philox(seed_sequence(7)))
    n = 200_000
    draws = inn.sample(rng, n)
    mean_se = draws.std() / math.sqrt(n)
    assert abs(draws.mean()) < 4 * mean_se
    sq = draws**2
    assert abs(sq.mean() - 1.0) < 4 * sq.std() / math.sqrt(n)


@pytest.mark.parametrize("name", sorted(INNOVATIONS))
def test_monotone_transport_preserves_law(name):
    inn = INNOVATIONS[name]()
    z = np.random.Generator(np.random.Philox(seed_sequence(11))).standard_normal(100_000)
    v = inn.from_normal(z)
    assert abs(v.mean()) < 4 * v.std() / math.sqrt(z.size)
    assert np.all(np.diff(v[np.argsort(z)]) >= 0)


@pytest.mark.parametrize("name", sorted(INNOVATIONS))
@given(s=st.floats(min_value=-6.0, max_value=6.0))
def test_log_cf_is_log_of_cf(name, s):
    inn = INNOVATIONS[name]()
    direct = np.log(complex(inn.char_fn(np.array([s]))[0]))
    got = complex(np.asarray(inn.log_cf(np.array([s])))[0])
    assert abs(np.exp(got) - np.exp(direct)) < 1e-12


def test_linear_model_attractivity_margin():
    rep = validate_assumptions(linear_model(sigma=1.0), harmonic_schedule(100),
                               INNOVATIONS["gaussian"](), CutoffRule())
    assert rep["A-2"]["margin"] == pytest.approx(-0.5)
    assert rep["A-2"]["passed"]
    assert rep["all_passed"]


def test_summable_steps_fail_partition_check():
    rep = validate_assumptions(linear_model(), power_schedule(10, 2.0),
                               INNOVATIONS["gaussian"](), CutoffRule())
    assert not rep["A-3"]["passed"]
    assert not rep["all_passed"]


def test_weak_attraction_fails_margin():
    rep = validate_assumptions(linear_model(sigma=0.25), harmonic_schedule(100),
                               INNOVATIONS["gaussian"](), CutoffRule())
    assert rep["A-2"]["margin"] == pytest.approx(0.25)
    assert not rep["A-2"]["passed"]


def test_inconsistent_derivatives_fail_smoothness():
    good = sine_model(1.0, 0.2)
    bad = ModelSpec(m=good.m, m1=lambda x: 1.0 + 0.0 * np.asarray(x), m2=good.m2, m3=good.m3,
                    m4=good.m4, sigma=1.0, theta_star=0.0, theta0=1.0)
    rep = validate_assumptions(bad, harmonic_schedule(100), INNOVATIONS["gaussian"](),
                               CutoffRule())
    assert not rep["A-1"]["passed"]
    assert rep["A-1"]["finite_difference_rel_error"] > 1e-5


def test_cutoff_without_vanishing_product_fails():
    rep = validate_assumptions(linear_model(), harmonic_schedule(100), INNOVATIONS["gaussian"](),
                               CutoffRule(exponent=-0.75))
    assert not rep["A-5"]["passed"]


def test_model_requires_zero_at_target():
    with pytest.raises(AssumptionError):
        ModelSpec(m=lambda x: np.asarray(x) + 1, m1=lambda x: 1.0, m2=lambda x: 0.0,
                  m3=lambda x: 0.0, m4=lambda x: 0.0, sigma=1.0, theta_star=0.0, theta0=0.0)


@given(st.floats(min_value=1e-8, max_value=0.5))
def test_default_cutoff_level_and_product(g0):
    rule = CutoffRule()
    assert rule.level(g0) == pytest.approx(g0**-0.25)
    assert rule.level(g0) * math.sqrt(g0) == pytest.approx(g0**0.25)


def test_secant_slope_closed_form_matches_riemann_sum():
    model = sine_model(1.0, 0.2)
    for base, step in [(0.3, 0.7), (-1.0, 2.5), (0.5, 1e-7), (2.0, -0.4)]:
        got = float(model.secant_slope(base, step))
        assert got == pytest.approx(oracles.riemann_secant(model.m1, base, step), abs=1e-9)
