"""Problem definition: drift function, innovations, step sequences, grids, cut-off.

The recursion simulated throughout the package is

    theta_{n+1} = theta_n - gamma_{n+1} * sigma * (m(theta_n) - eta_{n+1})

so the mean field is h(theta) = -sigma * m(theta) and the limiting linear
drift along the ODE trajectory is -sigma * m'(theta_bar_t) + 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

ArrayFn = Callable[[np.ndarray], np.ndarray]


class AssumptionError(ValueError):
    """Raised when an input violates a structural requirement."""


# ---------------------------------------------------------------------------
# drift function


@dataclass(frozen=True)
class ModelSpec:
    """Drift function m with its first four derivatives.

    ``family`` optionally records closed-form parameters (slope, amplitude) for
    m(theta) = slope*theta + amplitude*sin(theta); the compiled kernels only
    accept models carrying it.
    """

    m: ArrayFn
    m1: ArrayFn
    m2: ArrayFn
    m3: ArrayFn
    m4: ArrayFn
    sigma: float
    theta_star: float
    theta0: float
    name: str = "custom"
    family: Optional[tuple] = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise AssumptionError("sigma must be nonnegative")
        if abs(float(self.m(np.asarray(self.theta_star)))) > 1e-10:
            raise AssumptionError("theta_star is not a zero of m")

    @property
    def attractivity_margin(self) -> float:
        return -self.sigma * float(self.m1(np.asarray(self.theta_star))) + 0.5

    def mean_field(self, theta):
        return -self.sigma * self.m(np.asarray(theta, dtype=float))

    def secant_slope(self, base, step):
        """Average of m' over [base, base + step], i.e. int_0^1 m'(base + d*step) dd."""
        base = np.asarray(base, dtype=float)
        step = np.asarray(step, dtype=float)
        if self.family is not None:
            slope, amp = self.family
            half = 0.5 * step
            return slope + amp * np.cos(base + half) * np.sinc(half / np.pi)
        small = np.abs(step) < 1e-5
        safe = np.where(small, 1.0, step)
        secant = (self.m(base + safe) - self.m(base)) / safe
        taylor = self.m1(base) + 0.5 * self.m2(base) * step + self.m3(base) * step**2 / 6.0
        return np.where(small, taylor, secant)


def sine_model(slope: float = 1.0, amplitude: float = 0.0, sigma: float = 1.0,
               theta0: float = 1.0) -> ModelSpec:
    """m(theta) = slope*theta + amplitude*sin(theta), with zero at theta* = 0."""
    slope = float(slope)
    amp = float(amplitude)
    return ModelSpec(
        m=lambda x: slope * np.asarray(x) + amp * np.sin(x),
        m1=lambda x: slope + amp * np.cos(x),
        m2=lambda x: -amp * np.sin(x),
        m3=lambda x: -amp * np.cos(x),
        m4=lambda x: amp * np.sin(x),
        sigma=float(sigma),
        theta_star=0.0,
        theta0=float(theta0),
        name=f"sine(slope={slope:g},amp={amp:g})",
        family=(slope, amp),
    )


def linear_model(sigma: float = 1.0, theta0: float = 1.0, slope: float = 1.0) -> ModelSpec:
    return sine_model(slope=slope, amplitude=0.0, sigma=sigma, theta0=theta0)


# ---------------------------------------------------------------------------
# innovations


@dataclass(frozen=True)
class InnovationSpec:
    """Law of the centered, unit-variance innovation eta.

    ``quantile`` maps uniforms to draws and is used to couple chains with
    Gaussian increments; ``char_fn`` feeds the spectral sum densities.
    """

    name: str
    rho: ArrayFn
    char_fn: Callable[[np.ndarray], np.ndarray]
    quantile: ArrayFn
    sampler: Callable[[np.random.Generator, tuple], np.ndarray]
    tail_exponent: float = 12.0
    smooth_order: float = 10.0
    is_gaussian: bool = False
    log_char_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def log_cf(self, s) -> np.ndarray:
        """log char_fn, accurate near s = 0 when a closed form is supplied."""
        if self.log_char_fn is not None:
            return self.log_char_fn(np.asarray(s, dtype=float))
        with np.errstate(divide="ignore"):
            return np.log(self.char_fn(s).astype(complex))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.sampler(rng, size)

    def from_normal(self, z: np.ndarray) -> np.ndarray:
        """Transport standard normal draws to this law (monotone coupling)."""
        if self.is_gaussian:
            return np.asarray(z, dtype=float)
        return self.quantile(special.ndtr(z))

    def xi_density(self, z, sigma: float):
        """Density of xi = sigma * eta."""
        return self.rho(np.asarray(z, dtype=float) / sigma) / sigma


def gaussian_innovation() -> InnovationSpec:
    return InnovationSpec(
        name="gaussian",
        rho=lambda z: np.exp(-0.5 * np.square(z)) / math.sqrt(2 * math.pi),
        char_fn=lambda s: np.exp(-0.5 * np.square(s)),
        log_char_fn=lambda s: -0.5 * np.square(s),
        quantile=special.ndtri,
        sampler=lambda rng, size: rng.standard_normal(size),
        is_gaussian=True,
    )


LOGISTIC_SCALE = math.sqrt(3.0) / math.pi


def _logistic_pdf(z):
    u = np.abs(np.asarray(z, dtype=float)) / LOGISTIC_SCALE
    e = np.exp(-u)
    return e / (LOGISTIC_SCALE * (1.0 + e) ** 2)


def _logistic_cf(s):
    a = np.pi * LOGISTIC_SCALE * np.abs(np.asarray(s, dtype=float))
    out = np.ones_like(a)
    nz = a > 1e-8
    with np.errstate(over="ignore"):
        out[nz] = a[nz] / np.sinh(a[nz])
    return out


def _logistic_log_cf(s):
    a = np.pi * LOGISTIC_SCALE * np.abs(np.asarray(s, dtype=float))
    small = a < 1e-3
    out = np.empty_like(a)
    b = a[small] ** 2
    out[small] = -b / 6.0 + b * b / 180.0
    big = a[~small]
    out[~small] = np.log(2.0 * big) - big - np.log1p(-np.exp(-2.0 * big))
    return out


def logistic_innovation() -> InnovationSpec:
    """Logistic law rescaled to unit variance."""
    return InnovationSpec(
        name="logistic",
        rho=_logistic_pdf,
        char_fn=_logistic_cf,
        log_char_fn=_logistic_log_cf,
        quantile=lambda u: LOGISTIC_SCALE * special.logit(u),
        sampler=lambda rng, size: LOGISTIC_SCALE * special.logit(rng.random(size)),
    )


# standardized two-component Gaussian mixture with positive skew
_MIX_W, _MIX_MU1, _MIX_MU2, _MIX_VAR = 0.25, 1.2, -0.4, 0.52


def _mixture_pdf(z):
    z = np.asarray(z, dtype=float)
    s = math.sqrt(_MIX_VAR)
    c = 1.0 / (s * math.sqrt(2 * math.pi))
    return c * (_MIX_W * np.exp(-0.5 * ((z - _MIX_MU1) / s) ** 2)
                + (1 - _MIX_W) * np.exp(-0.5 * ((z - _MIX_MU2) / s) ** 2))


def _mixture_cf(s):
    s = np.asarray(s, dtype=float)
    env = np.exp(-0.5 * _MIX_VAR * s**2)
    return env * (_MIX_W * np.exp(1j * _MIX_MU1 * s) + (1 - _MIX_W) * np.exp(1j * _MIX_MU2 * s))


def _mixture_log_cf(s):
    s = np.asarray(s, dtype=float)
    # e^{ix} - 1 = 2i sin(x/2) e^{ix/2} keeps the phase sum accurate near 0
    d1 = 2j * np.sin(0.5 * _MIX_MU1 * s) * np.exp(0.5j * _MIX_MU1 * s)
    d2 = 2j * np.sin(0.5 * _MIX_MU2 * s) * np.exp(0.5j * _MIX_MU2 * s)
    return -0.5 * _MIX_VAR * s**2 + np.log1p(_MIX_W * d1 + (1 - _MIX_W) * d2)


def _mixture_cdf(z):
    s = math.sqrt(_MIX_VAR)
    return _MIX_W * special.ndtr((z - _MIX_MU1) / s) + (1 - _MIX_W) * special.ndtr((z - _MIX_MU2) / s)


_MIX_TABLE_Z = np.linspace(-12.0, 12.0, 200001)
_MIX_TABLE_U = _mixture_cdf(_MIX_TABLE_Z)


def _mixture_quantile(u):
    return np.interp(u, _MIX_TABLE_U, _MIX_TABLE_Z)


def _mixture_sampler(rng, size):
    pick = rng.random(size) < _MIX_W
    z = rng.standard_normal(size) * math.sqrt(_MIX_VAR)
    return z + np.where(pick, _MIX_MU1, _MIX_MU2)


def skewed_mixture_innovation() -> InnovationSpec:
    """Unit-variance Gaussian mixture with third cumulant 0.384."""
    return InnovationSpec(
        name="skew_mixture",
        rho=_mixture_pdf,
        char_fn=_mixture_cf,
        log_char_fn=_mixture_log_cf,
        quantile=_mixture_quantile,
        sampler=_mixture_sampler,
    )


INNOVATIONS = {
    "gaussian": gaussian_innovation,
    "logistic": logistic_innovation,
    "skew_mixture": skewed_mixture_innovation,
}


# ---------------------------------------------------------------------------
# step sequences and grids


@dataclass(frozen=True)
class StepSchedule:
    """gamma(n) over absolute indices; the shifted sequence is gamma_k^N = gamma(N + k)."""

    gamma: Callable[[np.ndarray], np.ndarray]
    shift: int
    horizon: float
    name: str = "custom"

    def steps(self, k) -> np.ndarray:
        k = np.asarray(k)
        return np.asarray(self.gamma(self.shift + k), dtype=float)

    @property
    def gamma0(self) -> float:
        return float(self.steps(0))

    def with_shift(self, shift: int) -> "StepSchedule":
        return StepSchedule(self.gamma, int(shift), self.horizon, self.name)


def harmonic_schedule(shift: int, horizon: float = 1.0, scale: float = 1.0) -> StepSchedule:
    if shift < 1:
        raise AssumptionError("harmonic steps need shift >= 1")
    return StepSchedule(lambda n: scale / np.asarray(n, dtype=float), int(shift), float(horizon),
                        "harmonic")


def log_harmonic_schedule(shift: int, horizon: float = 1.0) -> StepSchedule:
    """gamma_n = 1 / (n ln n)."""
    if shift < 2:
        raise AssumptionError("log-harmonic steps need shift >= 2")

    def gamma(n):
        n = np.asarray(n, dtype=float)
        return 1.0 / (n * np.log(n))

    return StepSchedule(gamma, int(shift), float(horizon), "log_harmonic")


def power_schedule(shift: int, power: float, horizon: float = 1.0) -> StepSchedule:
    if shift < 1:
        raise AssumptionError("power steps need shift >= 1")
    return StepSchedule(lambda n: np.asarray(n, dtype=float) ** (-power), int(shift),
                        float(horizon), f"power({power:g})")


def constant_schedule(value: float, horizon: float = 1.0) -> StepSchedule:
    return StepSchedule(lambda n: np.full(np.shape(n), float(value)), 0, float(horizon),
                        "constant")


SCHEDULES = {
    "harmonic": lambda shift, horizon: harmonic_schedule(shift, horizon),
    "log_harmonic": lambda shift, horizon: log_harmonic_schedule(shift, horizon),
}


@dataclass(frozen=True)
class TimeGrid:
    """t_0 = 0 < t_1 < ... < t_M with M = M(N) the first index reaching the horizon.

    ``gammas[k]`` is gamma_k^N for k = 0..M+1 (one extra entry so that
    quantities at index M such as alpha_M are defined).
    """

    points: np.ndarray
    gammas: np.ndarray
    m_of_n: int
    horizon: float
    shift: int

    @property
    def T_N(self) -> float:
        return float(self.points[-1])

    @property
    def gamma0(self) -> float:
        return float(self.gammas[0])

    def index(self, t) -> np.ndarray:
        """k(t) with t_k <= t < t_{k+1}, clipped to [0, M]."""
        k = np.searchsorted(self.points, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(k, 0, self.m_of_n)


REACH_RTOL = 1e-12


def build_grid(schedule: StepSchedule, max_steps: int = 50_000_000) -> TimeGrid:
    """Accumulate the shifted steps until the horizon is reached."""
    T = float(schedule.horizon)
    if not T > 0:
        raise AssumptionError("horizon must be positive")
    if schedule.shift < 0:
        raise AssumptionError("shift must be nonnegative")
    target = T * (1.0 - REACH_RTOL)
    chunk = 1024
    pieces = []
    total = 0.0
    start = 1
    m_of_n = None
    last = float(schedule.steps(0))
    while m_of_n is None:
        if start > max_steps:
            raise AssumptionError(f"horizon {T} not reached within {max_steps} steps")
        k = np.arange(start, min(start + chunk, max_steps + 1))
        g = schedule.steps(k)
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise AssumptionError("steps must be finite and positive")
        if g[0] > last or np.any(np.diff(g) > 0):
            raise AssumptionError("step sequence increases")
        cs = total + np.cumsum(g)
        hit = np.nonzero(cs >= target)[0]
        if hit.size:
            m_of_n = start + int(hit[0])
            pieces.append(g[: hit[0] + 1])
        else:
            pieces.append(g)
            total = float(cs[-1])
            last = float(g[-1])
        start += k.size
        chunk *= 2
    inner = np.concatenate(pieces)
    gammas = np.concatenate([[float(schedule.steps(0))], inner,
                             [float(schedule.steps(m_of_n + 1))]])
    points = np.concatenate([[0.0], np.cumsum(inner)])
    return TimeGrid(points=points, gammas=gammas, m_of_n=m_of_n, horizon=T,
                    shift=schedule.shift)


def alpha(k, schedule: StepSchedule):
    """(sqrt(g_k) - sqrt(g_{k+1})) / g_{k+1}^{3/2} for the shifted steps."""
    k = np.asarray(k)
    g0 = schedule.steps(k)
    g1 = schedule.steps(k + 1)
    return (g0 - g1) / ((np.sqrt(g0) + np.sqrt(g1)) * g1**1.5)


def grid_alpha(grid: TimeGrid) -> np.ndarray:
    """alpha_k for k = 0..M from the stored steps."""
    g0 = grid.gammas[:-1]
    g1 = grid.gammas[1:]
    return (g0 - g1) / ((np.sqrt(g0) + np.sqrt(g1)) * g1**1.5)


# ---------------------------------------------------------------------------
# cut-off


@dataclass(frozen=True)
class CutoffRule:
    """a_N = scale * (gamma_0^N)^exponent; exponent in (-1/2, 0) satisfies the cut-off assumption."""

    exponent: float = -0.25
    scale: float = 1.0

    def level(self, gamma0: float) -> float:
        if math.isinf(self.scale):
            return math.inf
        return self.scale * gamma0**self.exponent


# ---------------------------------------------------------------------------
# assumption validators


def _fd_derivative(f, x, h):
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def _check_smoothness(model: ModelSpec, radius: float = 1.0, n: int = 401) -> dict:
    lo = min(model.theta0, model.theta_star) - radius
    hi = max(model.theta0, model.theta_star) + radius
    x = np.linspace(lo, hi, n)
    derivs = [model.m, model.m1, model.m2, model.m3, model.m4]
    bounds = [float(np.max(np.abs(d(x)))) for d in derivs[1:]]
    fd_err = 0.0
    for lower, upper in zip(derivs[:-1], derivs[1:]):
        fd = _fd_derivative(lower, x, 1e-3)
        exact = upper(x) * np.ones_like(x)
        err = np.abs(fd - exact) / np.maximum(1.0, np.abs(exact))
        fd_err = max(fd_err, float(np.max(err)))
    passed = all(math.isfinite(b) for b in bounds) and fd_err < 1e-5
    return {"passed": bool(passed), "tube": [lo, hi], "derivative_bounds": bounds,
            "finite_difference_rel_error": fd_err}


def _shell_sum(fn, lo: int, hi: int) -> float:
    total = 0.0
    step = 1 << 20
    for a in range(lo, hi, step):
        k = np.arange(a, min(a + step, hi), dtype=float)
        total += float(np.sum(fn(k)))
    return total


def _check_partitions(schedule: StepSchedule) -> dict:
    report = {"passed": False}
    k = np.arange(1, 20001)
    g = schedule.steps(k)
    decreasing = bool(np.all(np.diff(g) < 0))
    report["strictly_decreasing"] = decreasing
    # shells (K, K^2]: divergent series keep non-vanishing shell mass,
    # convergent ones lose it geometrically
    base = lambda n: schedule.gamma(n)
    sq = lambda n: schedule.gamma(n) ** 2
    lo_shift = max(schedule.shift, 2)
    shells = [10, 100, 1000]
    sums = [_shell_sum(base, lo_shift + s, lo_shift + s * s) for s in shells]
    sq_sums = [_shell_sum(sq, lo_shift + s, lo_shift + s * s) for s in shells]
    diverges = sums[-1] >= 0.5 * sums[0]
    square_converges = sq_sums[-1] <= 0.5 * sq_sums[0] and sq_sums[-1] < 1e-2
    report.update(shell_sums=sums, square_shell_sums=sq_sums, sum_diverges=bool(diverges),
                  square_sum_converges=bool(square_converges))
    ratio = math.inf
    try:
        grid = build_grid(schedule)
        ratio = float(grid.gammas[0] / grid.gammas[grid.m_of_n])
        report["m_of_n"] = grid.m_of_n
    except AssumptionError as exc:
        report["grid_error"] = str(exc)
    report["ratio_constant"] = ratio
    report["passed"] = bool(decreasing and diverges and square_converges and math.isfinite(ratio))
    return report


def _fd_nth(f, z, order, h=0.02):
    """Central difference of the given order (accuracy is secondary: this only bounds)."""
    coeffs = np.array([math.comb(order, j) * (-1) ** j for j in range(order + 1)], dtype=float)
    offsets = (order / 2.0 - np.arange(order + 1)) * h
    return sum(c * f(z + o) for c, o in zip(coeffs, offsets)) / h**order


def check_innovations(innovations: InnovationSpec) -> dict:
    rho = lambda z: float(innovations.rho(np.asarray(z)))
    moments = []
    for p in range(3):
        val, _ = integrate.quad(lambda z: z**p * rho(z), -np.inf, np.inf, epsabs=1e-13,
                                epsrel=1e-13, limit=400)
        moments.append(val)
    errors = [abs(moments[0] - 1), abs(moments[1]), abs(moments[2] - 1)]
    ninth, _ = integrate.quad(lambda z: abs(z) ** 9 * rho(z), -np.inf, np.inf, limit=400)
    M = innovations.tail_exponent
    S = innovations.smooth_order
    z = np.linspace(-60.0, 60.0, 2401)
    weight = 1.0 + np.abs(z) ** M
    decay_constants = []
    decaying = True
    for order in range(6):
        d = innovations.rho(z) if order == 0 else _fd_nth(innovations.rho, z, order)
        wd = np.abs(d) * weight
        decay_constants.append(float(np.max(wd)))
        outer = np.abs(z) > 30
        if np.max(wd[outer]) > np.max(wd[~outer]):
            decaying = False
    passed = (max(errors) < 1e-8 and math.isfinite(ninth) and decaying
              and all(math.isfinite(c) for c in decay_constants) and S > 8 and M > S + 1)
    return {"passed": bool(passed), "moment_errors": errors, "ninth_abs_moment": ninth,
            "decay_constants": decay_constants, "tail_exponent": M, "smooth_order": S}


def _check_cutoff(cutoff: CutoffRule, schedule: StepSchedule) -> dict:
    shifts = [max(schedule.shift, 2) * 10**j for j in range(5)]
    g0 = [float(schedule.with_shift(s).gamma0) for s in shifts]
    levels = [cutoff.level(g) for g in g0]
    products = [a * math.sqrt(g) for a, g in zip(levels, g0)]
    grows = all(b > a for a, b in zip(levels, levels[1:]))
    shrinks = all(b < a for a, b in zip(products, products[1:]))
    return {"passed": bool(grows and shrinks), "shifts": shifts, "levels": levels,
            "level_times_sqrt_gamma0": products}


def validate_assumptions(model: ModelSpec, schedule: StepSchedule,
                         innovations: InnovationSpec, cutoff: CutoffRule) -> dict:
    """Per-assumption pass/fail with the measured constants."""
    report = {
        "A-1": _check_smoothness(model),
        "A-2": {"margin": model.attractivity_margin},
        "A-3": _check_partitions(schedule),
        "A-4": check_innovations(innovations),
        "A-5": _check_cutoff(cutoff, schedule),
    }
    report["A-2"]["passed"] = bool(report["A-2"]["margin"] < 0)
    report["all_passed"] = all(report[k]["passed"] for k in ("A-1", "A-2", "A-3", "A-4", "A-5"))
    return report
