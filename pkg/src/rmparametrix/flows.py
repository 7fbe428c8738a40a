"""Deterministic layer: the mean ODE, resolvent, drift coefficients and backward flows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .model import CutoffRule, ModelSpec, TimeGrid, grid_alpha


class FlowError(RuntimeError):
    pass


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
DELTA_NODES = 0.5 * (_GL_NODES + 1.0)
DELTA_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class FlowBundle:
    """Dense solution of d theta/dt = -sigma m(theta) with the resolvent of the linearization.

    The state carries I(t) = int_0^t A and J(t) = int_0^t exp(-2 I) so that
    Phi(s, t) = exp(I(s) - I(t)) and the Gaussian variance are read off directly.
    """

    model: ModelSpec
    horizon: float
    solution: object

    def _state(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.horizon + 1e-12):
            raise FlowError("time outside the solved interval")
        s = self.solution(np.clip(t.ravel(), 0.0, self.horizon))
        return s.reshape((3,) + t.shape)

    def theta_bar(self, t):
        return self._state(t)[0]

    def drift_coefficient(self, t):
        """A(t) = -sigma m'(theta_bar_t) + 1/2."""
        return -self.model.sigma * self.model.m1(self.theta_bar(t)) + 0.5

    def integrated_drift(self, t):
        return self._state(t)[1]

    def resolvent(self, s, t):
        return np.exp(self.integrated_drift(s) - self.integrated_drift(t))

    def gaussian_variance(self, t, s):
        """sigma^2 int_t^s Phi(s, u)^2 du."""
        st = self._state(s)
        tt = self._state(t)
        return self.model.sigma**2 * np.exp(2 * st[1]) * (st[2] - tt[2])

    def residual(self, t, h=1e-4):
        t = np.asarray(t, dtype=float)
        d = (self.theta_bar(t + h) - self.theta_bar(t - h)) / (2 * h)
        return d - self.model.mean_field(self.theta_bar(t))


def solve_theta_bar(model: ModelSpec, T: float, tol: float = 1e-10) -> FlowBundle:
    if not tol > 0:
        raise FlowError("tolerance must be positive")
    sigma = model.sigma

    def rhs(t, y):
        a = -sigma * model.m1(y[0]) + 0.5
        return [-sigma * model.m(y[0]), a, math.exp(-2.0 * y[1])]

    sol = solve_ivp(rhs, (0.0, float(T)), [model.theta0, 0.0, 0.0], method="DOP853",
                    rtol=tol, atol=tol * 1e-2, dense_output=True)
    if not sol.success:
        raise FlowError(f"integrator failed: {sol.message}")
    return FlowBundle(model=model, horizon=float(T), solution=sol.sol)


class DriftField:
    """Coefficients G_N and F_N on a time grid.

    Per-index arrays: theta_bar_k, sqrt(gamma_k), alpha_k and sqrt(gamma_k/gamma_{k+1}),
    for k = 0..M.
    """

    def __init__(self, model: ModelSpec, grid: TimeGrid, flows: FlowBundle, cutoff_level: float):
        if flows.horizon < grid.T_N - 1e-12:
            raise FlowError("flows must cover the grid horizon")
        self.model = model
        self.grid = grid
        self.flows = flows
        self.a_N = float(cutoff_level)
        M = grid.m_of_n
        tidy = lambda a: np.ascontiguousarray(a, dtype=float)
        self.theta_bar = tidy(flows.theta_bar(grid.points))
        self.sqrt_gamma = tidy(np.sqrt(grid.gammas[: M + 1]))
        self.alpha = tidy(grid_alpha(grid))
        self.ratio = tidy(np.sqrt(grid.gammas[: M + 1] / grid.gammas[1: M + 2]))
        self.next_gamma = tidy(grid.gammas[1: M + 2])

    @classmethod
    def build(cls, model, grid, flows=None, cutoff: CutoffRule | None = None, level=None):
        if flows is None:
            flows = solve_theta_bar(model, grid.points[-1] + grid.gammas[-1])
        if level is None:
            level = (cutoff or CutoffRule()).level(grid.gamma0)
        return cls(model, grid, flows, level)

    def coefficient_at_index(self, k, x, quadrature=False):
        """G_N(t_k, x) at integer grid indices k."""
        k = np.asarray(k)
        x = np.asarray(x, dtype=float)
        base = self.theta_bar[k]
        step = x * self.sqrt_gamma[k]
        if quadrature:
            nodes = base[..., None] + DELTA_NODES * step[..., None]
            avg = np.sum(self.model.m1(nodes) * DELTA_WEIGHTS, axis=-1)
        else:
            avg = self.model.secant_slope(base, step)
        return self.alpha[k] - self.model.sigma * self.ratio[k] * avg

    def clamp(self, x):
        return np.clip(x, -self.a_N, self.a_N)

    def cutoff_at_index(self, k, x):
        return self.coefficient_at_index(k, self.clamp(np.asarray(x, dtype=float)))

    def cutoff_drift_at_index(self, k, x):
        """F_N(t_k, x) x."""
        x = np.asarray(x, dtype=float)
        return self.cutoff_at_index(k, x) * x

    def limit_drift(self, t):
        return self.flows.drift_coefficient(t)


def drift_G(t, x, field: DriftField, quadrature: bool = True):
    """G_N(t, x) with the delta-integral done by 16-node Gauss-Legendre."""
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    return field.coefficient_at_index(field.grid.index(t), x, quadrature=quadrature)


def drift_F(t, x, field: DriftField, quadrature: bool = True):
    """F_N(t, x) = G_N(t, sign(x) min(|x|, a_N))."""
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    return field.coefficient_at_index(field.grid.index(t), field.clamp(x), quadrature=quadrature)


# ---------------------------------------------------------------------------
# backward flows


def backward_flow_limit(flows: FlowBundle, T: float, y, t_query, tol: float = 1e-11):
    """theta_{t,T}(y) solving dz/dt = A(t) z backward from z_T = y.

    Returns an array of shape (len(t_query), len(y)).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    tq = np.atleast_1d(np.asarray(t_query, dtype=float))
    if np.any(tq > T + 1e-12) or np.any(tq < 0):
        raise FlowError("query times must lie in [0, T]")
    lo = float(np.min(tq))
    if lo >= T - 1e-14:
        return np.tile(y, (tq.size, 1))

    def rhs(t, z):
        return flows.drift_coefficient(t) * z

    sol = solve_ivp(rhs, (float(T), lo), y, method="DOP853", rtol=tol, atol=tol * 1e-2,
                    dense_output=True)
    if not sol.success:
        raise FlowError(f"integrator failed: {sol.message}")
    return sol.sol(tq).T


def _rk4_segment(field: DriftField, k: int, z, length: float, substeps: int):
    """Integrate dz/dt = F_N(t_k, z) z backward over a time span `length`."""
    h = -length / substeps
    f = lambda v: field.cutoff_drift_at_index(k, v)
    for _ in range(substeps):
        k1 = f(z)
        k2 = f(z + 0.5 * h * k1)
        k3 = f(z + 0.5 * h * k2)
        k4 = f(z + h * k3)
        z = z + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return z


def cutoff_flow(field: DriftField, y, t_end: float, t_stops, substeps: int = 4):
    """theta^N_{t,t_end}(y) at each t in t_stops (<= t_end).

    F_N is constant in t on each grid cell, so the ODE is integrated cell by cell
    with classical RK4. Returns shape (len(t_stops), len(y)).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float)).copy()
    stops = np.atleast_1d(np.asarray(t_stops, dtype=float))
    if np.any(stops > t_end + 1e-12):
        raise FlowError("stop times must not exceed the terminal time")
    pts = field.grid.points
    order = np.argsort(-stops, kind="stable")
    out = np.empty((stops.size, y.size))
    z = y
    t_cur = float(t_end)
    for idx in order:
        target = float(stops[idx])
        while t_cur > target + 1e-14:
            k = int(field.grid.index(np.nextafter(t_cur, -np.inf)))
            left = max(pts[k], target)
            span = t_cur - left
            cell = field.grid.gammas[k + 1] if k < field.grid.m_of_n else span
            n_sub = max(1, int(math.ceil(substeps * span / cell - 1e-9)))
            z = _rk4_segment(field, k, z, span, n_sub)
            t_cur = left
        out[idx] = z
    return out


def backward_flow_cutoff(field: DriftField, y, t_query, substeps: int = 4):
    """theta^N_{t,T_N}(y) solving dz/dt = F_N(t, z) z with z_{T_N} = y."""
    return cutoff_flow(field, y, field.grid.T_N, t_query, substeps=substeps)


def backward_euler(field: DriftField, y, k_end: int | None = None):
    """x_k = x_{k+1} - F_N(t_{k+1}, x_{k+1}) x_{k+1} gamma_{k+1}, from x_{k_end} = y.

    Returns shape (k_end + 1, len(y)); row k is the value at t_k.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if k_end is None:
        k_end = field.grid.m_of_n
    out = np.empty((k_end + 1, y.size))
    out[k_end] = y
    g = field.grid.gammas
    x = y
    for k in range(k_end - 1, -1, -1):
        x = x - field.cutoff_drift_at_index(k + 1, x) * g[k + 1]
        if not np.all(np.isfinite(x)):
            raise FlowError(f"backward Euler overflow at index {k}")
        out[k] = x
    return out


LAMBDA_CONSTANT = 1.0


def lambda_factor(T_minus_t, y, a_N: float, gamma0: float, C: float = LAMBDA_CONSTANT):
    """1 + sqrt(tau)(1+y^2) + |y| exp(C tau a_N^2 gamma0 y^2)(sqrt(tau) + tau(1+y^2))."""
    tau = np.asarray(T_minus_t, dtype=float)
    if np.any(tau < 0):
        raise ValueError("T - t must be nonnegative")
    y = np.asarray(y, dtype=float)
    y2 = y * y
    rt = np.sqrt(tau)
    growth = np.exp(C * tau * a_N**2 * gamma0 * y2)
    return 1.0 + rt * (1.0 + y2) + np.abs(y) * growth * (rt + tau * (1.0 + y2))
