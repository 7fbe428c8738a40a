"""Simulation of the Robbins-Monro iterates, the renormalized chain U and the cut-off chain V."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import integrate

from . import kernels
from .flows import DriftField, FlowBundle
from .model import (CutoffRule, InnovationSpec, ModelSpec, StepSchedule, TimeGrid,
                    build_grid)
from .sampling import run_blocks, seed_sequence, time_chunks


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathEnsemble:
    kind: str
    paths: np.ndarray
    grid: TimeGrid
    seed: int
    steps: np.ndarray = dc_field(default=None)


# ---------------------------------------------------------------------------
# raw recursion


def simulate_rm(model: ModelSpec, schedule: StepSchedule, n_steps: int, stream,
                innovations: InnovationSpec | None = None, n_paths: int = 1,
                noise_free: bool = False) -> np.ndarray:
    """theta_{k+1} = theta_k - gamma_{k+1} sigma (m(theta_k) - eta_{k+1}) with shifted steps.

    Returns shape (n_paths, n_steps + 1).
    """
    if n_steps < 1:
        raise SimulationError("n_steps must be >= 1")
    rng = stream if isinstance(stream, np.random.Generator) else np.random.Generator(
        np.random.Philox(seed_sequence(stream)))
    gam = schedule.steps(np.arange(1, n_steps + 1))
    out = np.empty((n_paths, n_steps + 1))
    theta = np.full(n_paths, float(model.theta0))
    out[:, 0] = theta
    sigma = model.sigma
    for k in range(n_steps):
        if noise_free or innovations is None:
            eta = 0.0
        else:
            eta = innovations.sample(rng, n_paths)
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - gam[k] * sigma * (model.m(theta) - eta)
        if not np.all(np.isfinite(theta)):
            raise SimulationError(f"non-finite iterate at step {k + 1}")
        out[:, k + 1] = theta
    return out


def renormalize(shifted_paths: np.ndarray, flows: FlowBundle, grid: TimeGrid,
                seed: int = 0) -> PathEnsemble:
    """U_k = (theta_k^N - theta_bar(t_k)) / sqrt(gamma_k^N)."""
    paths = np.atleast_2d(shifted_paths)
    n = paths.shape[1]
    tb = flows.theta_bar(grid.points[:n])
    u = (paths - tb) / np.sqrt(grid.gammas[:n])
    return PathEnsemble(kind="U", paths=u, grid=grid, seed=seed)


def beta_terms(field: DriftField) -> np.ndarray:
    """beta_{k+1} for k = 0..M: sqrt(g_{k+1})(h(theta_bar_k) - (theta_bar_{k+1} - theta_bar_k)/g_{k+1})."""
    grid = field.grid
    g_next = grid.gammas[1:]
    ext = np.append(grid.points, grid.points[-1] + grid.gammas[-1])
    tb = field.flows.theta_bar(ext)
    h = field.model.mean_field(tb[:-1])
    return np.ascontiguousarray(np.sqrt(g_next) * (h - np.diff(tb) / g_next))


def beta_term(k: int, field: DriftField) -> float:
    return float(beta_terms(field)[k])


def renormalized_step(k: int, u, xi, field: DriftField, beta_k: float):
    """One step of U: u + G_N(t_k, u) u gamma_{k+1} + sqrt(gamma_{k+1}) xi + beta_{k+1}."""
    g = field.grid.gammas[k + 1]
    return u + field.coefficient_at_index(k, u) * u * g + math.sqrt(g) * xi + beta_k


# ---------------------------------------------------------------------------
# cut-off chain


def _kernel_args(field: DriftField):
    return (field.theta_bar, field.sqrt_gamma, field.alpha, field.ratio, field.next_gamma)


def _advance_v(x, noise, k0, field: DriftField, backend=None):
    mod = kernels.active(backend)
    if field.model.family is not None:
        slope, amp = field.model.family
        mod.v_chain(x, noise, k0, *_kernel_args(field), field.a_N, slope, amp, field.model.sigma)
        return
    for s in range(noise.shape[0]):
        k = k0 + s
        g = field.next_gamma[k]
        x += field.cutoff_drift_at_index(k, x) * g + math.sqrt(g) * noise[s]


def _xi_block(rng, innovations, sigma, shape):
    return np.ascontiguousarray(sigma * innovations.sample(rng, shape))


def simulate_V(field: DriftField, innovations: InnovationSpec, x0, n_paths: int, seed,
               k0: int = 0, k1: int | None = None, record="terminal", threads: int = 1,
               backend=None) -> PathEnsemble:
    """V_{k+1} = V_k + F_N(t_k, V_k) V_k gamma_{k+1} + sqrt(gamma_{k+1}) xi_{k+1}.

    ``record`` is 'terminal', 'all', or an array of grid indices to store.
    """
    grid = field.grid
    k1 = grid.m_of_n if k1 is None else int(k1)
    if not 0 <= k0 < k1 <= grid.m_of_n:
        raise SimulationError("need 0 <= k0 < k1 <= M(N)")
    if isinstance(record, str):
        steps = np.array([k1]) if record == "terminal" else np.arange(k0, k1 + 1)
    else:
        steps = np.asarray(record, dtype=int)
    sigma = field.model.sigma

    def work(rng, size, _b):
        x = np.full(size, float(x0))
        rec = np.empty((size, steps.size))
        if k0 in steps:
            rec[:, np.searchsorted(steps, k0)] = x
        for a, b in time_chunks(k1 - k0):
            noise = _xi_block(rng, innovations, sigma, (b - a, size))
            # stop at every recorded index inside the chunk
            cur = k0 + a
            for stop in list(steps[(steps > k0 + a) & (steps <= k0 + b)]) + [k0 + b]:
                if stop > cur:
                    _advance_v(x, noise[cur - k0 - a: stop - k0 - a], cur, field, backend)
                    cur = stop
                if stop in steps:
                    rec[:, np.searchsorted(steps, stop)] = x
        if not np.all(np.isfinite(x)):
            raise SimulationError("non-finite V path")
        return rec

    parts = run_blocks(work, n_paths, seed, threads)
    return PathEnsemble(kind="V", paths=np.concatenate(parts, axis=0), grid=grid,
                        seed=seed, steps=steps)


# ---------------------------------------------------------------------------
# coupling


def lipschitz_constant(field: DriftField, radius: float = 60.0, n: int = 601) -> float:
    """sup over grid indices and |x| <= radius of |d/dx (G_N(t_k, x) x)|."""
    x = np.linspace(-radius, radius, n)
    h = 1e-6
    best = 0.0
    for k in range(field.grid.m_of_n + 1):
        d = (field.coefficient_at_index(k, x + h) * (x + h)
             - field.coefficient_at_index(k, x - h) * (x - h)) / (2 * h)
        best = max(best, float(np.max(np.abs(d))))
    return best


def _simulate_coupled(field, innovations, beta, n_paths, seed, threads, backend=None):
    M = field.grid.m_of_n
    sigma = field.model.sigma

    def work(rng, size, _b):
        u = np.zeros(size)
        v = np.zeros(size)
        gap = np.zeros(size)
        gap_stopped = np.zeros(size)
        exited = np.zeros(size, dtype=np.uint8)
        for a, b in time_chunks(M):
            noise = _xi_block(rng, innovations, sigma, (b - a, size))
            if field.model.family is not None:
                slope, amp = field.model.family
                kernels.active(backend).uv_chain(u, v, gap, gap_stopped, exited, noise, a,
                                                 *_kernel_args(field), beta, field.a_N,
                                                 slope, amp, sigma)
            else:
                for s in range(b - a):
                    k = a + s
                    g = field.next_gamma[k]
                    cu = field.coefficient_at_index(k, u)
                    cv = field.cutoff_at_index(k, v)
                    u += cu * u * g + math.sqrt(g) * noise[s] + beta[k]
                    v += cv * v * g + math.sqrt(g) * noise[s]
                    d = np.abs(u - v)
                    np.maximum(gap, d, out=gap)
                    live = exited == 0
                    gap_stopped[live] = np.maximum(gap_stopped[live], d[live])
                    exited[live & (np.abs(v) >= field.a_N)] = 1
        return gap, gap_stopped, exited.astype(bool), u, v

    parts = run_blocks(work, n_paths, seed, threads)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))


@dataclass(frozen=True)
class CouplingReport:
    C: float
    shifts: list
    gamma0: list
    a_N: list
    prob_exceed: list
    exceed_stderr: list
    exit_fraction: list
    exit_stderr: list
    beta_sums: list
    lipschitz: list
    pathwise_violations: list
    n_paths: int

    @property
    def mc_stderr(self):
        return max(self.exceed_stderr + self.exit_stderr)

    def rows(self):
        for i, N in enumerate(self.shifts):
            yield {"N": N, "gamma0": self.gamma0[i], "a_N": self.a_N[i],
                   "prob_exceed": self.prob_exceed[i], "stderr": self.exceed_stderr[i],
                   "exit_fraction": self.exit_fraction[i]}


def _binomial_se(p, n):
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def coupling_experiment(model: ModelSpec, innovations: InnovationSpec, schedule_for,
                        shifts, cutoff: CutoffRule, n_paths: int, seed, C: float | None = None,
                        threads: int = 1, min_paths: int = 100, backend=None) -> CouplingReport:
    """P(sup_k |U_k - V_k| > C sqrt(gamma_0^N)) and P(tau_{a_N} <= M(N)) per shift N.

    ``schedule_for(N)`` builds the step schedule for shift N. U and V share the
    innovation stream path by path.
    """
    if n_paths < min_paths:
        raise SimulationError(f"need at least {min_paths} paths")
    setups = []
    for N in shifts:
        grid = build_grid(schedule_for(N))
        field = DriftField.build(model, grid, cutoff=cutoff)
        beta = beta_terms(field)
        L = lipschitz_constant(field)
        setups.append((N, grid, field, beta, L))
    beta_sums = [float(np.sum(np.abs(b))) for *_, b, _ in setups]
    if C is None:
        fitted = max(s / math.sqrt(g.gamma0) for s, (_, g, *_r) in zip(beta_sums, setups))
        T = max(g.T_N for _, g, *_r in setups)
        C = fitted * math.exp(max(L for *_r, L in setups) * T)
    out = {k: [] for k in ("g0", "a", "pe", "pse", "ef", "ese", "viol")}
    for i, (N, grid, field, beta, L) in enumerate(setups):
        gap, gap_stopped, exited, _, _ = _simulate_coupled(
            field, innovations, beta, n_paths, seed_sequence(seed, i), threads, backend)
        pe = float(np.mean(gap > C * math.sqrt(grid.gamma0)))
        ef = float(np.mean(exited))
        growth = np.prod(1 + L * grid.gammas[1: grid.m_of_n + 1])
        bound = growth * beta_sums[i] * (1 + 1e-9) + 1e-12
        viol = int(np.count_nonzero(gap_stopped > bound))
        out["g0"].append(grid.gamma0)
        out["a"].append(field.a_N)
        out["pe"].append(pe)
        out["pse"].append(_binomial_se(pe, n_paths))
        out["ef"].append(ef)
        out["ese"].append(_binomial_se(ef, n_paths))
        out["viol"].append(viol)
    return CouplingReport(C=float(C), shifts=list(shifts), gamma0=out["g0"], a_N=out["a"],
                          prob_exceed=out["pe"], exceed_stderr=out["pse"],
                          exit_fraction=out["ef"], exit_stderr=out["ese"], beta_sums=beta_sums,
                          lipschitz=[s[4] for s in setups], pathwise_violations=out["viol"],
                          n_paths=int(n_paths))


# ---------------------------------------------------------------------------
# Stroock-Varadhan diagnostics


XI_SPAN = 60.0


def _xi_integral(fn, lo, hi, sigma):
    lo = max(lo, -XI_SPAN * sigma)
    hi = min(hi, XI_SPAN * sigma)
    if hi <= lo:
        return 0.0
    with warnings.catch_warnings():
        # roundoff warnings only fire on tails already below epsabs
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(fn, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=400,
                                points=[p for p in (0.0,) if lo < p < hi] or None)
    return val


def sv_diagnostics(t, x, field: DriftField, innovations: InnovationSpec, epsilon: float):
    """(a_gamma, b_gamma, Delta_gamma^eps) at (t, x) for the one-step kernel of V.

    With gamma the step leaving the cell containing t and v the standardized
    innovation, y - x = F_N(t, x) x gamma + sqrt(gamma) v, and
        a = gamma^{-1} E[(y-x)^2; |y-x| <= 1],  b = gamma^{-1} E[y-x; |y-x| <= 1],
        Delta = gamma^{-1} P(|y-x| > eps).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    k = int(field.grid.index(t))
    g = float(field.grid.gammas[k + 1])
    sg = math.sqrt(g)
    drift = float(field.cutoff_drift_at_index(k, x))
    sigma = field.model.sigma
    rho = lambda v: float(innovations.xi_density(v, sigma))
    shift = drift * sg
    lo, hi = (-1.0 / sg - shift), (1.0 / sg - shift)
    a_val = _xi_integral(lambda v: (v * v + 2 * sg * v * drift + g * drift * drift) * rho(v),
                         lo, hi, sigma)
    b_val = _xi_integral(lambda v: (v / sg + drift) * rho(v), lo, hi, sigma)
    upper = epsilon / sg - shift
    lower = -epsilon / sg - shift
    tail = (_xi_integral(rho, upper, math.inf, sigma) + _xi_integral(rho, -math.inf, lower, sigma))
    return a_val, b_val, tail / g


def epsilon_n(grid: TimeGrid) -> float:
    """(gamma^N_{M(N)})^{3/8}."""
    return float(grid.gammas[grid.m_of_n]) ** 0.375
