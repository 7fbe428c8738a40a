"""The limiting Gaussian diffusion, the cut-off diffusion X^N and the frozen densities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .chains import SimulationError, _advance_v
from .flows import DriftField, FlowBundle, cutoff_flow
from .model import InnovationSpec
from .sampling import run_blocks, time_chunks


def g_sigma(tau, z, sigma: float):
    """Centered normal density with variance sigma^2 tau."""
    tau = np.asarray(tau, dtype=float)
    var = sigma**2 * tau
    return np.exp(-0.5 * np.square(z) / var) / np.sqrt(2 * math.pi * var)


@dataclass(frozen=True)
class GaussianTransition:
    mean: np.ndarray
    variance: np.ndarray

    def pdf(self, y):
        return np.exp(-0.5 * (y - self.mean) ** 2 / self.variance) / np.sqrt(
            2 * math.pi * self.variance)


def gaussian_transition(t, T, x, flows: FlowBundle) -> GaussianTransition:
    if np.any(np.asarray(t) >= np.asarray(T)):
        raise ValueError("need t < T")
    mean = flows.resolvent(T, t) * np.asarray(x, dtype=float)
    return GaussianTransition(mean=mean, variance=flows.gaussian_variance(t, T))


def density_p(t, T, x, y, flows: FlowBundle):
    """Transition density of dX = A(t) X dt + sigma dW (exact Gaussian)."""
    return gaussian_transition(t, T, x, flows).pdf(np.asarray(y, dtype=float))


def g_constant(tau, z, C):
    """g_C(tau, z) = exp(-z^2 / (C tau)) / (C sqrt(tau))."""
    return np.exp(-np.square(z) / (C * tau)) / (C * np.sqrt(tau))


def two_sided_constants(values, tau, z, lo=1e-3, hi=1e9):
    """Smallest C1, C2 with C1^{-1} g_{C1} <= values <= C2 g_{C2} at the sampled points."""
    values = np.asarray(values, dtype=float)

    def upper_ok(C):
        return np.all(values <= C * g_constant(tau, z, C) * (1 + 1e-12))

    def lower_ok(C):
        return np.all(values >= g_constant(tau, z, C) / C * (1 - 1e-12))

    def bisect(ok):
        a, b = lo, hi
        if not ok(b):
            return math.inf
        for _ in range(200):
            mid = math.sqrt(a * b)
            a, b = (a, mid) if ok(mid) else (mid, b)
        return b

    return bisect(lower_ok), bisect(upper_ok)


def sample_limit_sde(t, T, x, n, seed, flows: FlowBundle, threads: int = 1):
    """Exact draws of X_T given X_t = x."""
    tr = gaussian_transition(t, T, x, flows)
    sd = math.sqrt(float(tr.variance))
    mean = float(tr.mean)
    parts = run_blocks(lambda rng, size, _b: mean + sd * rng.standard_normal(size), n, seed,
                       threads)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Euler-Maruyama on the grid


def substep_plan(field: DriftField, t: float, substeps: int):
    """Per-substep grid cell index and length from t to T_N (each cell split evenly)."""
    grid = field.grid
    if not 0 <= t < grid.T_N:
        raise ValueError("start time must lie in [0, T_N)")
    k0 = int(grid.index(t))
    cells, dts, starts = [], [], []
    for k in range(k0, grid.m_of_n):
        left = max(grid.points[k], t)
        span = grid.points[k + 1] - left
        if span <= 0:
            continue
        n_sub = max(1, int(math.ceil(substeps * span / grid.gammas[k + 1] - 1e-9)))
        h = span / n_sub
        cells += [k] * n_sub
        dts += [h] * n_sub
        starts += list(left + h * np.arange(n_sub))
    return (np.asarray(cells, dtype=np.int64), np.asarray(dts), np.asarray(starts))


def explosion_bound(x, a_N):
    return 50.0 * (1.0 + abs(float(x)) + a_N)


def _em_cutoff_block(field, x, normals, cells, dts, bound, backend=None):
    if field.model.family is not None:
        slope, amp = field.model.family
        return kernels.active(backend).em_cutoff(
            x, normals, cells, dts, field.theta_bar, field.sqrt_gamma, field.alpha, field.ratio,
            field.a_N, slope, amp, field.model.sigma, bound)
    blown = 0
    for j in range(normals.shape[0]):
        live = np.abs(x) <= bound
        step = x + field.cutoff_drift_at_index(cells[j], x) * dts[j] + field.model.sigma * math.sqrt(
            dts[j]) * normals[j]
        x[live] = step[live]
        blown += int(np.count_nonzero(live & (np.abs(x) > bound)))
    return blown


def simulate_cutoff_sde(field: DriftField, t: float, x: float, n_paths: int, seed,
                        substeps: int = 4, threads: int = 1, backend=None):
    """Samples of X^N_{T_N} from X^N_t = x by Euler-Maruyama on the refined grid."""
    cells, dts, _ = substep_plan(field, t, substeps)
    bound = explosion_bound(x, field.a_N)

    def work(rng, size, _b):
        xs = np.full(size, float(x))
        blown = 0
        for a, b in time_chunks(cells.size):
            normals = rng.standard_normal((b - a, size))
            blown += _em_cutoff_block(field, xs, normals, cells[a:b], dts[a:b], bound, backend)
        return xs, blown

    parts = run_blocks(work, n_paths, seed, threads)
    blown = sum(p[1] for p in parts)
    if blown:
        raise SimulationError(f"{blown} cut-off diffusion paths left |x| <= {bound:g}")
    return np.concatenate([p[0] for p in parts])


def simulate_coupled_chain_and_diffusion(field: DriftField, innovations: InnovationSpec, k0: int,
                                         x: float, n_paths: int, seed, substeps: int = 4,
                                         threads: int = 1, backend=None):
    """(V_{M}, X^N_{T_N}) from the same Gaussian increments.

    Each chain innovation is the monotone transport to the innovation law of the
    normalized Brownian increment over its grid cell.
    """
    grid = field.grid
    cells, dts, _ = substep_plan(field, float(grid.points[k0]), substeps)
    bound = explosion_bound(x, field.a_N)
    per_cell = np.bincount(cells - k0, minlength=grid.m_of_n - k0)
    if np.any(per_cell != substeps):
        raise ValueError("coupled runs need whole cells")
    sigma = field.model.sigma
    n_cells = grid.m_of_n - k0

    def work(rng, size, _b):
        xs = np.full(size, float(x))
        vs = np.full(size, float(x))
        blown = 0
        for a, b in time_chunks(n_cells, max(1, 512 // substeps)):
            normals = rng.standard_normal(((b - a) * substeps, size))
            sub = slice(a * substeps, b * substeps)
            blown += _em_cutoff_block(field, xs, normals, cells[sub], dts[sub], bound, backend)
            z = normals.reshape(b - a, substeps, size).sum(axis=1) / math.sqrt(substeps)
            xi = np.ascontiguousarray(sigma * innovations.from_normal(z))
            _advance_v(vs, xi, k0 + a, field, backend)
        return xs, vs, blown

    parts = run_blocks(work, n_paths, seed, threads)
    if sum(p[2] for p in parts):
        raise SimulationError("cut-off diffusion exploded in coupled run")
    return np.concatenate([p[1] for p in parts]), np.concatenate([p[0] for p in parts])


def simulate_coupled_limit_and_cutoff(field: DriftField, t: float, x: float, n_paths: int, seed,
                                      substeps: int = 4, threads: int = 1, backend=None):
    """(X_T, X^N_T) by Euler-Maruyama with shared Brownian increments."""
    cells, dts, starts = substep_plan(field, t, substeps)
    lin = np.ascontiguousarray(field.flows.drift_coefficient(starts))
    bound = explosion_bound(x, field.a_N)
    sigma = field.model.sigma
    mod = kernels.active(backend)

    def work(rng, size, _b):
        xs = np.full(size, float(x))
        ls = np.full(size, float(x))
        blown = 0
        for a, b in time_chunks(cells.size):
            normals = rng.standard_normal((b - a, size))
            blown += _em_cutoff_block(field, xs, normals, cells[a:b], dts[a:b], bound, backend)
            mod.em_linear(ls, normals, lin[a:b], dts[a:b], sigma)
        return ls, xs, blown

    parts = run_blocks(work, n_paths, seed, threads)
    if sum(p[2] for p in parts):
        raise SimulationError("cut-off diffusion exploded in coupled run")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------------------
# frozen densities


def frozen_density_p_tilde(t, T, x, y, flows: FlowBundle):
    """g_sigma(T - t, theta_{t,T}(y) - x) with the limit flow theta_{t,T}(y) = Phi(t, T) y."""
    if np.any(np.asarray(t) >= np.asarray(T)):
        raise ValueError("need t < T")
    theta = flows.resolvent(t, T) * np.asarray(y, dtype=float)
    return g_sigma(np.asarray(T) - np.asarray(t), theta - np.asarray(x), flows.model.sigma)


def frozen_density_q_tilde(t: float, T: float, x, y, field: DriftField):
    """g_sigma(T - t, theta^N_{t,T}(y) - x) with the cut-off flow."""
    if t >= T:
        raise ValueError("need t < T")
    y = np.asarray(y, dtype=float)
    theta = cutoff_flow(field, y.ravel(), T, [t])[0].reshape(y.shape)
    return g_sigma(T - t, theta - np.asarray(x), field.model.sigma)
