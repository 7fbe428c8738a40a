"""Parametrix expansions of the diffusion and chain transition densities.

Continuous side: kernels H (limit diffusion) and H_N (cut-off diffusion), the
time-space convolution and the series sum_r base (x) kernel^(r).

Discrete side: one-step densities, densities of weighted innovation sums,
the frozen chain density, the kernels calK_N, K_N, M_N = calK_N - K_N and the
discrete series that reproduces the chain density exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy.special import beta as beta_fn

from .diffusions import g_constant, g_sigma
from .estimate import DensityGrid
from .flows import DriftField, FlowBundle, backward_euler, cutoff_flow
from .model import InnovationSpec, StepSchedule, TimeGrid, build_grid


class SeriesError(RuntimeError):
    pass


class QuadratureError(RuntimeError):
    pass


_GL_CACHE: dict = {}


def _gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


@dataclass(frozen=True)
class GaussianKernelBound:
    """g_C(t, z) = exp(-z^2 / (C t)) / (C sqrt(t))."""

    C: float

    def __call__(self, t, z):
        return g_constant(t, z, self.C)


@dataclass(frozen=True)
class KernelField:
    kind: str
    evaluate: Callable

    def __call__(self, *args, **kw):
        return self.evaluate(*args, **kw)


# ---------------------------------------------------------------------------
# continuous kernels


def _check_order(t, T):
    if not np.all(np.asarray(t) < np.asarray(T)):
        raise ValueError("need t < T")


def _gauss_parts(tau, theta, x, sigma):
    """Frozen density g_sigma(tau, theta - x) and its x-derivative."""
    p = g_sigma(tau, theta - x, sigma)
    return p, (theta - x) / (sigma**2 * tau) * p


def limit_flow(flows: FlowBundle, t, T, y):
    """theta_{t,T}(y) = Phi(t, T) y (linear backward ODE)."""
    return flows.resolvent(t, T) * np.asarray(y, dtype=float)


def kernel_H(t, T, x, y, flows: FlowBundle):
    """A(t) (x - theta_{t,T}(y)) d/dx p~(t, T, x, y); the diffusion parts cancel."""
    _check_order(t, T)
    x = np.asarray(x, dtype=float)
    theta = limit_flow(flows, t, T, y)
    _, dp = _gauss_parts(np.asarray(T) - np.asarray(t), theta, x, flows.model.sigma)
    return flows.drift_coefficient(t) * (x - theta) * dp


def _cell_before(field: DriftField, t):
    """Grid cell used for F_N at time t (cells are left-closed)."""
    return int(field.grid.index(float(t)))


def cutoff_drift(field: DriftField, t, x):
    """F_N(t, x) x."""
    return field.cutoff_drift_at_index(_cell_before(field, t), np.asarray(x, dtype=float))


def kernel_H_N(t: float, T: float, x, y, field: DriftField, theta=None):
    """(F_N(t,x)x - F_N(t,theta)theta) d/dx q~_N(t, T, x, y) with theta = theta^N_{t,T}(y)."""
    _check_order(t, T)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if theta is None:
        theta = cutoff_flow(field, y.ravel(), T, [t])[0].reshape(y.shape)
    _, dq = _gauss_parts(T - t, theta, x, field.model.sigma)
    return (cutoff_drift(field, t, x) - cutoff_drift(field, t, theta)) * dq


def generator_gap_fd(phi, drift, frozen_drift, sigma, x, h=1e-5):
    """(L - L~) phi at x by central differences.

    L = drift(x) d/dx + sigma^2/2 d^2/dx^2 and L~ uses the constant `frozen_drift`.
    """
    x = np.asarray(x, dtype=float)
    up, mid, dn = phi(x + h), phi(x), phi(x - h)
    d1 = (up - dn) / (2 * h)
    d2 = (up - 2 * mid + dn) / h**2
    full = drift(x) * d1 + 0.5 * sigma**2 * d2
    frozen = frozen_drift * d1 + 0.5 * sigma**2 * d2
    return full - frozen


# ---------------------------------------------------------------------------
# pointwise continuous convolution


def _bridge_window(u, t, T, c_f, c_g, sigma):
    s1 = sigma**2 * (u - t)
    s2 = sigma**2 * (T - u)
    centre = (c_f * s2 + c_g * s1) / (s1 + s2)
    sd = math.sqrt(s1 * s2 / (s1 + s2))
    return centre, sd


def _conv_continuous_once(f, g, t, T, x, y, centre_f, centre_g, sigma, n_time, n_space, L):
    vt, wt = _gauss_legendre(n_time)
    vs, ws = _gauss_legendre(n_space)
    mid = 0.5 * (t + T)
    total = 0.0
    for side in (0, 1):
        vmax = math.sqrt(mid - t) if side == 0 else math.sqrt(T - mid)
        v = 0.5 * vmax * (vt + 1.0)
        dv = 0.5 * vmax * wt
        for vi, wi in zip(v, dv):
            u = t + vi * vi if side == 0 else T - vi * vi
            if not t < u < T:
                continue
            centre, sd = _bridge_window(u, t, T, centre_f(u), centre_g(u), sigma)
            z = centre + L * sd * vs
            vals = np.asarray(f(t, u, x, z)) * np.asarray(g(u, T, z, y))
            total += wi * 2.0 * vi * L * sd * float(np.dot(ws, vals))
    return total


def conv_continuous(f, g, t: float, T: float, x: float, y: float, flows: FlowBundle | None = None,
                    sigma: float | None = None, n_time: int = 24, n_space: int = 48,
                    L: float = 8.0, tol: float = 1e-7, max_doublings: int = 4,
                    centre_f=None, centre_g=None):
    """(f (x) g)(t, T, x, y) = int_t^T int f(t,u,x,z) g(u,T,z,y) dz du.

    Time integral: split at the midpoint with u = t + v^2 on the left and
    u = T - v^2 on the right, Gauss-Legendre in v. Space integral:
    Gauss-Legendre over +-L standard deviations of the Gaussian bridge between
    the forward centre of f and the backward centre of g. Returns
    (value, error estimate from doubling both node counts).
    """
    if not t < T:
        raise ValueError("need t < T")
    if sigma is None:
        sigma = flows.model.sigma
    if centre_f is None:
        centre_f = (lambda u: float(flows.resolvent(u, t)) * x) if flows else (lambda u: x)
    if centre_g is None:
        centre_g = (lambda u: float(flows.resolvent(u, T)) * y) if flows else (lambda u: y)
    prev = _conv_continuous_once(f, g, t, T, x, y, centre_f, centre_g, sigma, n_time, n_space, L)
    for _ in range(max_doublings):
        n_time, n_space = 2 * n_time, 2 * n_space
        cur = _conv_continuous_once(f, g, t, T, x, y, centre_f, centre_g, sigma, n_time, n_space, L)
        err = abs(cur - prev)
        if err <= tol * max(1.0, abs(cur)):
            return cur, err
        prev = cur
    raise QuadratureError(f"convolution did not settle (last change {err:.3g})")


# ---------------------------------------------------------------------------
# series bookkeeping


def beta_ratio(r: int) -> float:
    """B((r+1)/2, 1/2): growth factor from term r to term r + 1."""
    return float(beta_fn((r + 1) / 2.0, 0.5))


def beta_envelope(r: int, tau: float) -> float:
    """tau^{r/2} prod_{j=1..r} B(j/2, 1/2)."""
    return tau ** (r / 2.0) * math.prod(float(beta_fn(j / 2.0, 0.5)) for j in range(1, r + 1))


@dataclass
class SeriesAccumulator:
    terms: list
    tau: float
    quadrature_error: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for r, term in enumerate(self.terms):
            if not np.all(np.isfinite(term.values)):
                raise SeriesError(f"term {r} is not finite")
        n = self.term_norms
        for r in range(2, len(n)):
            if n[r] > n[r - 1] > n[r - 2] > 0:
                raise SeriesError("term norms grow; quadrature has likely broken down")

    @property
    def r_max(self) -> int:
        return len(self.terms) - 1

    @property
    def term_norms(self) -> list:
        return [float(np.max(np.abs(t.values))) for t in self.terms]

    @property
    def partial_sums(self) -> list:
        out, acc = [], None
        for t in self.terms:
            acc = t.values.copy() if acc is None else acc + t.values
            out.append(DensityGrid(t.x_nodes, t.y_nodes, acc.copy(), meta=dict(t.meta)))
        return out

    @property
    def total(self) -> DensityGrid:
        return self.partial_sums[-1]

    def ratio_constant(self) -> float:
        """Smallest C with norm_{r+1} <= C sqrt(tau) B((r+1)/2, 1/2) norm_r for all observed r."""
        n = self.term_norms
        best = 0.0
        for r in range(len(n) - 1):
            if n[r] > 0:
                best = max(best, n[r + 1] / (n[r] * math.sqrt(self.tau) * beta_ratio(r)))
        return best

    def truncation_estimate(self, C: float | None = None) -> float:
        """Beta-product tail bound for the terms beyond r_max."""
        n = self.term_norms
        if len(n) < 2:
            return math.inf
        C = self.ratio_constant() if C is None else C
        tail, cur = 0.0, n[-1]
        for r in range(self.r_max, self.r_max + 400):
            cur *= C * math.sqrt(self.tau) * beta_ratio(r)
            tail += cur
            if cur <= 1e-18 * max(tail, 1e-300):
                break
        return tail


# ---------------------------------------------------------------------------
# shared convolution engine


def _run_series(n_nodes, base_fn, kernel_fn, weight_fn, endpoint_fn, x_nodes, z_grid, y_nodes, h,
                r_max):
    """Forward recursion T_r[j] = sum_k w(k,j) int T_{r-1}[k](x,z) kernel(k,j,z,.) dz.

    Node 0 is the start time where T_0 is a Dirac mass at x, so its contribution
    to T_1 is the kernel evaluated at the x nodes. Returns the matrices T_r at
    the last node on the y nodes.
    """
    nx = x_nodes.size
    store = [[None] * (n_nodes + 1) for _ in range(r_max + 1)]
    for j in range(1, n_nodes + 1):
        zs = z_grid if j < n_nodes else y_nodes
        cur = [base_fn(j, zs)]
        if r_max:
            kern = kernel_fn(j, zs)
            acc = [np.zeros((nx, zs.size)) for _ in range(r_max)]
            acc[0] += weight_fn(0, j) * kern(0, x_nodes)
            for k in range(1, j):
                km = kern(k, z_grid) * (h * weight_fn(k, j))
                for r in range(1, r_max + 1):
                    acc[r - 1] += store[r - 1][k] @ km
            ends = endpoint_fn(j, zs) if endpoint_fn is not None else None
            for r in range(1, r_max + 1):
                val = acc[r - 1]
                if ends is not None:
                    val = val - weight_fn(j, j) * ends[None, :] * cur[r - 1]
                cur.append(val)
        for r in range(r_max + 1):
            store[r][j] = cur[r]
    return [store[r][n_nodes] for r in range(r_max + 1)]


def _spatial_grid(lo, hi, h_max):
    n = int(math.ceil((hi - lo) / h_max)) + 1
    grid = np.linspace(lo, hi, n)
    return grid, grid[1] - grid[0]


# ---------------------------------------------------------------------------
# continuous series


def _continuous_setup(t, T, x_nodes, y_nodes, sigma, n_time, span, resolution):
    taus = np.linspace(t, T, n_time + 1)
    dt = (T - t) / n_time
    h_max = sigma * math.sqrt(dt) / resolution
    lo = min(x_nodes.min(), y_nodes.min(), span[0]) - 8 * sigma * math.sqrt(T - t)
    hi = max(x_nodes.max(), y_nodes.max(), span[1]) + 8 * sigma * math.sqrt(T - t)
    z_grid, h = _spatial_grid(lo, hi, h_max)
    return taus, dt, z_grid, h


def _trapezoid_weight(dt, n):
    return lambda k, j: 0.5 * dt if k in (0, j) else dt


def _limit_parts(flows, taus):
    sigma = flows.model.sigma
    A = flows.drift_coefficient(taus)

    def base_fn(j, zs, x_nodes):
        theta = limit_flow(flows, taus[0], taus[j], zs)
        return g_sigma(taus[j] - taus[0], theta[None, :] - x_nodes[:, None], sigma)

    def kernel_fn(j, zs):
        def kern(k, ws):
            theta = limit_flow(flows, taus[k], taus[j], zs)
            d = theta[None, :] - ws[:, None]
            tau = taus[j] - taus[k]
            return A[k] * (-d) * d / (sigma**2 * tau) * g_sigma(tau, d, sigma)
        return kern

    def endpoint_fn(j, zs):
        return np.full(zs.size, A[j])

    return base_fn, kernel_fn, endpoint_fn


def _cutoff_parts(field: DriftField, taus):
    sigma = field.model.sigma
    flow_cache = {}

    def flows_to(j, zs):
        key = (j, zs.size)
        if key not in flow_cache:
            flow_cache.clear()
            flow_cache[key] = cutoff_flow(field, zs, taus[j], taus[:j])
        return flow_cache[key]

    def base_fn(j, zs, x_nodes):
        theta = flows_to(j, zs)[0]
        return g_sigma(taus[j] - taus[0], theta[None, :] - x_nodes[:, None], sigma)

    def kernel_fn(j, zs):
        th = flows_to(j, zs)

        def kern(k, ws):
            cell = _cell_before(field, taus[k])
            theta = th[k]
            d = theta[None, :] - ws[:, None]
            tau = taus[j] - taus[k]
            gap = (field.cutoff_drift_at_index(cell, ws)[:, None]
                   - field.cutoff_drift_at_index(cell, theta)[None, :])
            return gap * d / (sigma**2 * tau) * g_sigma(tau, d, sigma)
        return kern

    def endpoint_fn(j, zs):
        cell = int(field.grid.index(np.nextafter(taus[j], -np.inf)))
        e = 1e-6
        return (field.cutoff_drift_at_index(cell, zs + e)
                - field.cutoff_drift_at_index(cell, zs - e)) / (2 * e)

    return base_fn, kernel_fn, endpoint_fn


def series_continuous(base: str, kernel: str, r_max: int, x_nodes, y_nodes, t: float, T: float,
                      flows: FlowBundle | None = None, field: DriftField | None = None,
                      n_time: int = 32, resolution: float = 1.5, estimate_error: bool = True):
    """Partial sums of sum_r base (x) kernel^(r) on an (x, y) grid.

    base/kernel are ('p_tilde', 'H') for the limit diffusion or ('q_tilde', 'H_N')
    for the cut-off diffusion. Time integrals use the trapezoid rule on n_time
    uniform cells, with the exact limits of the inner integrals at both ends;
    the spatial grid spacing is sigma sqrt(dt) / resolution. The quadrature
    error is estimated by repeating with n_time / 2 cells.
    """
    if r_max < 0:
        raise ValueError("r_max must be nonnegative")
    if not t < T:
        raise ValueError("need t < T")
    pair = (base, kernel)
    x_nodes = np.atleast_1d(np.asarray(x_nodes, dtype=float))
    y_nodes = np.atleast_1d(np.asarray(y_nodes, dtype=float))
    if pair == ("p_tilde", "H"):
        model, sigma = flows.model, flows.model.sigma
        span_y = limit_flow(flows, t, T, y_nodes)
    elif pair == ("q_tilde", "H_N"):
        model, sigma = field.model, field.model.sigma
        span_y = cutoff_flow(field, y_nodes, T, [t])[0]
    else:
        raise ValueError(f"unsupported base/kernel pair {pair}")
    span = (float(span_y.min()), float(span_y.max()))

    def run(n):
        taus, dt, z_grid, h = _continuous_setup(t, T, x_nodes, y_nodes, sigma, n, span, resolution)
        if pair == ("p_tilde", "H"):
            parts = _limit_parts(flows, taus)
        else:
            parts = _cutoff_parts(field, taus)
        base_fn, kernel_fn, endpoint_fn = parts
        mats = _run_series(n, lambda j, zs: base_fn(j, zs, x_nodes), kernel_fn,
                           _trapezoid_weight(dt, n), endpoint_fn, x_nodes, z_grid, y_nodes, h,
                           r_max)
        return mats, z_grid.size

    mats, nz = run(n_time)
    err = 0.0
    if estimate_error and r_max > 0 and n_time >= 4:
        coarse, _ = run(n_time // 2)
        err = float(np.max(np.abs(sum(mats) - sum(coarse))))
    meta = {"t": t, "T": T, "method": f"series:{base}:{kernel}", "model": model.name,
            "n_time": n_time, "n_space": nz}
    terms = [DensityGrid(x_nodes, y_nodes, m, meta=dict(meta, r=r)) for r, m in enumerate(mats)]
    return SeriesAccumulator(terms=terms, tau=T - t, quadrature_error=err, meta=meta)


# ---------------------------------------------------------------------------
# discrete side: one-step and summed innovation densities


def one_step_density(k: int, x, z, field: DriftField, innovations: InnovationSpec):
    """(1/sqrt(g)) rho_xi((z - x - F_N(t_k,x) x g) / sqrt(g)) with g = gamma_{k+1}."""
    g = field.grid.gammas[k + 1]
    x = np.asarray(x, dtype=float)
    mean = x + field.cutoff_drift_at_index(k, x) * g
    rg = math.sqrt(g)
    return innovations.xi_density((np.asarray(z, dtype=float) - mean) / rg, field.model.sigma) / rg


def _step_gammas(grid_or_schedule, k, j):
    if isinstance(grid_or_schedule, TimeGrid):
        return np.asarray(grid_or_schedule.gammas[k + 1: j + 1], dtype=float)
    if isinstance(grid_or_schedule, StepSchedule):
        return np.asarray(grid_or_schedule.steps(np.arange(k + 1, j + 1)), dtype=float)
    return np.asarray(grid_or_schedule, dtype=float)[k + 1: j + 1]


def _spectral_density(char_fn, scales, dz, n, derivs=(0,)):
    """Density (and derivatives) of sum_i scales[i] * eta_i on z = (m - n/2) dz."""
    z0 = -0.5 * n * dz
    u = 2 * np.pi * np.fft.fftfreq(n, dz)
    phi = np.ones(n, dtype=complex)
    for s in scales:
        phi = phi * char_fn(s * u)
    du = 2 * np.pi / (n * dz)
    out = []
    for d in derivs:
        spec = phi * (-1j * u) ** d * np.exp(-1j * u * z0)
        out.append(np.real(np.fft.fft(spec)) * du / (2 * np.pi))
    return z0 + dz * np.arange(n), out


def _spectral_layout(scales, sigma_tail=14.0, every_partial_sum=True, per_sd=16.0):
    """Spacing and size of the FFT grid.

    When every partial sum of the scales must be resolved, the spacing follows
    the smallest single scale, otherwise the total standard deviation.
    """
    sd_min = float(np.min(scales))
    sd_tot = float(np.sqrt(np.sum(np.square(scales))))
    dz = (sd_min if every_partial_sum else sd_tot) / per_sd
    extent = 2 * (sigma_tail * sd_tot + 4 * sd_min)
    n = 1 << int(math.ceil(math.log2(extent / dz)))
    return dz, n


def innovation_sum_density(grid_or_schedule, k: int, j: int, innovations: InnovationSpec,
                           sigma: float = 1.0, tol: float = 1e-7, max_doublings: int = 6):
    """Density of sum_{i=k}^{j-1} sqrt(gamma_{i+1}) xi_{i+1} on a self-consistent grid.

    Spectral inversion of the product of characteristic functions; the grid
    spacing is halved until the sup change on the coarse nodes is below tol.
    Returns (z, density).
    """
    if not k < j:
        raise ValueError("need k < j")
    scales = sigma * np.sqrt(_step_gammas(grid_or_schedule, k, j))
    dz, n = _spectral_layout(scales, every_partial_sum=False)
    z, (f,) = _spectral_density(innovations.char_fn, scales, dz, n)
    for _ in range(max_doublings):
        z2, (f2,) = _spectral_density(innovations.char_fn, scales, dz / 2, 2 * n)
        change = float(np.max(np.abs(f2[::2] - f)))
        z, f, dz, n = z2, f2, dz / 2, 2 * n
        if change < tol:
            return z, f
    raise QuadratureError(f"innovation sum density not resolved (change {change:.3g})")


def _log_cf_sum(innovations, scales, u, chunk=256):
    """sum_i log cf(scales[i] u), with pairwise summation inside chunks."""
    total = np.zeros(u.size, dtype=complex)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for a in range(0, len(scales), chunk):
            block = innovations.log_cf(np.outer(scales[a:a + chunk], u))
            total += np.sum(block, axis=0)
    return total


def edgeworth_gap(grid_or_schedule, k: int, j: int, innovations: InnovationSpec,
                  sigma: float = 1.0, S: float | None = None, window: float = 6.0):
    """sup_z |g_sigma(tau, z) - p_S(z)| (1 + |z|/sqrt(tau))^{S-2} for the sum from k to j.

    tau = sum of the steps. The difference is inverted from the difference of
    characteristic functions and the sup runs over FFT nodes with
    |z| <= window * sigma * sqrt(tau), where the weighted difference stays
    above floating-point resolution.
    """
    if not k < j:
        raise ValueError("need k < j")
    S = innovations.tail_exponent if S is None else S
    gam = _step_gammas(grid_or_schedule, k, j)
    tau = float(np.sum(gam))
    scales = sigma * np.sqrt(gam)
    dz, n = _spectral_layout(scales, every_partial_sum=False)
    z0 = -0.5 * n * dz
    u = 2 * np.pi * np.fft.fftfreq(n, dz)
    log_phi = _log_cf_sum(innovations, scales, u)
    # reference variance from the same rounded scales, so a Gaussian sum cancels exactly
    var = float(np.sum(np.square(scales)))
    gauss = -0.5 * var * u * u
    excess = log_phi - gauss
    # expm1 keeps the cancellation exact where the two transforms agree; far out the
    # Gaussian term underflows first and the plain difference is exact
    near = np.abs(excess) < 1.0
    diff_cf = np.where(near, -np.expm1(np.where(near, excess, 0.0)) * np.exp(gauss),
                       np.exp(gauss) - np.exp(log_phi))
    diff = np.real(np.fft.fft(diff_cf * np.exp(-1j * u * z0))) / (n * dz)
    z = z0 + dz * np.arange(n)
    keep = np.abs(z) <= window * sigma * math.sqrt(tau)
    weight = (1.0 + np.abs(z[keep]) / math.sqrt(tau)) ** (S - 2)
    return float(np.max(np.abs(diff[keep]) * weight)), tau


TABLE_HALF_WIDTH = 20.0


class _HermiteTable:
    """Quintic Hermite interpolation on a uniform grid from values and two more derivatives.

    ``d[k]`` holds the k-th derivative at the nodes (k = 0..5); derivative j is
    interpolated from d[j], d[j+1], d[j+2], which is exact for quintics.
    """

    def __init__(self, z0: float, dz: float, d: np.ndarray):
        self.z0, self.dz, self.d = z0, dz, d

    def __call__(self, z, deriv: int = 0):
        z = np.asarray(z, dtype=float)
        s = (z - self.z0) / self.dz
        n = self.d.shape[1]
        inside = (s >= 0) & (s <= n - 1)
        i = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
        t = np.where(inside, s - i, 0.0)
        h = self.dz
        f, f1, f2 = self.d[deriv], self.d[deriv + 1] * h, self.d[deriv + 2] * h * h
        t2 = t * t
        t3 = t2 * t
        t4 = t3 * t
        t5 = t4 * t
        out = ((1 - 10 * t3 + 15 * t4 - 6 * t5) * f[i] + (10 * t3 - 15 * t4 + 6 * t5) * f[i + 1]
               + (t - 6 * t3 + 8 * t4 - 3 * t5) * f1[i] + (-4 * t3 + 7 * t4 - 3 * t5) * f1[i + 1]
               + 0.5 * (t2 - 3 * t3 + 3 * t4 - t5) * f2[i] + 0.5 * (t3 - 2 * t4 + t5) * f2[i + 1])
        return np.where(inside, out, 0.0)


class InnovationSums:
    """P_{l,m}: densities (and derivatives) of sum_{i=l}^{m-1} sqrt(gamma_{i+1}) xi_{i+1}.

    Gaussian innovations use the closed form; otherwise every P_{l,m} for a
    (l, m) comes from one spectral inversion on a grid shared by all l for that
    m, with the FFT derivatives feeding a quintic Hermite interpolant.
    """

    def __init__(self, grid: TimeGrid, innovations: InnovationSpec, sigma: float,
                 route: str = "auto"):
        self.grid = grid
        self.innovations = innovations
        self.sigma = float(sigma)
        if route == "auto":
            route = "closed" if innovations.is_gaussian else "spectral"
        if route == "closed" and not innovations.is_gaussian:
            raise ValueError("closed form only exists for Gaussian innovations")
        self.route = route
        self._cum = np.concatenate([[0.0], np.cumsum(grid.gammas[1:])])
        self._cache_m = None
        self._splines = None

    def variance(self, l, m):
        return self.sigma**2 * (self._cum[m] - self._cum[l])

    def _table(self, l, m):
        """Hermite table for P_{l,m}; tables are built on demand and kept per terminal m."""
        if self._cache_m != m:
            scales_all = self.sigma * np.sqrt(self.grid.gammas[1: m + 1])
            self._layout = (scales_all, *_spectral_layout(scales_all, per_sd=8.0))
            self._cache_m, self._splines = m, {}
        if l not in self._splines:
            scales_all, dz, n = self._layout
            z, derivs = _spectral_density(self.innovations.char_fn, scales_all[l:], dz, n,
                                          derivs=tuple(range(6)))
            half = TABLE_HALF_WIDTH * math.sqrt(self.variance(l, m))
            keep = slice(max(0, int(np.searchsorted(z, -half)) - 1),
                         min(n, int(np.searchsorted(z, half)) + 2))
            self._splines[l] = _HermiteTable(float(z[keep][0]), dz,
                                             np.array([d[keep] for d in derivs]))
        return self._splines[l]

    def __call__(self, l: int, m: int, z, deriv: int = 0):
        if not 0 <= l < m:
            raise ValueError("need l < m")
        z = np.asarray(z, dtype=float)
        if self.route == "closed":
            v = self.variance(l, m)
            p = np.exp(-0.5 * z * z / v) / math.sqrt(2 * math.pi * v)
            if deriv == 0:
                return p
            if deriv == 1:
                return -z / v * p
            if deriv == 2:
                return (z * z / v**2 - 1 / v) * p
            if deriv == 3:
                return (3 * z / v**2 - z**3 / v**3) * p
            raise ValueError("deriv must be 0..3")
        if deriv not in (0, 1, 2, 3):
            raise ValueError("deriv must be 0..3")
        return self._table(l, m)(z, deriv)


def discrete_generator(k: int, phi, w, field: DriftField, innovations: InnovationSpec,
                       n_nodes: int = 200, width: float = 16.0):
    """calL_N phi(w) = gamma^{-1} E[phi(w + F_N(t_k,w) w gamma + sqrt(gamma) xi) - phi(w)]."""
    g = field.grid.gammas[k + 1]
    rg = math.sqrt(g)
    sigma = field.model.sigma
    w = np.atleast_1d(np.asarray(w, dtype=float))
    nodes, weights = _gauss_legendre(n_nodes)
    v = width * sigma * nodes
    wts = width * sigma * weights * innovations.xi_density(v, sigma)
    moved = w + field.cutoff_drift_at_index(k, w) * g
    vals = phi(moved[:, None] + rg * v[None, :]) - phi(w)[:, None]
    return vals @ wts / g


def frozen_chain_density(k: int, j: int, x, z, field: DriftField, sums: InnovationSums,
                         freeze: tuple | None = None):
    """Density at z of the chain frozen along the backward Euler flow, started at x at t_k.

    The freezing pair (index, point) defaults to (j, z); the displacement is
    z - x - theta_hat_j + theta_hat_k.
    """
    if not k < j:
        raise ValueError("need k < j")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if freeze is None:
        path = backward_euler(field, z.ravel(), j)
        disp = (path[k].reshape(z.shape)) - x
        return sums(k, j, disp)
    f_idx, f_pt = freeze
    path = backward_euler(field, np.atleast_1d(float(f_pt)), f_idx)
    shift = path[j, 0] - path[k, 0]
    return sums(k, j, z - x - shift)


# ---------------------------------------------------------------------------
# discrete kernels


def _frozen_drift(field, l, theta_next):
    """Drift of the frozen chain over step l: F_N(t_{l+1}, theta_{l+1}) theta_{l+1}."""
    return field.cutoff_drift_at_index(l + 1, theta_next)


def _outer_args(field, l, m, w, z, path=None):
    w = np.atleast_1d(np.asarray(w, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if path is None:
        path = backward_euler(field, z, m)
    return w, z, path


def discrete_kernel_calK(l: int, m: int, w, z, field: DriftField, sums: InnovationSums,
                         path=None):
    """(calL_N - calL~_N) p~_N(t_{l+1}, t_m, ., z) at w, as a (len(w), len(z)) matrix.

    Uses the closed identity
    [P_{l,m}(th_{l+1} - w - F_N(t_l,w) w g) - P_{l,m}(th_l - w)] / g, g = gamma_{l+1}.
    """
    if not 0 <= l < m:
        raise ValueError("need l < m")
    w, z, path = _outer_args(field, l, m, w, z, path)
    g = field.grid.gammas[l + 1]
    moved = w + field.cutoff_drift_at_index(l, w) * g
    a = path[l + 1][None, :] - moved[:, None]
    b = path[l][None, :] - w[:, None]
    return (sums(l, m, a) - sums(l, m, b)) / g


def discrete_kernel_calK_quadrature(l: int, m: int, w: float, z: float, field: DriftField,
                                    sums: InnovationSums, innovations: InnovationSpec,
                                    n_nodes: int = 160, width: float = 14.0):
    """Same kernel by direct quadrature of the one-step generators (pointwise)."""
    if not 0 <= l < m:
        raise ValueError("need l < m")
    grid = field.grid
    g = grid.gammas[l + 1]
    sigma = field.model.sigma
    path = backward_euler(field, np.array([float(z)]), m)[:, 0]
    mean_true = w + float(field.cutoff_drift_at_index(l, np.array([w]))[0]) * g
    mean_frozen = w + float(_frozen_drift(field, l, np.array([path[l + 1]]))[0]) * g
    rg = math.sqrt(g)

    def step(u, mean):
        return innovations.xi_density((u - mean) / rg, sigma) / rg

    if l + 1 == m:
        return float(step(z, mean_true) - step(z, mean_frozen)) / g
    nodes, weights = _gauss_legendre(n_nodes)
    lo = min(mean_true, mean_frozen) - width * sigma * rg
    hi = max(mean_true, mean_frozen) + width * sigma * rg
    u = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    wts = 0.5 * (hi - lo) * weights
    p_next = sums(l + 1, m, path[l + 1] - u)
    p_here = sums(l + 1, m, path[l + 1] - w)
    diff = step(u, mean_true) - step(u, mean_frozen)
    return float(np.dot(wts, (p_next - p_here) * diff)) / g


def discrete_kernel_K(l: int, m: int, w, z, field: DriftField, sums: InnovationSums, path=None):
    """(F_N(t_l,w) w - F_N(t_l,th_l) th_l) d/dw p~_N(t_l, t_m, w, z)."""
    if not 0 <= l < m:
        raise ValueError("need l < m")
    w, z, path = _outer_args(field, l, m, w, z, path)
    th = path[l]
    gap = (field.cutoff_drift_at_index(l, w)[:, None] - field.cutoff_drift_at_index(l, th)[None, :])
    return gap * (-sums(l, m, th[None, :] - w[:, None], deriv=1))


def discrete_kernel_M(l: int, m: int, w, z, field: DriftField, sums: InnovationSums, path=None):
    """M_N = calK_N - K_N."""
    w, z, path = _outer_args(field, l, m, w, z, path)
    return (discrete_kernel_calK(l, m, w, z, field, sums, path)
            - discrete_kernel_K(l, m, w, z, field, sums, path))


def kernel_field(kind: str, flows: FlowBundle | None = None, field: DriftField | None = None,
                 sums: InnovationSums | None = None) -> KernelField:
    """Bind one of the kernels to its model data.

    H and H_N take (t, T, x, y); the discrete kinds take grid indices (l, m, w, z).
    """
    table = {
        "H": lambda t, T, x, y: kernel_H(t, T, x, y, flows),
        "H_N": lambda t, T, x, y: kernel_H_N(t, T, x, y, field),
        "calK_N": lambda l, m, w, z: discrete_kernel_calK(l, m, w, z, field, sums),
        "K_N": lambda l, m, w, z: discrete_kernel_K(l, m, w, z, field, sums),
        "M_N": lambda l, m, w, z: discrete_kernel_M(l, m, w, z, field, sums),
    }
    if kind not in table:
        raise ValueError(f"unknown kernel kind {kind!r}")
    needs = {"H": flows}.get(kind, field)
    if needs is None or (kind not in ("H", "H_N") and sums is None):
        raise ValueError(f"kernel {kind} needs its model data")
    return KernelField(kind, table[kind])


def frozen_chain_derivative_fd(l: int, m: int, w, z: float, field: DriftField,
                               sums: InnovationSums, h: float = 1e-5):
    """d/dw p~_N(t_l, t_m, w, z) by central differences of the interpolated density."""
    th = backward_euler(field, np.array([float(z)]), m)[l, 0]
    w = np.asarray(w, dtype=float)
    return (sums(l, m, th - (w + h)) - sums(l, m, th - (w - h))) / (2 * h)


# ---------------------------------------------------------------------------
# discrete convolution and series


def conv_discrete(f, g, i: int, j: int, x: float, y: float, grid: TimeGrid, sigma: float,
                  n_space: int = 64, L: float = 8.0, centre_f=None, centre_g=None):
    """sum_{k=i}^{j-1} gamma_{k+1} int f(i,k,x,z) g(k,j,z,y) dz, with f(i,i,x,.) = delta_x.

    g=None stands for the identity kernel and returns f(i, j, x, y).
    """
    if not i < j:
        raise ValueError("need i < j")
    if g is None:
        return float(np.asarray(f(i, j, x, np.array([y])))[0])
    pts = grid.points
    centre_f = centre_f or (lambda k: x)
    centre_g = centre_g or (lambda k: y)
    vs, ws = _gauss_legendre(n_space)
    total = grid.gammas[i + 1] * float(np.asarray(g(i, j, np.array([x]), y))[0])
    for k in range(i + 1, j):
        centre, sd = _bridge_window(pts[k], pts[i], pts[j], centre_f(k), centre_g(k), sigma)
        z = centre + L * sd * vs
        vals = np.asarray(f(i, k, x, z)) * np.asarray(g(k, j, z, y))
        total += grid.gammas[k + 1] * L * sd * float(np.dot(ws, vals))
    return total


def _discrete_setup(field, i0, x_nodes, y_nodes, resolution, span):
    grid = field.grid
    sigma = field.model.sigma
    M = grid.m_of_n
    g_min = float(np.min(grid.gammas[i0 + 1: M + 1]))
    tau = grid.T_N - grid.points[i0]
    lo = min(x_nodes.min(), y_nodes.min(), span[0]) - 8 * sigma * math.sqrt(tau)
    hi = max(x_nodes.max(), y_nodes.max(), span[1]) + 8 * sigma * math.sqrt(tau)
    return _spatial_grid(lo, hi, sigma * math.sqrt(g_min) / resolution)


def _discrete_kernel_parts(field, sums, i0, kernel, x_nodes):
    paths = {}

    def path_to(j, zs):
        key = (j, zs.size)
        if key not in paths:
            paths.clear()
            paths[key] = backward_euler(field, zs, i0 + j)
        return paths[key]

    def base_fn(j, zs):
        th = path_to(j, zs)[i0]
        return sums(i0, i0 + j, th[None, :] - x_nodes[:, None])

    evaluators = {
        "calK": discrete_kernel_calK,
        "K+M": lambda *a: discrete_kernel_K(*a) + discrete_kernel_M(*a),
        "K": discrete_kernel_K,
    }
    ev = evaluators[kernel]

    def kernel_fn(j, zs):
        path = path_to(j, zs)
        return lambda k, ws: ev(i0 + k, i0 + j, ws, zs, field, sums, path)

    return base_fn, kernel_fn


def _grid_continuous_parts(field, i0, x_nodes):
    """q~_N and H_N sampled at grid times t_{i0}, t_{i0+1}, ..."""
    grid = field.grid
    taus = grid.points[i0: grid.m_of_n + 1]
    base_fn, kernel_fn, _ = _cutoff_parts(field, taus)
    return (lambda j, zs: base_fn(j, zs, x_nodes)), kernel_fn


def series_discrete(field: DriftField, innovations: InnovationSpec, i0: int, x_nodes, y_nodes,
                    r_max: int, kernel: str = "calK", base: str = "p_tilde",
                    sums: InnovationSums | None = None, resolution: float = 1.5):
    """Partial sums of sum_r base (x)_N kernel^(r) from t_{i0} to T_N on an (x, y) grid.

    kernel: 'calK' (exact chain expansion), 'K+M' (same kernel assembled from
    its two pieces) or 'H_N' (cut-off diffusion kernel at grid times, paired
    with base 'q_tilde').
    """
    grid = field.grid
    M = grid.m_of_n
    if r_max < 0:
        raise ValueError("r_max must be nonnegative")
    if not 0 <= i0 < M:
        raise ValueError("need 0 <= i0 < M(N)")
    if r_max > M - i0:
        raise ValueError("r_max cannot exceed the number of remaining steps")
    x_nodes = np.atleast_1d(np.asarray(x_nodes, dtype=float))
    y_nodes = np.atleast_1d(np.asarray(y_nodes, dtype=float))
    sums = sums or InnovationSums(grid, innovations, field.model.sigma)
    span_y = backward_euler(field, y_nodes, M)[i0]
    z_grid, h = _discrete_setup(field, i0, x_nodes, y_nodes, resolution,
                                (float(span_y.min()), float(span_y.max())))
    n = M - i0
    if kernel == "H_N":
        base_fn, kernel_fn = _grid_continuous_parts(field, i0, x_nodes)
        if base != "q_tilde":
            raise ValueError("the H_N kernel pairs with the q_tilde base")
    else:
        base_fn, kernel_fn = _discrete_kernel_parts(field, sums, i0, kernel, x_nodes)
        if base == "q_tilde":
            base_fn = _grid_continuous_parts(field, i0, x_nodes)[0]
        elif base != "p_tilde":
            raise ValueError(f"unknown base {base}")
    weight = lambda k, j: grid.gammas[i0 + k + 1]
    mats = _run_series(n, base_fn, kernel_fn, weight, None, x_nodes, z_grid, y_nodes, h, r_max)
    meta = {"t": float(grid.points[i0]), "T": grid.T_N, "method": f"series_discrete:{base}:{kernel}",
            "model": field.model.name, "n_space": int(z_grid.size)}
    terms = [DensityGrid(x_nodes, y_nodes, m_, meta=dict(meta, r=r)) for r, m_ in enumerate(mats)]
    return SeriesAccumulator(terms=terms, tau=grid.T_N - grid.points[i0], meta=meta)


# ---------------------------------------------------------------------------
# step-by-step comparison


@dataclass
class FlowchartReport:
    t: float
    T: float
    gamma0: float
    a_N: float
    singular: bool
    values: dict = dc_field(default_factory=dict)
    gaps: dict = dc_field(default_factory=dict)
    truncation_bound: float = math.nan
    scaled: dict = dc_field(default_factory=dict)

    def to_dict(self):
        return {
            "t": self.t, "T": self.T, "gamma0": self.gamma0, "a_N": self.a_N,
            "singular": self.singular,
            "values": {k: np.asarray(v).tolist() for k, v in self.values.items()},
            "gaps": dict(self.gaps), "scaled_constants": dict(self.scaled),
            "truncation_bound": self.truncation_bound,
        }


STAGE_RATES = {
    "time_discretisation": "sqrt_gamma",
    "truncation": "beta_tail",
    "kernel_swap": "sqrt_gamma",
    "frozen_swap": "a_sqrt_gamma",
    "kernel_identity": "exact",
}


def flowchart_pipeline(field: DriftField, innovations: InnovationSpec, i0: int, x, y,
                       r_max: int = 3, n_time: int = 32, min_steps: int = 2) -> FlowchartReport:
    """The five substitutions that carry the cut-off diffusion series to the chain series.

    q_N (continuous series, q~_N and H_N) -> same with grid-time sums -> one more
    order -> kernel H_N replaced by K_N + M_N -> base q~_N replaced by p~_N ->
    K_N + M_N replaced by calK_N. Gaps are sup norms over the (x, y) points.
    """
    grid = field.grid
    t, T = float(grid.points[i0]), grid.T_N
    rep = FlowchartReport(t=t, T=T, gamma0=grid.gamma0, a_N=field.a_N,
                          singular=grid.m_of_n - i0 < max(min_steps, r_max + 1))
    if rep.singular:
        return rep
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    sums = InnovationSums(grid, innovations, field.model.sigma)
    cont = series_continuous("q_tilde", "H_N", r_max, x, y, t, T, field=field, n_time=n_time,
                             estimate_error=False)
    disc = series_discrete(field, innovations, i0, x, y, r_max + 1, kernel="H_N", base="q_tilde",
                           sums=sums)
    swap = series_discrete(field, innovations, i0, x, y, r_max, kernel="K+M", base="q_tilde",
                           sums=sums)
    frozen = series_discrete(field, innovations, i0, x, y, r_max, kernel="K+M", sums=sums)
    chain = series_discrete(field, innovations, i0, x, y, r_max, kernel="calK", sums=sums)
    ps = disc.partial_sums
    vals = {
        "continuous": cont.total.values,
        "time_discretisation": ps[r_max].values,
        "truncation": ps[r_max + 1].values,
        "kernel_swap": swap.total.values,
        "frozen_swap": frozen.total.values,
        "kernel_identity": chain.total.values,
    }
    order = list(vals)
    rep.values = vals
    for prev, cur in zip(order, order[1:]):
        rep.gaps[cur] = float(np.max(np.abs(vals[cur] - vals[prev])))
    rep.truncation_bound = SeriesAccumulator(terms=disc.terms[: r_max + 1],
                                             tau=T - t).truncation_estimate()
    scale = {"sqrt_gamma": math.sqrt(grid.gamma0),
             "a_sqrt_gamma": field.a_N * math.sqrt(grid.gamma0)}
    for stage, rate in STAGE_RATES.items():
        if rate in scale:
            rep.scaled[stage] = rep.gaps[stage] / scale[rate]
    return rep
