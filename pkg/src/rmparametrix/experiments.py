"""Measurement drivers shared by the command line and the acceptance suite.

Each driver builds its grids from a Setup, runs the relevant evaluators and
returns plain numbers (rows of per-N measurements, fitted rates, gaps in units
of Monte Carlo standard error). Nothing here decides pass or fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .chains import coupling_experiment, epsilon_n, simulate_V, sv_diagnostics
from .diffusions import (density_p, frozen_density_p_tilde, g_sigma, sample_limit_sde,
                         simulate_coupled_chain_and_diffusion, simulate_coupled_limit_and_cutoff,
                         simulate_cutoff_sde)
from .estimate import (DensityGrid, EstimateError, TailWeight, fit_rate, kde, kde_shifted,
                       silverman_bandwidth, weighted_gap)
from .flows import DriftField, backward_euler, backward_flow_limit, cutoff_flow, solve_theta_bar
from .model import (SCHEDULES, CutoffRule, InnovationSpec, ModelSpec, TimeGrid, build_grid,
                    grid_alpha)
from .parametrix import (InnovationSums, cutoff_drift, discrete_kernel_calK,
                         discrete_kernel_calK_quadrature, discrete_kernel_K, edgeworth_gap,
                         flowchart_pipeline, frozen_chain_derivative_fd, generator_gap_fd,
                         kernel_H, kernel_H_N, limit_flow, series_continuous, series_discrete)
from .sampling import seed_sequence


@dataclass(frozen=True)
class Setup:
    """Model, innovation law, step family and cut-off rule of one experiment."""

    model: ModelSpec
    innovations: InnovationSpec
    family: str = "harmonic"
    horizon: float = 1.0
    cutoff: CutoffRule = CutoffRule()

    def schedule(self, N: int, horizon: float | None = None):
        return SCHEDULES[self.family](int(N), float(horizon or self.horizon))

    def grid(self, N: int, horizon: float | None = None) -> TimeGrid:
        return build_grid(self.schedule(N, horizon))

    def field(self, N: int, horizon: float | None = None) -> DriftField:
        return DriftField.build(self.model, self.grid(N, horizon), cutoff=self.cutoff)


@dataclass
class RateMeasurement:
    """Per-N rows plus the log-log fit of ordinate on abscissa (None if it was refused)."""

    abscissa: list
    ordinate: list
    rows: list
    fit: object = None
    fit_error: str | None = None
    extra: dict = dc_field(default_factory=dict)

    def to_dict(self):
        out = {"abscissa": self.abscissa, "ordinate": self.ordinate, "rows": self.rows,
               "fit": None, "fit_error": self.fit_error}
        if self.fit is not None:
            out["fit"] = {"slope": self.fit.slope, "intercept": self.fit.intercept,
                          "r2": self.fit.r2}
        out.update(self.extra)
        return out


def _measure(abscissa, ordinate, rows, **extra) -> RateMeasurement:
    out = RateMeasurement(list(map(float, abscissa)), list(map(float, ordinate)), rows,
                          extra=extra)
    try:
        out.fit = fit_rate(out.abscissa, out.ordinate)
    except EstimateError as exc:
        out.fit_error = str(exc)
    return out


# ---------------------------------------------------------------------------
# deterministic checks


def alpha_deviation(family: str, shifts, horizon: float) -> list:
    """max_k |alpha_k - 1/2| over k <= M(N), per shift."""
    rows = []
    for N in shifts:
        grid = build_grid(SCHEDULES[family](int(N), horizon))
        dev = np.abs(grid_alpha(grid) - 0.5)
        rows.append({"N": int(N), "M": grid.m_of_n, "max_dev": float(dev.max()),
                     "alpha_min": float(np.min(grid_alpha(grid))),
                     "alpha_max": float(np.max(grid_alpha(grid)))})
    return rows


def flow_distance(setup: Setup, shifts, y_nodes, n_stops: int = 21,
                  substeps: int = 1) -> RateMeasurement:
    """max over t and y of |theta_{t,T}(y) - theta^N_{t,T}(y)| / |y| against a_N sqrt(gamma_0)."""
    y = np.asarray(y_nodes, dtype=float)
    y = y[y != 0]
    rows, xs, ys = [], [], []
    for N in shifts:
        field = setup.field(N)
        T = field.grid.T_N
        stops = np.linspace(0.0, T, n_stops)
        lim = backward_flow_limit(field.flows, T, y, stops)
        cut = cutoff_flow(field, y, T, stops, substeps=substeps)
        gap = float(np.max(np.abs(lim - cut) / np.abs(y)[None, :]))
        scale = field.a_N * math.sqrt(field.grid.gamma0)
        rows.append({"N": int(N), "gamma0": field.grid.gamma0, "a_N": field.a_N,
                     "a_sqrt_gamma0": scale, "max_rel_gap": gap})
        xs.append(scale)
        ys.append(gap)
    return _measure(xs, ys, rows)


def sv_experiment(setup: Setup, shifts, x_nodes, n_times: int = 11,
                  epsilon: float | None = None) -> list:
    """Per N: max |a_gamma - sigma^2|, max |b_gamma - A(t) x| and max Delta over (t, x)."""
    sigma = setup.model.sigma
    x_nodes = np.asarray(x_nodes, dtype=float)
    out = []
    for N in shifts:
        field = setup.field(N)
        grid = field.grid
        eps = epsilon_n(grid) if epsilon is None else float(epsilon)
        times = np.linspace(0.0, grid.T_N, n_times, endpoint=False)
        detail = []
        for t in times:
            A = float(field.flows.drift_coefficient(t))
            for x in x_nodes:
                a, b, d = sv_diagnostics(t, x, field, setup.innovations, eps)
                detail.append({"N": int(N), "t": float(t), "x": float(x), "a_gamma": a,
                               "b_gamma": b, "delta_gamma": d, "a_gap": abs(a - sigma**2),
                               "b_gap": abs(b - A * x)})
        out.append({"N": int(N), "epsilon": eps,
                    "max_a_gap": max(r["a_gap"] for r in detail),
                    "max_b_gap": max(r["b_gap"] for r in detail),
                    "max_delta": max(r["delta_gamma"] for r in detail),
                    "detail": detail})
    return out


def coupling(setup: Setup, shifts, n_paths: int, seed, C: float | None = None,
             threads: int = 1):
    return coupling_experiment(setup.model, setup.innovations, setup.schedule, shifts,
                               setup.cutoff, n_paths, seed, C=C, threads=threads)


# ---------------------------------------------------------------------------
# density comparisons


@dataclass
class GridComparison:
    """Reference grid against a Monte Carlo KDE on shared nodes."""

    reference: DensityGrid
    estimate: DensityGrid
    slack: float = 0.0
    extra: dict = dc_field(default_factory=dict)

    @property
    def standardized(self) -> np.ndarray:
        se = np.sqrt(self.reference.stderr**2 + self.estimate.stderr**2)
        return (self.estimate.values - self.reference.values) / se

    @property
    def sup_ratio(self) -> float:
        """sup |gap| / stderr, with no allowance."""
        return float(np.max(np.abs(self.standardized)))

    @property
    def rms_ratio(self) -> float:
        return float(np.sqrt(np.mean(self.standardized**2)))

    @property
    def excess(self) -> float:
        """sup (|gap| - 3 stderr); the tolerance protocol needs this below `slack`."""
        se = np.sqrt(self.reference.stderr**2 + self.estimate.stderr**2)
        return float(np.max(np.abs(self.estimate.values - self.reference.values) - 3.0 * se))

    def summary(self):
        return {"sup_ratio": self.sup_ratio, "rms_ratio": self.rms_ratio, "excess": self.excess,
                "slack": self.slack, **self.extra}


def density_anchor(setup: Setup, x_nodes, y_nodes, n_paths: int, seed, T: float | None = None,
                   threads: int = 1) -> GridComparison:
    """KDE of exact limit-SDE draws against the closed-form transition density.

    The SDE is linear, so draws from x = 0 shifted by Phi(T, 0) x give the law
    from any x; every slice reuses the same draws.
    """
    T = float(T or setup.horizon)
    flows = solve_theta_bar(setup.model, T)
    x_nodes = np.asarray(x_nodes, dtype=float)
    y_nodes = np.asarray(y_nodes, dtype=float)
    base = sample_limit_sde(0.0, T, 0.0, n_paths, seed, flows, threads)
    shifts = flows.resolvent(T, 0.0) * x_nodes
    est = kde_shifted(base, shifts, y_nodes, x_nodes, meta={"t": 0.0, "T": T, "method": "kde"})
    exact = density_p(0.0, T, x_nodes[:, None], y_nodes[None, :], flows)
    ref = DensityGrid(x_nodes, y_nodes, exact, meta={"t": 0.0, "T": T, "method": "closed"})
    return GridComparison(ref, est)


def _slice_kde(sampler, x_nodes, y_nodes, meta):
    rows = [sampler(float(x)) for x in x_nodes]
    return kde(np.array(rows), grid=(x_nodes, y_nodes), meta=meta)


def continuous_validity(setup: Setup, N: int, horizon: float, x_nodes, y_nodes, n_paths: int,
                        seed, r_max: int = 3, n_time: int = 32, substeps: int = 4,
                        threads: int = 1):
    """Cut-off diffusion series (q~_N base, H_N kernel) against a KDE of X^N draws."""
    field = setup.field(N, horizon)
    T = field.grid.T_N
    x_nodes = np.asarray(x_nodes, dtype=float)
    y_nodes = np.asarray(y_nodes, dtype=float)
    acc = series_continuous("q_tilde", "H_N", r_max, x_nodes, y_nodes, 0.0, T, field=field,
                            n_time=n_time)
    est = _slice_kde(lambda x: simulate_cutoff_sde(field, 0.0, x, n_paths, seed, substeps,
                                                   threads),
                     x_nodes, y_nodes, {"t": 0.0, "T": T, "method": "kde"})
    slack = acc.truncation_estimate() + acc.quadrature_error
    cmp = GridComparison(acc.total, est, slack,
                         {"term_norms": acc.term_norms, "ratio_constant": acc.ratio_constant(),
                          "truncation_estimate": acc.truncation_estimate(),
                          "quadrature_error": acc.quadrature_error, "tau": acc.tau})
    return cmp, acc


def discrete_validity(setup: Setup, N: int, horizon: float, x_nodes, y_nodes, n_paths: int,
                      seed, r_max: int = 3, threads: int = 1):
    """Chain series (p~_N base, calK_N kernel) against a KDE of V draws."""
    field = setup.field(N, horizon)
    T = field.grid.T_N
    x_nodes = np.asarray(x_nodes, dtype=float)
    y_nodes = np.asarray(y_nodes, dtype=float)
    acc = series_discrete(field, setup.innovations, 0, x_nodes, y_nodes, r_max)
    est = _slice_kde(lambda x: simulate_V(field, setup.innovations, x, n_paths, seed,
                                          threads=threads).paths[:, 0],
                     x_nodes, y_nodes, {"t": 0.0, "T": T, "method": "kde"})
    slack = acc.truncation_estimate()
    cmp = GridComparison(acc.total, est, slack,
                         {"term_norms": acc.term_norms, "ratio_constant": acc.ratio_constant(),
                          "truncation_estimate": slack, "tau": acc.tau})
    return cmp, acc


def chain_vs_diffusion(setup: Setup, shifts, horizon: float, x_nodes, y_nodes, n_paths: int,
                       seed, substeps: int = 4, threads: int = 1) -> RateMeasurement:
    """Tail-weighted sup |p_N - q_N| from coupled (V, X^N) draws, against sqrt(gamma_0).

    p_N and q_N are KDEs of the chain and of the cut-off diffusion started at
    each x node; the two share Gaussian increments (matched seeds). The weight
    is centred on the backward Euler flow of y.
    """
    x_nodes = np.asarray(x_nodes, dtype=float)
    y_nodes = np.asarray(y_nodes, dtype=float)
    S = setup.innovations.smooth_order
    rows, xs, ys = [], [], []
    for i, N in enumerate(shifts):
        field = setup.field(N, horizon)
        grid = field.grid
        pairs = [simulate_coupled_chain_and_diffusion(field, setup.innovations, 0, float(x),
                                                      n_paths, seed_sequence(seed, i), substeps,
                                                      threads)
                 for x in x_nodes]
        meta = {"t": 0.0, "T": grid.T_N, "method": "kde"}
        p_N = kde(np.array([p[0] for p in pairs]), grid=(x_nodes, y_nodes), meta=meta)
        q_N = kde(np.array([p[1] for p in pairs]), grid=(x_nodes, y_nodes), meta=meta)
        flow = backward_euler(field, y_nodes)[0]
        weight = TailWeight(S, grid.T_N, flow)
        gap = weighted_gap(p_N, q_N, weight)
        noise = float(np.max(np.sqrt(p_N.stderr**2 + q_N.stderr**2)
                             / weight(x_nodes, y_nodes)))
        rows.append({"N": int(N), "gamma0": grid.gamma0, "sqrt_gamma0": math.sqrt(grid.gamma0),
                     "M": grid.m_of_n, "weighted_gap": gap, "weighted_noise": noise})
        xs.append(math.sqrt(grid.gamma0))
        ys.append(gap)
    return _measure(xs, ys, rows)


def _paired_kde_gap(a, b, points):
    """KDE(a) - KDE(b) at points with a shared bandwidth, and the paired standard error."""
    h = silverman_bandwidth(a)
    out, se = [], []
    for y in np.atleast_1d(points):
        ka = np.exp(-0.5 * ((y - a) / h) ** 2)
        kb = np.exp(-0.5 * ((y - b) / h) ** 2)
        d = (ka - kb) / (h * math.sqrt(2 * math.pi))
        out.append(float(np.mean(d)))
        se.append(float(np.std(d) / math.sqrt(d.size)))
    return np.array(out), np.array(se), h


def limit_vs_cutoff(setup: Setup, shifts, horizon: float, y_probes, n_paths: int, seed,
                    substeps: int = 4, threads: int = 1) -> RateMeasurement:
    """|p - q_N| at flow-centred probes (x = theta_{0,T}(y), y) against a_N sqrt(gamma_0).

    Both densities come from Euler-Maruyama draws on shared Brownian increments,
    so the time-discretisation error largely cancels in the difference.
    """
    y_probes = np.asarray(y_probes, dtype=float)
    rows, xs, ys = [], [], []
    for i, N in enumerate(shifts):
        field = setup.field(N, horizon)
        T = field.grid.T_N
        worst, worst_se = 0.0, 0.0
        for j, y in enumerate(y_probes):
            x = float(limit_flow(field.flows, 0.0, T, y))
            lim, cut = simulate_coupled_limit_and_cutoff(field, 0.0, x, n_paths,
                                                         seed_sequence(seed, i, j), substeps,
                                                         threads)
            d, se, _ = _paired_kde_gap(lim, cut, y)
            if abs(d[0]) >= worst:
                worst, worst_se = abs(float(d[0])), float(se[0])
        scale = field.a_N * math.sqrt(field.grid.gamma0)
        rows.append({"N": int(N), "gamma0": field.grid.gamma0, "a_N": field.a_N,
                     "a_sqrt_gamma0": scale, "gap": worst, "stderr": worst_se})
        xs.append(scale)
        ys.append(worst)
    return _measure(xs, ys, rows)


# ---------------------------------------------------------------------------
# spectral and kernel checks


def edgeworth(innovations: InnovationSpec, family: str, shifts, horizon: float,
              sigma: float = 1.0) -> RateMeasurement:
    """Weighted Edgeworth gap of the whole grid sum against sqrt(gamma_0 / tau)."""
    rows, xs, ys = [], [], []
    for N in shifts:
        grid = build_grid(SCHEDULES[family](int(N), horizon))
        gap, tau = edgeworth_gap(grid, 0, grid.m_of_n, innovations, sigma=sigma)
        ab = math.sqrt(grid.gamma0 / tau)
        rows.append({"N": int(N), "M": grid.m_of_n, "tau": tau, "abscissa": ab, "gap": gap})
        xs.append(ab)
        ys.append(gap)
    if min(ys) <= 0:
        return RateMeasurement(xs, ys, rows, fit_error="zero gap")
    return _measure(xs, ys, rows)


def _rel(a, b):
    a, b = float(a), float(b)
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def kernel_identities(setup: Setup, N: int, horizon: float, n_probes: int, seed,
                      delta: float = 0.0) -> dict:
    """Relative errors of H, H_N, calK_N and K_N against generator applications.

    Continuous probes draw t in [0, T - delta), y in [-3, 3] and x within three
    frozen standard deviations of the relevant flow, so the densities are not
    underflowing. Discrete probes draw (l, w, z) the same way on the grid.
    """
    rng = np.random.Generator(np.random.Philox(seed_sequence(seed)))
    field = setup.field(N, horizon)
    grid = field.grid
    flows = field.flows
    sigma = setup.model.sigma
    T = grid.T_N
    M = grid.m_of_n
    sums = InnovationSums(grid, setup.innovations, sigma)
    errs = {"H": [], "H_N": [], "calK_N": [], "K_N": []}
    on_flow = {"H": 0.0, "H_N": 0.0}
    for _ in range(n_probes):
        t = float(rng.uniform(0.0, max(T - delta, 0.0) * (1 - 1e-9)))
        y = float(rng.uniform(-3.0, 3.0))
        tau = T - t
        th = float(limit_flow(flows, t, T, y))
        x = th + sigma * math.sqrt(tau) * float(rng.uniform(-3.0, 3.0))
        A = float(flows.drift_coefficient(t))
        phi = lambda v: frozen_density_p_tilde(t, T, v, y, flows)
        fd = generator_gap_fd(phi, lambda v: A * v, A * th, sigma, np.array([x]))[0]
        errs["H"].append(_rel(kernel_H(t, T, x, y, flows), fd))
        on_flow["H"] = max(on_flow["H"], abs(float(kernel_H(t, T, th, y, flows))))

        thN = float(cutoff_flow(field, np.array([y]), T, [t])[0, 0])
        xN = thN + sigma * math.sqrt(tau) * float(rng.uniform(-3.0, 3.0))
        phiN = lambda v: g_sigma(tau, thN - v, sigma)
        fdN = generator_gap_fd(phiN, lambda v: cutoff_drift(field, t, v),
                               float(cutoff_drift(field, t, thN)), sigma, np.array([xN]))[0]
        errs["H_N"].append(_rel(kernel_H_N(t, T, xN, y, field, theta=thN), fdN))
        on_flow["H_N"] = max(on_flow["H_N"],
                             abs(float(kernel_H_N(t, T, thN, y, field, theta=thN))))

        m = M
        l = int(rng.integers(0, m - 1))
        z = float(rng.uniform(-3.0, 3.0))
        path = backward_euler(field, np.array([z]), m)[:, 0]
        sd = math.sqrt(sums.variance(l, m))
        w = path[l] + sd * float(rng.uniform(-3.0, 3.0))
        closed = discrete_kernel_calK(l, m, [w], [z], field, sums)[0, 0]
        quad = discrete_kernel_calK_quadrature(l, m, w, z, field, sums, setup.innovations)
        errs["calK_N"].append(_rel(closed, quad))
        K = discrete_kernel_K(l, m, [w], [z], field, sums)[0, 0]
        gap = float(field.cutoff_drift_at_index(l, np.array([w]))[0]
                    - field.cutoff_drift_at_index(l, np.array([path[l]]))[0])
        K_fd = gap * frozen_chain_derivative_fd(l, m, w, z, field, sums)
        errs["K_N"].append(_rel(K, K_fd))
    return {"max_rel_error": {k: float(max(v)) for k, v in errs.items()},
            "on_flow": on_flow, "n_probes": int(n_probes), "N": int(N), "M": M}


def flowchart(setup: Setup, shifts, horizon: float, x, y, r_max: int = 3,
              n_time: int = 32) -> list:
    """Flowchart stage gaps per N, with each stage's log-log slope against its rate."""
    reports = [flowchart_pipeline(setup.field(N, horizon), setup.innovations, 0, x, y, r_max,
                                  n_time) for N in shifts]
    return reports
