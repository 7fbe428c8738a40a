"""Command-line experiment runner.

Every subcommand reads an INI-style config, writes its CSV/JSON artifacts to
the output directory together with ``manifest.json``, and on failure prints a
JSON error object and exits with status 1.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass

import numpy as np
import scipy

from . import __version__, kernels
from .diffusions import density_p, simulate_cutoff_sde
from .estimate import kde, write_json
from .experiments import (Setup, chain_vs_diffusion, coupling, limit_vs_cutoff, sv_experiment)
from .flows import backward_euler, backward_flow_limit, cutoff_flow
from .model import (INNOVATIONS, SCHEDULES, CutoffRule, linear_model, sine_model,
                    validate_assumptions)
from .chains import simulate_V
from .parametrix import flowchart_pipeline, series_continuous, series_discrete
from .sampling import seed_sequence

SCHEMA_VERSION = 1
SUBCOMMANDS = ("validate", "simulate", "flows", "couple", "svdiag", "density", "parametrix",
               "rate")


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _nodes(text):
    lo, hi, n = _floats(text)
    if not (hi > lo and n >= 1 and n == int(n)):
        raise ConfigError(f"bad node spec {text!r}: want lo, hi, count")
    return (lo, hi, int(n))


@dataclass(frozen=True)
class ExperimentConfig:
    model_family: str
    slope: float
    amplitude: float
    sigma: float
    theta0: float
    innovations: str
    schedule_family: str
    horizon: float
    shifts: tuple
    cutoff_exponent: float
    cutoff_scale: float
    delta: float
    kx: tuple
    ky: tuple
    seed: int
    paths: int
    coupling_paths: int
    substeps: int
    x0: float
    density_shift: int
    density_horizon: float
    r_max: int
    n_time: int
    parametrix_shifts: tuple
    probe_x: tuple
    probe_y: tuple
    sv_radius: float
    sv_nx: int
    sv_times: int
    flows_y: float
    rate_shifts: tuple
    rate_horizon: float
    rate_kx: tuple
    rate_y_probes: tuple
    coupling_C: float | None = None

    def __post_init__(self):
        for name in ("shifts", "parametrix_shifts", "rate_shifts"):
            v = getattr(self, name)
            if not v or any(b <= a for a, b in zip(v, v[1:])):
                raise ConfigError(f"{name} must be a nonempty ascending list")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not self.delta < self.horizon:
            raise ConfigError("delta must be smaller than the horizon")
        if self.model_family not in ("linear", "sine"):
            raise ConfigError(f"unknown model family {self.model_family!r}")
        if self.innovations not in INNOVATIONS:
            raise ConfigError(f"unknown innovations {self.innovations!r}")
        if self.schedule_family not in SCHEDULES:
            raise ConfigError(f"unknown schedule family {self.schedule_family!r}")
        if self.paths < 1000 or self.coupling_paths < 100:
            raise ConfigError("path counts too small for the estimators")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.read(path)
        try:
            return cls._from_parser(cp)
        except (configparser.Error, KeyError) as exc:
            raise ConfigError(f"missing config entry: {exc}") from exc

    @classmethod
    def _from_parser(cls, cp) -> "ExperimentConfig":
        g = lambda s, k: cp.get(s, k)
        f = lambda s, k: cp.getfloat(s, k)
        i = lambda s, k: cp.getint(s, k)
        C = cp.get("simulation", "coupling_C", fallback="").strip()
        return cls(
            model_family=g("model", "family"), slope=f("model", "slope"),
            amplitude=f("model", "amplitude"), sigma=f("model", "sigma"),
            theta0=f("model", "theta0"), innovations=g("innovations", "name"),
            schedule_family=g("schedule", "family"), horizon=f("schedule", "horizon"),
            shifts=_ints(g("schedule", "shifts")), cutoff_exponent=f("cutoff", "exponent"),
            cutoff_scale=f("cutoff", "scale"), delta=f("evaluation", "delta"),
            kx=_nodes(g("evaluation", "kx")), ky=_nodes(g("evaluation", "ky")),
            seed=i("simulation", "seed"), paths=i("simulation", "paths"),
            coupling_paths=i("simulation", "coupling_paths"),
            substeps=i("simulation", "substeps"), x0=f("simulation", "x0"),
            density_shift=i("density", "shift"), density_horizon=f("density", "horizon"),
            r_max=i("density", "r_max"), n_time=i("density", "n_time"),
            parametrix_shifts=_ints(g("parametrix", "shifts")),
            probe_x=_floats(g("parametrix", "probe_x")),
            probe_y=_floats(g("parametrix", "probe_y")),
            sv_radius=f("svdiag", "radius"), sv_nx=i("svdiag", "n_x"),
            sv_times=i("svdiag", "n_times"), flows_y=f("flows", "y"),
            rate_shifts=_ints(g("rate", "shifts")), rate_horizon=f("rate", "horizon"),
            rate_kx=_nodes(g("rate", "kx")), rate_y_probes=_floats(g("rate", "y_probes")),
            coupling_C=float(C) if C else None,
        )

    def canonical(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def setup(self) -> Setup:
        if self.model_family == "linear":
            model = linear_model(self.sigma, self.theta0, self.slope)
        else:
            model = sine_model(self.slope, self.amplitude, self.sigma, self.theta0)
        return Setup(model, INNOVATIONS[self.innovations](), self.schedule_family, self.horizon,
                     CutoffRule(self.cutoff_exponent, self.cutoff_scale))

    def nodes(self, which="kx"):
        lo, hi, n = getattr(self, which)
        return np.linspace(lo, hi, n)


# ---------------------------------------------------------------------------
# artifacts


class Run:
    def __init__(self, subcommand, config: ExperimentConfig, seed: int, out: str, threads: int):
        self.subcommand = subcommand
        self.config = config
        self.seed = int(seed)
        self.out = out
        self.threads = int(threads)
        self.artifacts = []
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        self.artifacts.append(name)
        return os.path.join(self.out, name)

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])

    def json(self, name, payload):
        write_json(self.path(name), payload)

    def manifest(self, status, extra=None):
        payload = {
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "status": status,
            "config_hash": self.config.digest(),
            "config": self.config.canonical(),
            "seed": self.seed,
            "artifacts": sorted(set(self.artifacts)),
            "versions": {"rmparametrix": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "backend": kernels.backend_name()},
        }
        payload.update(extra or {})
        write_json(os.path.join(self.out, "manifest.json"), payload)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(run: Run):
    cfg = run.config
    setup = cfg.setup()
    report = validate_assumptions(setup.model, setup.schedule(cfg.shifts[0]), setup.innovations,
                                  setup.cutoff)
    run.json("validate.json", report)
    return 0 if report["all_passed"] else 1


def cmd_simulate(run: Run):
    """Terminal law of V from x0 per N, against the limiting Gaussian variance."""
    cfg = run.config
    setup = cfg.setup()
    rows = []
    for i, N in enumerate(cfg.shifts):
        field = setup.field(N)
        ens = simulate_V(field, setup.innovations, cfg.x0, cfg.paths, seed_sequence(run.seed, i),
                         threads=run.threads)
        v = ens.paths[:, 0]
        limit_var = float(field.flows.gaussian_variance(0.0, field.grid.T_N))
        var = float(np.var(v, ddof=1))
        # normal-theory standard error of the sample variance
        se = var * math.sqrt(2.0 / (v.size - 1))
        rows.append([N, field.grid.gamma0, field.a_N, field.grid.m_of_n, cfg.x0, v.size,
                     float(np.mean(v)), var, limit_var, se])
    run.csv("simulate.csv", ["N", "gamma0", "a_N", "M", "x0", "n_paths", "mean", "variance",
                             "limit_variance", "variance_stderr"], rows)
    return 0


def cmd_flows(run: Run):
    cfg = run.config
    setup = cfg.setup()
    y = cfg.flows_y
    for N in cfg.shifts:
        field = setup.field(N)
        grid = field.grid
        t = grid.points
        T = grid.T_N
        lim = backward_flow_limit(field.flows, T, [y], t)[:, 0]
        cut = cutoff_flow(field, [y], T, t)[:, 0]
        eul = backward_euler(field, [y])[:, 0]
        bar = field.flows.theta_bar(t)
        rows = zip(t, bar, lim, cut, eul, np.abs(lim - cut), np.abs(cut - eul))
        run.csv(f"flows_N{N}.csv", ["t", "theta_bar", "theta_limit", "theta_cutoff",
                                    "theta_euler", "abs_gap_limit_cutoff",
                                    "abs_gap_cutoff_euler"], rows)
    return 0


def cmd_couple(run: Run):
    cfg = run.config
    rep = coupling(cfg.setup(), cfg.shifts, cfg.coupling_paths, run.seed, C=cfg.coupling_C,
                   threads=run.threads)
    run.csv("couple.csv", ["N", "gamma0", "a_N", "prob_exceed", "stderr", "exit_fraction"],
            ([r["N"], r["gamma0"], r["a_N"], r["prob_exceed"], r["stderr"], r["exit_fraction"]]
             for r in rep.rows()))
    run.json("couple.json", {"C": rep.C, "pathwise_violations": rep.pathwise_violations,
                             "exit_stderr": rep.exit_stderr, "beta_sums": rep.beta_sums,
                             "lipschitz": rep.lipschitz, "n_paths": rep.n_paths})
    return 0


def cmd_svdiag(run: Run):
    cfg = run.config
    x = np.linspace(-cfg.sv_radius, cfg.sv_radius, cfg.sv_nx)
    res = sv_experiment(cfg.setup(), cfg.shifts, x, n_times=cfg.sv_times)
    rows = ([d["N"], d["t"], d["x"], d["a_gamma"], d["b_gamma"], d["delta_gamma"]]
            for r in res for d in r["detail"])
    run.csv("svdiag.csv", ["N", "t", "x", "a_gamma", "b_gamma", "delta_gamma"], rows)
    run.json("svdiag_summary.json", [{k: v for k, v in r.items() if k != "detail"} for r in res])
    return 0


def cmd_density(run: Run):
    """Closed-form limit density p next to a KDE of the cut-off diffusion X^N."""
    cfg = run.config
    setup = cfg.setup()
    field = setup.field(cfg.density_shift, cfg.density_horizon)
    T = field.grid.T_N
    x, y = cfg.nodes("kx"), cfg.nodes("ky")
    # every x slice reuses the same stream (common random numbers)
    rows = [simulate_cutoff_sde(field, 0.0, float(xx), cfg.paths, run.seed, cfg.substeps,
                                run.threads) for xx in x]
    est = kde(np.array(rows), grid=(x, y))
    p = density_p(0.0, T, x[:, None], y[None, :], field.flows)
    out = ([0.0, T, x[i], y[j], p[i, j], est.values[i, j], est.stderr[i, j]]
           for i in range(x.size) for j in range(y.size))
    run.csv("density.csv", ["t", "T", "x", "y", "p_closed", "q_N_kde", "kde_stderr"], out)
    return 0


def cmd_parametrix(run: Run):
    cfg = run.config
    setup = cfg.setup()
    field = setup.field(cfg.density_shift, cfg.density_horizon)
    px = np.array(cfg.probe_x)
    py = np.array(cfg.probe_y)
    cont = series_continuous("q_tilde", "H_N", cfg.r_max, px, py, 0.0, field.grid.T_N,
                             field=field, n_time=cfg.n_time)
    disc = series_discrete(field, setup.innovations, 0, px, py, cfg.r_max)
    rows = []
    for name, acc in (("continuous", cont), ("discrete", disc)):
        for r, (norm, ps) in enumerate(zip(acc.term_norms, acc.partial_sums)):
            for i, xx in enumerate(px):
                for j, yy in enumerate(py):
                    rows.append([name, r, norm, xx, yy, ps.values[i, j]])
    run.csv("parametrix_terms.csv", ["series", "r", "term_norm", "probe_x", "probe_y",
                                     "partial_sum"], rows)
    reports = []
    for N in cfg.parametrix_shifts:
        rep = flowchart_pipeline(setup.field(N, cfg.density_horizon), setup.innovations, 0, px,
                                 py, cfg.r_max, cfg.n_time)
        reports.append(dict(rep.to_dict(), N=int(N)))
    run.json("flowchart.json", {"reports": reports,
                                "truncation_estimates": {"continuous": cont.truncation_estimate(),
                                                         "discrete": disc.truncation_estimate()},
                                "ratio_constants": {"continuous": cont.ratio_constant(),
                                                    "discrete": disc.ratio_constant()}})
    return 0


def cmd_rate(run: Run):
    """Both density rates over the rate N list; a refused fit is reported as an error."""
    cfg = run.config
    setup = cfg.setup()
    lo, hi, n = cfg.rate_kx
    chain = chain_vs_diffusion(setup, cfg.rate_shifts, cfg.rate_horizon, np.linspace(lo, hi, n),
                               cfg.nodes("ky"), cfg.paths, seed_sequence(run.seed, 0),
                               cfg.substeps, run.threads)
    limit = limit_vs_cutoff(setup, cfg.rate_shifts, cfg.rate_horizon, cfg.rate_y_probes,
                            cfg.paths, seed_sequence(run.seed, 1), cfg.substeps, run.threads)
    run.json("rate_chain_vs_diffusion.json", chain.to_dict())
    run.json("rate_limit_vs_cutoff.json", limit.to_dict())
    refused = {k: m.fit_error for k, m in (("chain_vs_diffusion", chain),
                                           ("limit_vs_cutoff", limit)) if m.fit_error}
    if refused:
        raise RateFitRefused(refused)
    return 0


class RateFitRefused(RuntimeError):
    pass


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "flows": cmd_flows,
            "couple": cmd_couple, "svdiag": cmd_svdiag, "density": cmd_density,
            "parametrix": cmd_parametrix, "rate": cmd_rate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default="out", help="artifact directory")
    common.add_argument("--threads", type=int, default=1, help="Monte Carlo worker threads")
    parser = argparse.ArgumentParser(prog="rmparametrix",
                                     description="Robbins-Monro local limit experiments")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or name).split("\n")[0])
    return parser


def _error(exc, subcommand, out):
    payload = {"error": type(exc).__name__, "message": str(exc), "subcommand": subcommand}
    if isinstance(exc, RateFitRefused):
        payload["refused"] = exc.args[0]
        payload["message"] = "rate fit refused"
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w") as fh:
                fh.write(text + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = None
    try:
        cfg = ExperimentConfig.from_file(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        run = Run(args.subcommand, cfg, seed, args.out, args.threads)
        status = COMMANDS[args.subcommand](run)
        run.manifest("ok" if status == 0 else "failed")
        return status
    except Exception as exc:  # every module failure becomes a JSON error
        _error(exc, args.subcommand, args.out)
        if run is not None:
            run.manifest("error", {"error": type(exc).__name__})
        return 1


if __name__ == "__main__":
    sys.exit(main())
