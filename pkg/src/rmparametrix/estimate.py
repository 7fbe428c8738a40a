"""Kernel density estimates on (x, y) grids, tail-weighted gaps and log-log rate fits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid

KERNEL_ROUGHNESS = 1.0 / (2.0 * math.sqrt(math.pi))  # int K^2 for the Gaussian kernel
MIN_SAMPLES = 1000
DEFAULT_NODES = np.linspace(-3.0, 3.0, 61)


class EstimateError(ValueError):
    pass


@dataclass
class DensityGrid:
    """values[i, j] approximates a density at (x_nodes[i], y_nodes[j])."""

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_nodes = np.atleast_1d(np.asarray(self.x_nodes, dtype=float))
        self.y_nodes = np.atleast_1d(np.asarray(self.y_nodes, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(self.x_nodes.size,
                                                                   self.y_nodes.size)
        if self.stderr is None:
            self.stderr = np.zeros_like(self.values)
        self.stderr = np.asarray(self.stderr, dtype=float).reshape(self.values.shape)
        for nodes in (self.x_nodes, self.y_nodes):
            if nodes.size > 1 and np.any(np.diff(nodes) <= 0):
                raise EstimateError("grid nodes must be strictly ascending")

    def slice_mass(self):
        """Trapezoid integral over y for each x node."""
        return trapezoid(self.values, self.y_nodes, axis=1)

    def same_nodes(self, other: "DensityGrid") -> bool:
        return (self.x_nodes.shape == other.x_nodes.shape and self.y_nodes.shape == other.y_nodes.shape
                and np.array_equal(self.x_nodes, other.x_nodes)
                and np.array_equal(self.y_nodes, other.y_nodes))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.meta, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["x", "y", "value", "stderr"])
            for i, x in enumerate(self.x_nodes):
                for j, y in enumerate(self.y_nodes):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(self.values[i, j])),
                                repr(float(self.stderr[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "DensityGrid":
        with open(path, newline="") as fh:
            first = fh.readline()
            meta = json.loads(first[1:]) if first.startswith("#") else {}
            if not first.startswith("#"):
                fh.seek(0)
            rows = list(csv.DictReader(fh))
        xs = np.array(sorted({float(r["x"]) for r in rows}))
        ys = np.array(sorted({float(r["y"]) for r in rows}))
        vals = np.zeros((xs.size, ys.size))
        errs = np.zeros_like(vals)
        for r in rows:
            i = np.searchsorted(xs, float(r["x"]))
            j = np.searchsorted(ys, float(r["y"]))
            vals[i, j] = float(r["value"])
            errs[i, j] = float(r["stderr"])
        return cls(xs, ys, vals, errs, meta)


# ---------------------------------------------------------------------------
# KDE


def silverman_bandwidth(samples) -> float:
    s = np.asarray(samples, dtype=float)
    sd = float(np.std(s, ddof=1))
    q75, q25 = np.percentile(s, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * s.size ** (-0.2)


def _kde_direct(samples, points, h):
    out = np.zeros(points.size)
    for start in range(0, samples.size, 1 << 14):
        d = (points[:, None] - samples[None, start:start + (1 << 14)]) / h
        out += np.exp(-0.5 * d * d).sum(axis=1)
    return out / (samples.size * h * math.sqrt(2 * math.pi))


def _kde_binned(samples, points, h, bins_per_h=40):
    """Linear binning on a fine grid followed by an FFT convolution with the kernel."""
    lo = min(samples.min(), points.min()) - 8 * h
    hi = max(samples.max(), points.max()) + 8 * h
    delta = h / bins_per_h
    n = int(math.ceil((hi - lo) / delta)) + 1
    pos = (samples - lo) / delta
    left = np.floor(pos).astype(np.int64)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=n + 1)
    counts += np.bincount(left + 1, weights=frac, minlength=n + 1)
    counts = counts[:n]
    half = int(math.ceil(8 * bins_per_h))
    k = np.arange(-half, half + 1) * delta / h
    kern = np.exp(-0.5 * k * k) / (samples.size * h * math.sqrt(2 * math.pi))
    size = 1 << int(math.ceil(math.log2(n + kern.size)))
    dens = np.fft.irfft(np.fft.rfft(counts, size) * np.fft.rfft(kern, size), size)
    dens = dens[half:half + n]
    grid = lo + delta * np.arange(n)
    return np.maximum(np.interp(points, grid, dens), 0.0)


def kde_values(samples, points, bandwidth="silverman", method="auto"):
    """Gaussian-kernel density estimate at `points` with asymptotic standard errors.

    The standard error uses sqrt(f R(K) / (n h)) with f floored at 1/(n h), the
    resolution of a single sample, so nodes without nearby samples are not
    credited with zero uncertainty.
    """
    s = np.asarray(samples, dtype=float).ravel()
    pts = np.asarray(points, dtype=float)
    if s.size < MIN_SAMPLES:
        raise EstimateError(f"need at least {MIN_SAMPLES} samples, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise EstimateError("non-finite samples")
    if np.std(s) <= 1e-12 * max(1.0, abs(float(np.mean(s)))):
        raise EstimateError("degenerate sample variance")
    h = silverman_bandwidth(s) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise EstimateError("bandwidth must be positive")
    flat = pts.ravel()
    if method == "auto":
        method = "direct" if s.size * flat.size <= 2e7 else "binned"
    f = _kde_direct(s, flat, h) if method == "direct" else _kde_binned(s, flat, h)
    nh = s.size * h
    se = np.sqrt(np.maximum(f, 1.0 / nh) * KERNEL_ROUGHNESS / nh)
    return f.reshape(pts.shape), se.reshape(pts.shape), h


def kde(samples, bandwidth="silverman", grid=None, meta=None, method="auto") -> DensityGrid:
    """KDE on a (x, y) grid.

    `samples` is either one row per x node, or a 1-D sample used for every x
    node. `grid` is (x_nodes, y_nodes), defaulting to 61 nodes on [-3, 3] each.
    """
    x_nodes, y_nodes = grid if grid is not None else (DEFAULT_NODES, DEFAULT_NODES)
    x_nodes = np.atleast_1d(np.asarray(x_nodes, dtype=float))
    y_nodes = np.asarray(y_nodes, dtype=float)
    arr = np.asarray(samples, dtype=float)
    rows = [arr] * x_nodes.size if arr.ndim == 1 else list(arr)
    if len(rows) != x_nodes.size:
        raise EstimateError("one sample row per x node is required")
    vals = np.empty((x_nodes.size, y_nodes.size))
    errs = np.empty_like(vals)
    hs = []
    for i, row in enumerate(rows):
        vals[i], errs[i], h = kde_values(row, y_nodes, bandwidth, method)
        hs.append(h)
    info = dict(meta or {})
    info.setdefault("method", "kde")
    info["bandwidth"] = [float(v) for v in hs]
    return DensityGrid(x_nodes, y_nodes, vals, errs, info)


def kde_shifted(base_samples, shifts, y_nodes, x_nodes, bandwidth="silverman", meta=None,
                method="auto") -> DensityGrid:
    """KDE of base_samples + shifts[i] on each x slice, sharing one set of draws."""
    y_nodes = np.asarray(y_nodes, dtype=float)
    shifts = np.asarray(shifts, dtype=float)
    pts = y_nodes[None, :] - shifts[:, None]
    vals, errs, h = kde_values(base_samples, pts, bandwidth, method)
    info = dict(meta or {})
    info.setdefault("method", "kde")
    info["bandwidth"] = float(h)
    return DensityGrid(x_nodes, y_nodes, vals, errs, info)


# ---------------------------------------------------------------------------
# gaps


@dataclass(frozen=True)
class TailWeight:
    """w(x, y) = tau^{-1/2} (1 + |flow(y) - x| / sqrt(tau))^{-(S - 7)}.

    `flow_values` holds the backward flow of each y node (shape (ny,) or (nx, ny)).
    """

    S: float
    tau: float
    flow_values: np.ndarray

    def __call__(self, x_nodes, y_nodes):
        x = np.asarray(x_nodes, dtype=float)[:, None]
        flow = np.asarray(self.flow_values, dtype=float)
        if flow.ndim == 1:
            flow = flow[None, :]
        rt = math.sqrt(self.tau)
        return (1.0 / rt) / (1.0 + np.abs(flow - x) / rt) ** (self.S - 7)


def weighted_gap(a: DensityGrid, b: DensityGrid, weight: TailWeight | None = None) -> float:
    if not a.same_nodes(b):
        raise EstimateError("grids do not share nodes")
    diff = np.abs(a.values - b.values)
    if weight is not None:
        diff = diff / weight(a.x_nodes, a.y_nodes)
    return float(np.max(diff))


def stderr_ratio(a: DensityGrid, b: DensityGrid, slack: float = 0.0) -> float:
    """sup |a - b| / (combined stderr + slack); < 3 means agreement at 3 sigma."""
    if not a.same_nodes(b):
        raise EstimateError("grids do not share nodes")
    se = np.sqrt(a.stderr**2 + b.stderr**2) + slack
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(a.values - b.values) / se
    r = np.where(np.abs(a.values - b.values) == 0, 0.0, r)
    return float(np.max(r))


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateFit:
    abscissa: tuple
    ordinate: tuple
    slope: float
    intercept: float
    r2: float

    def predict(self, x):
        return np.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RateFit":
        d = json.loads(text)
        d["abscissa"] = tuple(d["abscissa"])
        d["ordinate"] = tuple(d["ordinate"])
        return cls(**d)


def fit_rate(abscissa, ordinate, min_points: int = 4, min_decades: float = 1.0) -> RateFit:
    """Least squares of log(ordinate) on log(abscissa)."""
    x = np.asarray(abscissa, dtype=float)
    y = np.asarray(ordinate, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise EstimateError("abscissa and ordinate must be equal-length vectors")
    if x.size < min_points:
        raise EstimateError(f"need at least {min_points} points")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise EstimateError("abscissa and ordinate must be positive and finite")
    if math.log10(x.max() / x.min()) < min_decades - 1e-9:
        raise EstimateError(f"abscissa must span at least {min_decades} decade(s)")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid**2)) / float(tot) if tot > 0 else 1.0
    return RateFit(tuple(map(float, x)), tuple(map(float, y)), float(slope), float(intercept),
                   min(1.0, max(0.0, r2)))


@dataclass(frozen=True)
class FittedConstant:
    """Constant C in observed <= C * envelope.

    `ls` is the least-squares fit of log C, `C` the smallest value making every
    residual one-sided.
    """

    ls: float
    C: float

    @property
    def holds(self) -> bool:
        return math.isfinite(self.C)


def fit_constant(observed, envelope) -> FittedConstant:
    obs = np.abs(np.asarray(observed, dtype=float)).ravel()
    env = np.asarray(envelope, dtype=float).ravel()
    if obs.shape != env.shape:
        obs, env = np.broadcast_arrays(obs, env)
    keep = obs > 0
    if not np.any(keep):
        return FittedConstant(0.0, 0.0)
    if np.any(env[keep] <= 0):
        # a positive observation under a vanishing envelope admits no constant
        return FittedConstant(math.inf, math.inf)
    ratio = obs[keep] / env[keep]
    if np.any(~np.isfinite(ratio)):
        return FittedConstant(math.inf, math.inf)
    return FittedConstant(float(np.exp(np.mean(np.log(ratio)))), float(np.max(ratio)))


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
