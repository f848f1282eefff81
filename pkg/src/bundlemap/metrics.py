"""Error metrics, latent-manifold analysis and CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import BOUNDS, FIELDS, PARAM_NAMES, DesignParams, GridSpec, build_domain, design_distance, sample_geometry_cloud
from .refsolver import Trajectory

CELL_GROUP = ("width", "height")
TAB_GROUP = ("tab_center", "tab_width")


class DegenerateMetric(ValueError):
    """A metric is undefined for the given input (zero range, zero variance)."""


# --------------------------------------------------------------------------- NMAE


def field_ranges(truths: list[Trajectory], fields=FIELDS) -> dict[str, float]:
    """Per-field (max - min) over every node and step of a set of truth trajectories."""
    out = {}
    for f in fields:
        lo = min(float(t.field_series(f).min()) for t in truths)
        hi = max(float(t.field_series(f).max()) for t in truths)
        out[f] = hi - lo
    return out


def _aligned(pred: Trajectory, truth: Trajectory, f: str, steps: slice | None = None):
    a, b = pred.field_series(f), truth.field_series(f)
    if a.shape != b.shape:
        raise ValueError(f"{f}: prediction {a.shape} and truth {b.shape} are not aligned")
    if steps is not None:
        a, b = a[steps], b[steps]
    return a, b


def nmae(pred: Trajectory, truth: Trajectory, f: str, value_range: float, steps: slice | None = None) -> float:
    """Mean absolute error over steps and nodes divided by a frozen field range."""
    if not value_range > 0:
        raise DegenerateMetric(f"field {f} has zero range")
    a, b = _aligned(pred, truth, f, steps)
    return float(np.mean(np.abs(a - b)) / value_range)


def nmae_series(pred: Trajectory, truth: Trajectory, f: str, value_range: float) -> np.ndarray:
    """NMAE per time index."""
    if not value_range > 0:
        raise DegenerateMetric(f"field {f} has zero range")
    a, b = _aligned(pred, truth, f)
    return np.mean(np.abs(a - b), axis=1) / value_range


@dataclass
class NmaeSummary:
    per_case: dict[str, list[float]]

    def mean(self, f: str) -> float:
        return float(np.mean(self.per_case[f]))

    def std(self, f: str) -> float:
        return float(np.std(self.per_case[f]))

    def worst(self) -> float:
        return max(self.mean(f) for f in self.per_case)


def summarize_nmae(preds, truths, ranges: dict[str, float], steps: slice | None = None) -> NmaeSummary:
    return NmaeSummary({f: [nmae(p, t, f, ranges[f], steps) for p, t in zip(preds, truths)] for f in ranges})


# --------------------------------------------------------------------------- distributions


def histogram_overlap(a, b, n_bins: int = 50) -> float:
    """Sum over shared bins of min(p, q), with p and q normalized counts."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    p = np.histogram(a, edges)[0] / a.size
    q = np.histogram(b, edges)[0] / b.size
    return float(min(1.0, np.minimum(p, q).sum()))


# --------------------------------------------------------------------------- latent manifold


def geodesic_distance(z1, z2, tol: float = 1e-6) -> float:
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    for z in (z1, z2):
        if abs(np.linalg.norm(z) - 1.0) > tol:
            raise ValueError(f"latent norm {np.linalg.norm(z):.3e} is not unit")
    return float(np.arccos(np.clip(np.dot(z1, z2), -1.0, 1.0)))


@dataclass
class Correlation:
    r: float | None  # None when undefined
    degenerate: bool
    n_pairs: int
    mean_geodesic: float

    @property
    def value(self) -> float:
        return float("nan") if self.r is None else self.r


def pearson(x, y) -> float | None:
    """Pearson r, or None when either list has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def probe_designs(group, n_probes: int, seed: int) -> list[DesignParams]:
    """Random configurations varying only ``group``; the rest stay at midpoints."""
    unknown = set(group) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    base = DesignParams.midpoint()
    out = []
    while len(out) < n_probes:
        p = base.with_values(**{n: float(rng.uniform(*BOUNDS[n])) for n in group})
        if p.is_valid():
            out.append(p)
    return out


def manifold_correlation(model, group, n_probes: int = 30, seed: int = 0, grid: GridSpec | None = None,
                         cloud_size: int | None = None) -> Correlation:
    """Pearson r between pairwise design distance and pairwise latent geodesic distance."""
    from .geom import GeometryError, feature_node_count
    from .model import geometry_latents

    if n_probes < 3:
        raise ValueError("need at least 3 probes")
    grid = grid or GridSpec()
    cloud_size = cloud_size or feature_node_count(grid)
    designs, clouds = [], []
    for k, p in enumerate(probe_designs(group, 4 * n_probes, seed)):
        try:
            dom = build_domain(p, grid)
        except GeometryError:
            continue
        designs.append(p)
        clouds.append(sample_geometry_cloud(dom, cloud_size, seed + k))
        if len(designs) == n_probes:
            break
    z = geometry_latents(model, clouds)
    dd, gd = [], []
    for i in range(len(designs)):
        for j in range(i + 1, len(designs)):
            dd.append(design_distance(designs[i], designs[j], tuple(group)))
            gd.append(geodesic_distance(z[i], z[j]))
    r = pearson(dd, gd)
    return Correlation(r, r is None, len(dd), float(np.mean(gd)))


@dataclass
class PoolingConvergence:
    sizes: np.ndarray
    errors: np.ndarray  # RMS distance to the quadrature latent
    slope: float  # of log(error) against log(size)


def _smooth_field(xy: np.ndarray) -> np.ndarray:
    return 1.0 + 0.5 * np.sin(np.pi * xy[:, 0]) * np.cos(np.pi * xy[:, 1]) + 0.2 * xy[:, 1]


def pooling_convergence(model, f: str = "T", sizes=(16, 64, 256, 1024), n_repeats: int = 20,
                        seed: int = 0, quad_points: int = 256) -> PoolingConvergence:
    """Monte-Carlo error of a pooled field latent against a midpoint-rule reference.

    The field is a fixed analytic function on the unit square, sampled at
    uniform random points.
    """
    from .model import encode_field

    g = (np.arange(quad_points) + 0.5) / quad_points
    qxy = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    ref = encode_field(model, f, qxy, _smooth_field(qxy))
    rng = np.random.default_rng(seed)
    errors = []
    for m in sizes:
        sq = []
        for _ in range(n_repeats):
            xy = rng.uniform(size=(m, 2))
            sq.append(np.sum((encode_field(model, f, xy, _smooth_field(xy)) - ref) ** 2))
        errors.append(math.sqrt(float(np.mean(sq))))
    sizes = np.asarray(sizes, dtype=np.float64)
    errors = np.asarray(errors)
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    return PoolingConvergence(sizes, errors, slope)


# --------------------------------------------------------------------------- curves


@dataclass
class ExtrapolationCurves:
    curves: dict[str, np.ndarray]  # field -> mean NMAE per time index
    boundary: int  # last in-window step index
    per_case: dict[str, list[np.ndarray]] = field(default_factory=dict)
    diverged: int = 0

    def window_mean(self, f: str, inside: bool) -> float:
        c = self.curves[f]
        return float(np.mean(c[1 : self.boundary + 1] if inside else c[self.boundary + 1 :]))


def extrapolation_curves(preds: list[Trajectory], truths: list[Trajectory], ranges: dict[str, float],
                         train_horizon: int) -> ExtrapolationCurves:
    """NMAE per time index over full test rollouts, split at the train horizon."""
    lengths = {len(t) for t in truths}
    if max(lengths) - 1 <= train_horizon:
        raise ValueError("test horizon must exceed the train horizon")
    per_case = {f: [nmae_series(p, t, f, ranges[f]) for p, t in zip(preds, truths)] for f in ranges}
    diverged = sum(
        1 for p in preds if not all(np.isfinite(p.field_series(f)).all() for f in ranges)
    )
    curves = {f: np.mean(np.stack(v), axis=0) for f, v in per_case.items()}
    return ExtrapolationCurves(curves, train_horizon, per_case, diverged)


def minmax_calibration(pred: Trajectory, truth: Trajectory, f: str) -> np.ndarray:
    """Columns: pred max, pred min, truth max, truth min; one row per step."""
    a, b = _aligned(pred, truth, f)
    return np.column_stack([a.max(axis=1), a.min(axis=1), b.max(axis=1), b.min(axis=1)])


# --------------------------------------------------------------------------- reports


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
