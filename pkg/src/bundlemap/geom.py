"""Geometric base space: design vectors, discretized domains and point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Closed bounds for every design coordinate, in declaration order.
BOUNDS: dict[str, tuple[float, float]] = {
    "width": (0.6, 1.4),
    "height": (0.6, 1.4),
    "tab_center": (0.2, 0.8),
    "tab_width": (0.05, 0.3),
    "electrode_frac": (0.3, 0.7),
    "applied_current": (0.5, 4.0),
    "initial_temperature": (0.8, 1.2),
}
PARAM_NAMES: tuple[str, ...] = tuple(BOUNDS)
GEOMETRY_NAMES: tuple[str, ...] = ("width", "height", "tab_center", "tab_width", "electrode_frac")

FIELDS: tuple[str, ...] = ("T", "phi", "c")

LABELS: tuple[str, ...] = ("boundary", "tab", "interface")

# ties on node/interval membership resolve toward inclusion
_EPS = 1e-9


class GeometryError(ValueError):
    """Raised when a design cannot be discretized on the requested grid."""


@dataclass(frozen=True)
class DesignParams:
    width: float = 1.0
    height: float = 1.0
    tab_center: float = 0.5
    tab_width: float = 0.175
    electrode_frac: float = 0.5
    applied_current: float = 2.25
    initial_temperature: float = 1.0

    def validate(self) -> None:
        """Every coordinate inside its bound, and the tab on the top edge."""
        self._check(PARAM_NAMES)

    def validate_geometry(self) -> None:
        """Only the coordinates that shape the domain; operating conditions are free."""
        self._check(GEOMETRY_NAMES)

    def _check(self, names) -> None:
        for name in names:
            lo, hi = BOUNDS[name]
            v = getattr(self, name)
            if not np.isfinite(v) or v < lo or v > hi:
                raise GeometryError(f"{name}={v!r} outside [{lo}, {hi}]")
        if self.tab_center - self.tab_width / 2 < -_EPS or self.tab_center + self.tab_width / 2 > 1 + _EPS:
            raise GeometryError(
                f"tab [{self.tab_center - self.tab_width / 2:.4f}, "
                f"{self.tab_center + self.tab_width / 2:.4f}] leaves the top edge"
            )

    def is_valid(self) -> bool:
        try:
            self.validate()
        except GeometryError:
            return False
        return True

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "DesignParams":
        values = [float(v) for v in values]
        if len(values) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} values, got {len(values)}")
        return cls(**dict(zip(PARAM_NAMES, values)))

    @classmethod
    def midpoint(cls) -> "DesignParams":
        return cls(**{n: 0.5 * (lo + hi) for n, (lo, hi) in BOUNDS.items()})

    def with_values(self, **changes: float) -> "DesignParams":
        return replace(self, **changes)


def sample_params(rng: np.random.Generator, bounds: dict[str, tuple[float, float]] | None = None) -> DesignParams:
    """Uniform draw inside ``bounds``; tab placement is redrawn until it fits on the edge."""
    bounds = BOUNDS if bounds is None else bounds
    while True:
        vals = {n: float(rng.uniform(*bounds[n])) for n in PARAM_NAMES}
        p = DesignParams(**vals)
        if p.is_valid():
            return p


@dataclass(frozen=True)
class GridSpec:
    nx: int = 12
    ny: int = 12

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")

    def spacing(self, params: DesignParams) -> tuple[float, float]:
        return params.width / (self.nx - 1), params.height / (self.ny - 1)


@dataclass(frozen=True, eq=False)
class DiscreteDomain:
    """Node layout of one configuration.

    Nodes are numbered row-major, ``k = j * nx + i`` with ``i`` along x.
    """

    params: DesignParams
    grid: GridSpec
    coords: np.ndarray  # (nx*ny, 2)
    field_nodes: dict[str, np.ndarray]
    tab_nodes: np.ndarray
    boundary_nodes: np.ndarray
    interface_nodes: np.ndarray
    c_rows: int = field(default=0)

    @property
    def n_nodes(self) -> int:
        return self.grid.nx * self.grid.ny

    def field_size(self, name: str) -> int:
        return len(self.field_nodes[name])

    def field_coords(self, name: str) -> np.ndarray:
        return self.coords[self.field_nodes[name]]

    @property
    def total_size(self) -> int:
        return sum(len(self.field_nodes[f]) for f in FIELDS)

    def feature_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Union of boundary, tab and interface nodes with one label each.

        A node carrying several roles gets the most specific label:
        tab, then interface, then boundary.
        """
        label = np.full(self.n_nodes, -1, dtype=np.int64)
        label[self.boundary_nodes] = LABELS.index("boundary")
        label[self.interface_nodes] = LABELS.index("interface")
        label[self.tab_nodes] = LABELS.index("tab")
        idx = np.flatnonzero(label >= 0)
        return idx, label[idx]

    def __eq__(self, other):
        if not isinstance(other, DiscreteDomain):
            return NotImplemented
        return (
            self.params == other.params
            and self.grid == other.grid
            and np.array_equal(self.coords, other.coords)
            and all(np.array_equal(self.field_nodes[f], other.field_nodes[f]) for f in FIELDS)
            and np.array_equal(self.tab_nodes, other.tab_nodes)
            and np.array_equal(self.boundary_nodes, other.boundary_nodes)
            and np.array_equal(self.interface_nodes, other.interface_nodes)
        )

    __hash__ = None


def c_row_count(electrode_frac: float, ny: int) -> int:
    """Rows of the concentration subdomain: those with y <= electrode_frac * H."""
    return int(np.floor(electrode_frac * (ny - 1) + _EPS)) + 1


def build_domain(params: DesignParams, grid: GridSpec) -> DiscreteDomain:
    params.validate_geometry()
    nx, ny = grid.nx, grid.ny
    xs = np.linspace(0.0, params.width, nx)
    ys = np.linspace(0.0, params.height, ny)
    X, Y = np.meshgrid(xs, ys)  # (ny, nx): row j, column i
    coords = np.column_stack([X.ravel(), Y.ravel()])
    all_nodes = np.arange(nx * ny, dtype=np.int64)

    rows = c_row_count(params.electrode_frac, ny)
    c_nodes = np.arange(rows * nx, dtype=np.int64)

    jj, ii = np.divmod(all_nodes, nx)
    on_edge = (ii == 0) | (ii == nx - 1) | (jj == 0) | (jj == ny - 1)
    boundary = all_nodes[on_edge]

    lo = params.tab_center - params.tab_width / 2
    hi = params.tab_center + params.tab_width / 2
    top = all_nodes[jj == ny - 1]
    frac = coords[top, 0] / params.width
    tab = top[(frac >= lo - _EPS) & (frac <= hi + _EPS)]
    if tab.size == 0:
        raise GeometryError(
            f"tab interval [{lo:.4f}, {hi:.4f}] holds no node on a {nx}-node top edge"
        )

    interface = np.arange((rows - 1) * nx, rows * nx, dtype=np.int64)

    return DiscreteDomain(
        params=params,
        grid=grid,
        coords=coords,
        field_nodes={"T": all_nodes.copy(), "phi": all_nodes.copy(), "c": c_nodes},
        tab_nodes=tab,
        boundary_nodes=boundary,
        interface_nodes=interface,
        c_rows=rows,
    )


def feature_node_count(grid: GridSpec, electrode_frac: float = 0.5) -> int:
    """Number of labeled feature nodes (boundary, tab, interface) on ``grid``."""
    rows = c_row_count(electrode_frac, grid.ny)
    perimeter = 2 * grid.nx + 2 * grid.ny - 4
    return perimeter if rows in (1, grid.ny) else perimeter + grid.nx - 2


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) indices into LABELS
    with_replacement: bool = False

    def __len__(self) -> int:
        return len(self.points)

    def features(self) -> np.ndarray:
        """Per-point encoder input: (x, y, one-hot label)."""
        onehot = np.eye(len(LABELS))[self.labels]
        return np.concatenate([self.points, onehot], axis=1)


def sample_geometry_cloud(domain: DiscreteDomain, n: int, seed: int) -> PointCloud:
    if n < 8:
        raise ValueError(f"cloud size must be >= 8, got {n}")
    idx, labels = domain.feature_nodes()
    rng = np.random.default_rng(seed)
    replace_ = n > idx.size
    pick = rng.choice(idx.size, size=n, replace=replace_)
    return PointCloud(domain.coords[idx[pick]], labels[pick], with_replacement=replace_)


def design_distance(a: DesignParams, b: DesignParams, names: tuple[str, ...] = PARAM_NAMES) -> float:
    """Euclidean distance after min-max scaling every coordinate by its bound range."""
    total = 0.0
    for n in names:
        lo, hi = BOUNDS[n]
        d = (getattr(a, n) - getattr(b, n)) / (hi - lo)
        total += d * d
    return float(np.sqrt(total))
