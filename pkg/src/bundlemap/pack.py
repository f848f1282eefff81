"""Parallel multi-cell packs: reference stepping, pack-mode surrogate and transfer study."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import refsolver as rs
from .geom import BOUNDS, FIELDS, DesignParams, DiscreteDomain, GeometryError, GridSpec, PointCloud, build_domain, feature_node_count, sample_geometry_cloud, sample_params
from .metrics import field_ranges, nmae
from .model import NbmModel, RolloutDivergence, _Prepared
from .refsolver import DEFAULT_DT, PHYSICS, FiberState, Physics, SolverError, Trajectory
from .train import TrainConfig, TransitionSource, Unit, fine_tune, fit_normalization_series, train_on_source

log = logging.getLogger(__name__)

MIN_CELLS, MAX_CELLS = 3, 10


class PackError(RuntimeError):
    pass


@dataclass(frozen=True)
class PackConfig:
    cells: tuple[DesignParams, ...]
    total_current: float
    conductance: float = 0.1

    def __post_init__(self):
        if not MIN_CELLS <= len(self.cells) <= MAX_CELLS:
            raise ValueError(f"pack needs {MIN_CELLS}..{MAX_CELLS} cells, got {len(self.cells)}")
        if not np.isfinite(self.total_current) or self.total_current < 0:
            raise ValueError("total current must be finite and non-negative")
        if self.conductance < 0:
            raise ValueError("conductance must be non-negative")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def domains(self, grid: GridSpec) -> list[DiscreteDomain]:
        return [build_domain(p, grid) for p in self.cells]


@dataclass
class PackState:
    cells: list[FiberState]
    v_shared: float
    currents: np.ndarray

    @property
    def t(self) -> int:
        return self.cells[0].t


# --------------------------------------------------------------------------- reference


def _tab_law(params: DesignParams, soc: float, physics: Physics) -> tuple[float, float]:
    """(open-circuit value, resistance) with V = a - b * I."""
    a = rs.tab_potential(params, 0.0, soc, physics)
    b = a - rs.tab_potential(params, 1.0, soc, physics)
    return a, b


def split_current(
    config: PackConfig,
    domains: list[DiscreteDomain],
    states: list[FiberState],
    physics: Physics = PHYSICS,
    tol: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Shared terminal value and per-cell currents with sum equal to the pack total.

    Each cell's current follows from inverting its tab law at the candidate
    shared value; the sum is monotone decreasing in that value, so plain
    bisection finds it.
    """
    laws = [
        _tab_law(p, rs.state_of_charge(d, s.values["c"]), physics)
        for p, d, s in zip(config.cells, domains, states)
    ]
    a = np.array([l[0] for l in laws])
    b = np.array([l[1] for l in laws])
    if np.any(b <= 0) or not np.all(np.isfinite(a)):
        raise PackError(f"non-physical tab laws: open-circuit {a.tolist()}, resistance {b.tolist()}")

    def total(v):
        return float(np.sum((a - v) / b))

    I = config.total_current
    hi = float(a.max())
    lo = float(a.min() - (I + 1.0) * b.max())
    if not total(hi) <= I <= total(lo):
        raise PackError(
            f"no bracket for I_total={I}: sums {total(hi)}..{total(lo)}, "
            f"open-circuit {a.tolist()}, resistance {b.tolist()}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi) or hi - lo <= tol:
            break
        if total(mid) > I:
            lo = mid
        else:
            hi = mid
    v = 0.5 * (lo + hi)
    return v, (a - v) / b


def facing_nodes(domain: DiscreteDomain, side: str) -> np.ndarray:
    """Temperature nodes on the left or right edge, ordered by row."""
    nx, ny = domain.grid.nx, domain.grid.ny
    col = 0 if side == "left" else nx - 1
    return np.arange(ny) * nx + col


def exchange_rates(config: PackConfig, domains: list[DiscreteDomain], states: list[FiberState]) -> list[np.ndarray]:
    """Per-node thermal exchange g * (T_neighbor - T_self) between adjacent cells.

    Cells sit side by side: the right edge of cell k faces the left edge of
    cell k+1, matched row by row.
    """
    out = [np.zeros(d.n_nodes) for d in domains]
    g = config.conductance
    for k in range(len(domains) - 1):
        right = facing_nodes(domains[k], "right")
        left = facing_nodes(domains[k + 1], "left")
        Ta = states[k].values["T"][right]
        Tb = states[k + 1].values["T"][left]
        out[k][right] += g * (Tb - Ta)
        out[k + 1][left] += g * (Ta - Tb)
    return out


def initial_pack_state(config: PackConfig, domains: list[DiscreteDomain], physics: Physics = PHYSICS) -> PackState:
    # at t=0 every cell is full, so the split only needs SOC = 1
    fresh = [
        FiberState({"T": np.zeros(d.n_nodes), "phi": np.zeros(d.n_nodes), "c": np.ones(d.field_size("c"))}, 0)
        for d in domains
    ]
    v, currents = split_current(config, domains, fresh, physics)
    cells = [rs.initial_state(d, physics, current=float(I)) for d, I in zip(domains, currents)]
    return PackState(cells, v, currents)


def pack_step_reference(
    config: PackConfig,
    domains: list[DiscreteDomain],
    state: PackState,
    dt: float = DEFAULT_DT,
    physics: Physics = PHYSICS,
) -> PackState:
    if len(state.cells) != config.n_cells or len(domains) != config.n_cells:
        raise ValueError("state, domains and config disagree on the cell count")
    v, currents = split_current(config, domains, state.cells, physics)
    rates = exchange_rates(config, domains, state.cells)
    cells = []
    for k, (p, d, s) in enumerate(zip(config.cells, domains, state.cells)):
        try:
            cells.append(rs.step(d, p, s, dt, physics, current=float(currents[k]), heat_exchange=rates[k]))
        except SolverError as exc:
            raise PackError(f"cell {k}: {exc}") from exc
    return PackState(cells, v, currents)


def simulate_pack(
    config: PackConfig, grid: GridSpec, n_steps: int, dt: float = DEFAULT_DT, physics: Physics = PHYSICS
) -> list[PackState]:
    domains = config.domains(grid)
    state = initial_pack_state(config, domains, physics)
    out = [state]
    for _ in range(n_steps):
        state = pack_step_reference(config, domains, state, dt, physics)
        out.append(state)
    return out


def cell_trajectories(config: PackConfig, grid: GridSpec, dt: float, states: list[PackState]) -> list[Trajectory]:
    return [
        Trajectory(p, grid, dt, [s.cells[k] for s in states]) for k, p in enumerate(config.cells)
    ]


# --------------------------------------------------------------------------- surrogate


class PackRunner:
    """Pack-mode inference: one geometry latent per cell, global thermal attention."""

    def __init__(self, model: NbmModel, config: PackConfig, domains: list[DiscreteDomain],
                 clouds: list[PointCloud], physics: Physics = PHYSICS):
        self.config = config
        self.domains = domains
        self.physics = physics
        self.prepared = _Prepared(model, domains, clouds)

    def step(self, state: PackState) -> PackState:
        if len(state.cells) != self.prepared.n_cells:
            raise ValueError(f"pack state has {len(state.cells)} cells, model prepared for {self.prepared.n_cells}")
        cells = self.prepared.step(state.cells)
        v, currents = split_current(self.config, self.domains, cells, self.physics)
        return PackState(cells, v, currents)

    def rollout(self, initial: PackState, n_steps: int) -> list[PackState]:
        out = [initial]
        state = initial
        for k in range(n_steps):
            state = self.step(state)
            if not all(np.isfinite(v).all() for c in state.cells for v in c.values.values()):
                raise RolloutDivergence(k + 1)
            out.append(state)
        return [PackState([FiberState(c.values, j) for c in s.cells], s.v_shared, s.currents)
                for j, s in enumerate(out)]


def pack_step_model(runner: PackRunner, state: PackState) -> PackState:
    return runner.step(state)


# --------------------------------------------------------------------------- data


@dataclass
class PackCase:
    config: PackConfig
    cloud_seeds: list[int]
    states: list[PackState]
    split: str

    def clouds(self, grid: GridSpec, size: int) -> list[PointCloud]:
        return [sample_geometry_cloud(d, size, s) for d, s in zip(self.config.domains(grid), self.cloud_seeds)]


def sample_pack(rng: np.random.Generator, n_cells: int, conductance: float = 0.1,
                bounds: dict | None = None) -> PackConfig:
    bounds = dict(bounds or BOUNDS)
    t0 = float(rng.uniform(*bounds["initial_temperature"]))
    per_cell = float(rng.uniform(*bounds["applied_current"]))
    cells = tuple(
        sample_params(rng, bounds).with_values(initial_temperature=t0, applied_current=per_cell)
        for _ in range(n_cells)
    )
    return PackConfig(cells, per_cell * n_cells, conductance)


def generate_pack_cases(
    n: int,
    horizon: int,
    grid: GridSpec,
    seed: int,
    split: str = "train",
    n_cells: int | None = None,
    dt: float = DEFAULT_DT,
    conductance: float = 0.1,
    physics: Physics = PHYSICS,
) -> tuple[list[PackCase], int]:
    """``n`` packs with random cell counts (or all ``n_cells``); returns (cases, redraws)."""
    rng = np.random.default_rng(seed)
    out, redraws = [], 0
    while len(out) < n:
        if redraws > 10 * n:
            raise RuntimeError("pack resample budget exhausted")
        k = n_cells or int(rng.integers(MIN_CELLS, MAX_CELLS + 1))
        cfg = sample_pack(rng, k, conductance)
        seeds = [int(s) for s in rng.integers(2**31 - 1, size=k)]
        try:
            states = simulate_pack(cfg, grid, horizon, dt, physics)
        except (PackError, SolverError, GeometryError) as exc:
            log.info("resampling pack: %s", exc)
            redraws += 1
            continue
        out.append(PackCase(cfg, seeds, states, split))
    return out, redraws


def pack_units(cases: list[PackCase], grid: GridSpec, cloud_size: int) -> list[Unit]:
    units = []
    for tag, case in enumerate(cases):
        series = [
            {f: np.stack([s.cells[k].values[f] for s in case.states]) for f in FIELDS}
            for k in range(case.config.n_cells)
        ]
        units.append(Unit(case.config.domains(grid), case.clouds(grid, cloud_size), series, tag))
    return units


# --------------------------------------------------------------------------- transfer


@dataclass(frozen=True)
class TransferConfig:
    ladder: tuple[int, ...] = (0, 8, 16, 32, 48)
    scratch_budget: int = 48
    n_test: int = 6
    profile_cells: int = 10
    horizon: int = 10
    conductance: float = 0.1
    freeze: tuple[str, ...] = ("encoders",)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, batch_size=8))
    scratch: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, batch_size=8))
    seed: int = 0


@dataclass
class PackEval:
    nmae: dict[str, float]  # mean over test packs
    per_pack: dict[str, list[float]]
    profile: dict[str, list[float]]  # per-cell NMAE on the profile pack
    diverged: int = 0

    def profile_ratio(self) -> float:
        """max/min of the per-cell NMAE (averaged over fields) on the profile pack."""
        per_cell = np.mean([self.profile[f] for f in self.profile], axis=0)
        return float(per_cell.max() / per_cell.min())


def evaluate_pack_model(model: NbmModel, cases: list[PackCase], profile: PackCase, grid: GridSpec,
                        cloud_size: int, ranges: dict[str, float]) -> PackEval:
    """Full-horizon pack rollouts from each test pack's initial state."""
    per_pack = {f: [] for f in FIELDS}
    diverged = 0
    profile_err = {}
    for case in cases + [profile]:
        dom = case.config.domains(grid)
        runner = PackRunner(model, case.config, dom, case.clouds(grid, cloud_size))
        try:
            pred = runner.rollout(case.states[0], len(case.states) - 1)
        except RolloutDivergence:
            diverged += 1
            for f in FIELDS:
                per_pack[f].append(float("inf"))
            continue
        truth_t = cell_trajectories(case.config, grid, DEFAULT_DT, case.states)
        pred_t = cell_trajectories(case.config, grid, DEFAULT_DT, pred)
        cell = {f: [nmae(p, t, f, ranges[f]) for p, t in zip(pred_t, truth_t)] for f in FIELDS}
        if case is profile:
            profile_err = cell
        else:
            for f in FIELDS:
                per_pack[f].append(float(np.mean(cell[f])))
    return PackEval({f: float(np.mean(v)) for f, v in per_pack.items()}, per_pack, profile_err, diverged)


@dataclass
class TransferRow:
    label: str
    samples: int
    result: PackEval


@dataclass
class TransferReport:
    rows: list[TransferRow]
    ranges: dict[str, float]

    def row(self, label: str) -> TransferRow:
        return next(r for r in self.rows if r.label == label)


def transfer_experiment(
    base: NbmModel,
    config: TransferConfig = TransferConfig(),
    grid: GridSpec | None = None,
    cloud_size: int | None = None,
) -> TransferReport:
    """Fine-tune ``base`` on growing pack sample counts and compare to scratch training."""
    grid = grid or GridSpec()
    cloud_size = cloud_size or feature_node_count(grid)
    ss = np.random.SeedSequence(config.seed)
    s_train, s_test, s_prof, s_init = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    budget = max(max(config.ladder), config.scratch_budget)
    train_cases, _ = generate_pack_cases(budget, config.horizon, grid, s_train, "train",
                                         conductance=config.conductance)
    test_cases, _ = generate_pack_cases(config.n_test, config.horizon, grid, s_test, "test",
                                        conductance=config.conductance)
    (profile,), _ = generate_pack_cases(1, config.horizon, grid, s_prof, "test",
                                        n_cells=config.profile_cells, conductance=config.conductance)
    truths = [t for c in test_cases + [profile] for t in cell_trajectories(c.config, grid, DEFAULT_DT, c.states)]
    ranges = field_ranges(truths)
    units = pack_units(train_cases, grid, cloud_size)

    rows = []
    for k in config.ladder:
        if k == 0:
            tuned = base
        else:
            source = TransitionSource(units[:k], base.norm, depth=config.finetune.curriculum)
            tuned, _ = fine_tune(base, source, config.finetune, config.freeze)
        rows.append(TransferRow(f"finetune_{k}", k, evaluate_pack_model(tuned, test_cases, profile, grid, cloud_size, ranges)))

    scratch = NbmModel.initialize(base.config, seed=s_init % (2**31))
    scratch.norm = fit_normalization_series(units[: config.scratch_budget])
    source = TransitionSource(units[: config.scratch_budget], scratch.norm, depth=config.scratch.curriculum)
    train_on_source(scratch, source, config.scratch)
    rows.append(TransferRow(f"scratch_{config.scratch_budget}", config.scratch_budget,
                            evaluate_pack_model(scratch, test_cases, profile, grid, cloud_size, ranges)))
    return TransferReport(rows, ranges)
