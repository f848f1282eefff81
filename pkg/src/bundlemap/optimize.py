"""Design sweeps, Pareto ranking and NSGA-II search over an evaluator."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .geom import BOUNDS, PARAM_NAMES, DesignParams, GeometryError, GridSpec, build_domain, feature_node_count, sample_geometry_cloud
from .model import NbmModel, RolloutDivergence, rollout
from .refsolver import DEFAULT_DT, PHYSICS, Physics, SolverError, Trajectory, derived_scalars, initial_state, simulate

log = logging.getLogger(__name__)

# objective vector assigned to designs the evaluator cannot run
WORST_ENERGY = -1e12
WORST_TMAX = 1e12


@dataclass(frozen=True)
class Objectives:
    energy: float  # maximize
    t_max: float  # minimize

    def __post_init__(self):
        if not (np.isfinite(self.energy) and np.isfinite(self.t_max)):
            raise ValueError(f"non-finite objectives ({self.energy}, {self.t_max})")

    def minimization(self) -> tuple[float, float]:
        return (-self.energy, self.t_max)


WORST = Objectives(WORST_ENERGY, WORST_TMAX)


def dominates(a: Objectives, b: Objectives) -> bool:
    return (
        a.energy >= b.energy
        and a.t_max <= b.t_max
        and (a.energy > b.energy or a.t_max < b.t_max)
    )


# --------------------------------------------------------------------------- evaluators


class Evaluator(Protocol):
    name: str

    def run(self, params: DesignParams, n_steps: int) -> Trajectory: ...


def _truncate(traj: Trajectory, cutoff: float | None) -> Trajectory:
    """Keep states up to and including the first one below ``cutoff``."""
    if cutoff is None:
        return traj
    v = traj.voltage
    below = np.flatnonzero(v < cutoff)
    if below.size == 0:
        return traj
    end = max(int(below[0]), 0) + 1
    out = Trajectory(traj.params, traj.grid, traj.dt, traj.states[:end], traj.current)
    out.__dict__["domain"] = traj.domain
    return out


@dataclass
class RefEvaluator:
    grid: GridSpec = field(default_factory=GridSpec)
    dt: float = DEFAULT_DT
    cutoff: float | None = None
    physics: Physics = PHYSICS
    name: str = "refsolver"

    def run(self, params: DesignParams, n_steps: int) -> Trajectory:
        return simulate(params, self.grid, n_steps, self.dt, self.cutoff, self.physics)


@dataclass
class NbmEvaluator:
    """Surrogate rollout from the same initial state the reference starts from."""

    model: NbmModel
    grid: GridSpec = field(default_factory=GridSpec)
    cutoff: float | None = None
    cloud_size: int | None = None
    cloud_seed: int = 0
    physics: Physics = PHYSICS
    name: str = "nbm"

    def run(self, params: DesignParams, n_steps: int) -> Trajectory:
        domain = build_domain(params, self.grid)
        cloud = sample_geometry_cloud(domain, self.cloud_size or feature_node_count(self.grid), self.cloud_seed)
        init = initial_state(domain, self.physics)
        return _truncate(rollout(self.model, domain, cloud, init, n_steps), self.cutoff)


@dataclass
class DesignResult:
    params: DesignParams
    objectives: Objectives | None
    seconds: float
    error: str = ""

    @property
    def feasible(self) -> bool:
        return self.objectives is not None

    def scored(self) -> Objectives:
        return self.objectives if self.objectives is not None else WORST


def evaluate_design(evaluator: Evaluator, params: DesignParams, horizon: int) -> DesignResult:
    """Run ``evaluator`` to ``horizon`` steps and reduce to (energy, peak T)."""
    t0 = time.perf_counter()
    try:
        traj = evaluator.run(params, horizon)
        e, tm = derived_scalars(traj)
        obj = Objectives(e, tm)
    except (SolverError, RolloutDivergence, GeometryError, ValueError) as exc:
        log.info("infeasible design %s: %s", params, exc)
        return DesignResult(params, None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")
    return DesignResult(params, obj, time.perf_counter() - t0)


@dataclass
class SweepPoint:
    value: float
    result: DesignResult


def sensitivity_sweep(
    evaluator: Evaluator,
    name: str,
    n_grid: int,
    horizon: int,
    base: DesignParams | None = None,
    span: tuple[float, float] | None = None,
) -> list[SweepPoint]:
    """Vary one coordinate over a uniform grid; infeasible points stay as gaps.

    ``span`` defaults to the coordinate's bounds; ``n_grid=1`` evaluates the midpoint.
    """
    if name not in PARAM_NAMES:
        raise ValueError(f"unknown parameter {name!r}")
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    base = base or DesignParams.midpoint()
    lo, hi = span or BOUNDS[name]
    values = [0.5 * (lo + hi)] if n_grid == 1 else list(np.linspace(lo, hi, n_grid))
    return [
        SweepPoint(float(v), evaluate_design(evaluator, base.with_values(**{name: float(v)}), horizon))
        for v in values
    ]


# --------------------------------------------------------------------------- Pareto ranking


def _as_array(points) -> np.ndarray:
    """(n, 2) minimization matrix from Objectives or raw (energy, t_max) pairs."""
    rows = [p.minimization() if isinstance(p, Objectives) else (-float(p[0]), float(p[1])) for p in points]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def non_dominated_sort(points) -> np.ndarray:
    """Fast non-dominated sorting; returns rank (1 = Pareto front) per point."""
    F = _as_array(points)
    n = len(F)
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    rank = np.zeros(n, dtype=np.int64)
    current = np.flatnonzero(count == 0)
    r = 1
    while current.size:
        rank[current] = r
        count = count - dom[current].sum(axis=0)
        count[rank > 0] = -1
        current = np.flatnonzero(count == 0)
        r += 1
    return rank


def pareto_front(points) -> tuple[np.ndarray, np.ndarray]:
    """(indices of rank-1 points in input order, ranks of all points)."""
    rank = non_dominated_sort(points)
    return np.flatnonzero(rank == 1), rank


def brute_force_front(points) -> np.ndarray:
    """O(n^2) reference: indices not dominated by any other point."""
    F = _as_array(points)
    keep = []
    for i in range(len(F)):
        if not any(
            np.all(F[j] <= F[i]) and np.any(F[j] < F[i]) for j in range(len(F)) if j != i
        ):
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def crowding_distance(points) -> np.ndarray:
    F = _as_array(points)
    n = len(F)
    d = np.zeros(n)
    if n <= 2:
        d[:] = np.inf
        return d
    for m in range(F.shape[1]):
        order = np.argsort(F[:, m], kind="stable")
        span = F[order[-1], m] - F[order[0], m]
        d[order[0]] = d[order[-1]] = np.inf
        if span == 0:
            continue
        d[order[1:-1]] += (F[order[2:], m] - F[order[:-2], m]) / span
    return d


def hypervolume(points, reference: tuple[float, float]) -> float:
    """Area dominated by ``points`` and bounded by ``reference`` (energy, t_max)."""
    F = _as_array(points)
    ref = np.array([-reference[0], reference[1]])
    F = F[np.all(F < ref, axis=1)]
    if F.size == 0:
        return 0.0
    F = F[np.lexsort((F[:, 1], F[:, 0]))]
    area, prev_y = 0.0, ref[1]
    for x, y in F:
        if y < prev_y:
            area += (ref[0] - x) * (prev_y - y)
            prev_y = y
    return float(area)


# --------------------------------------------------------------------------- NSGA-II


@dataclass(frozen=True)
class Nsga2Config:
    population: int = 16
    generations: int = 10
    crossover_prob: float = 0.9
    mutation_prob: float | None = None  # per gene; None means 1/d
    eta_crossover: float = 15.0
    eta_mutation: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise ValueError(f"population must be even and >= 4, got {self.population}")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


@dataclass
class Individual:
    x: np.ndarray
    result: DesignResult
    rank: int = 0
    crowding: float = 0.0

    @property
    def objectives(self) -> Objectives:
        return self.result.scored()


@dataclass
class GenerationRecord:
    generation: int
    front: list[Objectives]
    hypervolume: float
    evaluations: int
    feasible: int


@dataclass
class Nsga2Result:
    population: list[Individual]
    front: list[Individual]
    history: list[GenerationRecord]
    evaluations: int
    seconds: float


class AllInfeasible(RuntimeError):
    def __init__(self, history: list[GenerationRecord]):
        super().__init__(f"every design of generation {len(history) - 1} was infeasible")
        self.history = history


@dataclass
class DesignSpace:
    """The searched coordinates; everything else stays at ``base``."""

    names: tuple[str, ...] = PARAM_NAMES
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(BOUNDS))
    base: DesignParams = field(default_factory=DesignParams.midpoint)
    snap: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.bounds[n][0] for n in self.names])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.bounds[n][1] for n in self.names])

    def design(self, x: np.ndarray) -> DesignParams:
        return self.base.with_values(**{n: float(v) for n, v in zip(self.names, x)})

    def finish(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(x, self.lower, self.upper)
        return self.snap(x) if self.snap is not None else x


def grid_snapper(space_lower, space_upper, n_levels: int) -> Callable[[np.ndarray], np.ndarray]:
    """Round every coordinate to the nearest of ``n_levels`` evenly spaced values."""
    lo = np.asarray(space_lower, dtype=np.float64)
    hi = np.asarray(space_upper, dtype=np.float64)

    def snap(x):
        k = np.rint((x - lo) / (hi - lo) * (n_levels - 1))
        return lo + np.clip(k, 0, n_levels - 1) * (hi - lo) / (n_levels - 1)

    return snap


def sbx(rng, a, b, lo, hi, eta, prob_gene=0.5):
    """Bounded simulated-binary crossover on one parent pair."""
    c1, c2 = a.copy(), b.copy()
    for i in range(len(a)):
        if rng.random() > prob_gene or abs(a[i] - b[i]) < 1e-14:
            continue
        y1, y2 = min(a[i], b[i]), max(a[i], b[i])
        u = rng.random()
        beta = 1.0 + 2.0 * (y1 - lo[i]) / (y2 - y1)
        alpha = 2.0 - beta ** -(eta + 1)
        bq = (u * alpha) ** (1 / (eta + 1)) if u <= 1 / alpha else (1 / (2 - u * alpha)) ** (1 / (eta + 1))
        ch1 = 0.5 * ((y1 + y2) - bq * (y2 - y1))
        beta = 1.0 + 2.0 * (hi[i] - y2) / (y2 - y1)
        alpha = 2.0 - beta ** -(eta + 1)
        bq = (u * alpha) ** (1 / (eta + 1)) if u <= 1 / alpha else (1 / (2 - u * alpha)) ** (1 / (eta + 1))
        ch2 = 0.5 * ((y1 + y2) + bq * (y2 - y1))
        ch1, ch2 = min(max(ch1, lo[i]), hi[i]), min(max(ch2, lo[i]), hi[i])
        if rng.random() < 0.5:
            ch1, ch2 = ch2, ch1
        c1[i], c2[i] = ch1, ch2
    return c1, c2


def polynomial_mutation(rng, x, lo, hi, eta, prob):
    y = x.copy()
    for i in range(len(x)):
        if rng.random() >= prob:
            continue
        span = hi[i] - lo[i]
        d1, d2 = (y[i] - lo[i]) / span, (hi[i] - y[i]) / span
        u = rng.random()
        p = 1.0 / (eta + 1)
        if u < 0.5:
            dq = (2 * u + (1 - 2 * u) * (1 - d1) ** (eta + 1)) ** p - 1
        else:
            dq = 1 - (2 * (1 - u) + 2 * (u - 0.5) * (1 - d2) ** (eta + 1)) ** p
        y[i] = min(max(y[i] + dq * span, lo[i]), hi[i])
    return y


def _assign(pop: list[Individual]) -> None:
    objs = [ind.objectives for ind in pop]
    rank = non_dominated_sort(objs)
    for r in np.unique(rank):
        members = np.flatnonzero(rank == r)
        cd = crowding_distance([objs[k] for k in members])
        for k, d in zip(members, cd):
            pop[k].rank = int(r)
            pop[k].crowding = float(d)


def _better(a: Individual, b: Individual) -> bool:
    return a.rank < b.rank or (a.rank == b.rank and a.crowding > b.crowding)


def _survive(pool: list[Individual], n: int) -> list[Individual]:
    _assign(pool)
    order = sorted(range(len(pool)), key=lambda k: (pool[k].rank, -pool[k].crowding, k))
    return [pool[k] for k in order[:n]]


def nsga2(
    evaluator: Evaluator,
    space: DesignSpace,
    config: Nsga2Config,
    horizon: int,
    reference: tuple[float, float] = (0.0, 2.0),
) -> Nsga2Result:
    """Elitist multi-objective search (maximize energy, minimize peak T)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    lo, hi = space.lower, space.upper
    d = len(space.names)
    pm = config.mutation_prob if config.mutation_prob is not None else 1.0 / d
    evals = 0
    history: list[GenerationRecord] = []

    def evaluate(xs):
        nonlocal evals
        out = []
        for x in xs:
            out.append(Individual(x, evaluate_design(evaluator, space.design(x), horizon)))
            evals += 1
        return out

    def record(gen, pop):
        front = [ind for ind in pop if ind.rank == 1 and ind.result.feasible]
        objs = [ind.objectives for ind in front]
        n_ok = sum(ind.result.feasible for ind in pop)
        history.append(GenerationRecord(gen, objs, hypervolume(objs, reference) if objs else 0.0, evals, n_ok))
        if n_ok == 0:
            raise AllInfeasible(history)

    pop = evaluate([space.finish(lo + rng.random(d) * (hi - lo)) for _ in range(config.population)])
    _assign(pop)
    record(0, pop)
    for gen in range(1, config.generations + 1):
        children = []
        while len(children) < config.population:
            parents = []
            for _ in range(2):
                i, j = rng.integers(len(pop), size=2)
                parents.append(pop[i] if not _better(pop[j], pop[i]) else pop[j])
            a, b = parents[0].x, parents[1].x
            if rng.random() < config.crossover_prob:
                a, b = sbx(rng, a, b, lo, hi, config.eta_crossover)
            for c in (a, b):
                children.append(space.finish(polynomial_mutation(rng, c, lo, hi, config.eta_mutation, pm)))
        pop = _survive(pop + evaluate(children[: config.population]), config.population)
        record(gen, pop)
    front = [ind for ind in pop if ind.rank == 1]
    return Nsga2Result(pop, front, history, evals, time.perf_counter() - t0)


def exhaustive_front(evaluator: Evaluator, space: DesignSpace, n_levels: int, horizon: int):
    """Evaluate every point of an ``n_levels``^d grid; returns (grid points, results, front indices)."""
    axes = [np.linspace(l, h, n_levels) for l, h in zip(space.lower, space.upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    results = [evaluate_design(evaluator, space.design(x), horizon) for x in mesh]
    front, _ = pareto_front([r.scored() for r in results])
    return mesh, results, front
