"""Dataset generation, normalization, one-step training and fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geom import (
    BOUNDS,
    FIELDS,
    DesignParams,
    DiscreteDomain,
    GeometryError,
    GridSpec,
    PointCloud,
    build_domain,
    feature_node_count,
    sample_geometry_cloud,
    sample_params,
)
from .model import BatchInputs, NbmModel, Normalization, forward_batch
from .refsolver import DEFAULT_DT, PHYSICS, Physics, SolverError, Trajectory, simulate

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Case:
    params: DesignParams
    cloud_seed: int
    trajectory: Trajectory
    split: str  # "train" | "test"

    @property
    def domain(self) -> DiscreteDomain:
        return self.trajectory.domain

    def cloud(self, size: int) -> PointCloud:
        return sample_geometry_cloud(self.domain, size, self.cloud_seed)

    def transitions(self) -> list[tuple[int, int]]:
        return [(t, t + 1) for t in range(len(self.trajectory) - 1)]


@dataclass
class Dataset:
    cases: list[Case]
    grid: GridSpec
    dt: float
    train_horizon: int
    test_horizon: int
    seed: int
    cloud_size: int
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(BOUNDS))
    resampled: int = 0

    def split(self, name: str) -> list[Case]:
        return [c for c in self.cases if c.split == name]

    @property
    def train(self) -> list[Case]:
        return self.split("train")

    @property
    def test(self) -> list[Case]:
        return self.split("test")


def generate_dataset(
    n_train: int,
    n_test: int,
    train_horizon: int,
    test_horizon: int,
    bounds: dict[str, tuple[float, float]] | None = None,
    grid: GridSpec | None = None,
    dt: float = DEFAULT_DT,
    seed: int = 0,
    cloud_size: int | None = None,
    physics: Physics = PHYSICS,
) -> Dataset:
    """Uniformly sampled designs with reference trajectories.

    Test cases run ``test_horizon`` steps, train cases ``train_horizon``.
    Designs the solver (or the discretization) rejects are redrawn; the
    number of redraws is recorded.
    """
    if test_horizon < train_horizon:
        raise ValueError("test horizon must be at least the train horizon")
    grid = grid or GridSpec()
    bounds = dict(bounds or BOUNDS)
    cloud_size = cloud_size or feature_node_count(grid)
    rng = np.random.default_rng(seed)
    budget = 10 * (n_train + n_test)
    attempts = resampled = 0
    cases: list[Case] = []
    for split, count, horizon in (("train", n_train, train_horizon), ("test", n_test, test_horizon)):
        made = 0
        while made < count:
            if attempts >= budget:
                raise RuntimeError(f"resample budget of {budget} draws exhausted")
            attempts += 1
            params = sample_params(rng, bounds)
            cloud_seed = int(rng.integers(2**31 - 1))
            try:
                traj = simulate(params, grid, horizon, dt, physics=physics)
            except (SolverError, GeometryError) as exc:
                log.info("resampling rejected design: %s", exc)
                resampled += 1
                continue
            cases.append(Case(params, cloud_seed, traj, split))
            made += 1
    return Dataset(cases, grid, dt, train_horizon, test_horizon, seed, cloud_size, bounds, resampled)


def fit_normalization(cases: list[Case] | Dataset) -> Normalization:
    """Per-field mean and std over every state of the training cases."""
    if isinstance(cases, Dataset):
        cases = cases.train
    if not cases:
        raise ValueError("no training cases to fit normalization on")
    return _normalization({f: [c.trajectory.field_series(f) for c in cases] for f in FIELDS})


def fit_normalization_series(units: list["Unit"]) -> Normalization:
    """Same statistics over training units (single cells or whole packs)."""
    if not units:
        raise ValueError("no training units to fit normalization on")
    return _normalization({f: [s[f] for u in units for s in u.series] for f in FIELDS})


def _normalization(blocks: dict[str, list[np.ndarray]]) -> Normalization:
    mean, scale = {}, {}
    for f, arrays in blocks.items():
        vals = np.concatenate([a.ravel() for a in arrays])
        mean[f] = float(vals.mean())
        scale[f] = float(max(vals.std(), 1e-8))
    return Normalization(mean, scale)


# --------------------------------------------------------------------------- batching


@dataclass
class Unit:
    """One training unit: a single cell, or every cell of a pack, over time."""

    domains: list[DiscreteDomain]
    clouds: list[PointCloud]
    series: list[dict[str, np.ndarray]]  # per cell: field -> (T, M)
    tag: int = 0  # index of the originating case, for split bookkeeping

    @property
    def n_cells(self) -> int:
        return len(self.domains)

    @property
    def length(self) -> int:
        return next(iter(self.series[0].values())).shape[0]


def units_from_cases(cases: list[Case], cloud_size: int, tags: list[int] | None = None) -> list[Unit]:
    tags = tags if tags is not None else list(range(len(cases)))
    out = []
    for tag, c in zip(tags, cases):
        series = {f: c.trajectory.field_series(f) for f in FIELDS}
        out.append(Unit([c.domain], [c.cloud(cloud_size)], [series], tag))
    return out


class TransitionSource:
    """Padded, normalized arrays for every (unit, t) transition.

    Units with different cell counts live in separate groups; a batch never
    mixes groups.
    """

    def __init__(self, units: list[Unit], norm: Normalization, horizon: int | None = None, depth: int = 1):
        self.norm = norm
        self.depth = depth
        self.groups: list[dict] = []
        by_n: dict[int, list[Unit]] = {}
        for u in units:
            by_n.setdefault(u.n_cells, []).append(u)
        for n in sorted(by_n):
            self.groups.append(self._build(by_n[n], n, horizon))
        self.index = [
            (g, k, t)
            for g, grp in enumerate(self.groups)
            for k in range(len(grp["units"]))
            for t in range(grp["lengths"][k] - depth)
        ]

    def _build(self, units: list[Unit], n: int, horizon: int | None) -> dict:
        U = len(units)
        lengths = [u.length if horizon is None else min(u.length, horizon + 1) for u in units]
        T = max(lengths)
        ng = len(units[0].clouds[0])
        cloud = np.zeros((U, n, ng, units[0].clouds[0].features().shape[1]))
        coords, values, pool, mask = {}, {}, {}, {}
        for f in FIELDS:
            m = max(d.field_size(f) for u in units for d in u.domains)
            coords[f] = np.zeros((U, n, m, 2))
            values[f] = np.zeros((U, n, T, m))
            pool[f] = np.zeros((U, n, 1, m))
            mask[f] = np.zeros((U, n, m))
        for k, u in enumerate(units):
            for j in range(n):
                cloud[k, j] = u.clouds[j].features()
                for f in FIELDS:
                    size = u.domains[j].field_size(f)
                    coords[f][k, j, :size] = u.domains[j].field_coords(f)
                    values[f][k, j, : lengths[k], :size] = self.norm.forward(
                        f, u.series[j][f][: lengths[k]]
                    )
                    pool[f][k, j, 0, :size] = 1.0 / size
                    mask[f][k, j, :size] = 1.0
        return dict(
            units=units, lengths=lengths, n=n, cloud=cloud, coords=coords,
            values=values, pool=pool, mask=mask, tags=[u.tag for u in units],
        )

    def __len__(self) -> int:
        return len(self.index)

    def batches(self, batch_size: int, rng: np.random.Generator | None):
        """Index batches; shuffled when ``rng`` is given, never mixing groups."""
        order = np.arange(len(self.index)) if rng is None else rng.permutation(len(self.index))
        pending: dict[int, list[int]] = {}
        for i in order:
            g = self.index[i][0]
            pending.setdefault(g, []).append(int(i))
            if len(pending[g]) == batch_size:
                yield pending.pop(g)
        for g in sorted(pending):
            yield pending[g]

    def gather(self, idx: list[int]):
        """Inputs at t and targets at t+1..t+depth for a batch of transitions."""
        g = self.index[idx[0]][0]
        grp = self.groups[g]
        ks = np.array([self.index[i][1] for i in idx])
        ts = np.array([self.index[i][2] for i in idx])
        n = grp["n"]
        B = len(idx)

        def fold(a):
            return a.reshape((B * n,) + a.shape[2:])

        inputs = BatchInputs(
            cloud=fold(grp["cloud"][ks]),
            coords={f: fold(grp["coords"][f][ks]) for f in FIELDS},
            values={f: fold(grp["values"][f][ks, :, ts])[..., None] for f in FIELDS},
            pool={f: fold(grp["pool"][f][ks]) for f in FIELDS},
            n_cells=n,
        )
        targets = [
            {f: fold(grp["values"][f][ks, :, ts + s])[..., None] for f in FIELDS}
            for s in range(1, self.depth + 1)
        ]
        mask = {f: fold(grp["mask"][f][ks])[..., None] for f in FIELDS}
        tags = sorted({grp["tags"][k] for k in ks})
        return inputs, targets, mask, tags


def batch_loss(model: NbmModel, inputs: BatchInputs, targets: list[dict], mask: dict, ops=ad.recorded):
    """Sum over fields (and curriculum steps) of masked normalized MSE."""
    total = None
    cur = inputs
    for s, tgt in enumerate(targets):
        pred = forward_batch(model, cur, ops)
        for f in FIELDS:
            term = ops_mse(pred[f], tgt[f], mask[f], ops)
            total = term if total is None else ops.add(total, term)
        if s + 1 < len(targets):
            cur = BatchInputs(
                cur.cloud, cur.coords,
                {f: (ops.mul(pred[f], mask[f]) if ops is ad.recorded else pred[f] * mask[f]) for f in FIELDS},
                cur.pool, cur.n_cells,
            )
    return ops.scale(total, 1.0 / len(targets))


def ops_mse(pred, target, weight, ops):
    if ops is ad.recorded:
        return ad.mse(pred, target, weight)
    d = pred - target
    return np.asarray(np.sum(weight * d * d) / weight.sum())


# --------------------------------------------------------------------------- optimization


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    curriculum: int = 1
    cosine_decay: bool = True
    input_noise: float = 0.0  # std of Gaussian noise on normalized inputs


    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.curriculum < 1:
            raise ValueError("curriculum depth must be >= 1")
        if self.input_noise < 0:
            raise ValueError("input noise must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: ad.ParamSet, names: list[str], cfg: TrainConfig):
        self.params = params
        self.names = list(names)
        self.cfg = cfg
        self.m = {n: np.zeros_like(params[n].value) for n in self.names}
        self.v = {n: np.zeros_like(params[n].value) for n in self.names}
        self.t = 0

    def step(self, lr: float) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip grad norm."""
        cfg = self.cfg
        grads = {
            n: (self.params[n].grad if self.params[n].grad is not None else np.zeros_like(self.m[n]))
            for n in self.names
        }
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        factor = min(1.0, cfg.clip_norm / norm) if cfg.clip_norm and norm > 0 else 1.0
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for n in self.names:
            g = grads[n] * factor
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            if lr != 0.0:
                self.params[n].value -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + cfg.adam_eps)
        return norm


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    steps: int = 0
    tags_seen: set[int] = field(default_factory=set)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine_decay or total <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


def train_on_source(
    model: NbmModel,
    source: TransitionSource,
    config: TrainConfig,
    trainable: list[str] | None = None,
    forbidden_tags: set[int] | None = None,
    log_every: int = 0,
) -> TrainHistory:
    """Run ``config.epochs`` passes of Adam over ``source``, in place on ``model``."""
    names = model.params.names() if trainable is None else list(trainable)
    opt = Adam(model.params, names, config)
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 1])
    hist = TrainHistory()
    n_batches = sum(1 for _ in source.batches(config.batch_size, None))
    total = config.epochs * n_batches
    for epoch in range(config.epochs):
        losses = []
        for idx in source.batches(config.batch_size, rng):
            inputs, targets, mask, tags = source.gather(idx)
            if config.input_noise > 0:
                inputs.values = {
                    f: v + config.input_noise * noise_rng.standard_normal(v.shape) * mask[f]
                    for f, v in inputs.values.items()
                }
            if forbidden_tags and forbidden_tags.intersection(tags):
                raise AssertionError(f"held-out cases {sorted(forbidden_tags.intersection(tags))} reached training")
            hist.tags_seen.update(tags)
            model.params.zero_grad()
            with ad.Tape() as tape:
                loss = batch_loss(model, inputs, targets, mask)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {hist.steps}")
            ad.backward(tape, loss)
            hist.grad_norm.append(opt.step(_lr_at(config, hist.steps, total)))
            hist.steps += 1
            losses.append(val)
        hist.loss.append(float(np.mean(losses)) if losses else float("nan"))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.3e", epoch + 1, hist.loss[-1])
    model.params.zero_grad()
    return hist


def train(
    model: NbmModel,
    dataset: Dataset,
    config: TrainConfig,
    log_every: int = 0,
) -> tuple[NbmModel, TrainHistory]:
    """One-step (or k-step curriculum) training on the train split only.

    The model's normalization must already be fitted.
    """
    cases = dataset.cases
    train_tags = [k for k, c in enumerate(cases) if c.split == "train"]
    test_tags = {k for k, c in enumerate(cases) if c.split != "train"}
    units = units_from_cases([cases[k] for k in train_tags], dataset.cloud_size, train_tags)
    source = TransitionSource(units, model.norm, depth=config.curriculum)
    hist = train_on_source(model, source, config, forbidden_tags=test_tags, log_every=log_every)
    return model, hist


def fine_tune(
    model: NbmModel,
    source: TransitionSource,
    config: TrainConfig,
    freeze: list[str] | tuple[str, ...] = (),
) -> tuple[NbmModel, TrainHistory]:
    """Train a copy of ``model`` with the named parameter groups held fixed."""
    tuned = model.copy()
    frozen = set()
    for group in freeze:
        frozen.update(tuned.group_names(group))
    trainable = [n for n in tuned.params.names() if n not in frozen]
    if not trainable:
        return tuned, TrainHistory()
    hist = train_on_source(tuned, source, config, trainable=trainable)
    return tuned, hist


def train_stages(
    model: NbmModel,
    dataset: Dataset,
    stages: list[TrainConfig],
    log_every: int = 0,
) -> tuple[NbmModel, list[TrainHistory]]:
    """Run several training configs back to back (e.g. one-step, then a k-step curriculum)."""
    hists = []
    for cfg in stages:
        model, h = train(model, dataset, cfg, log_every)
        hists.append(h)
    return model, hists
