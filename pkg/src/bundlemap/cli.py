"""Command-line entry point: thin wrappers over the module pipelines.

Every command reads a JSON run config, writes its outputs under ``--out``
and leaves a ``manifest.json`` next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .geom import FIELDS, PARAM_NAMES, BOUNDS, DesignParams, GeometryError, GridSpec, build_domain, feature_node_count, sample_geometry_cloud
from .io import FormatError, load_checkpoint, load_dataset, pack_cases_bytes, save_checkpoint, save_dataset
from .model import NbmConfig, NbmModel, RolloutDivergence, rollout
from .refsolver import DEFAULT_DT, SolverError, initial_state, simulate

log = logging.getLogger("bundlemap")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config


@dataclass
class DataSection:
    n_train: int = 64
    n_test: int = 16
    train_horizon: int = 30
    test_horizon: int = 60
    cloud_size: int | None = None


@dataclass
class TrainSection:
    stages: list = field(default_factory=lambda: [
        {"epochs": 60},
        {"epochs": 15, "curriculum": 4, "learning_rate": 5e-4},
        {"epochs": 10, "curriculum": 10, "learning_rate": 3e-4},
    ])


@dataclass
class PathSection:
    dataset: str = "dataset.nbmd"
    checkpoint: str = "model.nbmc"


@dataclass
class RolloutSection:
    case: int = 0
    n_steps: int | None = None


@dataclass
class ManifoldSection:
    groups: dict = field(default_factory=lambda: {
        "cell": ["width", "height"],
        "tab": ["tab_center", "tab_width"],
    })
    n_probes: int = 30


@dataclass
class OptimizeSection:
    population: int = 16
    generations: int = 10
    horizon: int = 30
    names: list = field(default_factory=lambda: list(PARAM_NAMES))
    grid_levels: int | None = None
    cutoff: float | None = None
    reference: list = field(default_factory=lambda: [0.0, 2.0])


@dataclass
class PackSection:
    n_cells: int = 5
    current_per_cell: float = 2.0
    conductance: float = 0.1
    n_steps: int = 20
    widths: list | None = None


@dataclass
class TransferSection:
    ladder: list = field(default_factory=lambda: [0, 8, 16, 32, 48])
    scratch_budget: int = 48
    n_test: int = 6
    profile_cells: int = 10
    horizon: int = 10
    conductance: float = 0.1
    freeze: list = field(default_factory=lambda: ["encoders"])
    finetune: dict = field(default_factory=lambda: {"epochs": 60, "batch_size": 8})
    scratch: dict = field(default_factory=lambda: {"epochs": 60, "batch_size": 8})


@dataclass
class BenchSection:
    repeats: int = 10
    n_steps: int = 60


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    grid: list = field(default_factory=lambda: [12, 12])
    dt: float = DEFAULT_DT
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathSection = field(default_factory=PathSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    manifold: ManifoldSection = field(default_factory=ManifoldSection)
    optimize: OptimizeSection = field(default_factory=OptimizeSection)
    pack: PackSection = field(default_factory=PackSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(*self.grid)

    def nbm_config(self) -> NbmConfig:
        return NbmConfig.from_dict({**self.model, "dt": self.dt})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        sub = known[k].type
        sub_cls = globals().get(sub) if isinstance(sub, str) else None
        if sub_cls is not None and dataclasses.is_dataclass(sub_cls):
            kwargs[k] = _section(sub_cls, v, f"{where}.{k}")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _section(RunConfig, raw, "config")
    if seed is not None:
        cfg.seed = seed
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {cfg.schema_version!r} is not {SCHEMA_VERSION}")
    try:
        cfg.grid_spec
        cfg.nbm_config()
        _train_configs(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    d = cfg.data
    if d.test_horizon < d.train_horizon:
        raise ConfigError("data.test_horizon must be >= data.train_horizon")
    if min(d.n_train, d.train_horizon) < 1 or d.n_test < 0:
        raise ConfigError("data counts and horizons must be positive")
    for name in cfg.optimize.names:
        if name not in PARAM_NAMES:
            raise ConfigError(f"optimize.names: unknown parameter {name!r}")
    for g, names in cfg.manifold.groups.items():
        if not set(names) <= set(PARAM_NAMES):
            raise ConfigError(f"manifold group {g!r} names unknown parameters")


def _train_configs(cfg: RunConfig):
    from .train import TrainConfig

    out = []
    for k, stage in enumerate(cfg.train.stages):
        unknown = set(stage) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"train.stages[{k}]: unknown keys {sorted(unknown)}")
        out.append(TrainConfig(**{"seed": cfg.seed + k, **stage}))
    return out


# --------------------------------------------------------------------------- helpers


class Run:
    def __init__(self, command: str, cfg: RunConfig, out: Path, config_path: str, evaluator: str):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.config_path = config_path
        self.evaluator = evaluator
        self.outputs: list[str] = []
        self.summary: dict = {}
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def wrote(self, path: Path) -> Path:
        self.outputs.append(str(Path(path).relative_to(self.out)) if Path(path).is_relative_to(self.out) else str(path))
        return path

    def csv(self, name: str, header, rows) -> Path:
        from .metrics import write_csv

        return self.wrote(write_csv(self.out / name, header, rows))

    def manifest(self, status: str, error: str = "") -> None:
        import scipy

        doc = {
            "command": self.command,
            "status": status,
            "error": error,
            "config_path": str(self.config_path),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "evaluator": self.evaluator,
            "versions": {
                "bundlemap": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "platform": platform.platform(),
            },
            "wall_clock_seconds": time.perf_counter() - self.t0,
            "outputs": self.outputs,
            "summary": self.summary,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _dataset(run: Run):
    return load_dataset(run.path(run.cfg.paths.dataset))


def _model(run: Run) -> NbmModel:
    model, _ = load_checkpoint(run.path(run.cfg.paths.checkpoint))
    return model


def _evaluator(run: Run, cutoff=None):
    from .optimize import NbmEvaluator, RefEvaluator

    grid = run.cfg.grid_spec
    if run.evaluator == "refsolver":
        return RefEvaluator(grid, run.cfg.dt, cutoff)
    return NbmEvaluator(_model(run), grid, cutoff, run.cfg.data.cloud_size, run.cfg.seed)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(run: Run) -> None:
    from .train import generate_dataset

    d = run.cfg.data
    ds = generate_dataset(d.n_train, d.n_test, d.train_horizon, d.test_horizon, None, run.cfg.grid_spec,
                          run.cfg.dt, run.cfg.seed, d.cloud_size)
    run.wrote(save_dataset(ds, run.path(run.cfg.paths.dataset)))
    run.summary = {"cases": len(ds.cases), "resampled": ds.resampled}


def cmd_train(run: Run) -> None:
    from .train import fit_normalization, train_stages

    ds = _dataset(run)
    model = NbmModel.initialize(run.cfg.nbm_config(), seed=run.cfg.seed)
    model.norm = fit_normalization(ds)
    stages = _train_configs(run.cfg)
    model, hists = train_stages(model, ds, stages)
    rows = [(k, e, loss) for k, h in enumerate(hists) for e, loss in enumerate(h.loss)]
    run.csv("train_loss.csv", ["stage", "epoch", "loss"], rows)
    run.wrote(save_checkpoint(model, run.path(run.cfg.paths.checkpoint), {"stages": [s.to_dict() for s in stages]}))
    run.summary = {"final_loss": hists[-1].loss[-1] if hists and hists[-1].loss else None,
                   "parameters": model.params.size()}


def _rollouts(model, ds):
    from .model import prepare

    preds, one_step = [], []
    for c in ds.test:
        cloud = c.cloud(ds.cloud_size)
        traj = c.trajectory
        preds.append(rollout(model, c.domain, cloud, traj.states[0], len(traj) - 1))
        prep = prepare(model, c.domain, cloud)
        one_step.append([prep.step([s])[0] for s in traj.states[:-1]])
    return preds, one_step


def cmd_eval(run: Run) -> None:
    from .metrics import extrapolation_curves, field_ranges, histogram_overlap, minmax_calibration, nmae
    from .refsolver import Trajectory

    ds = _dataset(run)
    model = _model(run)
    truths = [c.trajectory for c in ds.test]
    ranges = field_ranges(truths)
    preds, one_step = _rollouts(model, ds)
    rows, summary = [], {f: {"one_step": [], "rollout": []} for f in FIELDS}
    for k, (c, p, os_) in enumerate(zip(ds.test, preds, one_step)):
        shifted = Trajectory(c.params, ds.grid, ds.dt, [c.trajectory.states[0]] + [
            dataclasses.replace(s, t=j + 1) for j, s in enumerate(os_)
        ])
        for f in FIELDS:
            a = nmae(shifted, c.trajectory, f, ranges[f], slice(1, None))
            b = nmae(p, c.trajectory, f, ranges[f])
            summary[f]["one_step"].append(a)
            summary[f]["rollout"].append(b)
            rows.append((k, f, a, b))
    run.csv("nmae_cases.csv", ["case", "field", "one_step_nmae", "rollout_nmae"], rows)
    curves = extrapolation_curves(preds, truths, ranges, ds.train_horizon)
    run.csv("nmae_curves.csv", ["step", "in_window"] + list(FIELDS),
            [(t, int(t <= curves.boundary)) + tuple(curves.curves[f][t] for f in FIELDS)
             for t in range(len(curves.curves[FIELDS[0]]))])
    run.csv("histogram_overlap.csv", ["field", "overlap"],
            [(f, histogram_overlap(np.concatenate([p.field_series(f).ravel() for p in preds]),
                                   np.concatenate([t.field_series(f).ravel() for t in truths]))) for f in FIELDS])
    mm = minmax_calibration(preds[0], truths[0], "T")
    run.csv("minmax_T_case0.csv", ["step", "pred_max", "pred_min", "truth_max", "truth_min"],
            [(t,) + tuple(r) for t, r in enumerate(mm)])
    run.summary = {
        f: {
            "one_step_mean": float(np.mean(v["one_step"])),
            "one_step_std": float(np.std(v["one_step"])),
            "rollout_mean": float(np.mean(v["rollout"])),
            "rollout_std": float(np.std(v["rollout"])),
            "in_window": curves.window_mean(f, True),
            "post_window": curves.window_mean(f, False),
        }
        for f, v in summary.items()
    }
    run.summary["ranges"] = ranges
    run.summary["diverged"] = curves.diverged


def cmd_rollout(run: Run) -> None:
    from .metrics import field_ranges, nmae
    from .refsolver import Trajectory

    ds = _dataset(run)
    case = ds.test[run.cfg.rollout.case] if ds.test else ds.cases[run.cfg.rollout.case]
    truth = case.trajectory
    n = run.cfg.rollout.n_steps or len(truth) - 1
    domain = case.domain
    if run.evaluator == "refsolver":
        from .refsolver import step as ref_step

        states = [truth.states[0]]
        for _ in range(n):
            states.append(ref_step(domain, case.params, states[-1], ds.dt))
        pred = Trajectory(case.params, ds.grid, ds.dt, states)
    else:
        pred = rollout(_model(run), domain, case.cloud(ds.cloud_size), truth.states[0], n)
    rows = []
    for t, s in enumerate(pred.states):
        for f in FIELDS:
            for i, v in enumerate(s.values[f]):
                rows.append((t, f, i, v))
    run.csv("trajectory.csv", ["step", "field", "node", "value"], rows)
    run.csv("scalars.csv", ["step", "voltage", "soc", "t_max"],
            [(t, v, s, m) for t, (v, s, m) in enumerate(zip(pred.voltage, pred.soc, pred.t_max))])
    m = min(len(pred), len(truth))
    if m > 1:
        ranges = field_ranges([c.trajectory for c in (ds.test or ds.cases)])
        p = Trajectory(pred.params, pred.grid, pred.dt, pred.states[:m])
        q = Trajectory(truth.params, truth.grid, truth.dt, truth.states[:m])
        run.summary = {"nmae": {f: nmae(p, q, f, ranges[f]) for f in FIELDS},
                       "max_abs_diff": max(float(np.max(np.abs(p.field_series(f) - q.field_series(f)))) for f in FIELDS)}


def cmd_manifold(run: Run) -> None:
    from .metrics import manifold_correlation

    model = _model(run)
    mc = run.cfg.manifold
    rows = []
    for name, group in mc.groups.items():
        c = manifold_correlation(model, group, mc.n_probes, run.cfg.seed, run.cfg.grid_spec, run.cfg.data.cloud_size)
        rows.append((name, "+".join(group), "" if c.r is None else c.r, int(c.degenerate), c.n_pairs, c.mean_geodesic))
        run.summary[name] = {"r": c.r, "degenerate": c.degenerate, "mean_geodesic": c.mean_geodesic}
    run.csv("manifold.csv", ["group", "parameters", "pearson_r", "degenerate", "pairs", "mean_geodesic"], rows)


def cmd_optimize(run: Run) -> None:
    from .optimize import DesignSpace, Nsga2Config, evaluate_design, grid_snapper, nsga2

    oc = run.cfg.optimize
    ev = _evaluator(run, oc.cutoff)
    space = DesignSpace(tuple(oc.names))
    if oc.grid_levels:
        space.snap = grid_snapper(space.lower, space.upper, oc.grid_levels)
    res = nsga2(ev, space, Nsga2Config(oc.population, oc.generations, seed=run.cfg.seed), oc.horizon, tuple(oc.reference))
    run.csv("front.csv", list(PARAM_NAMES) + ["energy", "t_max", "rank", "crowding"],
            [tuple(ind.result.params.to_array()) + (ind.objectives.energy, ind.objectives.t_max, ind.rank, ind.crowding)
             for ind in sorted(res.front, key=lambda i: -i.objectives.energy)])
    run.csv("history.csv", ["generation", "front_size", "hypervolume", "evaluations", "feasible"],
            [(h.generation, len(h.front), h.hypervolume, h.evaluations, h.feasible) for h in res.history])
    base = evaluate_design(ev, DesignParams.midpoint(), oc.horizon)
    best = max(res.front, key=lambda i: i.objectives.energy)
    run.summary = {
        "evaluations": res.evaluations,
        "mean_evaluation_seconds": float(np.mean([i.result.seconds for i in res.population])),
        "baseline": dataclasses.asdict(base.objectives) if base.feasible else None,
        "best_energy": best.objectives.energy,
        "energy_gain_vs_baseline": (best.objectives.energy / base.objectives.energy - 1.0) if base.feasible else None,
    }


def cmd_pack_sim(run: Run) -> None:
    from .pack import PackConfig, cell_trajectories, simulate_pack

    pc = run.cfg.pack
    base = DesignParams.midpoint().with_values(applied_current=pc.current_per_cell)
    widths = pc.widths or [base.width] * pc.n_cells
    if len(widths) != pc.n_cells:
        raise ConfigError("pack.widths must list one width per cell")
    cells = tuple(base.with_values(width=float(w)) for w in widths)
    config = PackConfig(cells, pc.current_per_cell * pc.n_cells, pc.conductance)
    states = simulate_pack(config, run.cfg.grid_spec, pc.n_steps, run.cfg.dt)
    run.csv("pack_currents.csv", ["step", "v_shared"] + [f"I_{k}" for k in range(pc.n_cells)],
            [(t, s.v_shared) + tuple(s.currents) for t, s in enumerate(states)])
    trajs = cell_trajectories(config, run.cfg.grid_spec, run.cfg.dt, states)
    run.csv("pack_tmax.csv", ["step"] + [f"Tmax_{k}" for k in range(pc.n_cells)],
            [(t,) + tuple(tr.t_max[t] for tr in trajs) for t in range(len(states))])
    from .pack import PackCase

    run.wrote(run.path("pack.nbmd"))
    run.path("pack.nbmd").write_bytes(
        pack_cases_bytes([PackCase(config, list(range(pc.n_cells)), states, "test")], run.cfg.grid_spec, run.cfg.dt)
    )


def cmd_pack_transfer(run: Run) -> None:
    from .pack import TransferConfig, transfer_experiment
    from .train import TrainConfig

    tc = run.cfg.transfer
    cfg = TransferConfig(
        tuple(tc.ladder), tc.scratch_budget, tc.n_test, tc.profile_cells, tc.horizon, tc.conductance,
        tuple(tc.freeze), TrainConfig(**{"seed": run.cfg.seed, **tc.finetune}),
        TrainConfig(**{"seed": run.cfg.seed, **tc.scratch}), run.cfg.seed,
    )
    rep = transfer_experiment(_model(run), cfg, run.cfg.grid_spec, run.cfg.data.cloud_size)
    run.csv("transfer.csv", ["model", "samples"] + [f"nmae_{f}" for f in FIELDS] + ["profile_ratio", "diverged"],
            [(r.label, r.samples) + tuple(r.result.nmae[f] for f in FIELDS) + (r.result.profile_ratio(), r.result.diverged)
             for r in rep.rows])
    prof_rows = []
    for r in rep.rows:
        n = len(r.result.profile[FIELDS[0]])
        for k in range(n):
            prof_rows.append((r.label, k, k / (n - 1)) + tuple(r.result.profile[f][k] for f in FIELDS))
    run.csv("transfer_profile.csv", ["model", "cell", "normalized_index"] + [f"nmae_{f}" for f in FIELDS], prof_rows)
    run.summary = {r.label: r.result.nmae for r in rep.rows}


def cmd_grad_check(run: Run) -> None:
    from .gradcheck import run_all

    rows = run_all(seed=run.cfg.seed)
    run.csv("grad_check.csv", ["check", "max_rel_error", "coordinates", "ok"],
            [(r[0], r[1].max_rel_error, r[1].n_checked, int(r[1].ok)) for r in rows])
    failed = [r[0] for r in rows if not r[1].ok]
    run.summary = {"failed": failed, "checks": len(rows)}
    if failed:
        raise NumericFailure(f"gradient check failed: {', '.join(failed)}")


def bench_timings(model: NbmModel, params: DesignParams, grid: GridSpec, n_steps: int, repeats: int, dt: float,
                  cloud_size: int | None = None, seed: int = 0) -> dict:
    """Median wall-clock of a full-horizon surrogate rollout and of the reference simulation."""
    domain = build_domain(params, grid)
    cloud = sample_geometry_cloud(domain, cloud_size or feature_node_count(grid), seed)
    init = initial_state(domain)
    rollout(model, domain, cloud, init, n_steps)  # warm caches on both sides
    simulate(params, grid, n_steps, dt)
    t_nbm, t_ref = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        rollout(model, domain, cloud, init, n_steps)
        t_nbm.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        simulate(params, grid, n_steps, dt)
        t_ref.append(time.perf_counter() - t0)
    s, r = statistics.median(t_nbm), statistics.median(t_ref)
    return {"surrogate_seconds": s, "refsolver_seconds": r, "ratio": r / s}


def cmd_bench(run: Run) -> None:
    bc = run.cfg.bench
    res = bench_timings(_model(run), DesignParams.midpoint(), run.cfg.grid_spec, bc.n_steps, bc.repeats,
                        run.cfg.dt, run.cfg.data.cloud_size, run.cfg.seed)
    run.csv("bench.csv", ["surrogate_seconds", "refsolver_seconds", "ratio"],
            [(res["surrogate_seconds"], res["refsolver_seconds"], res["ratio"])])
    run.summary = res
    print(f"surrogate {res['surrogate_seconds']:.4f}s refsolver {res['refsolver_seconds']:.4f}s ratio {res['ratio']:.1f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "manifold": cmd_manifold,
    "optimize": cmd_optimize,
    "pack-sim": cmd_pack_sim,
    "pack-transfer": cmd_pack_transfer,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
}


class NumericFailure(RuntimeError):
    pass


def _category(exc: BaseException) -> tuple[int, str]:
    from .optimize import AllInfeasible
    from .pack import PackError
    from .train import TrainingDiverged

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO, "io"
    if isinstance(exc, (SolverError, RolloutDivergence, TrainingDiverged, AllInfeasible, PackError,
                        NumericFailure, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (GeometryError, ValueError, KeyError, TypeError, IndexError)):
        return EXIT_CONFIG, "config"
    raise exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bundlemap", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--evaluator", choices=("nbm", "refsolver"), default="nbm")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = Path(args.out)
    run = None
    try:
        cfg = load_config(args.config, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, out, args.config, args.evaluator)
        COMMANDS[args.command](run)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        code, cat = _category(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error category={cat} command={args.command} message={msg}", file=sys.stderr)
        if run is not None:
            run.manifest("error", f"{cat}: {msg}")
        return code
    run.manifest("ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
