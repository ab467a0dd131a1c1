"""Experiment orchestration: run modes, multi-seed loops, aggregation, persistence."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContLearnError
from .metrics import EvalReport, ScoreMatrix, evaluate, make_report, record_row
from .model import ModelConfig, init_model
from .strategies import StrategyConfig, StrategyState, TrainConfig, begin_task, train_task
from .tasks import SyntheticStreamConfig, TaskSpec, TaskStream, generate_stream, load_stream, order_stream

log = logging.getLogger(__name__)

METHODS = ("multi", "mono", "sequential", "vanilla", "replay", "agem", "ewc")


@dataclass(frozen=True)
class DataSource:
    path: str
    label_vocab: str | None = None
    hash_dim: int = 64


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    per_step_decay: float = 1.0
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.max_epochs, self.patience)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.

    ``method`` picks the run mode: ``multi``, ``mono``, or sequential. For
    sequential runs the continual-learning method is ``strategy.kind``; the
    names vanilla/replay/agem/ewc are accepted as ``method`` aliases for it.
    ``warm_start_k >= 1`` turns a sequential run into MULTI-first-k.
    """
    method: str = "sequential"
    stream: SyntheticStreamConfig | None = field(default_factory=SyntheticStreamConfig)
    data: DataSource | None = None
    model: ModelSection = field(default_factory=ModelSection)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    warm_start_k: int = 0
    ordering_policy: str = "random"
    explicit_order: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = (42, 52, 62, 72, 82)
    cbt_row: str = "final"
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if (self.stream is None) == (self.data is None):
            raise ConfigError("exactly one of stream / data must be given")
        if self.warm_start_k < 0:
            raise ConfigError("warm_start_k must be >= 0")
        if self.stream is not None and self.mode == "sequential" and self.warm_start_k >= self.stream.num_tasks:
            raise ConfigError(f"warm_start_k={self.warm_start_k} must be < T={self.stream.num_tasks}")
        if self.cbt_row not in ("final", "T_minus_1"):
            raise ConfigError("cbt_row must be 'final' or 'T_minus_1'")

    @property
    def mode(self) -> str:
        return self.method if self.method in ("multi", "mono") else "sequential"

    @property
    def method_name(self) -> str:
        """Label used in reports, e.g. ``agem+lr_adjust`` or ``multi``."""
        if self.mode != "sequential":
            return self.method
        name = self.strategy.kind
        if self.warm_start_k >= 1:
            name = f"multi{self.warm_start_k}+{name}"
        if self.strategy.use_lr_adjust:
            name += "+lr_adjust"
        return name


@dataclass
class SeedResult:
    seed: int
    order: list[str]
    R: ScoreMatrix
    report: EvalReport
    curve: dict[int, float]
    stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "order": self.order,
            "R": self.R.to_json(),
            "report": self.report.to_json(),
            "curve": [[s, v] for s, v in sorted(self.curve.items())],
            "stats": self.stats,
        }


@dataclass
class RunResult:
    method: str
    per_seed: list[SeedResult]
    aggregate: list[tuple[int, float, float]]
    metadata: dict
    wall_clock: float = 0.0

    def seed_result(self, seed: int) -> SeedResult:
        return next(r for r in self.per_seed if r.seed == seed)

    def mean_metric(self, name: str) -> float | None:
        vals = [getattr(r.report, name) for r in self.per_seed]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    def final_average(self) -> float:
        return self.aggregate[-1][1]

    def to_json(self) -> dict:
        summary = {}
        for name in ("cft", "cbt", "average"):
            vals = [getattr(r.report, name) for r in self.per_seed]
            if any(v is None for v in vals):
                summary[name] = None
            else:
                summary[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        return {
            "method": self.method,
            "metadata": self.metadata,
            "summary": summary,
            "curve": [{"stage": s, "mean": m, "std": sd} for s, m, sd in self.aggregate],
            "per_seed": [r.to_json() for r in self.per_seed],
        }


def aggregate(curves: dict[int, dict[int, float]]) -> list[tuple[int, float, float]]:
    """Per-stage mean and population std over seeds.

    ``curves`` maps seed -> {stage: value}; the reduction runs in ascending seed
    order so it does not depend on how the seeds were listed.
    """
    stages = sorted({s for c in curves.values() for s in c})
    out = []
    for s in stages:
        vals = np.array([curves[seed][s] for seed in sorted(curves) if s in curves[seed]])
        out.append((s, float(vals.mean()), float(vals.std())))
    return out


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.stream is not None:
        return generate_stream(cfg.stream)
    return load_stream(cfg.data.path, cfg.data.hash_dim, cfg.data.label_vocab)


def model_config(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> ModelConfig:
    first = stream.tasks[0]
    input_dim = first.train[0].features.shape[-1]
    num_labels = len(first.label_names) if first.label_names else int(
        max(ex.labels.max() for t in stream for ex in t.train + t.test)) + 1
    return ModelConfig(input_dim, cfg.model.hidden_dims, max(num_labels, 2), cfg.model.activation,
                       stream.head_kind, init_seed=seed)


def pooled_task(tasks: list[TaskSpec], name: str | None = None) -> TaskSpec:
    ids = tuple(t.task_id for t in tasks)
    return TaskSpec(
        name or "+".join(ids), "pooled",
        [ex for t in tasks for ex in t.train],
        [ex for t in tasks for ex in t.dev],
        [ex for t in tasks for ex in t.test],
        tasks[0].head_kind, tasks[0].label_names, members=ids,
    )


def _ordered(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> TaskStream:
    order = list(cfg.explicit_order) if cfg.explicit_order else None
    return order_stream(stream, cfg.ordering_policy, seed, order)


def _state(cfg: ExperimentConfig, seed: int, strategy: StrategyConfig | None = None) -> StrategyState:
    return StrategyState.create(strategy or cfg.strategy, cfg.optim.lr, seed, cfg.optim.per_step_decay)


def _sequential_seed(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> SeedResult:
    ordered = _ordered(cfg, stream, seed)
    mcfg = model_config(cfg, ordered, seed)
    theta = init_model(mcfg)
    state = _state(cfg, seed)
    R = ScoreMatrix(ordered.task_ids)
    train_cfg = cfg.optim.train_config()
    k = cfg.warm_start_k
    blocks: list[tuple[int, TaskSpec]] = []
    if k >= 1:
        blocks.append((k - 1, pooled_task(ordered.tasks[:k])))
    blocks += [(i, ordered.tasks[i]) for i in range(k, len(ordered))]
    for stage, task in blocks:
        begin_task(state)
        try:
            theta, state = train_task(theta, mcfg, task, state, train_cfg)
        except ContLearnError as e:
            raise type(e)(f"seed {seed}, stage {stage + 1}: {e}") from e
        record_row(R, stage, theta, mcfg, ordered)
        log.debug("seed %d stage %d lr %.3g avg %.2f", seed, stage + 1,
                  state.schedule.lr_current, R.seen_average(stage))
    report = make_report(R, cfg.method_name, seed, cbt_row=cfg.cbt_row)
    curve = {stage + 1: R.seen_average(stage) for stage in R.recorded}
    stats = {"steps": state.step, "replay_steps": state.replay_steps,
             "agem_projections": state.projections, "final_lr": state.schedule.lr_current,
             "memory_size": len(state.memory)}
    return SeedResult(seed, ordered.task_ids, R, report, curve, stats)


def _multi_seed(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> SeedResult:
    mcfg = model_config(cfg, stream, seed)
    state = _state(cfg, seed, StrategyConfig(kind="vanilla"))
    pooled = pooled_task(stream.tasks, "multi")
    theta, state = train_task(init_model(mcfg), mcfg, pooled, state, cfg.optim.train_config())
    R = ScoreMatrix(stream.task_ids)
    record_row(R, R.T - 1, theta, mcfg, stream)
    report = make_report(R, "multi", seed)
    return SeedResult(seed, stream.task_ids, R, report, {R.T: R.seen_average(R.T - 1)},
                      {"steps": state.step, "train_size": len(pooled.train)})


def _mono_seed(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> SeedResult:
    ordered = _ordered(cfg, stream, seed)
    R = ScoreMatrix(ordered.task_ids)
    curve = {}
    for i, task in enumerate(ordered.tasks):
        mcfg = model_config(cfg, ordered, seed)
        state = _state(cfg, seed, StrategyConfig(kind="vanilla"))
        theta, state = train_task(init_model(mcfg), mcfg, task, state, cfg.optim.train_config())
        row = np.full(R.T, np.nan)
        row[i] = evaluate(theta, mcfg, task.test, task.label_names)
        R.set_row(i, row)
        curve[i + 1] = float(np.mean(np.diag(R.scores)[:i + 1]))
    per_task = {tid: float(R.scores[i, i]) for i, tid in enumerate(R.task_ids)}
    report = EvalReport("mono", seed, per_task, float(np.mean(list(per_task.values()))))
    return SeedResult(seed, ordered.task_ids, R, report, curve)


def _metadata(cfg: ExperimentConfig, stream: TaskStream) -> dict:
    from .config import config_to_dict

    return {
        "method": cfg.method_name,
        "mode": cfg.mode,
        "strategy_kind": cfg.strategy.kind if cfg.mode == "sequential" else None,
        "use_lr_adjust": cfg.strategy.use_lr_adjust if cfg.mode == "sequential" else False,
        "warm_start_k": cfg.warm_start_k,
        "ordering_policy": cfg.ordering_policy,
        "seeds": list(cfg.seeds),
        "task_ids": stream.task_ids,
        "std": "population",
        "curve_value": "mean test F1 over tasks seen so far",
        "config": config_to_dict(cfg),
    }


def _run(cfg: ExperimentConfig, per_seed_fn, stream: TaskStream | None = None) -> RunResult:
    t0 = time.perf_counter()
    stream = stream or build_stream(cfg)
    results = [per_seed_fn(cfg, stream, seed) for seed in cfg.seeds]
    agg = aggregate({r.seed: r.curve for r in results})
    return RunResult(cfg.method_name, results, agg, _metadata(cfg, stream), time.perf_counter() - t0)


def run_sequential(cfg: ExperimentConfig, stream: TaskStream | None = None) -> RunResult:
    if cfg.mode != "sequential":
        raise ConfigError(f"run_sequential needs a sequential method, got {cfg.method!r}")
    return _run(cfg, _sequential_seed, stream)


def run_warm_start(cfg: ExperimentConfig, stream: TaskStream | None = None) -> RunResult:
    """MULTI-first-k: pooled training on the first k ordered tasks, then sequential."""
    if cfg.warm_start_k < 1:
        raise ConfigError("run_warm_start needs warm_start_k >= 1")
    stream = stream or build_stream(cfg)
    if cfg.warm_start_k >= len(stream):
        raise ConfigError(f"warm_start_k={cfg.warm_start_k} must be < T={len(stream)}")
    return run_sequential(cfg, stream)


def run_multi(cfg: ExperimentConfig, stream: TaskStream | None = None) -> RunResult:
    return _run(dataclasses.replace(cfg, method="multi"), _multi_seed, stream)


def run_mono(cfg: ExperimentConfig, stream: TaskStream | None = None) -> RunResult:
    return _run(dataclasses.replace(cfg, method="mono"), _mono_seed, stream)


def run_experiment(cfg: ExperimentConfig, stream: TaskStream | None = None) -> RunResult:
    if cfg.mode == "multi":
        return run_multi(cfg, stream)
    if cfg.mode == "mono":
        return run_mono(cfg, stream)
    if cfg.warm_start_k >= 1:
        return run_warm_start(cfg, stream)
    return run_sequential(cfg, stream)


def write_outputs(result: RunResult, out_dir) -> Path:
    """Write ``result.json``, ``R_seed<k>.csv`` per seed, ``curve.csv`` and ``timing.json``.

    Wall-clock time goes to ``timing.json`` only, so ``result.json`` stays
    byte-identical across reruns of the same config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    for r in result.per_seed:
        (out / f"R_seed{r.seed}.csv").write_text(r.R.to_csv())
    lines = ["stage,mean,std"] + [f"{s},{m!r},{sd!r}" for s, m, sd in result.aggregate]
    (out / "curve.csv").write_text("\n".join(lines) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": result.wall_clock}) + "\n")
    return out
