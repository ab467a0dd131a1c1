"""Continual-learning strategies: inter-task LR adjustment, replay, A-GEM, EWC.

All randomness inside a run comes from ``StrategyState.rngs``, four independent
generators spawned from one seed (batch shuffling, memory admission, memory
retrieval, Fisher label sampling). Because they are independent, strategies
that never touch memory or Fisher sampling follow the exact same batch order
as plain sequential training.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .metrics import evaluate
from .model import (
    Example,
    GradientVector,
    ModelConfig,
    ParameterVector,
    loss_and_grad,
    per_example_grads,
    predict_proba_points,
    sgd_step,
    stack_batch,
)

STRATEGY_KINDS = ("vanilla", "replay", "agem", "ewc")
EWC_ANCHORS = ("all_tasks", "latest")


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate state carried across the whole run.

    ``per_step_decay`` multiplies the rate after every gradient step;
    ``lr_adjust`` applies ``max(lr_min, lr * gamma)`` at task boundaries.
    ``gamma=0.9`` and ``lr_min=1e-6`` are engine defaults, not tuned values.
    """
    lr_current: float
    gamma: float = 0.9
    lr_min: float = 1e-6
    per_step_decay: float = 1.0

    def __post_init__(self):
        if not self.lr_current > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr_current}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.lr_min > 0:
            raise ConfigError(f"lr_min must be positive, got {self.lr_min}")
        if not 0 < self.per_step_decay <= 1:
            raise ConfigError(f"per_step_decay must lie in (0, 1], got {self.per_step_decay}")

    def decayed(self) -> "LrSchedule":
        if self.per_step_decay == 1.0:
            return self
        return dataclasses.replace(self, lr_current=self.lr_current * self.per_step_decay)


def lr_adjust(schedule: LrSchedule) -> LrSchedule:
    return dataclasses.replace(schedule, lr_current=max(schedule.lr_min, schedule.lr_current * schedule.gamma))


@dataclass
class EpisodicMemory:
    """Bounded, label-balanced example store.

    ``capacity`` may be ``math.inf``. Each entry keeps a balance key (its label,
    or for token examples the first non-O label) and an arrival number.
    """
    capacity: float = math.inf
    admission_prob: float = 1.0
    entries: list[Example] = field(default_factory=list)
    keys: list[int] = field(default_factory=list)
    arrivals: list[int] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if not self.capacity >= 1:
            raise ConfigError(f"memory capacity must be >= 1, got {self.capacity}")
        if not 0 <= self.admission_prob <= 1:
            raise ConfigError(f"admission probability must lie in [0, 1], got {self.admission_prob}")

    def __len__(self) -> int:
        return len(self.entries)

    def label_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for k in self.keys:
            out[k] = out.get(k, 0) + 1
        return dict(sorted(out.items()))


def balance_key(example: Example) -> int:
    if not example.is_token:
        return int(example.label)
    nonzero = example.labels[example.labels != 0]
    return int(nonzero[0]) if nonzero.size else 0


def memory_observe(mem: EpisodicMemory, example: Example, rng: np.random.Generator) -> EpisodicMemory:
    """Offer one example; admitted with probability ``admission_prob``.

    Over capacity, the oldest entry of the most represented label (counting the
    newcomer) is evicted; ties between labels go to the oldest entry.
    """
    if mem.admission_prob == 0 or (mem.admission_prob < 1 and rng.random() >= mem.admission_prob):
        return mem
    mem.entries.append(example)
    mem.keys.append(balance_key(example))
    mem.arrivals.append(mem.seen)
    mem.seen += 1
    if len(mem.entries) > mem.capacity:
        counts = mem.label_counts()
        top = max(counts.values())
        crowded = {k for k, c in counts.items() if c == top}
        # arrivals are increasing in list position, so the first match is the oldest
        victim = next(i for i, k in enumerate(mem.keys) if k in crowded)
        del mem.entries[victim], mem.keys[victim], mem.arrivals[victim]
    return mem


def memory_sample(mem: EpisodicMemory, k: int, rng: np.random.Generator,
                  exclude_tasks=()) -> list[Example]:
    """Up to ``k`` entries uniformly without replacement, skipping entries from ``exclude_tasks``."""
    pool = mem.entries
    if exclude_tasks:
        pool = [e for e in pool if e.task_id not in exclude_tasks]
    if k <= 0 or not pool:
        return []
    if len(pool) <= k:
        return list(pool)
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def agem_project(g: GradientVector, g_ref: GradientVector) -> GradientVector:
    """Project ``g`` so that it does not increase the loss on the reference batch (first order)."""
    if len(g) != len(g_ref):
        raise InputError(f"gradient lengths differ: {len(g)} vs {len(g_ref)}")
    ref_sq = float(np.dot(g_ref.values, g_ref.values))
    if ref_sq < 1e-12:
        return g
    dot = float(np.dot(g.values, g_ref.values))
    # a just-projected gradient has |dot| at round-off level; treating that as
    # feasible makes projection idempotent
    if dot >= -1e-12 * math.sqrt(float(np.dot(g.values, g.values)) * ref_sq):
        return g
    return GradientVector(g.values - (dot / ref_sq) * g_ref.values)


@dataclass
class FisherSnapshot:
    fisher_diag: np.ndarray
    anchor: ParameterVector
    task_id: str = ""


def ewc_fisher(theta: ParameterVector, config: ModelConfig, data: Sequence[Example],
               num_samples: int, rng: np.random.Generator, task_id: str = "",
               label_mode: str = "sample") -> FisherSnapshot:
    """Diagonal Fisher of the model's own predictive distribution.

    Uses ``min(num_samples, len(data))`` examples (a random subset when the data
    is larger). ``label_mode="sample"`` draws one label per prediction point from
    the model; ``"expected"`` takes the exact expectation over labels instead.
    """
    if not data:
        raise InputError("Fisher estimation needs data")
    if num_samples < 1:
        raise InputError("num_samples must be >= 1")
    if len(data) > num_samples:
        data = [data[i] for i in np.sort(rng.choice(len(data), size=num_samples, replace=False))]
    X, _, _, owner = stack_batch(data, config)
    probs = predict_proba_points(theta, config, X)
    if label_mode == "sample":
        u = rng.random(X.shape[0])[:, None]
        sampled = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), config.num_labels - 1)
        bounds = np.flatnonzero(np.diff(owner)) + 1
        labels = np.split(sampled, bounds)
        fisher = np.mean(per_example_grads(theta, config, data, labels) ** 2, axis=0)
    elif label_mode == "expected":
        # Token scores are independent with zero mean given the features, so the
        # cross terms of the squared token-mean vanish: E[(mean_t g_t)^2] = sum_t E[g_t^2] / n^2.
        fisher = np.zeros(len(theta))
        for ex in data:
            n_tok = ex.points.shape[0]
            p = predict_proba_points(theta, config, ex.points)
            for t in range(n_tok):
                single = Example(ex.points[t], 0) if ex.is_token else ex
                seq_cfg = dataclasses.replace(config, head_kind="sequence_classification")
                for c in range(config.num_labels):
                    g = per_example_grads(theta, seq_cfg, [single], [c])[0]
                    fisher += p[t, c] * g * g / n_tok ** 2
        fisher /= len(data)
    else:
        raise InputError(f"unknown label_mode {label_mode!r}")
    return FisherSnapshot(fisher, theta.copy(), task_id)


def ewc_penalty_grad(theta: ParameterVector, snapshots: Sequence[FisherSnapshot], lam: float):
    """``sum_s sum_i lam/2 * F_i (theta_i - anchor_i)^2`` and its gradient."""
    grad = np.zeros(len(theta))
    penalty = 0.0
    if lam == 0:
        return penalty, GradientVector(grad)
    for snap in snapshots:
        if snap.fisher_diag.size != len(theta) or len(snap.anchor) != len(theta):
            raise InputError("Fisher snapshot does not match parameter length")
        diff = theta.values - snap.anchor.values
        penalty += 0.5 * lam * float(np.dot(snap.fisher_diag, diff * diff))
        grad += lam * snap.fisher_diag * diff
    return penalty, GradientVector(grad)


@dataclass(frozen=True)
class StrategyConfig:
    """Continual-learning method and its knobs.

    ``retrieve_num_samples`` is the replay batch size and the A-GEM reference
    batch size. ``run_per_step`` is the replay period in global gradient steps.
    The EWC penalty step is stable only while ``lr * ewc_lambda * max(F)`` stays
    below 2; the default pairs with lr=0.1.
    """
    kind: str = "vanilla"
    ewc_lambda: float = 5.0
    ewc_anchor: str = "all_tasks"
    fisher_num_samples: int = 1000
    store_memory_prob: float = 1.0
    max_store_num_samples: float = 1000
    retrieve_num_samples: int = 100
    run_per_step: int = 1
    use_lr_adjust: bool = False
    gamma: float = 0.9
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"strategy kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda must be >= 0")
        if self.ewc_anchor not in EWC_ANCHORS:
            raise ConfigError(f"ewc_anchor must be one of {EWC_ANCHORS}")
        if self.retrieve_num_samples < 1 or self.run_per_step < 1 or self.fisher_num_samples < 1:
            raise ConfigError("retrieve_num_samples, run_per_step, fisher_num_samples must be >= 1")
        if self.retrieve_num_samples > self.max_store_num_samples:
            raise ConfigError("retrieve_num_samples cannot exceed max_store_num_samples")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.lr_min > 0:
            raise ConfigError("lr_min must be positive")
        EpisodicMemory(self.max_store_num_samples, self.store_memory_prob)

    @property
    def uses_memory(self) -> bool:
        return self.kind in ("replay", "agem")


@dataclass(frozen=True)
class TrainConfig:
    """Per-task optimisation loop. ``patience=0`` disables early stopping."""
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass
class StrategyState:
    config: StrategyConfig
    schedule: LrSchedule
    memory: EpisodicMemory
    rngs: dict[str, np.random.Generator]
    snapshots: list[FisherSnapshot] = field(default_factory=list)
    step: int = 0
    tasks_seen: int = 0
    replay_steps: int = 0
    projections: int = 0

    @classmethod
    def create(cls, config: StrategyConfig, lr: float, seed: int,
               per_step_decay: float = 1.0) -> "StrategyState":
        names = ("shuffle", "memory", "retrieve", "fisher")
        rngs = dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))))
        schedule = LrSchedule(lr, config.gamma, config.lr_min, per_step_decay)
        memory = EpisodicMemory(config.max_store_num_samples, config.store_memory_prob)
        return cls(config, schedule, memory, rngs)

    def active_snapshots(self) -> list[FisherSnapshot]:
        if self.config.ewc_anchor == "latest":
            return self.snapshots[-1:]
        return self.snapshots


def replay_step(theta: ParameterVector, config: ModelConfig, state: StrategyState) -> ParameterVector:
    """Every ``run_per_step`` global steps, one SGD step on a memory batch at the current rate."""
    cfg = state.config
    if state.step % cfg.run_per_step != 0 or len(state.memory) == 0:
        return theta
    batch = memory_sample(state.memory, cfg.retrieve_num_samples, state.rngs["retrieve"])
    _, g = loss_and_grad(theta, config, batch)
    state.replay_steps += 1
    return sgd_step(theta, g, state.schedule.lr_current)


def begin_task(state: StrategyState) -> StrategyState:
    """Task-boundary bookkeeping: LR ADJUST before every task except the first."""
    if state.config.use_lr_adjust and state.tasks_seen > 0:
        state.schedule = lr_adjust(state.schedule)
    return state


def _strategy_gradient(theta, config, batch, state, current_tasks):
    loss, g = loss_and_grad(theta, config, batch)
    cfg = state.config
    if cfg.kind == "ewc" and state.snapshots and cfg.ewc_lambda > 0:
        penalty, pg = ewc_penalty_grad(theta, state.active_snapshots(), cfg.ewc_lambda)
        loss += penalty
        g = GradientVector(g.values + pg.values)
    elif cfg.kind == "agem":
        ref = memory_sample(state.memory, cfg.retrieve_num_samples, state.rngs["retrieve"],
                            exclude_tasks=current_tasks)
        if ref:
            _, g_ref = loss_and_grad(theta, config, ref)
            projected = agem_project(g, g_ref)
            state.projections += projected is not g
            g = projected
    return loss, g


def train_task(theta: ParameterVector, config: ModelConfig, task, state: StrategyState,
               train_cfg: TrainConfig = TrainConfig()) -> tuple[ParameterVector, StrategyState]:
    """Train on one task with the configured strategy.

    Mini-batch SGD for up to ``max_epochs``; the rate decays per step. Training
    examples are offered to memory once, during the first epoch. With early
    stopping, the weights with the best dev score are restored at the end.
    EWC then appends a Fisher snapshot of the final weights.
    """
    train, dev = task.train, task.dev
    early = train_cfg.patience > 0
    if early and not dev:
        raise InputError(f"task {task.task_id!r} has no dev split but early stopping is enabled")
    cfg = state.config
    # A-GEM references only memory from earlier tasks
    current = frozenset(task.members or (task.task_id,))
    best_theta, best_score, stale = theta, -math.inf, 0
    n = len(train)
    for epoch in range(train_cfg.max_epochs):
        order = state.rngs["shuffle"].permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = [train[k] for k in order[start:start + train_cfg.batch_size]]
            if cfg.uses_memory and epoch == 0:
                for ex in batch:
                    memory_observe(state.memory, ex, state.rngs["memory"])
            try:
                _, g = _strategy_gradient(theta, config, batch, state, current)
                theta = sgd_step(theta, g, state.schedule.lr_current)
                state.step += 1
                if cfg.kind == "replay":
                    theta = replay_step(theta, config, state)
            except NumericError as e:
                raise NumericError(f"task {task.task_id!r}, epoch {epoch}, global step {state.step}: {e}") from e
            state.schedule = state.schedule.decayed()
        if early:
            score = evaluate(theta, config, dev, task.label_names)
            if score > best_score:
                best_theta, best_score, stale = theta, score, 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    if early:
        theta = best_theta
    if cfg.kind == "ewc":
        state.snapshots.append(ewc_fisher(theta, config, train, cfg.fisher_num_samples,
                                          state.rngs["fisher"], task.task_id))
    state.tasks_seen += 1
    return theta, state
