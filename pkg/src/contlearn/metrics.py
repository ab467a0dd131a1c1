"""F1 scoring, the stage-by-task score matrix, and forward/backward transfer.

All scores are percentages in [0, 100].
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, SchemaError, StateError
from .model import Example, ModelConfig, ParameterVector, predict_points, stack_batch

CBT_ROWS = ("final", "T_minus_1")


def micro_f1(predictions, golds) -> float:
    """Micro-averaged F1 over label instances.

    With exactly one label per instance, every miss is one false positive and
    one false negative, so micro P = R = F1 = accuracy.
    """
    p = np.asarray(predictions).reshape(-1)
    g = np.asarray(golds).reshape(-1)
    if p.size != g.size:
        raise InputError(f"{p.size} predictions vs {g.size} gold labels")
    if p.size == 0:
        raise InputError("micro_f1 needs at least one instance")
    return 100.0 * float(np.mean(p == g))


def bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Decode BIO tags into ``(type, start, end)`` spans, ``end`` inclusive.

    An ``I-X`` that does not continue an open ``X`` span starts a new one.
    """
    spans = set()
    cur_type, start = None, None
    for i, tag in enumerate(tags):
        if tag.startswith("I-") and cur_type == tag[2:]:
            continue
        if cur_type is not None:
            spans.add((cur_type, start, i - 1))
            cur_type = None
        if tag.startswith(("B-", "I-")):
            cur_type, start = tag[2:], i
        elif tag != "O":
            raise SchemaError(f"not a BIO tag: {tag!r}")
    if cur_type is not None:
        spans.add((cur_type, start, len(tags) - 1))
    return spans


def span_counts(pred_seqs, gold_seqs, label_names: Sequence[str]) -> tuple[int, int, int]:
    """(true positives, predicted spans, gold spans) summed over sequences."""
    if len(pred_seqs) != len(gold_seqs):
        raise InputError(f"{len(pred_seqs)} predicted sequences vs {len(gold_seqs)} gold")
    names = list(label_names)

    def to_tags(seq):
        out = []
        for k in np.asarray(seq).reshape(-1):
            if not 0 <= k < len(names):
                raise SchemaError(f"unknown label id {k}")
            out.append(names[k])
        return out

    tp = n_pred = n_gold = 0
    for p, g in zip(pred_seqs, gold_seqs):
        if len(p) != len(g):
            raise InputError(f"sequence length mismatch: {len(p)} vs {len(g)}")
        ps, gs = bio_spans(to_tags(p)), bio_spans(to_tags(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return tp, n_pred, n_gold


def f1_from_counts(tp: int, n_pred: int, n_gold: int) -> float:
    if n_pred == 0 and n_gold == 0:
        return 100.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def span_f1(pred_seqs, gold_seqs, label_names: Sequence[str]) -> float:
    """Exact-match span F1; 100 when neither side has any span."""
    return f1_from_counts(*span_counts(pred_seqs, gold_seqs, label_names))


def evaluate(theta: ParameterVector, config: ModelConfig, examples: Sequence[Example],
             label_names: Sequence[str] = ()) -> float:
    """Micro-F1 for sequence tasks, span-F1 for token tasks."""
    X, y, _, owner = stack_batch(examples, config)
    pred = predict_points(theta, config, X)
    if config.head_kind == "sequence_classification":
        return micro_f1(pred, y)
    bounds = np.flatnonzero(np.diff(owner)) + 1
    return span_f1(np.split(pred, bounds), np.split(y, bounds), label_names)


@dataclass
class ScoreMatrix:
    """``scores[i, j]``: test score on task ``j`` after training stage ``i``.

    Unrecorded rows hold NaN. ``recorded`` lists recorded stage indices (0-based).
    """
    task_ids: list[str]
    scores: np.ndarray = None
    recorded: list[int] = field(default_factory=list)

    def __post_init__(self):
        T = len(self.task_ids)
        if self.scores is None:
            self.scores = np.full((T, T), np.nan)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (T, T):
            raise InputError(f"score matrix must be {T}x{T}, got {self.scores.shape}")

    @property
    def T(self) -> int:
        return len(self.task_ids)

    @property
    def filled_rows(self) -> int:
        return len(self.recorded)

    def set_row(self, stage: int, row) -> None:
        if not 0 <= stage < self.T:
            raise StateError(f"stage {stage} outside [0, {self.T})")
        if self.recorded and stage <= self.recorded[-1]:
            raise StateError(f"stage {stage} recorded out of order (last was {self.recorded[-1]})")
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.T,):
            raise InputError(f"row must have {self.T} entries")
        self.scores[stage] = row
        self.recorded.append(stage)

    def require_rows(self, rows) -> None:
        missing = [r for r in rows if r not in self.recorded]
        if missing:
            raise StateError(f"score matrix rows {missing} not recorded")

    def seen_average(self, stage: int) -> float:
        """Mean score over the tasks trained so far (0..stage) after ``stage``."""
        return float(np.mean(self.scores[stage, :stage + 1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", *self.task_ids])
        for i in range(self.T):
            w.writerow([i + 1, *("" if math.isnan(v) else repr(float(v)) for v in self.scores[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise InputError("empty score matrix CSV")
        header, body = rows[0], [r for r in rows[1:] if r]
        has_stage = header and header[0] == "stage"
        ids = header[1:] if has_stage else header
        R = cls(list(ids))
        for i, r in enumerate(body):
            vals = r[1:] if has_stage else r
            if len(vals) != len(ids):
                raise InputError(f"CSV row {i + 2} has {len(vals)} values, expected {len(ids)}")
            if all(v == "" for v in vals):
                continue
            try:
                row = [float(v) if v != "" else np.nan for v in vals]
            except ValueError as e:
                raise InputError(f"CSV row {i + 2}: {e}") from None
            R.set_row(int(r[0]) - 1 if has_stage else i, row)
        return R

    def to_json(self) -> dict:
        return {
            "task_ids": list(self.task_ids),
            "scores": [[None if math.isnan(v) else float(v) for v in row] for row in self.scores],
            "recorded": list(self.recorded),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ScoreMatrix":
        scores = [[np.nan if v is None else v for v in row] for row in data["scores"]]
        return cls(list(data["task_ids"]), np.array(scores, dtype=np.float64), list(data["recorded"]))


def record_row(R: ScoreMatrix, stage: int, theta: ParameterVector, config: ModelConfig,
               stream) -> ScoreMatrix:
    """Evaluate the current model on every task's test split and store it as row ``stage``."""
    if R.recorded and stage <= R.recorded[-1]:
        raise StateError(f"stage {stage} recorded out of order (last was {R.recorded[-1]})")
    row = [evaluate(theta, config, task.test, task.label_names) for task in stream.tasks]
    R.set_row(stage, row)
    return R


def cft(R: ScoreMatrix) -> float:
    """Mean over stages i < T-1 of the average zero-shot score on tasks after i."""
    T = R.T
    if T < 2:
        raise StateError("forward transfer needs T >= 2")
    R.require_rows(range(T - 1))
    per_stage = [R.scores[i, i + 1:].mean() for i in range(T - 1)]
    return float(np.mean(per_stage))


def cbt(R: ScoreMatrix, row: str = "final") -> float:
    """Mean change on tasks 0..T-2 between their own stage and the reference row.

    ``row="final"`` uses the row recorded after the last task; ``"T_minus_1"``
    uses the second-to-last row (the literal 1-based index ``T-1``).
    """
    if row not in CBT_ROWS:
        raise InputError(f"cbt row must be one of {CBT_ROWS}")
    T = R.T
    if T < 2:
        raise StateError("backward transfer needs T >= 2")
    R.require_rows(range(T))
    ref = T - 1 if row == "final" else T - 2
    S = R.scores
    return float(np.mean(S[ref, :T - 1] - np.diag(S)[:T - 1]))


@dataclass
class EvalReport:
    method: str
    seed: int
    per_task: dict[str, float]
    average: float
    cft: float | None = None
    cbt: float | None = None

    def to_json(self) -> dict:
        return {"method": self.method, "seed": self.seed, "per_task": self.per_task,
                "average": self.average, "cft": self.cft, "cbt": self.cbt}


def make_report(R: ScoreMatrix, method: str, seed: int, final_row: int | None = None,
                cbt_row: str = "final") -> EvalReport:
    """Report on ``final_row`` (default: last recorded); transfer metrics where defined."""
    final = R.recorded[-1] if final_row is None else final_row
    scores = R.scores[final]
    per_task = {tid: float(s) for tid, s in zip(R.task_ids, scores) if not math.isnan(s)}
    try:
        f, b = cft(R), cbt(R, cbt_row)
    except StateError:
        f = b = None
    return EvalReport(method, seed, per_task, float(np.mean(list(per_task.values()))), f, b)
