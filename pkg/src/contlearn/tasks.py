"""Task streams: synthetic rotated-prototype "languages", ordering policies, JSONL ingestion."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError, SchemaError
from .model import HEAD_KINDS, Example

ORDERING_POLICIES = ("random", "family_grouped", "explicit")


@dataclass(eq=False)
class TaskSpec:
    task_id: str
    family: str
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    head_kind: str = "sequence_classification"
    label_names: tuple[str, ...] = ()
    prototypes: np.ndarray | None = field(default=None, repr=False)
    members: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.train or not self.test:
            raise InputError(f"task {self.task_id!r} needs nonempty train and test splits")


@dataclass(eq=False)
class TaskStream:
    tasks: list[TaskSpec]
    order_seed: int = 0
    ordering_policy: str = "explicit"

    def __post_init__(self):
        ids = self.task_ids
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate task ids in stream: {ids}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    @property
    def head_kind(self) -> str:
        return self.tasks[0].head_kind

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.tasks[0].label_names


@dataclass(frozen=True)
class SyntheticStreamConfig:
    """Knobs for the synthetic stream.

    ``between_families`` and ``rotation_angle_within_family`` are in radians.
    Prototypes are standard normal vectors; ``label_prototype_noise`` is the
    isotropic std of examples around them.
    """
    num_tasks: int = 10
    num_families: int = 4
    input_dim: int = 16
    num_labels: int = 4
    n_train: int = 200
    n_dev: int = 100
    n_test: int = 200
    rotation_angle_within_family: float = 0.1
    between_families: float = 0.8
    label_prototype_noise: float = 1.0
    head_kind: str = "sequence_classification"
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1 or self.num_families < 1 or self.num_families > self.num_tasks:
            raise ConfigError("need num_tasks >= num_families >= 1")
        if self.input_dim < 1 or self.num_labels < 2:
            raise ConfigError("input_dim must be >= 1 and num_labels >= 2")
        if min(self.n_train, self.n_test) < 1 or self.n_dev < 0:
            raise ConfigError("train/test sizes must be positive and dev size nonnegative")
        for name in ("rotation_angle_within_family", "between_families"):
            angle = getattr(self, name)
            if not 0.0 <= angle <= math.pi:
                raise ConfigError(f"{name} must lie in [0, pi], got {angle}")
        if self.label_prototype_noise < 0:
            raise ConfigError("label_prototype_noise must be >= 0")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "token_labeling" and self.num_labels % 2 == 0:
            raise ConfigError("token tasks need an odd num_labels (O plus B/I pairs)")


def bio_label_names(num_labels: int) -> tuple[str, ...]:
    """``O, B-T1, I-T1, B-T2, I-T2, ...``; label ``2k-1`` is B of type k, ``2k`` is I."""
    names = ["O"]
    for k in range(1, (num_labels - 1) // 2 + 1):
        names += [f"B-T{k}", f"I-T{k}"]
    return tuple(names)


def rotation(basis: np.ndarray, angle: float) -> np.ndarray:
    """Rotate by ``angle`` in every plane spanned by consecutive basis columns.

    Rotations of the same basis compose additively in the angle.
    """
    d = basis.shape[0]
    G = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    for p in range(0, d - 1, 2):
        G[p, p], G[p, p + 1], G[p + 1, p], G[p + 1, p + 1] = c, -s, s, c
    return basis @ G @ basis.T


def task_angles(cfg: SyntheticStreamConfig) -> list[tuple[int, float]]:
    """(family index, rotation angle) per task; families assigned round-robin."""
    out = []
    for i in range(cfg.num_tasks):
        fam, within = i % cfg.num_families, i // cfg.num_families
        out.append((fam, cfg.between_families * fam + cfg.rotation_angle_within_family * within))
    return out


def _bio_sequence(rng, length: int, n_types: int) -> np.ndarray:
    labels = np.zeros(length, dtype=np.int64)
    pos = 0
    while pos < length:
        if rng.random() < 0.4:
            k = int(rng.integers(1, n_types + 1))
            span = int(min(rng.integers(1, 4), length - pos))
            labels[pos] = 2 * k - 1
            labels[pos + 1:pos + span] = 2 * k
            pos += span
        else:
            pos += 1
    return labels


def generate_stream(cfg: SyntheticStreamConfig) -> TaskStream:
    rng = np.random.default_rng(cfg.seed)
    base = rng.normal(size=(cfg.num_labels, cfg.input_dim))
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.input_dim, cfg.input_dim)))
    token = cfg.head_kind == "token_labeling"
    names = bio_label_names(cfg.num_labels) if token else tuple(
        f"L{k}" for k in range(cfg.num_labels))
    n_total = cfg.n_train + cfg.n_dev + cfg.n_test

    tasks = []
    for i, (fam, angle) in enumerate(task_angles(cfg)):
        task_id = f"task{i:02d}"
        protos = base @ rotation(basis, angle).T
        if token:
            labels = [_bio_sequence(rng, int(rng.integers(3, 11)), (cfg.num_labels - 1) // 2)
                      for _ in range(n_total)]
            examples = [
                Example(protos[lab] + cfg.label_prototype_noise * rng.normal(size=(lab.size, cfg.input_dim)),
                        lab, task_id)
                for lab in labels
            ]
        else:
            labels = rng.permutation(np.arange(n_total) % cfg.num_labels)
            X = protos[labels] + cfg.label_prototype_noise * rng.normal(size=(n_total, cfg.input_dim))
            examples = [Example(x, int(lab), task_id) for x, lab in zip(X, labels)]
        for k, ex in enumerate(examples):
            ex.meta["index"] = k
        idx = rng.permutation(n_total)
        splits = np.split(idx, [cfg.n_train, cfg.n_train + cfg.n_dev])
        train, dev, test = ([examples[k] for k in part] for part in splits)
        tasks.append(TaskSpec(task_id, f"fam{fam}", train, dev, test, cfg.head_kind, names, protos))
    return TaskStream(tasks, order_seed=cfg.seed, ordering_policy="explicit")


def order_stream(stream: TaskStream, policy: str, seed: int = 0,
                 order: list[str] | None = None) -> TaskStream:
    """Reorder tasks.

    ``random`` shuffles uniformly; ``family_grouped`` shuffles families, keeps
    each family contiguous and shuffles within it; ``explicit`` uses ``order``.
    """
    if policy not in ORDERING_POLICIES:
        raise ConfigError(f"ordering policy must be one of {ORDERING_POLICIES}, got {policy!r}")
    by_id = {t.task_id: t for t in stream.tasks}
    if policy == "explicit":
        if order is None or sorted(order) != sorted(by_id):
            raise InputError(f"explicit order {order} is not a permutation of {sorted(by_id)}")
        ids = list(order)
    elif policy == "random":
        rng = np.random.default_rng(seed)
        ids = [stream.task_ids[k] for k in rng.permutation(len(stream))]
    else:
        rng = np.random.default_rng(seed)
        families: dict[str, list[str]] = {}
        for t in stream.tasks:
            families.setdefault(t.family, []).append(t.task_id)
        fam_names = list(families)
        ids = []
        for f in rng.permutation(len(fam_names)):
            members = families[fam_names[f]]
            ids += [members[k] for k in rng.permutation(len(members))]
    return TaskStream([by_id[i] for i in ids], order_seed=seed, ordering_policy=policy)


def hash_featurize(tokens: list[str], dim: int) -> np.ndarray:
    """Signed feature hashing, L2-normalized.

    Each token's 64-bit hash is the little-endian value of its 8-byte BLAKE2b
    digest (UTF-8 input). Bucket = hash mod ``dim``; the top bit selects the
    sign (set: -1).
    """
    if dim < 1:
        raise InputError(f"dim must be positive, got {dim}")
    v = np.zeros(dim)
    for tok in tokens:
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        v[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def read_label_vocab(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f if line.strip()]
    except OSError as e:
        raise InputError(f"cannot read label vocabulary {path}: {e.strerror}") from None


def load_stream(path, dim: int = 64, label_vocab=None) -> TaskStream:
    """Read a JSONL dataset into a stream (task order = first appearance).

    Sequence records carry ``"label"``; token records carry ``"labels"`` aligned
    with ``"tokens"``. A record may carry precomputed ``"features"`` (one vector,
    or one vector per token) which then replace hashing of the tokens.
    ``label_vocab`` is a list or a path to a one-label-per-line file; without it
    the vocabulary is built in first-appearance order.
    """
    if isinstance(label_vocab, (str, Path)):
        label_vocab = read_label_vocab(label_vocab)
    fixed_vocab = label_vocab is not None
    vocab = {name: k for k, name in enumerate(label_vocab or [])}

    def label_id(name, lineno):
        if name not in vocab:
            if fixed_vocab:
                raise SchemaError(f"{path}:{lineno}: unknown label {name!r}")
            vocab[name] = len(vocab)
        return vocab[name]

    tasks: dict[str, dict] = {}
    head_kind = None
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read dataset {path}: {e.strerror}") from None
    with f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                task_id, family, split = rec["task_id"], rec["family"], rec["split"]
                tokens = rec["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: malformed record ({e})") from None
            if split not in ("train", "dev", "test"):
                raise ParseError(f"{path}:{lineno}: split must be train/dev/test, got {split!r}")
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ParseError(f"{path}:{lineno}: tokens must be a list of strings")
            feats = rec.get("features")
            if feats is not None:
                try:
                    feats = np.asarray(feats, dtype=np.float64)
                except (TypeError, ValueError):
                    raise ParseError(f"{path}:{lineno}: features must be numeric") from None
            kind = "token_labeling" if "labels" in rec else "sequence_classification"
            if head_kind is None:
                head_kind = kind
            elif kind != head_kind:
                raise SchemaError(f"{path}:{lineno}: mixes token and sequence records")
            if kind == "token_labeling":
                labels = rec["labels"]
                if not isinstance(labels, list) or len(labels) != len(tokens) or not tokens:
                    raise ParseError(f"{path}:{lineno}: labels must align with a nonempty token list")
                ids = [label_id(lab, lineno) for lab in labels]
                if feats is None:
                    feats = np.stack([hash_featurize([t], dim) for t in tokens])
                elif feats.ndim != 2 or feats.shape[0] != len(tokens):
                    raise ParseError(f"{path}:{lineno}: token features must be one vector per token")
                ex = Example(feats, ids, task_id)
            else:
                if "label" not in rec:
                    raise ParseError(f"{path}:{lineno}: sequence record needs 'label'")
                if feats is None:
                    feats = hash_featurize(tokens, dim)
                elif feats.ndim != 1:
                    raise ParseError(f"{path}:{lineno}: sequence features must be one vector")
                ex = Example(feats, label_id(rec["label"], lineno), task_id)
            entry = tasks.setdefault(task_id, {"family": family, "train": [], "dev": [], "test": []})
            entry[split].append(ex)
    if not tasks:
        raise ParseError(f"{path}: no records")
    names = tuple(sorted(vocab, key=vocab.get))
    return TaskStream([
        TaskSpec(tid, e["family"], e["train"], e["dev"], e["test"], head_kind, names)
        for tid, e in tasks.items()
    ])


def write_stream(stream: TaskStream, path) -> Path:
    """Write a stream as JSONL with precomputed features, plus ``<path>.labels``.

    Tokens are placeholders (``tok0``, ``tok1``, ...); the features carry the data.
    Returns the label vocabulary path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = stream.label_names
    with open(path, "w", encoding="utf-8") as f:
        for t in stream.tasks:
            for split in ("train", "dev", "test"):
                for ex in getattr(t, split):
                    rec = {"task_id": t.task_id, "family": t.family, "split": split,
                           "tokens": [f"tok{k}" for k in range(ex.points.shape[0])],
                           "features": ex.features.tolist()}
                    if ex.is_token:
                        rec["labels"] = [names[k] for k in ex.labels]
                    else:
                        rec["label"] = names[ex.label]
                    f.write(json.dumps(rec) + "\n")
    vocab = path.with_name(path.name + ".labels")
    vocab.write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return vocab


def stream_fingerprint(stream: TaskStream) -> str:
    """SHA-256 over task ids, families and every example's features/labels, in order."""
    h = hashlib.sha256()
    for t in stream.tasks:
        h.update(f"{t.task_id}|{t.family}|{t.head_kind}".encode())
        for split in (t.train, t.dev, t.test):
            h.update(b"#")
            for ex in split:
                h.update(np.ascontiguousarray(ex.features).tobytes())
                h.update(np.ascontiguousarray(ex.labels).tobytes())
    return h.hexdigest()
