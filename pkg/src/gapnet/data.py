"""Instance schema, JSONL ingestion and a synthetic multi-view behavior generator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import ConfigError

FIELDS = ("request_id", "user_id", "context_id", "target_item_id", "seq_rt", "seq_st", "seq_lt", "label")
SEQ_FIELDS = ("seq_rt", "seq_st", "seq_lt")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed records, or ids inconsistent with the configured vocabularies."""


@dataclass
class Instance:
    request_id: int
    user_id: int
    context_id: int
    target_item_id: int
    seq_rt: list = field(default_factory=list)
    seq_st: list = field(default_factory=list)
    seq_lt: list = field(default_factory=list)
    label: int = 0

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}


@dataclass
class Vocab:
    n_users: int
    n_items: int
    n_contexts: int

    @classmethod
    def infer(cls, instances: Iterable[Instance]) -> "Vocab":
        users = items = contexts = 0
        for inst in instances:
            users = max(users, inst.user_id + 1)
            contexts = max(contexts, inst.context_id + 1)
            items = max(items, inst.target_item_id + 1, *(max(s, default=-1) + 1 for s in _seqs(inst)))
        return cls(users, items, contexts)


def _seqs(inst: Instance):
    return inst.seq_rt, inst.seq_st, inst.seq_lt


def check_instances(instances: Sequence[Instance], vocab: Vocab) -> None:
    """Raise :class:`DataError` naming the first field whose id falls outside ``vocab``."""
    limits = {"user_id": vocab.n_users, "context_id": vocab.n_contexts, "target_item_id": vocab.n_items}
    for i, inst in enumerate(instances):
        for name, limit in limits.items():
            value = getattr(inst, name)
            if not 0 <= value < limit:
                raise DataError(f"instance {i}: {name}={value} outside vocabulary of size {limit}")
        for name in SEQ_FIELDS:
            for value in getattr(inst, name):
                if not 0 <= value < vocab.n_items:
                    raise DataError(f"instance {i}: {name} contains item id {value} outside vocabulary of size {vocab.n_items}")
        if inst.label not in (0, 1):
            raise DataError(f"instance {i}: label must be 0 or 1, got {inst.label!r}")


# -- file format --------------------------------------------------------------


def _instance_from_record(rec, lineno: int) -> Instance:
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for name in FIELDS:
        if name not in rec:
            raise DataError(f"line {lineno}: missing field {name!r}")
    extra = sorted(set(rec) - set(FIELDS))
    if extra:
        raise DataError(f"line {lineno}: unexpected field(s) {extra}")
    for name in FIELDS:
        value = rec[name]
        if name in SEQ_FIELDS:
            ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        else:
            ok = isinstance(value, int) and not isinstance(value, bool)
        if not ok:
            raise DataError(f"line {lineno}: field {name!r} has invalid value {value!r}")
    return Instance(**{k: rec[k] for k in FIELDS})


def read_jsonl(path) -> list[Instance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            try:
                out.append(_instance_from_record(rec, lineno))
            except DataError as exc:
                raise DataError(f"{path}: {exc}") from None
    return out


def dumps_instance(inst: Instance) -> str:
    return json.dumps(inst.to_record(), separators=(",", ":"))


def write_jsonl(instances: Iterable[Instance], path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- generator ----------------------------------------------------------------


@dataclass
class GeneratorConfig:
    n_users: int = 2000
    n_items: int = 500
    n_contexts: int = 16
    n_clusters: int = 8
    T_rt: int = 5
    T_st: int = 20
    T_lt: int = 50
    noise_rate: float = 0.3
    drift_prob: float = 0.4
    negatives_per_positive: int = 4
    n_requests: int = 4000
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_contexts", "n_clusters", "n_requests"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("T_rt", "T_st", "T_lt", "negatives_per_positive"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("noise_rate", "drift_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability in [0, 1]")
        if self.n_clusters > self.n_items:
            raise ConfigError("n_clusters cannot exceed n_items")
        if self.n_clusters == 1 and self.negatives_per_positive > 0:
            raise ConfigError("degenerate single-cluster config: negatives need a cluster other than the session's")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_users, self.n_items, self.n_contexts)


def cluster_of(cfg: GeneratorConfig) -> np.ndarray:
    """Cluster index of every item; the last cluster absorbs the remainder."""
    size = cfg.n_items // cfg.n_clusters
    return np.minimum(np.arange(cfg.n_items) // size, cfg.n_clusters - 1)


def generate(cfg: GeneratorConfig) -> list[Instance]:
    """Sample requests whose labels follow the session (real-time) interest cluster.

    Every user has a fixed habit cluster (long-term view) and short-term
    cluster. Each request draws a session cluster, equal to the short-term one
    except with probability ``drift_prob`` where it jumps to another cluster.
    The real-time view comes from the session cluster; each behavior is
    independently swapped for a uniform random item with probability
    ``noise_rate``. The positive target is drawn from the session cluster and
    the negatives from other clusters, so a request holds exactly one positive.
    """
    rng = np.random.default_rng(cfg.seed)
    clusters = cluster_of(cfg)
    members = [np.flatnonzero(clusters == c) for c in range(cfg.n_clusters)]
    habit = rng.integers(cfg.n_clusters, size=cfg.n_users)
    short = rng.integers(cfg.n_clusters, size=cfg.n_users)

    def other_cluster(c: int) -> int:
        k = int(rng.integers(cfg.n_clusters - 1))
        return k + (k >= c)

    def behaviors(c: int, n: int) -> list:
        items = rng.choice(members[c], size=n)
        noisy = rng.random(n) < cfg.noise_rate
        items[noisy] = rng.integers(cfg.n_items, size=int(noisy.sum()))
        return [int(v) for v in items]

    out = []
    for rid in range(cfg.n_requests):
        u = int(rng.integers(cfg.n_users))
        ctx = int(rng.integers(cfg.n_contexts))
        sess = int(short[u])
        if cfg.n_clusters > 1 and rng.random() < cfg.drift_prob:
            sess = other_cluster(sess)
        seq_lt = behaviors(int(habit[u]), cfg.T_lt)
        seq_st = behaviors(int(short[u]), cfg.T_st)
        seq_rt = behaviors(sess, cfg.T_rt)
        targets = [(int(rng.choice(members[sess])), 1)]
        for _ in range(cfg.negatives_per_positive):
            targets.append((int(rng.choice(members[other_cluster(sess)])), 0))
        for j in rng.permutation(len(targets)):
            item, label = targets[j]
            out.append(Instance(rid, u, ctx, item, list(seq_rt), list(seq_st), list(seq_lt), label))
    return out


def split_of(request_id: int) -> str:
    """Deterministic 80/10/10 train/val/test assignment from a hash of the request id."""
    bucket = int.from_bytes(hashlib.sha256(str(request_id).encode()).digest()[:8], "big") % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def split(instances: Iterable[Instance]) -> dict:
    parts = {name: [] for name in SPLITS}
    for inst in instances:
        parts[split_of(inst.request_id)].append(inst)
    return parts


def write_dataset(cfg: GeneratorConfig, out_dir) -> dict:
    """Generate, split and write ``{train,val,test}.jsonl`` plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split(generate(cfg))
    files = {}
    for name in SPLITS:
        path = out_dir / f"{name}.jsonl"
        write_jsonl(parts[name], path)
        files[name] = {
            "path": path.name,
            "sha256": sha256_file(path),
            "n_instances": len(parts[name]),
            "n_positive": sum(i.label for i in parts[name]),
        }
    manifest = {"generator_config": asdict(cfg), "vocab": asdict(cfg.vocab), "files": files}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir, name: str) -> list[Instance]:
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    return read_jsonl(path)


def load_vocab(data_dir) -> Optional[Vocab]:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        return None
    return Vocab(**json.loads(path.read_text())["vocab"])


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    user: np.ndarray
    context: np.ndarray
    target: np.ndarray
    seqs: dict  # view -> (ids [B, L], mask [B, L])
    labels: np.ndarray
    request_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        """Sub-batch of rows ``idx``, re-trimmed to its own longest sequences."""
        idx = np.asarray(idx, dtype=np.int64)
        seqs = {}
        for view, (ids, mask) in self.seqs.items():
            m = mask[idx]
            width = int(m.sum(axis=1).max()) if len(idx) else 0
            seqs[view] = (ids[idx, :width], m[:, :width])
        return Batch(self.user[idx], self.context[idx], self.target[idx], seqs, self.labels[idx], self.request_ids[idx])


def _pad(seqs: list) -> tuple:
    width = max((len(s) for s in seqs), default=0)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(instances: Sequence[Instance]) -> Batch:
    return Batch(
        user=np.array([i.user_id for i in instances], dtype=np.int64),
        context=np.array([i.context_id for i in instances], dtype=np.int64),
        target=np.array([i.target_item_id for i in instances], dtype=np.int64),
        seqs={v: _pad([getattr(i, f"seq_{v}") for i in instances]) for v in ("rt", "st", "lt")},
        labels=np.array([i.label for i in instances], dtype=np.float64),
        request_ids=np.array([i.request_id for i in instances], dtype=np.int64),
    )
