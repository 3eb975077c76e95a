"""Propagation events: data model, adjacency views, JSONL I/O, synthetic data."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, StructureError

PAD = "<pad>"
UNK = "<unk>"


@dataclass(frozen=True)
class Post:
    post_id: str
    parent_id: str | None
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise StructureError(f"post {self.post_id!r} has no tokens")
        if any(t < 0 for t in self.tokens):
            raise StructureError(f"post {self.post_id!r} has a negative token index")


@dataclass(frozen=True)
class AdjacencyViews:
    """Raw 0/1 directed views plus the row-normalised, self-looped operators."""

    top_down: np.ndarray
    bottom_up: np.ndarray
    undirected: np.ndarray
    top_down_norm: np.ndarray
    bottom_up_norm: np.ndarray
    undirected_norm: np.ndarray


@dataclass(frozen=True)
class PropagationEvent:
    """One labelled event.  Node ``i`` is ``posts[i]``; node 0 is the source."""

    event_id: str
    label: int
    posts: tuple[Post, ...]

    def __post_init__(self):
        object.__setattr__(self, "posts", tuple(self.posts))
        object.__setattr__(self, "label", int(self.label))
        if self.label < 0:
            raise StructureError(f"event {self.event_id!r}: negative label")
        _check_tree(self)

    @property
    def num_nodes(self) -> int:
        return len(self.posts)

    @property
    def tokens(self) -> tuple[tuple[int, ...], ...]:
        return tuple(p.tokens for p in self.posts)

    @property
    def num_tokens(self) -> int:
        return sum(len(p.tokens) for p in self.posts)

    def edges(self) -> list[tuple[int, int]]:
        """Reply edges as (parent node, child node)."""
        index = {p.post_id: i for i, p in enumerate(self.posts)}
        return [(index[p.parent_id], i) for i, p in enumerate(self.posts) if p.parent_id is not None]

    @cached_property
    def adjacency(self) -> AdjacencyViews:
        return build_adjacency(self)

    def to_record(self) -> dict:
        return {
            "event_id": self.event_id,
            "label": self.label,
            "posts": [
                {"post_id": p.post_id, "parent_id": p.parent_id, "tokens": list(p.tokens)}
                for p in self.posts
            ],
        }

    @classmethod
    def from_record(cls, record: dict) -> "PropagationEvent":
        if not isinstance(record, dict):
            raise StructureError("event record must be a JSON object")
        missing = {"event_id", "label", "posts"} - record.keys()
        if missing:
            raise StructureError(f"missing field(s): {', '.join(sorted(missing))}")
        if not isinstance(record["label"], int) or isinstance(record["label"], bool):
            raise StructureError("label must be an integer")
        if not isinstance(record["posts"], list):
            raise StructureError("posts must be a list")
        posts = []
        for p in record["posts"]:
            if not isinstance(p, dict) or not {"post_id", "tokens"} <= p.keys():
                raise StructureError("each post needs post_id and tokens")
            toks = p["tokens"]
            if not isinstance(toks, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in toks
            ):
                raise StructureError(f"post {p['post_id']!r}: tokens must be a list of integers")
            posts.append(Post(str(p["post_id"]), p.get("parent_id"), tuple(toks)))
        return cls(str(record["event_id"]), record["label"], tuple(posts))


def _check_tree(event: PropagationEvent) -> None:
    posts = event.posts
    if not posts:
        raise StructureError(f"event {event.event_id!r} has no posts")
    ids = [p.post_id for p in posts]
    if len(set(ids)) != len(ids):
        raise StructureError(f"event {event.event_id!r}: duplicate post_id")
    if posts[0].parent_id is not None:
        raise StructureError(f"event {event.event_id!r}: source post must not have a parent")
    known = set(ids)
    parent = {}
    for p in posts[1:]:
        if p.parent_id is None:
            raise StructureError(f"event {event.event_id!r}: post {p.post_id!r} has no parent")
        if p.parent_id not in known:
            raise StructureError(
                f"event {event.event_id!r}: post {p.post_id!r} has dangling parent {p.parent_id!r}"
            )
        parent[p.post_id] = p.parent_id
    root = posts[0].post_id
    for pid in ids[1:]:
        seen = set()
        node = pid
        while node != root:
            if node in seen:
                raise StructureError(f"event {event.event_id!r}: reply cycle through {pid!r}")
            seen.add(node)
            node = parent[node]


def _row_normalize(adj: np.ndarray) -> np.ndarray:
    a = adj + np.eye(adj.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def build_adjacency(event: PropagationEvent) -> AdjacencyViews:
    n = event.num_nodes
    td = np.zeros((n, n))
    for parent, child in event.edges():
        td[parent, child] = 1.0
    bu = td.T.copy()
    und = np.maximum(td, bu)
    return AdjacencyViews(td, bu, und, _row_normalize(td), _row_normalize(bu), _row_normalize(und))


# -- JSONL I/O ---------------------------------------------------------------


def load_events(path, num_classes: int | None = None) -> list[PropagationEvent]:
    """Read and validate a JSONL dataset.

    Raises IngestionError naming the first offending (1-based) line.
    """
    events = []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"malformed JSON ({exc.msg})", lineno) from None
            try:
                event = PropagationEvent.from_record(record)
            except StructureError as exc:
                raise IngestionError(str(exc), lineno) from None
            if num_classes is not None and event.label >= num_classes:
                raise IngestionError(
                    f"unknown label {event.label} (expected < {num_classes})", lineno
                )
            if event.event_id in seen_ids:
                raise IngestionError(f"duplicate event_id {event.event_id!r}", lineno)
            seen_ids.add(event.event_id)
            events.append(event)
    return events


def dumps_events(events: Iterable[PropagationEvent]) -> str:
    return "".join(json.dumps(e.to_record()) + "\n" for e in events)


def save_events(events: Iterable[PropagationEvent], path) -> None:
    atomic_write_text(path, dumps_events(events))


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- vocabulary ----------------------------------------------------------------


class Vocabulary:
    """Dense token string <-> index bijection with PAD at 0 and UNK at 1."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._itos = [PAD, UNK]
        self._stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self):
        return len(self._itos)

    def index(self, token: str) -> int:
        return self._stoi.get(token, self._stoi[UNK])

    def token(self, index: int) -> str:
        return self._itos[index]

    def to_dict(self) -> dict[str, int]:
        return dict(self._stoi)

    @classmethod
    def from_dict(cls, mapping: dict[str, int]) -> "Vocabulary":
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise StructureError("vocabulary indices must be dense from 0")
        if mapping.get(PAD) != 0 or mapping.get(UNK) != 1:
            raise StructureError("vocabulary must map <pad> to 0 and <unk> to 1")
        return cls([tok for tok, _ in ordered[2:]])

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- synthetic planted data -------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    num_events: int = 500
    num_classes: int = 4
    vocab_size: int = 200
    tree_size_range: tuple[int, int] = (4, 12)
    tokens_per_post_range: tuple[int, int] = (3, 6)
    planted_tokens_per_class: int = 5
    noise_rate: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.num_events < 1 or self.num_classes < 2:
            raise ConfigError("need num_events >= 1 and num_classes >= 2")
        lo, hi = self.tree_size_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad tree_size_range {self.tree_size_range}")
        lo, hi = self.tokens_per_post_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad tokens_per_post_range {self.tokens_per_post_range}")
        if self.planted_tokens_per_class < 1:
            raise ConfigError("planted_tokens_per_class must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        planted = self.num_classes * self.planted_tokens_per_class
        # two slots go to PAD/UNK and the filler pool must be non-empty
        if self.vocab_size < planted + 3:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_classes} classes x "
                f"{self.planted_tokens_per_class} planted tokens (need >= {planted + 3})"
            )


@dataclass
class SyntheticDataset:
    events: list[PropagationEvent]
    vocabulary: Vocabulary
    registry: dict[int, tuple[int, ...]]
    config: SyntheticConfig = field(default_factory=SyntheticConfig)

    @property
    def planted_tokens(self) -> frozenset[int]:
        return frozenset(t for toks in self.registry.values() for t in toks)


def generate_synthetic(config: SyntheticConfig | None = None, **overrides) -> SyntheticDataset:
    """Random reply trees whose posts carry class-specific planted tokens.

    Every post carries one planted token.  In a class-``c`` event it comes
    from ``c``'s planted set with probability ``1 - noise_rate`` and from a
    uniformly random class's set otherwise; all other slots are uniform
    over the filler pool.  Unless ``noise_rate == 1`` the source post always
    carries a token of the event's own class.
    """
    config = config or SyntheticConfig()
    if overrides:
        config = SyntheticConfig(**{**config.__dict__, **overrides})
    config.validate()
    rng = np.random.default_rng(config.seed)

    vocab = Vocabulary([f"tok{i:04d}" for i in range(2, config.vocab_size)])
    content = np.arange(2, config.vocab_size)
    perm = rng.permutation(content)
    k = config.planted_tokens_per_class
    registry = {c: tuple(sorted(int(t) for t in perm[c * k:(c + 1) * k])) for c in range(config.num_classes)}
    filler = np.sort(perm[config.num_classes * k:])

    events = []
    width = len(str(config.num_events - 1))
    for n in range(config.num_events):
        label = int(rng.integers(config.num_classes))
        size = int(rng.integers(config.tree_size_range[0], config.tree_size_range[1] + 1))
        posts = []
        for i in range(size):
            count = int(rng.integers(config.tokens_per_post_range[0], config.tokens_per_post_range[1] + 1))
            toks = [int(t) for t in rng.choice(filler, size=count)]
            source = label
            if rng.random() < config.noise_rate and not (i == 0 and config.noise_rate < 1.0):
                source = int(rng.integers(config.num_classes))
            toks[int(rng.integers(count))] = int(rng.choice(registry[source]))
            parent = None if i == 0 else f"e{n:0{width}d}-p{int(rng.integers(i))}"
            posts.append(Post(f"e{n:0{width}d}-p{i}", parent, tuple(toks)))
        events.append(PropagationEvent(f"e{n:0{width}d}", label, tuple(posts)))
    return SyntheticDataset(events, vocab, registry, config)


def save_registry(registry: dict[int, Sequence[int]], path) -> None:
    payload = {str(c): list(toks) for c, toks in sorted(registry.items())}
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def load_registry(path) -> dict[int, tuple[int, ...]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {int(c): tuple(int(t) for t in toks) for c, toks in raw.items()}


# -- splits --------------------------------------------------------------------


def train_val_split(events: Sequence, val_fraction: float = 0.2, seed: int = 0):
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(events))
    n_val = max(1, int(round(val_fraction * len(events))))
    val = [events[i] for i in sorted(order[:n_val])]
    train = [events[i] for i in sorted(order[n_val:])]
    return train, val


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Seeded k-fold partition of ``range(n)``; folds are sorted index arrays."""
    if k < 1 or k > max(n, 1):
        raise ConfigError(f"cannot split {n} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, k)]
