"""Knowledge graph loading, filtering, adjacency and synthetic generation."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from ._rng import derive_rng

log = logging.getLogger(__name__)

FORWARD = 0
REVERSE = 1

SPLITS = ("train", "valid", "test")


class TripleParseError(ValueError):
    """Raised for a malformed triple file."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _empty_triples() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """An indexed knowledge graph.

    Triples are ``(n, 3)`` int64 arrays of ``(head, relation, tail)`` ids.
    Adjacency fields stay ``None`` until :func:`build_adjacency` is applied.
    The adjacency is stored CSR style: the edges of entity ``e`` are
    ``adj_rel/adj_dir/adj_nbr[adj_ptr[e]:adj_ptr[e + 1]]``.
    """

    entity_labels: tuple[str, ...]
    relation_labels: tuple[str, ...]
    train: np.ndarray
    valid: np.ndarray = field(default_factory=_empty_triples)
    test: np.ndarray = field(default_factory=_empty_triples)
    dropped: dict = field(default_factory=dict)
    adj_ptr: np.ndarray | None = None
    adj_rel: np.ndarray | None = None
    adj_dir: np.ndarray | None = None
    adj_nbr: np.ndarray | None = None
    relation_counts: np.ndarray | None = None

    @property
    def entity_count(self) -> int:
        return len(self.entity_labels)

    @property
    def relation_count(self) -> int:
        return len(self.relation_labels)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def has_adjacency(self) -> bool:
        return self.adj_ptr is not None

    def _require_adjacency(self):
        if not self.has_adjacency:
            raise RuntimeError("adjacency not built; call build_adjacency first")

    def edges(self, e: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(relations, directions, neighbours)`` of entity ``e``."""
        self._require_adjacency()
        lo, hi = self.adj_ptr[e], self.adj_ptr[e + 1]
        return self.adj_rel[lo:hi], self.adj_dir[lo:hi], self.adj_nbr[lo:hi]

    def neighbours(self, e: int) -> np.ndarray:
        self._require_adjacency()
        return self.adj_nbr[self.adj_ptr[e]:self.adj_ptr[e + 1]]

    @cached_property
    def relation_sets(self) -> np.ndarray:
        """Boolean ``|E| x |R|`` matrix: relation ``r`` touches entity ``e``."""
        self._require_adjacency()
        return self.relation_counts > 0

    @cached_property
    def degrees(self) -> np.ndarray:
        """Number of unique relations touching each entity, either direction."""
        return self.relation_sets.sum(axis=1)

    def relation_set(self, e: int) -> np.ndarray:
        return np.flatnonzero(self.relation_sets[e])

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def manifest(self) -> str:
        """Text manifest with counts and a checksum of every split."""
        digest = hashlib.sha256()
        for name in SPLITS:
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.split(name), dtype="<i8").tobytes())
        lines = [
            f"entity_count={self.entity_count}",
            f"relation_count={self.relation_count}",
            f"train={len(self.train)}",
            f"valid={len(self.valid)}",
            f"test={len(self.test)}",
        ]
        lines += [f"dropped_{k}={v}" for k, v in sorted(self.dropped.items())]
        lines.append(f"sha256={digest.hexdigest()}")
        return "\n".join(lines) + "\n"


def _read_lines(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            yield parts


def load_tsv(train_path, valid_path=None, test_path=None) -> KnowledgeGraph:
    """Load a graph from tab-separated triple files.

    Vocabularies come from the train file in first-appearance order.
    Valid/test triples with labels unknown to train are dropped and counted
    (see :func:`filter_unseen`). Duplicate train triples are dropped.
    """
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    rows = []
    seen = set()
    dup = 0
    for h, r, t in _read_lines(train_path):
        hi = ent.setdefault(h, len(ent))
        ri = rel.setdefault(r, len(rel))
        ti = ent.setdefault(t, len(ent))
        key = (hi, ri, ti)
        if key in seen:
            dup += 1
            continue
        seen.add(key)
        rows.append(key)
    if not rows:
        raise ValueError(f"train file {train_path} contains no triples")
    if dup:
        log.info("dropped %d duplicate train triples", dup)

    dropped = {"train_duplicates": dup}
    splits = {}
    for name, path in (("valid", valid_path), ("test", test_path)):
        if path is None:
            splits[name] = _empty_triples()
            continue
        kept, unseen, local = [], 0, set()
        for h, r, t in _read_lines(path):
            if h not in ent or r not in rel or t not in ent:
                unseen += 1
                continue
            key = (ent[h], rel[r], ent[t])
            if key in local:
                continue
            local.add(key)
            kept.append(key)
        splits[name] = np.array(kept, dtype=np.int64).reshape(-1, 3)
        dropped[f"{name}_unseen"] = unseen
        if unseen:
            log.info("dropped %d %s triples with unseen entities or relations", unseen, name)

    return KnowledgeGraph(
        entity_labels=tuple(ent),
        relation_labels=tuple(rel),
        train=np.array(rows, dtype=np.int64),
        valid=splits["valid"],
        test=splits["test"],
        dropped=dropped,
    )


def save_tsv(kg: KnowledgeGraph, directory) -> dict[str, Path]:
    """Write ``train.txt``/``valid.txt``/``test.txt`` with labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLITS:
        path = directory / f"{name}.txt"
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for h, r, t in kg.split(name):
                fh.write(f"{kg.entity_labels[h]}\t{kg.relation_labels[r]}\t{kg.entity_labels[t]}\n")
        paths[name] = path
    return paths


def filter_unseen(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Drop valid/test triples whose head, relation or tail never occurs in train."""
    seen_ent = np.zeros(kg.entity_count, dtype=bool)
    seen_ent[kg.train[:, 0]] = True
    seen_ent[kg.train[:, 2]] = True
    seen_rel = np.zeros(kg.relation_count, dtype=bool)
    seen_rel[kg.train[:, 1]] = True

    dropped = dict(kg.dropped)
    out = {}
    for name in ("valid", "test"):
        trip = kg.split(name)
        keep = seen_ent[trip[:, 0]] & seen_rel[trip[:, 1]] & seen_ent[trip[:, 2]]
        n_drop = int((~keep).sum())
        dropped[f"{name}_unseen"] = dropped.get(f"{name}_unseen", 0) + n_drop
        out[name] = trip[keep]
    return replace(kg, valid=out["valid"], test=out["test"], dropped=dropped)


def build_adjacency(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Attach adjacency with reverse edges and per-entity relation counts.

    A train triple ``(h, r, t)`` gives ``h`` the edge ``(r, FORWARD, t)`` and
    ``t`` the edge ``(r, REVERSE, h)``. ``relation_counts[e, r]`` counts the
    edges of relation ``r`` at ``e`` over both directions.
    """
    h, r, t = kg.train[:, 0], kg.train[:, 1], kg.train[:, 2]
    owner = np.concatenate([h, t])
    rels = np.concatenate([r, r])
    dirs = np.concatenate([np.full(len(h), FORWARD), np.full(len(t), REVERSE)]).astype(np.int8)
    nbrs = np.concatenate([t, h])

    order = np.argsort(owner, kind="stable")
    ptr = np.zeros(kg.entity_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=kg.entity_count), out=ptr[1:])

    counts = np.zeros((kg.entity_count, kg.relation_count), dtype=np.int64)
    np.add.at(counts, (owner, rels), 1)

    return replace(
        kg,
        adj_ptr=ptr,
        adj_rel=rels[order],
        adj_dir=dirs[order],
        adj_nbr=nbrs[order],
        relation_counts=counts,
    )


def load_dataset(train_path, valid_path=None, test_path=None) -> KnowledgeGraph:
    """``load_tsv`` followed by ``filter_unseen`` and ``build_adjacency``."""
    return build_adjacency(filter_unseen(load_tsv(train_path, valid_path, test_path)))


def load_directory(directory) -> KnowledgeGraph:
    directory = Path(directory)
    paths = [directory / f"{name}.txt" for name in SPLITS]
    if not paths[0].exists():
        raise FileNotFoundError(paths[0])
    return load_dataset(paths[0], *(p if p.exists() else None for p in paths[1:]))


_ENUMERATE_LIMIT = 4_000_000


def _power_law(n: int, skew: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(skew))
    return w / w.sum()


def synth_kg(
    seed: int,
    entity_count: int,
    relation_count: int,
    triple_count: int,
    degree_skew: float = 0.0,
) -> KnowledgeGraph:
    """Sample a random graph with power-law entity popularity.

    Heads and tails are drawn independently with probability proportional
    to ``rank ** -degree_skew`` over a seeded ranking of the entities;
    relations are uniform. Triples are unique. The triples are shuffled and
    split 80/10/10, then unseen valid/test triples are filtered and the
    adjacency is built.
    """
    if entity_count < 1 or relation_count < 1 or triple_count < 1:
        raise ValueError("counts must be positive")
    if degree_skew < 0:
        raise ValueError("degree_skew must be >= 0")
    capacity = entity_count * entity_count * relation_count
    if triple_count > capacity:
        raise ValueError(f"triple_count {triple_count} exceeds capacity {capacity}")

    rng = derive_rng(seed, "synth")
    rank_of = rng.permutation(entity_count)
    p_ent = _power_law(entity_count, degree_skew)[rank_of]

    if capacity <= _ENUMERATE_LIMIT:
        p = np.multiply.outer(np.multiply.outer(p_ent, np.full(relation_count, 1.0 / relation_count)), p_ent).ravel()
        p /= p.sum()
        flat = rng.choice(capacity, size=triple_count, replace=False, p=p)
    else:
        chosen: dict[int, None] = {}
        while len(chosen) < triple_count:
            need = triple_count - len(chosen)
            hs = rng.choice(entity_count, size=2 * need, p=p_ent)
            rs = rng.integers(relation_count, size=2 * need)
            ts = rng.choice(entity_count, size=2 * need, p=p_ent)
            for f in (hs * relation_count + rs) * entity_count + ts:
                if len(chosen) == triple_count:
                    break
                chosen.setdefault(int(f))
        flat = np.fromiter(chosen, dtype=np.int64, count=triple_count)

    flat = np.asarray(flat, dtype=np.int64)
    heads, rem = np.divmod(flat, relation_count * entity_count)
    rels, tails = np.divmod(rem, entity_count)
    triples = np.stack([heads, rels, tails], axis=1)
    triples = triples[rng.permutation(triple_count)]

    n_train = int(round(0.8 * triple_count))
    n_valid = int(round(0.1 * triple_count))
    kg = KnowledgeGraph(
        entity_labels=tuple(f"e{i}" for i in range(entity_count)),
        relation_labels=tuple(f"r{i}" for i in range(relation_count)),
        train=triples[:n_train],
        valid=triples[n_train:n_train + n_valid],
        test=triples[n_train + n_valid:],
    )
    return build_adjacency(filter_unseen(kg))


def triple_set(triples: np.ndarray) -> set[tuple[int, int, int]]:
    return set(map(tuple, np.asarray(triples).tolist()))


def ceil_fraction(fraction: float, total: int) -> int:
    # tolerance keeps 0.1 * 30 from rounding up to 4
    return min(total, max(0, math.ceil(fraction * total - 1e-9)))
