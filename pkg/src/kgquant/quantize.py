"""Entity quantization: codebooks, codeword matching and entity codes.

A code for entity ``e`` lists the codewords it matched out of ``l`` total.
Relation codewords occupy ``[0, m)`` and anchor codewords ``[m, m + n)``;
in abstract mode all ``l = m + n`` codewords are meaningless symbols.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._rng import derive_rng
from .kg import KnowledgeGraph, ceil_fraction

RELATION_STRATEGIES = ("connected", "random", "none")
ANCHOR_STRATEGIES = ("nearest_path", "relation_similarity", "random", "none")
WEIGHT_SCHEMES = ("earl_connectivity", "random", "equal")
ANCHOR_SELECTIONS = ("degree", "ppr", "uniform_sample", "fraction_sample")


@dataclass(frozen=True)
class Codebook:
    kind: str
    size: int
    anchor_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("relation", "anchor", "abstract"):
            raise ValueError(f"unknown codebook kind {self.kind!r}")
        if self.kind == "anchor":
            ids = np.asarray(self.anchor_ids, dtype=np.int64)
            if len(np.unique(ids)) != len(ids):
                raise ValueError("anchor ids must be distinct")
            object.__setattr__(self, "anchor_ids", ids)
            if self.size != len(ids):
                raise ValueError("anchor codebook size must equal number of anchors")
        if self.size < 1:
            raise ValueError("codebook size must be >= 1")


@dataclass(frozen=True, eq=False)
class EntityCode:
    """Matched codeword indices (strictly increasing) with positive weights."""

    indices: np.ndarray
    weights: np.ndarray
    l: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if idx.shape != w.shape:
            raise ValueError("indices and weights differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.l):
            raise ValueError("indices must be strictly increasing and in [0, l)")
        if np.any(~(w > 0)):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_pairs(cls, indices, weights, l: int) -> "EntityCode":
        indices = np.asarray(indices, dtype=np.int64)
        order = np.argsort(indices, kind="stable")
        return cls(indices[order], np.asarray(weights, dtype=np.float64)[order], l)

    def dense(self) -> np.ndarray:
        v = np.zeros(self.l)
        v[self.indices] = self.weights
        return v

    def key(self) -> tuple[int, ...]:
        return tuple(self.indices.tolist())

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        if not isinstance(other, EntityCode):
            return NotImplemented
        return (self.l == other.l and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.weights, other.weights))


@dataclass(frozen=True)
class QuantConfig:
    relation_strategy: str = "connected"
    anchor_strategy: str = "nearest_path"
    weight_scheme: str = "equal"
    abstract_mode: bool = False
    d: int | None = None  # None = unbounded
    k: int = 5
    anchor_selection: str = "degree"
    anchor_count_or_fraction: float = 0.1
    ppr_damping: float = 0.85
    ppr_iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.relation_strategy not in RELATION_STRATEGIES:
            raise ValueError(f"relation_strategy must be one of {RELATION_STRATEGIES}")
        if self.anchor_strategy not in ANCHOR_STRATEGIES:
            raise ValueError(f"anchor_strategy must be one of {ANCHOR_STRATEGIES}")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"weight_scheme must be one of {WEIGHT_SCHEMES}")
        if self.anchor_selection not in ANCHOR_SELECTIONS:
            raise ValueError(f"anchor_selection must be one of {ANCHOR_SELECTIONS}")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be >= 1 or None")
        if self.relation_strategy == "none" and self.anchor_strategy == "none":
            raise ValueError("at least one of the relation or anchor codebooks must be active")

    @property
    def uses_anchors(self) -> bool:
        return self.anchor_strategy != "none"

    @property
    def uses_relations(self) -> bool:
        return self.relation_strategy != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# anchor selection


def _top_n(scores: np.ndarray, n: int) -> np.ndarray:
    # highest score first, smaller id wins ties
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    return order[:n]


def _check_n(kg: KnowledgeGraph, n: int):
    if n < 1 or n > kg.entity_count:
        raise ValueError(f"anchor count {n} must be in [1, {kg.entity_count}]")


def select_anchors_degree(kg: KnowledgeGraph, n: int) -> Codebook:
    _check_n(kg, n)
    return Codebook("anchor", n, _top_n(kg.degrees, n))


def pagerank(kg: KnowledgeGraph, damping: float = 0.85, iterations: int = 50) -> np.ndarray:
    """Global PageRank over the undirected entity graph.

    Edge multiplicities act as weights; dangling entities spread their mass
    uniformly. Starts from the uniform vector and runs ``iterations`` steps.
    """
    if not 0 < damping < 1:
        raise ValueError("damping must be in (0, 1)")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n = kg.entity_count
    src = np.repeat(np.arange(n), np.diff(kg.adj_ptr))
    adj = sp.csr_matrix((np.ones(len(src)), (kg.adj_nbr, src)), shape=(n, n))
    out_deg = np.asarray(adj.sum(axis=0)).ravel()
    dangling = out_deg == 0
    inv = np.divide(1.0, out_deg, out=np.zeros(n), where=~dangling)
    transition = adj @ sp.diags(inv)  # column stochastic except dangling columns

    x = np.full(n, 1.0 / n)
    for _ in range(iterations):
        x = damping * (transition @ x + x[dangling].sum() / n) + (1.0 - damping) / n
    return x


def select_anchors_ppr(kg: KnowledgeGraph, n: int, damping: float = 0.85, iterations: int = 50) -> Codebook:
    _check_n(kg, n)
    return Codebook("anchor", n, _top_n(pagerank(kg, damping, iterations), n))


def select_anchors_sample(kg: KnowledgeGraph, fraction: float, seed: int) -> Codebook:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = max(1, ceil_fraction(fraction, kg.entity_count))
    return select_anchors_uniform(kg, n, seed)


def select_anchors_uniform(kg: KnowledgeGraph, n: int, seed: int) -> Codebook:
    _check_n(kg, n)
    ids = derive_rng(seed, "anchors").choice(kg.entity_count, size=n, replace=False)
    return Codebook("anchor", n, np.sort(ids))


def select_anchors(kg: KnowledgeGraph, config: QuantConfig) -> Codebook:
    sel, amount = config.anchor_selection, config.anchor_count_or_fraction
    if sel == "fraction_sample":
        return select_anchors_sample(kg, amount, config.seed)
    n = ceil_fraction(amount, kg.entity_count) if amount < 1 else int(amount)
    if sel == "degree":
        return select_anchors_degree(kg, n)
    if sel == "ppr":
        return select_anchors_ppr(kg, n, config.ppr_damping, config.ppr_iterations)
    return select_anchors_uniform(kg, n, config.seed)


# ---------------------------------------------------------------------------
# matching


def match_relations_connected(kg: KnowledgeGraph, e: int, d: int | None = None) -> np.ndarray:
    """Unique relations of ``e``; above ``d`` keep the most frequent ones."""
    counts = kg.relation_counts[e]
    rels = np.flatnonzero(counts)
    if d is not None and len(rels) > d:
        rels = rels[_top_n(counts[rels], d)]
    return np.sort(rels)


def match_random(universe_size: int, count: int, seed: int, entity_id: int, purpose: str = "match") -> np.ndarray:
    """Uniform sample of ``count`` distinct indices from ``[0, universe_size)``."""
    if count > universe_size:
        raise ValueError(f"cannot draw {count} codewords from {universe_size}")
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = derive_rng(seed, purpose, entity_id)
    return np.sort(rng.choice(universe_size, size=count, replace=False))


def _check_k(book: Codebook, k: int):
    if k > book.size:
        raise ValueError(f"k={k} exceeds anchor codebook size {book.size}")


def match_anchors_nearest(kg: KnowledgeGraph, anchors: Codebook, e: int, k: int, seed: int = 0) -> np.ndarray:
    """Codebook positions of the ``k`` anchors closest to ``e`` by hop count.

    Breadth-first over the undirected graph; ordered by (distance, entity id).
    When fewer than ``k`` anchors are reachable the remainder is drawn
    uniformly from the unreached anchors.
    """
    _check_k(anchors, k)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    pos = {int(a): i for i, a in enumerate(anchors.anchor_ids)}
    found: list[int] = []
    dist = {e: 0}
    layer = [e]
    while layer and len(found) < k:
        found.extend(pos[v] for v in sorted(layer) if v in pos)
        if len(found) >= k:
            break
        nxt = set()
        for v in layer:
            for u in kg.neighbours(v).tolist():
                if u not in dist:
                    dist[u] = dist[v] + 1
                    nxt.add(u)
        layer = list(nxt)
    found = found[:k]
    if len(found) < k:
        rest = np.setdiff1d(np.arange(anchors.size), found)
        extra = derive_rng(seed, "anchor_pad", e).choice(rest, size=k - len(found), replace=False)
        found.extend(int(x) for x in extra)
    return np.asarray(found, dtype=np.int64)


def _jaccard_rows(sets: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Jaccard similarity of boolean row vector ``row`` with every row of ``sets``."""
    inter = (sets & row).sum(axis=1)
    union = (sets | row).sum(axis=1)
    return np.divide(inter, union, out=np.zeros(len(sets)), where=union > 0)


def relation_similarity(kg: KnowledgeGraph, e: int, others: np.ndarray) -> np.ndarray:
    has = kg.relation_sets
    return _jaccard_rows(has[np.asarray(others)], has[e])


def match_anchors_relation_similarity(kg: KnowledgeGraph, anchors: Codebook, e: int, k: int) -> np.ndarray:
    """Positions of the ``k`` anchors whose relation sets are most similar to ``e``'s."""
    _check_k(anchors, k)
    sim = relation_similarity(kg, e, anchors.anchor_ids)
    order = np.lexsort((anchors.anchor_ids, -sim))
    return order[:k]


# ---------------------------------------------------------------------------
# weights


def _normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw
    pos = raw > 0
    if not pos.any():
        return np.full(raw.size, 1.0 / raw.size)
    # zero scores would violate positivity; give them half the smallest positive score
    raw = np.where(pos, raw, raw[pos].min() / 2)
    return raw / raw.sum()


def assign_weights(
    kg: KnowledgeGraph,
    e: int,
    relations,
    anchor_entities,
    scheme: str,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Weights for matched relation codewords and matched anchor entities.

    ``earl_connectivity`` weighs relations by their edge count at ``e`` and
    anchors by relation-set Jaccard similarity, each group normalised to sum
    to one. ``random`` draws from (0, 1]; ``equal`` sets everything to 1.
    """
    relations = np.asarray(relations, dtype=np.int64)
    anchor_entities = np.asarray(anchor_entities, dtype=np.int64)
    nr, na = len(relations), len(anchor_entities)
    if scheme == "equal":
        return np.ones(nr), np.ones(na)
    if scheme == "random":
        rng = derive_rng(seed, "weights", e)
        w = 1.0 - rng.random(nr + na)  # (0, 1]
        return w[:nr], w[nr:]
    if scheme == "earl_connectivity":
        rw = _normalize(kg.relation_counts[e, relations])
        aw = _normalize(relation_similarity(kg, e, anchor_entities)) if na else np.zeros(0)
        return rw, aw
    raise ValueError(f"unknown weight scheme {scheme!r}")


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class Quantization:
    codes: list[EntityCode]
    m: int
    n: int
    config: QuantConfig
    anchors: Codebook | None = None
    mean_relations: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def l(self) -> int:
        return self.m + self.n

    def weight_matrix(self) -> sp.csr_matrix:
        """``|E| x l`` sparse matrix of weights normalised per row (mean pooling)."""
        return codes_to_matrix(self.codes, self.l)


def codes_to_matrix(codes, l: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, c in enumerate(codes):
        if not len(c):
            continue
        total = c.weights.sum()
        w = c.weights / total if total > 0 else np.full(len(c), 1.0 / len(c))
        rows.append(np.full(len(c), i))
        cols.append(c.indices)
        vals.append(w)
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(codes), l))


def mean_matched_relations(kg: KnowledgeGraph, d: int | None) -> float:
    deg = kg.degrees
    s = deg if d is None else np.minimum(deg, d)
    return float(s.mean())


def quantize_all(kg: KnowledgeGraph, config: QuantConfig) -> Quantization:
    """Produce one code per entity under ``config``."""
    m = kg.relation_count if config.uses_relations else 0
    anchors = select_anchors(kg, config) if config.uses_anchors else None
    n = anchors.size if anchors is not None else 0
    s_mean = mean_matched_relations(kg, config.d)

    if config.abstract_mode:
        l = m + n
        count = round(s_mean) + config.k  # round-half-even
        if count > l:
            raise ValueError(f"code size {count} exceeds abstract codebook size {l}")
        codes = [
            EntityCode(match_random(l, count, config.seed, e, "abstract"), np.ones(count), l)
            for e in range(kg.entity_count)
        ]
        return Quantization(codes, m, n, config, None, s_mean, {"code_size": count})

    if anchors is not None:
        _check_k(anchors, config.k)
    codes = []
    for e in range(kg.entity_count):
        if config.relation_strategy == "connected":
            rels = match_relations_connected(kg, e, config.d)
        elif config.relation_strategy == "random":
            s_i = int(kg.degrees[e]) if config.d is None else min(int(kg.degrees[e]), config.d)
            rels = match_random(m, s_i, config.seed, e, "relations")
        else:
            rels = np.zeros(0, dtype=np.int64)

        if config.anchor_strategy == "nearest_path":
            apos = match_anchors_nearest(kg, anchors, e, config.k, config.seed)
        elif config.anchor_strategy == "relation_similarity":
            apos = match_anchors_relation_similarity(kg, anchors, e, config.k)
        elif config.anchor_strategy == "random":
            apos = match_random(n, config.k, config.seed, e, "anchors")
        else:
            apos = np.zeros(0, dtype=np.int64)

        anchor_entities = anchors.anchor_ids[apos] if anchors is not None else apos
        rw, aw = assign_weights(kg, e, rels, anchor_entities, config.weight_scheme, config.seed)
        codes.append(EntityCode.from_pairs(np.concatenate([rels, m + apos]), np.concatenate([rw, aw]), m + n))
    return Quantization(codes, m, n, config, anchors, s_mean)


# ---------------------------------------------------------------------------
# named variants


def variant_config(base: QuantConfig, name: str) -> QuantConfig:
    """Apply a named randomisation to a designed base configuration.

    Names: ``designed``, ``+RSR``, ``+RSA``, ``+RSR+RSA``, ``w/o anc``,
    ``w/o anc+RSR``, ``w/o rel``, ``w/o rel+RSA``, ``+RW``, ``+EW``, ``+RQ``.
    """
    table = {
        "designed": {},
        "+RSR": {"relation_strategy": "random"},
        "+RSA": {"anchor_strategy": "random"},
        "+RSR+RSA": {"relation_strategy": "random", "anchor_strategy": "random"},
        "w/o anc": {"anchor_strategy": "none"},
        "w/o anc+RSR": {"anchor_strategy": "none", "relation_strategy": "random"},
        "w/o rel": {"relation_strategy": "none"},
        "w/o rel+RSA": {"relation_strategy": "none", "anchor_strategy": "random"},
        "+RW": {"weight_scheme": "random"},
        "+EW": {"weight_scheme": "equal"},
        "+RQ": {"abstract_mode": True, "weight_scheme": "equal"},
    }
    if name not in table:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(table)}")
    return replace(base, **table[name])


VARIANTS = ("designed", "+RSR", "+RSA", "+RSR+RSA", "w/o anc", "w/o anc+RSR",
            "w/o rel", "w/o rel+RSA", "+RW", "+EW", "+RQ")


# ---------------------------------------------------------------------------
# dump format


def _fmt_weight(w: float) -> str:
    return float(w).hex()


def write_codes(path, quant: Quantization, config_hash: str | None = None) -> None:
    """One header line, then ``entity idx:weight ...`` per entity.

    Weights are written as C99 hex floats so the file is bit-exact.
    """
    config_hash = config_hash or quant.config.digest()
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# l={quant.l} m={quant.m} n={quant.n} config={config_hash}\n")
        for e, c in enumerate(quant.codes):
            pairs = " ".join(f"{i}:{_fmt_weight(w)}" for i, w in zip(c.indices.tolist(), c.weights.tolist()))
            fh.write(f"{e} {pairs}".rstrip() + "\n")


class CodeParseError(ValueError):
    pass


def read_codes(path) -> tuple[list[EntityCode], dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise CodeParseError(f"{path}: missing header line")
        try:
            meta = dict(item.split("=", 1) for item in header[1:].split())
            l = int(meta["l"])
            meta["l"], meta["m"], meta["n"] = l, int(meta["m"]), int(meta["n"])
        except (KeyError, ValueError) as exc:
            raise CodeParseError(f"{path}: bad header {header.strip()!r}") from exc
        codes = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            try:
                if int(parts[0]) != len(codes):
                    raise ValueError("entity ids must be consecutive from 0")
                idx, w = [], []
                for p in parts[1:]:
                    a, b = p.split(":")
                    idx.append(int(a))
                    w.append(float.fromhex(b))
                codes.append(EntityCode(np.array(idx, dtype=np.int64), np.array(w), l))
            except ValueError as exc:
                raise CodeParseError(f"{path}:{lineno}: {exc}") from exc
    return codes, meta


def code_sizes(codes) -> np.ndarray:
    return np.array([len(c) for c in codes])
