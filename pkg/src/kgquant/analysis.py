"""Distinguishability measures for entity codes.

Code level: plug-in entropy of the distribution of distinct codes, the
probability that uniformly random codes are all distinct, and a generator
that lowers entropy by merging codes. Codeword level: Jaccard distance
between matched-codeword sets and its k-nearest-neighbour average.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from ._rng import derive_rng
from .kg import ceil_fraction
from .quantize import EntityCode

log = logging.getLogger(__name__)


def _code_key(code, with_weights: bool = False):
    if isinstance(code, EntityCode):
        if with_weights:
            return tuple(zip(code.indices.tolist(), code.weights.tolist()))
        return code.key()
    return tuple(sorted(set(int(i) for i in code)))


@dataclass
class CodeDistribution:
    frequencies: np.ndarray
    total: int
    l: int | None = None

    @property
    def distinct(self) -> int:
        return len(self.frequencies)


def code_distribution(codes, with_weights: bool = False) -> CodeDistribution:
    counts = Counter(_code_key(c, with_weights) for c in codes)
    l = codes[0].l if codes and isinstance(codes[0], EntityCode) else None
    return CodeDistribution(np.array(sorted(counts.values(), reverse=True)), len(codes), l)


def entropy_from_frequencies(freqs) -> float:
    f = np.asarray(freqs, dtype=np.float64)
    p = f / f.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0  # no negative zero


def code_entropy(codes, with_weights: bool = False) -> float:
    """Entropy in bits of the empirical distribution of codes.

    Codes are compared as index sets; ``with_weights`` also distinguishes
    codes whose weights differ.
    """
    if len(codes) == 0:
        raise ValueError("need at least one code")
    return entropy_from_frequencies(code_distribution(codes, with_weights).frequencies)


def uniqueness_probability(l: int, entity_count: int, method: str = "auto") -> float:
    """Probability that ``entity_count`` codes drawn uniformly from ``2**l`` are distinct.

    ``method="log"`` sums ``log1p(-i / 2**l)``; ``"exact"`` multiplies
    rationals. ``"auto"`` is exact for small inputs and log-space otherwise.
    """
    if l < 1 or entity_count < 1:
        raise ValueError("l and entity_count must be >= 1")
    if entity_count == 1:
        return 1.0
    if l < 63 and entity_count > (1 << l):
        return 0.0
    if method == "auto":
        method = "exact" if l <= 64 and entity_count <= 64 else "log"
    if method == "exact":
        space = 1 << l
        p = Fraction(1)
        for i in range(entity_count):
            p *= Fraction(space - i, space)
        return float(p)
    if method != "log":
        raise ValueError(f"unknown method {method!r}")
    inv = math.ldexp(1.0, -l)
    i = np.arange(entity_count, dtype=np.float64)
    return float(np.exp(np.log1p(-i * inv).sum()))


def distinct_probability(outcomes: int, draws: int) -> float:
    """Exact chance that ``draws`` uniform picks from ``outcomes`` are all different."""
    if draws > outcomes:
        return 0.0
    p = Fraction(1)
    for i in range(draws):
        p *= Fraction(outcomes - i, outcomes)
    return float(p)


def empirical_uniqueness(l: int, entity_count: int, code_cardinality: int, trials: int, seed: int = 0) -> float:
    """Fraction of trials in which fixed-size random codes are all distinct.

    Each entity picks ``code_cardinality`` of ``l`` codewords uniformly
    without replacement, as random matching does.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if code_cardinality > l:
        raise ValueError("code_cardinality exceeds l")
    if entity_count == 1:
        return 1.0
    if l > 62:
        raise ValueError("l > 62 not supported by the bitmask encoding")
    rng = derive_rng(seed, "empirical-uniqueness")
    ok = 0
    chunk = max(1, 2_000_000 // (entity_count * l))
    weights = np.left_shift(np.int64(1), np.arange(l, dtype=np.int64))
    for start in range(0, trials, chunk):
        b = min(chunk, trials - start)
        keys = rng.random((b, entity_count, l)).argsort(axis=-1)[..., :code_cardinality]
        masks = weights[keys].sum(axis=-1)
        masks.sort(axis=1)
        ok += int((np.diff(masks, axis=1) != 0).all(axis=1).sum())
    return ok / trials


def degrade_codes(codes, target_identical_fraction: float, seed: int = 0):
    """Make ``ceil(fraction * |E|)`` randomly chosen codes identical.

    The chosen entities all take the code of the first chosen entity.
    Subsets for a fixed seed are nested as the fraction grows. Returns the
    new code list and its entropy.
    """
    if not 0 <= target_identical_fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    codes = list(codes)
    count = ceil_fraction(target_identical_fraction, len(codes))
    if count:
        chosen = derive_rng(seed, "degrade").permutation(len(codes))[:count]
        source = codes[chosen[0]]
        for i in chosen:
            codes[i] = source
    return codes, code_entropy(codes)


def entropy_sweep(codes, fractions, seed: int = 0) -> list[tuple[float, float]]:
    return [(float(f), degrade_codes(codes, f, seed)[1]) for f in fractions]


def jaccard_distance(code_a, code_b) -> float:
    """``(|A u B| - |A n B|) / |A u B|`` on matched index sets; two empty sets give 0."""
    a = set(_code_key(code_a))
    b = set(_code_key(code_b))
    union = len(a | b)
    if union == 0:
        log.debug("jaccard distance of two empty codes taken as 0")
        return 0.0
    return (union - len(a & b)) / union


def _incidence(codes) -> sp.csr_matrix:
    keys = [_code_key(c) for c in codes]
    width = 1 + max((k[-1] for k in keys if k), default=0)
    rows = np.repeat(np.arange(len(keys)), [len(k) for k in keys])
    cols = np.fromiter((i for k in keys for i in k), dtype=np.int64, count=len(rows))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(keys), width))


def jaccard_matrix(codes, rows=None) -> np.ndarray:
    """Pairwise Jaccard distances for ``rows`` (default all) against every code."""
    inc = _incidence(codes)
    sizes = np.asarray(inc.sum(axis=1)).ravel()
    rows = np.arange(len(codes)) if rows is None else np.asarray(rows)
    inter = (inc[rows] @ inc.T).toarray()
    union = sizes[rows][:, None] + sizes[None, :] - inter
    return np.divide(union - inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class JkCurve:
    points: list[tuple[int, float]]
    sampled: int | None = None  # number of query entities when sampled
    half_width: dict | None = None  # 95% CI half-width per k when sampled

    def as_dict(self) -> dict[int, float]:
        return dict(self.points)


def knn_jaccard(codes, k_values, sample_size: int | None = None, seed: int = 0, block: int = 2048) -> JkCurve:
    """Mean Jaccard distance from each code to its ``k`` nearest other codes.

    Exact over all pairs unless ``sample_size`` is given, in which case only
    that many query entities are averaged and a 95% interval is reported.
    """
    n = len(codes)
    k_values = [int(k) for k in k_values]
    if any(k < 1 or k >= n for k in k_values):
        raise ValueError(f"every k must satisfy 1 <= k < {n}")
    kmax = max(k_values)
    queries = np.arange(n)
    if sample_size is not None and sample_size < n:
        queries = np.sort(derive_rng(seed, "jk-sample").choice(n, size=sample_size, replace=False))

    per_entity = {k: np.empty(len(queries)) for k in k_values}
    for lo in range(0, len(queries), block):
        rows = queries[lo:lo + block]
        dist = jaccard_matrix(codes, rows)
        dist[np.arange(len(rows)), rows] = np.inf
        # nearest distances ascending; which of several tied neighbours is taken does not change the sum
        near = np.sort(np.partition(dist, kmax - 1, axis=1)[:, :kmax], axis=1)
        csum = np.cumsum(near, axis=1)
        for k in k_values:
            per_entity[k][lo:lo + len(rows)] = csum[:, k - 1] / k

    points = [(k, float(per_entity[k].mean())) for k in k_values]
    if len(queries) == n:
        return JkCurve(points)
    hw = {k: float(1.96 * per_entity[k].std(ddof=1) / math.sqrt(len(queries))) for k in k_values}
    return JkCurve(points, len(queries), hw)


def nearest_neighbours(codes, e: int, k: int) -> np.ndarray:
    """The ``k`` entities closest to ``e``; ties go to smaller ids."""
    dist = jaccard_matrix(codes, [e])[0]
    dist[e] = np.inf
    return np.lexsort((np.arange(len(dist)), dist))[:k]
