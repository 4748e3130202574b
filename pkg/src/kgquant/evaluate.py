"""Filtered link-prediction ranking, parameter counting and results rows."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_rng
from .kg import KnowledgeGraph

CUTOFFS = (1, 3, 10)
RESULTS_VERSION = 1
RESULTS_COLUMNS = ("version", "dataset", "strategy", "seed", "MRR", "Hits@10", "#P", "Effi")


@dataclass
class RankingReport:
    mrr: float
    hits_at: dict[int, float]
    query_count: int
    param_count: int = 0
    ranks: np.ndarray = field(default=None, repr=False)

    @property
    def effi(self) -> float:
        """MRR per million parameters."""
        if not self.param_count:
            return float("nan")
        return self.mrr / (self.param_count / 1e6)

    def as_text(self) -> str:
        parts = [f"mrr={self.mrr!r}", f"queries={self.query_count}"]
        parts += [f"hits@{k}={v!r}" for k, v in sorted(self.hits_at.items())]
        parts += [f"params={self.param_count}", f"effi={self.effi!r}"]
        return " ".join(parts)


def filter_index(triples: np.ndarray):
    """Known tails per (head, relation) and known heads per (relation, tail)."""
    tails, heads = defaultdict(list), defaultdict(list)
    for h, r, t in np.asarray(triples).tolist():
        tails[(h, r)].append(t)
        heads[(r, t)].append(h)
    as_arr = lambda d: {k: np.asarray(v, dtype=np.int64) for k, v in d.items()}  # noqa: E731
    return as_arr(tails), as_arr(heads)


def filtered_rank(scores: np.ndarray, target: int, known: np.ndarray) -> int:
    """Pessimistic rank of ``target`` after removing the other known answers."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(len(scores), dtype=bool)
    mask[known] = False
    mask[target] = False
    s = scores[target]
    others = scores[mask]
    return 1 + int((others >= s).sum())


def evaluate(scorer, kg: KnowledgeGraph, split: str = "test", cutoffs=CUTOFFS, param_count: int = 0) -> RankingReport:
    """Filtered MRR and Hits@N over head- and tail-corruption queries.

    ``scorer`` must provide ``score_tails(h, r)`` and ``score_heads(r, t)``
    returning scores for every entity. Triples from all three splits are
    filtered out of each query's candidates except the query's own answer.
    """
    triples = kg.split(split)
    if len(triples) == 0:
        raise ValueError(f"split {split!r} is empty")
    tails, heads = filter_index(kg.all_triples())
    ranks = np.empty(2 * len(triples), dtype=np.int64)
    for i, (h, r, t) in enumerate(np.asarray(triples).tolist()):
        ranks[2 * i] = filtered_rank(scorer.score_tails(h, r), t, tails[(h, r)])
        ranks[2 * i + 1] = filtered_rank(scorer.score_heads(r, t), h, heads[(r, t)])
    return report_from_ranks(ranks, cutoffs, param_count)


def report_from_ranks(ranks, cutoffs=CUTOFFS, param_count: int = 0) -> RankingReport:
    ranks = np.asarray(ranks)
    hits = {int(k): float((ranks <= k).mean()) for k in sorted(set(cutoffs) | {10})}
    return RankingReport(float((1.0 / ranks).mean()), hits, len(ranks), param_count, ranks)


class RandomScorer:
    """Scores every candidate with an independent uniform draw (a chance baseline)."""

    def __init__(self, entity_count: int, seed: int = 0):
        self.entity_count = entity_count
        self.seed = seed

    def score_tails(self, h: int, r: int) -> np.ndarray:
        return derive_rng(self.seed, "random-tails", h, r).random(self.entity_count)

    def score_heads(self, r: int, t: int) -> np.ndarray:
        return derive_rng(self.seed, "random-heads", r, t).random(self.entity_count)


def count_params(state) -> int:
    """Scalar parameter count: codeword table, encoder weights and biases, phases."""
    return int(sum(a.size for a in state.params().values()))


def param_count_formula(l: int, dim: int, hidden: int, relation_count: int) -> int:
    two_d = 2 * dim
    return l * two_d + (two_d * hidden + hidden) + (hidden * two_d + two_d) + relation_count * dim


def results_row(report: RankingReport, dataset: str, strategy: str, seed: int) -> dict:
    return {
        "version": RESULTS_VERSION,
        "dataset": dataset,
        "strategy": strategy,
        "seed": seed,
        "MRR": repr(report.mrr),
        "Hits@10": repr(report.hits_at[10]),
        "#P": report.param_count,
        "Effi": repr(report.effi),
    }


def append_results(path, rows) -> None:
    """Append rows to a results CSV, writing the header when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_results(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
