"""RotatE scoring, training losses and negative sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng
from .kg import KnowledgeGraph

LOSS_KINDS = ("bce", "nssal")


@dataclass(frozen=True)
class LossConfig:
    loss_kind: str = "nssal"
    margin: float = 6.0
    temperature: float = 1.0
    negatives_per_positive: int = 8

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not np.isfinite(self.margin):
            raise ValueError("margin must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")


def rotation(phases: np.ndarray) -> np.ndarray:
    """Unit-modulus complex numbers for the given phases."""
    return np.cos(phases) + 1j * np.sin(phases)


def rotate_score(h: np.ndarray, phases: np.ndarray, t: np.ndarray) -> float:
    """``-|| h o r - t ||`` with ``r = exp(i * phases)``."""
    h, phases, t = np.asarray(h), np.asarray(phases), np.asarray(t)
    if not h.shape == phases.shape == t.shape:
        raise ValueError(f"dimension mismatch: {h.shape}, {phases.shape}, {t.shape}")
    return -float(np.linalg.norm(h * rotation(phases) - t))


def rotate_scores(h: np.ndarray, phases: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Row-wise scores for broadcastable ``(..., d)`` complex arrays."""
    return -np.linalg.norm(h * rotation(phases) - t, axis=-1)


def rotate_scores_grad(h: np.ndarray, phases: np.ndarray, t: np.ndarray, upstream: np.ndarray):
    """Scores and gradients of ``sum(upstream * score)``.

    Returns ``(scores, dh, dphases, dt)`` where ``dh``/``dt`` are complex
    arrays holding ``d/dRe + i d/dIm``. A zero residual gets zero gradient.
    """
    rot = rotation(phases)
    hr = h * rot
    diff = hr - t
    norm = np.linalg.norm(diff, axis=-1)
    scale = np.divide(upstream, norm, out=np.zeros_like(norm), where=norm > 0)
    g = -scale[..., None] * diff  # d(upstream * score)/d diff, as re + i im
    dh = g * np.conj(rot)
    dt = -g
    dphases = g.imag * hr.real - g.real * hr.imag
    return -norm, dh, dphases, dt


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(log_sigmoid(x))


def bce_loss(positive_score, negative_scores):
    """``-log s(f+) - sum log(1 - s(f-))`` with its score gradients.

    Works on a single positive (scalar) or a batch (``(B,)`` positives with
    ``(B, n)`` negatives); in the batch case the per-positive losses are
    returned as an array.
    """
    pos = np.asarray(positive_score, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    loss = -log_sigmoid(pos) - log_sigmoid(-neg).sum(axis=-1)
    return loss, sigmoid(pos) - 1.0, sigmoid(neg)


def self_adversarial_weights(negative_scores, temperature: float) -> np.ndarray:
    z = temperature * np.asarray(negative_scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def nssal_loss(positive_score, negative_scores, margin: float, temperature: float, weights=None):
    """Self-adversarial negative sampling loss on RotatE scores.

    ``-log s(margin + f+) - sum_i p_i log s(-margin - f-_i)`` where
    ``p = softmax(temperature * f-)`` is held constant (no gradient flows
    through it). Scores are ``-distance``, so ``margin + f`` is the usual
    ``margin - distance``. Pass ``weights`` to pin ``p`` explicitly.
    """
    pos = np.asarray(positive_score, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    p = self_adversarial_weights(neg, temperature) if weights is None else np.asarray(weights)
    loss = -log_sigmoid(margin + pos) - (p * log_sigmoid(-margin - neg)).sum(axis=-1)
    d_pos = sigmoid(margin + pos) - 1.0
    d_neg = p * sigmoid(margin + neg)
    return loss, d_pos, d_neg


def loss_and_grads(config: LossConfig, pos, neg, weights=None):
    if config.loss_kind == "bce":
        return bce_loss(pos, neg)
    return nssal_loss(pos, neg, config.margin, config.temperature, weights)


@dataclass
class NegSampleBatch:
    positive: np.ndarray  # (3,) or (B, 3)
    negatives: np.ndarray  # (count, 3) or (B, count, 3)
    corrupt_head: np.ndarray  # bool, same leading shape as negatives


def corrupt(triples: np.ndarray, count: int, entity_count: int, rng: np.random.Generator) -> NegSampleBatch:
    """Corrupt each triple ``count`` times, head or tail chosen by a fair coin."""
    if count < 1:
        raise ValueError("count must be >= 1")
    triples = np.asarray(triples, dtype=np.int64)
    b = len(triples)
    head_side = rng.random((b, count)) < 0.5
    repl = rng.integers(entity_count, size=(b, count))
    neg = np.repeat(triples[:, None, :], count, axis=1)
    neg[..., 0] = np.where(head_side, repl, neg[..., 0])
    neg[..., 2] = np.where(head_side, neg[..., 2], repl)
    return NegSampleBatch(triples, neg, head_side)


def sample_negatives(kg: KnowledgeGraph, triple, count: int, seed: int) -> NegSampleBatch:
    """Negatives for one triple; reproducible from ``(seed, triple)``.

    Corrupted triples are not checked against known facts.
    """
    h, r, t = (int(x) for x in triple)
    batch = corrupt(np.array([[h, r, t]]), count, kg.entity_count, derive_rng(seed, "negatives", h, r, t))
    return NegSampleBatch(batch.positive[0], batch.negatives[0], batch.corrupt_head[0])
