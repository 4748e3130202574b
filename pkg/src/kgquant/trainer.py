"""Mini-batch training with Adam, plus a finite-difference gradient audit."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from ._rng import derive_rng
from .encoder import BatchEncoder, as_complex, as_real
from .kg import KnowledgeGraph
from .model import PARAM_ORDER, ModelState, Scorer
from .scorer import LossConfig, corrupt, loss_and_grads, rotate_scores_grad, rotation, self_adversarial_weights

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    dim: int = 16
    hidden: int | None = None  # defaults to 2 * dim
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0 disables validation during training

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.dim < 1:
            raise ValueError("batch_size and dim must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss over a batch


def batch_loss(
    state: ModelState,
    encoder: BatchEncoder,
    triples: np.ndarray,
    negatives: np.ndarray,
    loss: LossConfig,
    fixed_weights: np.ndarray | None = None,
    need_grad: bool = True,
):
    """Mean loss over ``triples`` and its gradients for every parameter.

    ``negatives`` has shape ``(B, n, 3)``. Returns ``(loss, grads, aux)``;
    ``aux`` carries the self-adversarial weights that were used so a finite
    difference check can hold them fixed.
    """
    reps = as_complex(encoder.forward(state.table, state.encoder))
    b = len(triples)
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    nh, nt = negatives[..., 0], negatives[..., 2]
    ph = state.phases[r]

    pos_score = -np.linalg.norm(reps[h] * rotation(ph) - reps[t], axis=-1)
    neg_score = -np.linalg.norm(reps[nh] * rotation(ph[:, None, :]) - reps[nt], axis=-1)
    weights = fixed_weights
    if loss.loss_kind == "nssal" and weights is None:
        weights = self_adversarial_weights(neg_score, loss.temperature)
    per, d_pos, d_neg = loss_and_grads(loss, pos_score, neg_score, weights)
    value = float(per.mean())
    aux = {"weights": weights, "pos": pos_score, "neg": neg_score}
    if not need_grad:
        return value, None, aux

    _, dh, dph, dt = rotate_scores_grad(reps[h], ph, reps[t], d_pos / b)
    _, ndh, ndph, ndt = rotate_scores_grad(reps[nh], ph[:, None, :], reps[nt], d_neg / b)

    d_reps = np.zeros_like(reps)
    np.add.at(d_reps, h, dh)
    np.add.at(d_reps, t, dt)
    np.add.at(d_reps, nh.ravel(), ndh.reshape(-1, reps.shape[1]))
    np.add.at(d_reps, nt.ravel(), ndt.reshape(-1, reps.shape[1]))
    d_phases = np.zeros_like(state.phases)
    np.add.at(d_phases, r, dph + ndph.sum(axis=1))

    g = encoder.backward(state.encoder, as_real(d_reps))
    grads = {"table": g.table, "w1": g.w1, "b1": g.b1, "w2": g.w2, "b2": g.b2, "phases": d_phases}
    return value, grads, aux


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: dict, grads: dict, moments: dict, step: int, config: TrainConfig):
    """One Adam update. ``step`` is the 1-based index of this update.

    Returns new ``(params, moments)`` dicts; inputs are not modified.
    """
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.epsilon
    new_params, new_moments = {}, {}
    for name, theta in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(theta), np.zeros_like(theta)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_moments[name] = (m, v)
    return new_params, new_moments


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    steps: int
    seconds: float
    val_mrr: float | None = None
    val_hits10: float | None = None


@dataclass
class TrainResult:
    state: ModelState
    history: list[EpochRecord]
    best_state: ModelState | None = None
    best_epoch: int | None = None
    best_mrr: float | None = None
    epochs_done: int = 0


def _param_norm(state: ModelState) -> float:
    return math.sqrt(sum(float((a * a).sum()) for a in state.params().values()))


def train(
    kg: KnowledgeGraph,
    pool: sp.csr_matrix,
    config: TrainConfig,
    state: ModelState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> TrainResult:
    """Train on ``kg.train`` for epochs ``start_epoch .. config.epochs - 1``.

    ``pool`` is the ``|E| x l`` pooling matrix of the entity codes. Each
    epoch's shuffle and each batch's negatives come from generators keyed
    by (seed, epoch[, batch]), so resuming from a saved state at an epoch
    boundary reproduces an uninterrupted run exactly.
    """
    if pool.shape[0] != kg.entity_count:
        raise ValueError("codes must cover every entity")
    if state is None:
        state = ModelState.initial(config.seed, config.dim, config.hidden, pool.shape[1], kg.relation_count)
    encoder = BatchEncoder(pool)
    train_triples = kg.train
    n_batches = math.ceil(len(train_triples) / config.batch_size)
    history: list[EpochRecord] = []
    best = TrainResult(state, history)

    from .evaluate import evaluate  # circular at import time

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = derive_rng(config.seed, "shuffle", epoch).permutation(len(train_triples))
        total = 0.0
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            batch = train_triples[idx]
            rng = derive_rng(config.seed, "negatives", epoch, bi)
            neg = corrupt(batch, config.loss.negatives_per_positive, kg.entity_count, rng).negatives
            value, grads, _ = batch_loss(state, encoder, batch, neg, config.loss)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} step {state.step + 1} "
                    f"(batch {bi}, triples {idx[:8].tolist()}...), parameter norm {_param_norm(state):.6g}"
                )
            state.step += 1
            new_params, state.moments = adam_step(state.params(), grads, state.moments, state.step, config)
            for name in PARAM_ORDER:
                state.set_param(name, new_params[name])
            total += value * len(batch)
        record = EpochRecord(epoch + 1, total / len(train_triples), n_batches, time.perf_counter() - t0)
        if config.eval_every and (epoch + 1) % config.eval_every == 0 and len(kg.valid):
            rep = evaluate(Scorer(state, pool), kg, "valid")
            record.val_mrr, record.val_hits10 = rep.mrr, rep.hits_at[10]
            if best.best_mrr is None or rep.mrr > best.best_mrr:
                best.best_mrr, best.best_epoch, best.best_state = rep.mrr, epoch + 1, state.copy()
        history.append(record)
        log.debug("epoch %d loss %.6f", record.epoch, record.loss)
        if on_epoch is not None:
            on_epoch(record, state)

    best.state = state
    best.epochs_done = config.epochs
    return best


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class AuditReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_audit(
    state: ModelState,
    pool: sp.csr_matrix,
    triples: np.ndarray,
    negatives: np.ndarray,
    loss: LossConfig,
    tolerance: float = 1e-5,
    step: float = 1e-5,
    grad_hook=None,
) -> AuditReport:
    """Compare analytic gradients with central differences for every scalar.

    Self-adversarial weights are frozen at the unperturbed point. Intended
    for small models (``d <= 4``). ``grad_hook(grads)`` may tamper with the
    analytic gradients before comparison (used as a negative control).
    """
    encoder = BatchEncoder(pool)
    _, grads, aux = batch_loss(state, encoder, triples, negatives, loss)
    if grad_hook is not None:
        grads = grad_hook(grads)
    fixed = aux["weights"]
    probe = state.copy()
    per_param, checked = {}, 0
    for name in PARAM_ORDER:
        base = probe.params()[name]
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _, _ = batch_loss(probe, encoder, triples, negatives, loss, fixed, need_grad=False)
            flat[i] = orig - step
            down, _, _ = batch_loss(probe, encoder, triples, negatives, loss, fixed, need_grad=False)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        per_param[name] = float(relative_error(grads[name], numeric).max()) if base.size else 0.0
        checked += base.size
    return AuditReport(max(per_param.values()), per_param, tolerance, checked)
