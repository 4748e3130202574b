"""Set encoder composing codeword embeddings into complex entity vectors.

A code is pooled into a weighted mean of codeword rows, then passed through
one hidden relu layer. Real vectors of length ``2d`` are read as ``d``
complex numbers: the first half is the real part, the second the imaginary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._rng import derive_rng
from .quantize import EntityCode


@dataclass
class EncoderParams:
    w1: np.ndarray  # (2d, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, 2d)
    b2: np.ndarray  # (2d,)

    @property
    def dim(self) -> int:
        return self.w1.shape[0] // 2

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(seed: int, d: int, hidden: int | None = None, l: int = 1) -> tuple[np.ndarray, EncoderParams]:
    """Codeword table ``(l, 2d)`` and encoder weights; biases start at zero."""
    hidden = 2 * d if hidden is None else hidden
    if d < 1 or hidden < 1 or l < 1:
        raise ValueError("d, hidden and l must be >= 1")
    rng = derive_rng(seed, "encoder")
    table = glorot(rng, l, 2 * d)
    params = EncoderParams(
        w1=glorot(rng, 2 * d, hidden),
        b1=np.zeros(hidden),
        w2=glorot(rng, hidden, 2 * d),
        b2=np.zeros(2 * d),
    )
    return table, params


def as_complex(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1] // 2
    return x[..., :d] + 1j * x[..., d:]


def as_real(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def _pool_weights(code: EntityCode) -> np.ndarray:
    total = code.weights.sum()
    if total > 0:
        return code.weights / total
    return np.full(len(code), 1.0 / len(code))


def _check_code(code: EntityCode, table: np.ndarray):
    if len(code) and (code.indices.min() < 0 or code.indices.max() >= table.shape[0]):
        raise IndexError(f"code index out of range for table with {table.shape[0]} rows")


@dataclass
class EncodeCache:
    indices: np.ndarray
    pool: np.ndarray
    pooled: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def encode_real(code: EntityCode, table: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, EncodeCache]:
    """Forward pass for one code; returns the ``2d`` real output and a cache."""
    _check_code(code, table)
    # codes keep indices ascending, so the pooling sum order is canonical
    if len(code):
        pool = _pool_weights(code)
        pooled = pool @ table[code.indices]
    else:
        pool = np.zeros(0)
        pooled = np.zeros(table.shape[1])
    pre = pooled @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ params.w2 + params.b2
    return out, EncodeCache(code.indices, pool, pooled, pre, hidden)


def encode(code: EntityCode, table: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Complex representation (``d`` entries) of one entity code."""
    return as_complex(encode_real(code, table, params)[0])


@dataclass
class Gradients:
    table: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, table: np.ndarray, params: EncoderParams) -> "Gradients":
        return cls(np.zeros_like(table), *(np.zeros_like(a) for a in params.arrays().values()))


def encode_backward(
    cache: EncodeCache,
    params: EncoderParams,
    upstream: np.ndarray,
    grads: Gradients,
) -> Gradients:
    """Accumulate gradients of ``upstream . output`` into ``grads``.

    ``upstream`` is the real ``2d`` gradient w.r.t. the encoder output.
    Only table rows listed in the code are touched.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if np.iscomplexobj(upstream):
        upstream = as_real(upstream)
    grads.b2 += upstream
    grads.w2 += np.outer(cache.hidden, upstream)
    d_hidden = params.w2 @ upstream
    d_pre = d_hidden * (cache.pre > 0)
    grads.b1 += d_pre
    grads.w1 += np.outer(cache.pooled, d_pre)
    d_pooled = params.w1 @ d_pre
    if len(cache.indices):
        grads.table[cache.indices] += np.outer(cache.pool, d_pooled)
    return grads


class BatchEncoder:
    """Encodes every entity at once from a sparse pooling matrix.

    ``pool`` is ``|E| x l`` with each row holding that entity's normalised
    code weights, so ``pool @ table`` is the pooled input of every entity.
    """

    def __init__(self, pool: sp.csr_matrix):
        self.pool = sp.csr_matrix(pool)
        self.pool_t = self.pool.T.tocsr()
        self._cache = None

    def forward(self, table: np.ndarray, params: EncoderParams) -> np.ndarray:
        pooled = self.pool @ table
        pre = pooled @ params.w1 + params.b1
        hidden = np.maximum(pre, 0.0)
        out = hidden @ params.w2 + params.b2
        self._cache = (pooled, pre, hidden)
        return out

    def backward(self, params: EncoderParams, upstream: np.ndarray) -> Gradients:
        """Gradients given ``upstream`` of shape ``(|E|, 2d)`` for the last forward."""
        pooled, pre, hidden = self._cache
        d_pre = (upstream @ params.w2.T) * (pre > 0)
        return Gradients(
            table=self.pool_t @ (d_pre @ params.w1.T),
            w1=pooled.T @ d_pre,
            b1=d_pre.sum(axis=0),
            w2=hidden.T @ upstream,
            b2=upstream.sum(axis=0),
        )
