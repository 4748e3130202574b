"""Model parameters, scoring against all entities, and checkpoint files.

Checkpoint layout: one UTF-8 JSON header line terminated by ``\\n``, followed
by every parameter array flattened in C order as little-endian float64, in
the order the header lists them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._rng import derive_rng
from .encoder import BatchEncoder, EncoderParams, as_complex, init_params
from .scorer import rotate_scores, rotation

PARAM_ORDER = ("table", "w1", "b1", "w2", "b2", "phases")
CHECKPOINT_FORMAT = "kgquant-checkpoint/1"


@dataclass
class ModelState:
    table: np.ndarray  # (l, 2d) codeword embeddings
    encoder: EncoderParams
    phases: np.ndarray  # (|R|, d) relation rotation phases
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0

    @classmethod
    def initial(cls, seed: int, dim: int, hidden: int | None, l: int, relation_count: int) -> "ModelState":
        table, enc = init_params(seed, dim, hidden, l)
        phases = derive_rng(seed, "phases").uniform(-np.pi, np.pi, size=(relation_count, dim))
        return cls(table, enc, phases)

    @property
    def dim(self) -> int:
        return self.phases.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        out = {"table": self.table}
        out.update(self.encoder.arrays())
        out["phases"] = self.phases
        return out

    def set_param(self, name: str, value: np.ndarray):
        if name == "table":
            self.table = value
        elif name == "phases":
            self.phases = value
        else:
            setattr(self.encoder, name, value)

    def copy(self) -> "ModelState":
        return ModelState(
            self.table.copy(),
            self.encoder.copy(),
            self.phases.copy(),
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            self.step,
        )

    def param_count(self) -> int:
        return sum(a.size for a in self.params().values())


class Scorer:
    """Scores triples with precomputed entity representations."""

    def __init__(self, state: ModelState, pool: sp.csr_matrix):
        self.state = state
        self.reps = as_complex(BatchEncoder(pool).forward(state.table, state.encoder))
        self.rot = rotation(state.phases)
        self.entity_count = self.reps.shape[0]

    def score(self, h: int, r: int, t: int) -> float:
        return float(rotate_scores(self.reps[h], self.state.phases[r], self.reps[t]))

    def score_tails(self, h: int, r: int) -> np.ndarray:
        return -np.linalg.norm(self.reps[h] * self.rot[r] - self.reps, axis=-1)

    def score_heads(self, r: int, t: int) -> np.ndarray:
        return -np.linalg.norm(self.reps * self.rot[r] - self.reps[t], axis=-1)


def save_checkpoint(path, state: ModelState, meta: dict | None = None) -> None:
    arrays = state.params()
    header = dict(meta or {})
    header["format"] = CHECKPOINT_FORMAT
    header["arrays"] = [[name, list(arrays[name].shape)] for name in PARAM_ORDER]
    write_arrays(path, header, [arrays[name] for name in PARAM_ORDER])


def load_checkpoint(path) -> tuple[ModelState, dict]:
    header, arrays = read_arrays(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    enc = EncoderParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"])
    return ModelState(arrays["table"], enc, arrays["phases"]), header


def save_optimizer(path, state: ModelState, meta: dict | None = None) -> None:
    header = dict(meta or {})
    header["format"] = "kgquant-optimizer/1"
    header["step"] = state.step
    names, blobs = [], []
    for name in PARAM_ORDER:
        if name in state.moments:
            m, v = state.moments[name]
            names += [[f"{name}.m", list(m.shape)], [f"{name}.v", list(v.shape)]]
            blobs += [m, v]
    header["arrays"] = names
    write_arrays(path, header, blobs)


def load_optimizer(path, state: ModelState) -> dict:
    header, arrays = read_arrays(path)
    state.step = int(header["step"])
    state.moments = {}
    for name in PARAM_ORDER:
        if f"{name}.m" in arrays:
            state.moments[name] = (arrays[f"{name}.m"], arrays[f"{name}.v"])
    return header


def write_arrays(path, header: dict, arrays) -> None:
    line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    with Path(path).open("wb") as fh:
        fh.write(line)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n") + 1
    header = json.loads(raw[:cut])
    body = np.frombuffer(raw[cut:], dtype="<f8")
    out, offset = {}, 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = body[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != body.size:
        raise ValueError(f"{path}: {body.size - offset} trailing floats")
    return header, out


def checkpoint_float_count(path) -> int:
    """Number of float64 values stored after the header line."""
    raw = Path(path).read_bytes()
    return (len(raw) - raw.index(b"\n") - 1) // 8
