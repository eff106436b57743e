"""Trainable parameter set and the rotary position embedding config.

The point encoder is a small local-statistics MLP standing in for a heavy
pretrained 3D backbone; its 32-wide output matches every downstream shape.
Checkpoints are a versioned binary with a named parameter table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import binio
from .autodiff import Tensor, parameter
from .errors import CorruptFile, VersionMismatch

FEATURE_DIM = 32
ENCODER_INPUT_DIM = 9  # relative coords (3) + covariance eigenvalues (3) + normal (3)

_CKPT_MAGIC = b"PBCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding geometry for 3D offsets.

    The dim/2 rotation pairs are dealt round-robin over the three spatial
    axes (6/5/5 for dim 32); pair k spins at frequency theta^(-2k/dim).
    """

    dim: int = FEATURE_DIM
    heads: int = 4
    theta: float = 10000.0

    def __post_init__(self):
        if self.dim % 2 or self.dim % self.heads:
            raise ValueError("dim must be even and divisible by heads")

    @property
    def n_pairs(self) -> int:
        return self.dim // 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def pair_axes(self) -> np.ndarray:
        return np.arange(self.n_pairs) % 3

    def pair_freqs(self) -> np.ndarray:
        k = np.arange(self.n_pairs, dtype=np.float64)
        return self.theta ** (-2.0 * k / self.dim)

    def angles(self, relpos: np.ndarray) -> np.ndarray:
        """Per-pair rotation angles for (T, 3) relative positions -> (T, dim/2)."""
        rel = np.atleast_2d(np.asarray(relpos, dtype=np.float64))
        return rel[:, self.pair_axes()] * self.pair_freqs()[None, :]

    def to_json(self) -> dict:
        return {"dim": self.dim, "heads": self.heads, "theta": self.theta}

    @classmethod
    def from_json(cls, d: dict) -> "RopeConfig":
        return cls(dim=int(d["dim"]), heads=int(d["heads"]), theta=float(d["theta"]))


_LAYER_SHAPES = {
    "enc.w1": (ENCODER_INPUT_DIM, 64), "enc.b1": (64,),
    "enc.w2": (64, 64), "enc.b2": (64,),
    "enc.w3": (64, FEATURE_DIM), "enc.b3": (FEATURE_DIM,),
    "attn.wq": (FEATURE_DIM, FEATURE_DIM), "attn.bq": (FEATURE_DIM,),
    "attn.wk": (FEATURE_DIM, FEATURE_DIM), "attn.bk": (FEATURE_DIM,),
    "attn.wv": (FEATURE_DIM, FEATURE_DIM), "attn.bv": (FEATURE_DIM,),
    "attn.wo": (FEATURE_DIM, FEATURE_DIM), "attn.bo": (FEATURE_DIM,),
    "gate.w1": (1, 16), "gate.b1": (16,),
    "gate.w2": (16, FEATURE_DIM), "gate.b2": (FEATURE_DIM,),
    "mod.w1": (1, 16), "mod.b1": (16,),
    "mod.w2": (16, 2 * FEATURE_DIM), "mod.b2": (2 * FEATURE_DIM,),
    "head.w1": (2 * FEATURE_DIM, 64), "head.b1": (64,),
    "head.w2": (64, FEATURE_DIM), "head.b2": (FEATURE_DIM,),
    "head.wp": (FEATURE_DIM, 4), "head.bp": (4,),
}


class ModelParams:
    """Named trainable tensors for encoder, attention, modulation and head."""

    def __init__(self, seed: int = 0, dtype=np.float32, rope: RopeConfig | None = None):
        self.rope = rope or RopeConfig()
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.tensors: dict[str, Tensor] = {}
        for name, shape in _LAYER_SHAPES.items():
            if ".b" in name:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            self.tensors[name] = parameter(data, dtype=self.dtype)
        # start modulation as identity: gamma half of the bias at 1, beta at 0
        mod_b2 = np.zeros(2 * FEATURE_DIM)
        mod_b2[:FEATURE_DIM] = 1.0
        self.tensors["mod.w2"].data[:] = 0.0
        self.tensors["mod.b2"].data[:] = mod_b2.astype(self.dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def astype(self, dtype) -> "ModelParams":
        """Copy with a different value dtype (float64 for grad checking)."""
        clone = ModelParams.__new__(ModelParams)
        clone.rope = self.rope
        clone.dtype = np.dtype(dtype).type
        clone.tensors = {k: parameter(t.data.astype(clone.dtype), dtype=clone.dtype)
                         for k, t in self.tensors.items()}
        return clone


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    """Versioned binary: magic, version, metadata JSON, named float32 table, CRC64."""
    meta = dict(metadata or {})
    meta["rope"] = params.rope.to_json()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [_CKPT_MAGIC, binio.pack_u32(_CKPT_VERSION), binio.pack_u32(len(meta_bytes)), meta_bytes]
    arrays = params.named_arrays()
    chunks.append(binio.pack_u32(len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            chunks.append(binio.pack_u32(d))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(binio.pack_u64(binio.crc64(payload)))


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelParams, dict]:
    raw = open(path, "rb").read()
    if len(raw) < 16 or raw[:4] != _CKPT_MAGIC:
        raise CorruptFile("not a checkpoint file")
    if binio.crc64(raw[:-8]) != struct.unpack("<Q", raw[-8:])[0]:
        raise CorruptFile("checkpoint checksum mismatch")
    r = binio.Reader(raw[4:-8])
    try:
        version = r.u32()
        if version != _CKPT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {_CKPT_VERSION}")
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        count = r.u32()
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = r.take(r.u16()).decode("utf-8")
            ndim = r.take(1)[0]
            shape = tuple(r.u32() for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(r.take(4 * n_items), dtype="<f4").reshape(shape)
    except EOFError as exc:
        raise CorruptFile(f"truncated checkpoint: {exc}") from exc

    rope = RopeConfig.from_json(meta["rope"]) if "rope" in meta else RopeConfig()
    params = ModelParams.__new__(ModelParams)
    params.rope = rope
    params.dtype = np.dtype(dtype).type
    params.tensors = {}
    for name, shape in _LAYER_SHAPES.items():
        if name not in arrays:
            raise CorruptFile(f"checkpoint missing parameter {name}")
        if arrays[name].shape != shape:
            raise CorruptFile(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {shape}")
        params.tensors[name] = parameter(arrays[name].astype(params.dtype), dtype=params.dtype)
    return params, meta
