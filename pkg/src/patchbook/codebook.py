"""Per-scale template store for normal-shape patch features.

Insertion follows a first-match thresholded merge: a new unit feature merges
into the first stored entry whose cosine similarity reaches the threshold,
via count-weighted averaging (then re-normalized), and otherwise appends.
Retrieval is exhaustive max-cosine; the scale score sums rank-paired dot
products and the scale with the best (count-normalized) score wins.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import CorruptFile, EmptyInput, EmptyLevel, VersionMismatch
from .geometry import SpatialKey

DEFAULT_THRESHOLD = 0.85
FEATURE_DIM = 32

_MAGIC = b"PBCB"
_VERSION = 1


@dataclass
class CodebookEntry:
    feature: np.ndarray  # unit vector, float64
    merge_weight: float
    hash_keys: set[int]


@dataclass
class Codebook:
    threshold: float = DEFAULT_THRESHOLD
    levels: dict[int, list[CodebookEntry]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    # cached per-level feature matrices for retrieval; invalidated on update
    _matrices: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def entries(self, level: int) -> list[CodebookEntry]:
        return self.levels.setdefault(level, [])

    def matrix(self, level: int) -> np.ndarray:
        """(E, 32) matrix of the level's features, cached between updates."""
        cached = self._matrices.get(level)
        entries = self.levels.get(level, [])
        if cached is None or cached.shape[0] != len(entries):
            cached = (
                np.stack([e.feature for e in entries])
                if entries
                else np.zeros((0, FEATURE_DIM))
            )
            self._matrices[level] = cached
        return cached

    def size(self, level: int) -> int:
        return len(self.levels.get(level, []))


def update(codebook: Codebook, feature: np.ndarray, key: SpatialKey) -> Codebook:
    """Insert one patch feature under its spatial key (first-match merge)."""
    level = key.level
    feat = np.asarray(feature, dtype=np.float64)
    feat = feat / np.linalg.norm(feat)
    entries = codebook.entries(level)
    mat = codebook.matrix(level)
    if mat.shape[0]:
        sims = mat @ feat
        hits = sims >= codebook.threshold
        if hits.any():
            i = int(np.argmax(hits))  # first entry at or above threshold
            s = float(sims[i])
            e = entries[i]
            merged = (e.merge_weight * e.feature + s * feat) / (e.merge_weight + s)
            e.feature = merged / np.linalg.norm(merged)
            e.merge_weight += s
            e.hash_keys.add(key.key)
            mat[i] = e.feature
            return codebook
    entries.append(CodebookEntry(feature=feat, merge_weight=1.0, hash_keys={key.key}))
    codebook._matrices.pop(level, None)
    return codebook


def retrieve(codebook: Codebook, query: np.ndarray, level: int) -> tuple[np.ndarray, float, int]:
    """Best entry by cosine similarity: (feature, similarity, entry index)."""
    entries = codebook.levels.get(level, [])
    if not entries:
        raise EmptyLevel(f"codebook level {level} is empty")
    sims = codebook.matrix(level) @ np.asarray(query, dtype=np.float64)
    i = int(np.argmax(sims))  # ties resolve to the lowest insertion index
    return entries[i].feature, float(sims[i]), i


def retrieve_batch(codebook: Codebook, queries: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise retrieve(): (features (Q,32), similarities (Q,), indices (Q,))."""
    entries = codebook.levels.get(level, [])
    if not entries:
        raise EmptyLevel(f"codebook level {level} is empty")
    mat = codebook.matrix(level)
    sims = np.asarray(queries, dtype=np.float64) @ mat.T
    idx = sims.argmax(axis=1)
    return mat[idx], sims[np.arange(len(idx)), idx], idx


def scale_similarity(query_feats: np.ndarray, template_feats: np.ndarray) -> float:
    """Sum of rank-paired dot products, truncated to the shorter list."""
    q = np.asarray(query_feats, dtype=np.float64)
    t = np.asarray(template_feats, dtype=np.float64)
    if q.size == 0 or t.size == 0:
        raise EmptyInput("scale_similarity needs nonempty feature lists")
    m = min(q.shape[0], t.shape[0])
    return float(np.einsum("ij,ij->i", q[:m], t[:m]).sum())


def select_scale(alphas: dict[int, float], pair_counts: dict[int, int], normalized: bool = True) -> int:
    """Argmax over levels of the (count-normalized) similarity sum.

    Raw sums grow with patch count, biasing argmax toward fine scales;
    normalization divides by the pair count. Ties go to the finest level
    (lowest index). normalized=False keeps the raw sums.
    """
    if not alphas:
        raise EmptyInput("no scale scores")
    best_level = None
    best_score = -np.inf
    for level in sorted(alphas):
        score = alphas[level] / pair_counts[level] if normalized else alphas[level]
        if score > best_score:
            best_score = score
            best_level = level
    return best_level


# ---------------------------------------------------------------------------
# serialization
#
# Layout: magic "PBCB", u32 version, f64 threshold, u32 metadata byte count,
# metadata JSON, u32 level count, then per level: u32 level index, u64 entry
# count, entries as 32 x f32 feature + f64 weight + u32 key count + u64 keys.
# The final 8 bytes are the CRC64 of everything before them.

def serialize(codebook: Codebook, path) -> None:
    chunks = [_MAGIC, binio.pack_u32(_VERSION), binio.pack_f64(codebook.threshold)]
    meta = json.dumps(codebook.metadata, sort_keys=True).encode("utf-8")
    chunks.append(binio.pack_u32(len(meta)))
    chunks.append(meta)
    levels = sorted(codebook.levels)
    chunks.append(binio.pack_u32(len(levels)))
    for level in levels:
        entries = codebook.levels[level]
        chunks.append(binio.pack_u32(level))
        chunks.append(binio.pack_u64(len(entries)))
        for e in entries:
            chunks.append(np.asarray(e.feature, dtype="<f4").tobytes())
            chunks.append(binio.pack_f64(e.merge_weight))
            keys = sorted(e.hash_keys)
            chunks.append(binio.pack_u32(len(keys)))
            for k in keys:
                chunks.append(binio.pack_u64(k))
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(binio.pack_u64(binio.crc64(payload)))


def deserialize(path) -> Codebook:
    raw = open(path, "rb").read()
    if len(raw) < len(_MAGIC) + 12 or raw[:4] != _MAGIC:
        raise CorruptFile("not a codebook file")
    stored = struct.unpack("<Q", raw[-8:])[0]
    if binio.crc64(raw[:-8]) != stored:
        raise CorruptFile("codebook checksum mismatch")
    r = binio.Reader(raw[4:-8])
    try:
        version = r.u32()
        if version != _VERSION:
            raise VersionMismatch(f"codebook version {version}, expected {_VERSION}")
        threshold = r.f64()
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        book = Codebook(threshold=threshold, metadata=meta)
        for _ in range(r.u32()):
            level = r.u32()
            entries = book.entries(level)
            for _ in range(r.u64()):
                feat = np.frombuffer(r.take(FEATURE_DIM * 4), dtype="<f4").astype(np.float64)
                weight = r.f64()
                keys = {r.u64() for _ in range(r.u32())}
                entries.append(CodebookEntry(feature=feat, merge_weight=weight, hash_keys=keys))
    except EOFError as exc:
        raise CorruptFile(f"truncated codebook: {exc}") from exc
    return book
