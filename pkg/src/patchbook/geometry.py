"""Point-cloud containers and geometric kernels.

Everything downstream sits on the primitives here: canonical normalization,
farthest point sampling, exact k-NN, covariance-based normal estimation and
the 3-prime XOR spatial hash. All functions are pure and deterministic given
their seeds, so they are safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BadK, DegenerateCloud, EmptyCloud

HASH_PRIME_X = 73856093
HASH_PRIME_Y = 19349663
HASH_PRIME_Z = 83492791
_U64_MASK = 0xFFFFFFFFFFFFFFFF

NORMAL_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """N x 3 coordinates with optional unit normals.

    Coordinates are dimensionless canonical units. Treat instances as
    immutable; helpers return new clouds instead of mutating.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloud("point cloud has zero points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match point count")
            lens = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lens - 1.0) <= NORMAL_UNIT_TOL):
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def translated(self, offset) -> "PointCloud":
        off = np.asarray(offset, dtype=np.float64)
        return PointCloud(self.points + off, self.normals)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals)


@dataclass(frozen=True)
class CanonicalTransform:
    """Centroid translation plus positive max-norm scale.

    apply() maps raw coordinates into the canonical unit ball; invert()
    recovers the originals within 1e-9.
    """

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation


@dataclass(frozen=True)
class SpatialKey:
    """64-bit unsigned spatial hash key at a given scale level."""

    key: int
    level: int


def normalize_to_canonical(cloud: PointCloud) -> tuple[PointCloud, CanonicalTransform]:
    """Center the cloud on its centroid and scale the farthest point to norm 1."""
    pts = cloud.points
    if pts.shape[0] < 2:
        raise DegenerateCloud("need at least 2 points to normalize")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale <= 0.0:
        raise DegenerateCloud("all points identical")
    return (
        PointCloud(centered / scale, cloud.normals),
        CanonicalTransform(centroid, scale),
    )


def farthest_point_sampling(cloud, k: int, seed: int) -> np.ndarray:
    """Greedy max-min sampling of k distinct indices.

    The first index is drawn uniformly from the seed; every subsequent pick
    maximizes the minimum squared distance to the selected set, ties broken
    by the lowest index (np.argmax returns the first maximum).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise BadK(f"k={k} out of range for {n} points")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    diff = pts - pts[start]
    mind2 = np.einsum("ij,ij->i", diff, diff)
    mind2[start] = -1.0  # exclude selected points from future argmax
    for step in range(1, k):
        nxt = int(np.argmax(mind2))
        chosen[step] = nxt
        diff = pts - pts[nxt]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(mind2, d2, out=mind2)
        mind2[nxt] = -1.0
    return chosen


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points to a query location.

    Sorted ascending by distance; exact ties resolved by the lower index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise BadK(f"k={k} out of range for {n} points")
    diff = pts - np.asarray(query, dtype=np.float64)
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d2, kind="stable")
    return order[:k]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row-wise knn() for many queries at once (same ordering semantics)."""
    n = points.shape[0]
    if not 1 <= k <= n:
        raise BadK(f"k={k} out of range for {n} points")
    d2 = (
        np.einsum("ij,ij->i", queries, queries)[:, None]
        - 2.0 * queries @ points.T
        + np.einsum("ij,ij->i", points, points)[None, :]
    )
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def neighborhood_geometry(points: np.ndarray, k: int):
    """Per-point k-NN local statistics in one eigen-decomposition pass.

    Returns (rel_coords, eigvals, normals, degenerate):
      rel_coords  point minus its neighborhood centroid, (N, 3)
      eigvals     ascending covariance eigenvalues, (N, 3)
      normals     smallest-eigenvector normals oriented away from the cloud
                  centroid, (N, 3); degenerate rows fall back to the radial
                  direction
      degenerate  bool mask of neighborhoods with covariance rank < 2
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 3 <= k <= n:
        raise BadK(f"neighborhood size k={k} needs 3 <= k <= N={n}")
    # Full pairwise distances: fine at desk scale (N <= ~2e4).
    idx = knn_batch(pts, pts, k)
    neigh = pts[idx]  # (N, k, 3)
    mean = neigh.mean(axis=1)
    centered = neigh - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    trace = eigvals.sum(axis=1)
    degenerate = eigvals[:, 1] <= 1e-12 * np.maximum(trace, 1e-300)

    centroid = pts.mean(axis=0)
    radial = pts - centroid
    rad_len = np.linalg.norm(radial, axis=1)
    safe_radial = np.where(
        rad_len[:, None] > 1e-12, radial / np.maximum(rad_len, 1e-300)[:, None], [0.0, 0.0, 1.0]
    )
    flip = np.einsum("ij,ij->i", normals, radial) < 0.0
    normals = np.where(flip[:, None], -normals, normals)
    normals = np.where(degenerate[:, None], safe_radial, normals)
    lens = np.linalg.norm(normals, axis=1)
    normals = normals / np.maximum(lens, 1e-300)[:, None]
    return pts - mean, eigvals, normals, degenerate


def estimate_normals(cloud: PointCloud, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from k-NN covariance, outward-oriented.

    Returns (normals, degenerate) where degenerate flags points whose
    neighborhood covariance had rank < 2 and received the radial fallback.
    """
    pts = cloud.points
    if not (pts.shape[0] > k >= 3):
        raise BadK(f"need N > k >= 3, got N={pts.shape[0]}, k={k}")
    _, _, normals, degenerate = neighborhood_geometry(pts, k)
    return normals, degenerate


def spatial_hash(position, level: int, cell: float) -> SpatialKey:
    """3-prime XOR hash of the floor-quantized cell at a scale level."""
    if not cell > 0:
        raise ValueError("cell edge must be positive")
    pos = np.asarray(position, dtype=np.float64)
    q = np.floor(pos / cell).astype(np.int64)
    key = (
        (int(q[0]) * HASH_PRIME_X) ^ (int(q[1]) * HASH_PRIME_Y) ^ (int(q[2]) * HASH_PRIME_Z)
    ) & _U64_MASK
    return SpatialKey(key=key, level=level)


def spatial_hash_keys(positions: np.ndarray, level: int, cell: float) -> np.ndarray:
    """Vectorized spatial_hash over rows; returns uint64 keys."""
    if not cell > 0:
        raise ValueError("cell edge must be positive")
    q = np.floor(np.asarray(positions, dtype=np.float64) / cell).astype(np.int64)
    with np.errstate(over="ignore"):
        kx = q[:, 0].astype(np.uint64) * np.uint64(HASH_PRIME_X)
        ky = q[:, 1].astype(np.uint64) * np.uint64(HASH_PRIME_Y)
        kz = q[:, 2].astype(np.uint64) * np.uint64(HASH_PRIME_Z)
    return kx ^ ky ^ kz


def voxel_dedup(cloud: PointCloud, resolution: int = 256) -> tuple[PointCloud, np.ndarray]:
    """Drop near-identical points by quantizing canonical coordinates.

    Assumes the cloud lives in the canonical unit ball; points sharing a
    voxel of the resolution^3 grid over [-1, 1]^3 collapse to the first
    occurrence. Returns the thinned cloud and the kept indices.
    """
    pts = cloud.points
    vox = np.floor((pts + 1.0) * (resolution / 2.0)).astype(np.int64)
    np.clip(vox, 0, resolution - 1, out=vox)
    lin = (vox[:, 0] * resolution + vox[:, 1]) * resolution + vox[:, 2]
    _, first = np.unique(lin, return_index=True)
    keep = np.sort(first)
    normals = cloud.normals[keep] if cloud.normals is not None else None
    return PointCloud(pts[keep], normals), keep
