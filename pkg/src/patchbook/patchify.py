"""Patch decomposition of point clouds at one or more scales.

Strategies mirror the ablation axes: multi-scale kNN spheres around FPS
centers (the default), single-level FPS spheres, FPS-seeded voxel
partitions, and a regular 3D grid. Every strategy emits patches ordered by
the distance of their center to the object centroid, which is the pairing
order the codebook relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPatch, TooFewPoints, UnsupportedVariant
from .geometry import PointCloud, farthest_point_sampling

STRATEGIES = ("multi_scale_spheres", "fps_spheres", "fps_voxels", "grid3d", "semantic_parts")


@dataclass(frozen=True)
class PatchConfig:
    """Patch decomposition settings.

    patch_counts / patch_sizes are per-level, ordered fine to coarse
    (strictly increasing points-per-patch). levels optionally pins explicit
    level indices; it defaults to 1..n and feeds the per-level seed
    derivation (seed + level), so a single-level config can reproduce one
    level of a multi-scale run exactly.
    """

    strategy: str = "multi_scale_spheres"
    patch_counts: tuple[int, ...] = (192, 64, 32)
    patch_sizes: tuple[int, ...] = (8, 32, 64)
    seed: int = 0
    levels: tuple[int, ...] | None = None
    voxel_resolution: int = 256

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        counts = tuple(int(c) for c in self.patch_counts)
        sizes = tuple(int(s) for s in self.patch_sizes)
        if len(counts) != len(sizes) or not counts:
            raise ValueError("patch_counts and patch_sizes must be nonempty, equal arity")
        if any(c <= 0 for c in counts) or any(s <= 0 for s in sizes):
            raise ValueError("patch counts and sizes must be positive")
        if list(sizes) != sorted(set(sizes)):
            raise ValueError("patch_sizes must be strictly increasing (fine to coarse)")
        levels = self.levels
        if levels is None:
            levels = tuple(range(1, len(counts) + 1))
        else:
            levels = tuple(int(l) for l in levels)
            if len(levels) != len(counts) or len(set(levels)) != len(levels):
                raise ValueError("levels must be distinct and match config arity")
        object.__setattr__(self, "patch_counts", counts)
        object.__setattr__(self, "patch_sizes", sizes)
        object.__setattr__(self, "levels", levels)

    def level_seed(self, level: int) -> int:
        return self.seed + level


@dataclass(frozen=True)
class Patch:
    center: np.ndarray
    member_indices: np.ndarray
    level: int
    rank: int

    def __post_init__(self):
        members = np.asarray(self.member_indices, dtype=np.int64)
        if members.size == 0:
            raise EmptyPatch("patch has no members")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "member_indices", members)


@dataclass(frozen=True)
class PatchSet:
    """Rank-ordered patches of one scale level."""

    level: int
    patches: tuple[Patch, ...]

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.patches])

    def member_centroids(self, cloud: PointCloud) -> np.ndarray:
        return np.stack([cloud.points[p.member_indices].mean(axis=0) for p in self.patches])

    def mean_bounding_radius(self, cloud: PointCloud) -> float:
        radii = [
            np.linalg.norm(cloud.points[p.member_indices] - p.center, axis=1).max()
            for p in self.patches
        ]
        return float(np.mean(radii))


def patchify(cloud: PointCloud, config: PatchConfig) -> list[PatchSet]:
    """Dispatch on strategy; multi-scale returns one PatchSet per level."""
    if config.strategy == "multi_scale_spheres":
        return patchify_multiscale(cloud, config)
    return [patchify_strategy(cloud, config)]


def patchify_multiscale(cloud: PointCloud, config: PatchConfig) -> list[PatchSet]:
    """kNN spheres around FPS centers, one PatchSet per scale level."""
    _check_budget(cloud, config)
    out = []
    for count, size, level in zip(config.patch_counts, config.patch_sizes, config.levels):
        out.append(_sphere_level(cloud, count, size, level, config.level_seed(level)))
    return out


def patchify_strategy(cloud: PointCloud, config: PatchConfig) -> PatchSet:
    """Single-PatchSet strategies of the ablation table."""
    if config.strategy == "semantic_parts":
        raise UnsupportedVariant("semantic_parts needs external part segmenters")
    if config.strategy == "multi_scale_spheres":
        raise ValueError("use patchify_multiscale for the multi-scale strategy")
    _check_budget(cloud, config)
    count = config.patch_counts[0]
    level = config.levels[0]
    if config.strategy == "fps_spheres":
        return _sphere_level(cloud, count, config.patch_sizes[0], level, config.level_seed(level))
    if config.strategy == "fps_voxels":
        return _voxel_level(cloud, count, level, config.level_seed(level), config.voxel_resolution)
    return _grid_level(cloud, count, level)


def _check_budget(cloud: PointCloud, config: PatchConfig) -> None:
    n = len(cloud)
    if max(config.patch_sizes) > n or max(config.patch_counts) > n:
        raise TooFewPoints(
            f"cloud of {n} points cannot host counts {config.patch_counts} / sizes {config.patch_sizes}"
        )


def _sphere_level(cloud: PointCloud, count: int, size: int, level: int, seed: int) -> PatchSet:
    pts = cloud.points
    n = pts.shape[0]
    center_idx = farthest_point_sampling(pts, count, seed)
    centers = pts[center_idx]
    diff = centers[:, None, :] - pts[None, :, :]
    d2 = np.einsum("cni,cni->cn", diff, diff)
    order = np.argsort(d2, axis=1, kind="stable")  # ties resolved by lower point index
    need = np.full(count, size, dtype=np.int64)

    # Coverage repair: grow the nearest patch until every point is inside one.
    covered = np.zeros(n, dtype=bool)
    for c in range(count):
        covered[order[c, :size]] = True
    uncovered = np.nonzero(~covered)[0]
    if uncovered.size:
        nearest = np.argmin(d2[:, uncovered], axis=0)
        pos = np.empty((count, n), dtype=np.int64)  # rank of each point in each center's order
        np.put_along_axis(pos, order, np.arange(n)[None, :], axis=1)
        for p, c in zip(uncovered, nearest):
            need[c] = max(need[c], pos[c, p] + 1)

    return _rank_patches(
        cloud,
        centers=centers,
        members=[order[c, : need[c]] for c in range(count)],
        fps_order=np.arange(count),
        level=level,
    )


def _voxel_level(cloud: PointCloud, count: int, level: int, seed: int, resolution: int) -> PatchSet:
    pts = cloud.points
    lo = pts.min(axis=0)
    extent = np.maximum(pts.max(axis=0) - lo, 1e-12)
    vox = np.clip((pts - lo) / extent * resolution, 0, resolution - 1).astype(np.int64)
    lin = (vox[:, 0] * resolution + vox[:, 1]) * resolution + vox[:, 2]
    uniq, inverse = np.unique(lin, return_inverse=True)
    vx = np.stack([uniq // (resolution * resolution), (uniq // resolution) % resolution, uniq % resolution], axis=1)
    voxel_centers = lo + (vx + 0.5) / resolution * extent

    center_idx = farthest_point_sampling(pts, count, seed)
    centers = pts[center_idx]
    d2 = (
        np.einsum("ij,ij->i", voxel_centers, voxel_centers)[:, None]
        - 2.0 * voxel_centers @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    owner_of_voxel = np.argmin(d2, axis=1)
    owner = owner_of_voxel[inverse]
    members = [np.nonzero(owner == c)[0] for c in range(count)]
    keep = [c for c in range(count) if members[c].size]
    return _rank_patches(
        cloud,
        centers=centers[keep],
        members=[members[c] for c in keep],
        fps_order=np.asarray(keep),
        level=level,
    )


def _grid_level(cloud: PointCloud, count: int, level: int) -> PatchSet:
    pts = cloud.points
    m = int(np.ceil(round(count ** (1.0 / 3.0), 9)))
    lo = pts.min(axis=0)
    extent = np.maximum(pts.max(axis=0) - lo, 1e-12)
    cell = np.clip((pts - lo) / extent * m, 0, m - 1).astype(np.int64)
    lin = (cell[:, 0] * m + cell[:, 1]) * m + cell[:, 2]
    uniq, inverse = np.unique(lin, return_inverse=True)
    cx = np.stack([uniq // (m * m), (uniq // m) % m, uniq % m], axis=1)
    centers = lo + (cx + 0.5) / m * extent
    members = [np.nonzero(inverse == i)[0] for i in range(len(uniq))]
    return _rank_patches(
        cloud,
        centers=centers,
        members=members,
        fps_order=np.arange(len(uniq)),
        level=level,
    )


def _rank_patches(cloud, centers, members, fps_order, level) -> PatchSet:
    centroid = cloud.points.mean(axis=0)
    dist = np.linalg.norm(centers - centroid, axis=1)
    order = np.lexsort((fps_order, dist))  # distance first, selection order on ties
    patches = tuple(
        Patch(center=centers[j], member_indices=members[j], level=level, rank=r)
        for r, j in enumerate(order)
    )
    return PatchSet(level=level, patches=patches)


def patchsets_to_json(patchsets: list[PatchSet]) -> str:
    """Debug serialization used by the CLI patch dump."""
    payload = [
        {
            "level": ps.level,
            "centers": [p.center.tolist() for p in ps.patches],
            "member_indices": [p.member_indices.tolist() for p in ps.patches],
            "ranks": [p.rank for p in ps.patches],
        }
        for ps in patchsets
    ]
    return json.dumps(payload, indent=2)


def patchsets_from_json(text: str) -> list[PatchSet]:
    out = []
    for block in json.loads(text):
        patches = tuple(
            Patch(center=np.asarray(c), member_indices=np.asarray(m, dtype=np.int64),
                  level=int(block["level"]), rank=int(r))
            for c, m, r in zip(block["centers"], block["member_indices"], block["ranks"])
        )
        out.append(PatchSet(level=int(block["level"]), patches=patches))
    return out
