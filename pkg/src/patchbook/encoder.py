"""Per-point feature extraction and the three patch-feature modes.

Point features come from local k-NN statistics (relative position to the
neighborhood centroid, covariance eigenvalues, outward normal) pushed
through a 9-64-64-32 MLP. All inputs are relative quantities, which is what
makes the downstream patch features translation invariant.

Patch features reduce member point features to a single unit vector:
  mean_point    inverse-distance interpolation of the 3 member features
                nearest to the patch member centroid (the default)
  pooling       elementwise max over member features
  mean_feature  elementwise mean over member features
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyPatch, TooFewPoints
from .geometry import PointCloud, neighborhood_geometry
from .model import ModelParams
from .patchify import Patch, PatchSet

PATCH_FEATURE_MODES = ("mean_point", "pooling", "mean_feature")
ENCODER_K = 16


def encoder_inputs(cloud: PointCloud, k: int = ENCODER_K) -> np.ndarray:
    """Parameter-free (N, 9) feature inputs; cacheable per cloud."""
    n = len(cloud)
    if n < k:
        raise TooFewPoints(f"encoder needs at least {k} points, got {n}")
    rel, eigvals, normals, _ = neighborhood_geometry(cloud.points, k)
    return np.concatenate([rel, eigvals, normals], axis=1)


def encoder_forward(inputs: np.ndarray, params: ModelParams) -> Tensor:
    """(N, 9) inputs -> (N, 32) point features through the encoder MLP."""
    x = ad.constant(inputs, dtype=params.dtype)
    h = ad.elu_plus_one(ad.dense(x, params["enc.w1"], params["enc.b1"]))
    h = ad.elu_plus_one(ad.dense(h, params["enc.w2"], params["enc.b2"]))
    return ad.dense(h, params["enc.w3"], params["enc.b3"])


def encode_points(cloud: PointCloud, params: ModelParams, k: int = ENCODER_K) -> Tensor:
    return encoder_forward(encoder_inputs(cloud, k), params)


def _interp_weights(patchset: PatchSet, cloud: PointCloud, dtype) -> np.ndarray:
    """(P, N) inverse-distance weights of the 3 members nearest each patch
    member centroid; rows sum to 1."""
    n = len(cloud)
    w = np.zeros((len(patchset), n))
    for r, patch in enumerate(patchset.patches):
        members = patch.member_indices
        query = cloud.points[members].mean(axis=0)
        d = np.linalg.norm(cloud.points[members] - query, axis=1)
        order = np.argsort(d, kind="stable")[: min(3, members.size)]
        inv = 1.0 / (d[order] + 1e-9)
        w[r, members[order]] = inv / inv.sum()
    return w.astype(dtype)


def _mean_weights(patchset: PatchSet, cloud: PointCloud, dtype) -> np.ndarray:
    n = len(cloud)
    w = np.zeros((len(patchset), n))
    for r, patch in enumerate(patchset.patches):
        w[r, patch.member_indices] = 1.0 / patch.member_indices.size
    return w.astype(dtype)


def patch_features(patchset: PatchSet, cloud: PointCloud, features: Tensor,
                   mode: str, params: ModelParams) -> Tensor:
    """(P, 32) unit-norm patch features for one level, rank order preserved."""
    if mode not in PATCH_FEATURE_MODES:
        raise ValueError(f"unknown patch feature mode {mode!r}")
    if mode == "pooling":
        raw = ad.segment_max(features, [p.member_indices for p in patchset.patches])
    else:
        weights = (
            _interp_weights(patchset, cloud, params.dtype)
            if mode == "mean_point"
            else _mean_weights(patchset, cloud, params.dtype)
        )
        raw = ad.matmul(ad.constant(weights), features)
    return ad.l2_normalize_lastdim(raw)


def patch_feature(patch: Patch, cloud: PointCloud, features: Tensor,
                  mode: str, params: ModelParams) -> Tensor:
    """Single-patch version of patch_features (returns a (1, 32) tensor)."""
    if patch.member_indices.size == 0:
        raise EmptyPatch("cannot featurize an empty patch")
    single = PatchSet(level=patch.level, patches=(patch,))
    return patch_features(single, cloud, features, mode, params)
