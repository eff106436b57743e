"""Shared forward pass: patchify, featurize, retrieve, select scale, fuse.

Both the trainer and the evaluator run this path; the trainer keeps the tape
alive for backprop while the evaluator wraps it in no_grad. The codebook is
always treated as a constant snapshot inside one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import Codebook, retrieve_batch, scale_similarity, select_scale, update
from .config import PipelineConfig
from .encoder import encoder_forward, encoder_inputs, patch_features
from .fusion import cross_attention, gated_modulation, patch_discrepancies, predict_head
from .geometry import PointCloud, SpatialKey, spatial_hash_keys
from .model import ModelParams
from .patchify import PatchSet, patchify


@dataclass
class ModelOutput:
    offsets: Tensor          # (N, 3) predicted anomaly offsets
    mask_logits: Tensor      # (N, 1)
    mask_probs: Tensor       # (N, 1) sigmoid of the logits
    selected_level: int
    alphas: dict[int, float]
    patchsets: list[PatchSet]
    assignment: np.ndarray   # per point: row of its patch at the selected level
    deltas: Tensor           # (P, 1) per-patch discrepancies at that level


def assign_points_to_patches(patchset: PatchSet, cloud: PointCloud) -> np.ndarray:
    """Owning patch row per point: nearest center among containing patches.

    Coverage guarantees every point appears in at least one patch; ties go
    to the lower rank because later patches only win strictly closer.
    """
    n = len(cloud)
    best = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    for row, patch in enumerate(patchset.patches):
        idx = patch.member_indices
        d = np.linalg.norm(cloud.points[idx] - patch.center, axis=1)
        closer = d < best[idx]
        sub = idx[closer]
        best[sub] = d[closer]
        owner[sub] = row
    if (owner < 0).any():
        # patch sets built elsewhere may not cover; fall back to nearest center
        centers = patchset.centers
        missing = np.nonzero(owner < 0)[0]
        d = np.linalg.norm(cloud.points[missing, None, :] - centers[None, :, :], axis=2)
        owner[missing] = d.argmin(axis=1)
    return owner


def run_model(cloud: PointCloud, book: Codebook, params: ModelParams,
              cfg: PipelineConfig, enc_inputs: np.ndarray | None = None) -> ModelOutput:
    """Full forward pass over one (test or pseudo-anomalous) cloud."""
    if enc_inputs is None:
        enc_inputs = encoder_inputs(cloud, cfg.encoder_k)
    feats = encoder_forward(enc_inputs, params)
    patchsets = patchify(cloud, cfg.patch)

    per_level: dict[int, tuple[PatchSet, Tensor, np.ndarray]] = {}
    alphas: dict[int, float] = {}
    counts: dict[int, int] = {}
    for ps in patchsets:
        pf = patch_features(ps, cloud, feats, cfg.feature_mode, params)
        templates, _, _ = retrieve_batch(book, pf.data, ps.level)
        alphas[ps.level] = scale_similarity(pf.data, templates)
        counts[ps.level] = len(ps)
        per_level[ps.level] = (ps, pf, templates)

    level = select_scale(alphas, counts, normalized=cfg.scale_norm)
    ps, pf, templates = per_level[level]
    template_const = ad.constant(templates.astype(params.dtype))
    deltas = patch_discrepancies(pf, template_const)

    assignment = assign_points_to_patches(ps, cloud)
    member_centroids = ps.member_centroids(cloud)
    q_relpos = cloud.points - member_centroids[assignment]
    k_relpos = ps.centers - cloud.points.mean(axis=0)

    z_hat = cross_attention(feats, template_const, q_relpos, k_relpos, params,
                            variant=cfg.attention_variant)
    delta_pp = ad.gather_rows(deltas, assignment)
    z_mod = gated_modulation(z_hat, delta_pp, params)
    offsets, mask_logits = predict_head(z_mod, z_hat, params)
    return ModelOutput(
        offsets=offsets,
        mask_logits=mask_logits,
        mask_probs=ad.sigmoid(mask_logits),
        selected_level=level,
        alphas=alphas,
        patchsets=patchsets,
        assignment=assignment,
        deltas=deltas,
    )


def build_codebook(
    clouds: list[PointCloud],
    params: ModelParams,
    cfg: PipelineConfig,
    source_ids: list[str] | None = None,
    enc_inputs_cache: list[np.ndarray] | None = None,
) -> Codebook:
    """Populate a fresh per-level codebook from normal clouds, in rank order.

    The spatial-hash cell per level is fixed from the first cloud's patches
    (2x the mean bounding radius) so keys are comparable across clouds.
    """
    book = Codebook(threshold=cfg.codebook_threshold)
    cells: dict[int, float] = {}
    with ad.no_grad():
        for ci, cloud in enumerate(clouds):
            inputs = enc_inputs_cache[ci] if enc_inputs_cache is not None else encoder_inputs(cloud, cfg.encoder_k)
            feats = encoder_forward(inputs, params)
            for ps in patchify(cloud, cfg.patch):
                pf = patch_features(ps, cloud, feats, cfg.feature_mode, params).data
                cell = cells.setdefault(ps.level, 2.0 * ps.mean_bounding_radius(cloud))
                keys = spatial_hash_keys(ps.centers, ps.level, cell)
                for row in range(len(ps)):
                    update(book, pf[row], SpatialKey(key=int(keys[row]), level=ps.level))
    book.metadata = {
        "source_ids": list(source_ids or [f"cloud_{i}" for i in range(len(clouds))]),
        "config_hash": cfg.config_hash(),
        "hash_cells": {str(k): v for k, v in sorted(cells.items())},
        "feature_mode": cfg.feature_mode,
    }
    return book
