"""RoPE-rotated linear cross-attention, gated modulation, prediction head.

Point tokens query the retrieved normal templates; the kernel feature map is
elu(x)+1 applied before the rotary rotation, and the per-query denominator
uses the unrotated maps plus a 1e-6 stabilizer. The rotation can make
effective weights signed; positivity is deliberately not assumed. Patch
discrepancy (1 - cosine) drives a sigmoid gate and feature-wise scale/shift,
and the head adds the attended features back before projecting to the
3-vector offset and the mask logit.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyTemplates, UnsupportedVariant
from .model import FEATURE_DIM, ModelParams, RopeConfig


def rope_rotate(vec: np.ndarray, relpos, config: RopeConfig) -> np.ndarray:
    """Rotate one embedding's coordinate pairs by position-scaled angles."""
    v = np.asarray(vec, dtype=np.float64)
    angles = config.angles(np.asarray(relpos, dtype=np.float64))[0]
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(v)
    out[0::2] = v[0::2] * cos - v[1::2] * sin
    out[1::2] = v[0::2] * sin + v[1::2] * cos
    return out


def cross_attention(
    point_feats: Tensor,
    template_feats: Tensor,
    q_relpos: np.ndarray,
    k_relpos: np.ndarray,
    params: ModelParams,
    variant: str = "rope_linear",
) -> Tensor:
    """Kernelized multi-head cross-attention from points to templates."""
    if variant != "rope_linear":
        raise UnsupportedVariant(f"attention variant {variant!r} is not implemented")
    if template_feats.data.shape[0] == 0:
        raise EmptyTemplates("attention needs at least one template token")
    rope = params.rope
    q = ad.dense(point_feats, params["attn.wq"], params["attn.bq"])
    k = ad.dense(template_feats, params["attn.wk"], params["attn.bk"])
    v = ad.dense(template_feats, params["attn.wv"], params["attn.bv"])

    phi_q = ad.elu_plus_one(q)
    phi_k = ad.elu_plus_one(k)
    q_rot = ad.rope_rows(phi_q, rope.angles(q_relpos).astype(params.dtype))
    k_rot = ad.rope_rows(phi_k, rope.angles(k_relpos).astype(params.dtype))

    hd = rope.head_dim
    heads = []
    for h in range(rope.heads):
        lo, hi = h * hd, (h + 1) * hd
        qh_rot = ad.slice_cols(q_rot, lo, hi)
        kh_rot = ad.slice_cols(k_rot, lo, hi)
        qh = ad.slice_cols(phi_q, lo, hi)
        kh = ad.slice_cols(phi_k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        numer = ad.matmul(qh_rot, ad.matmul(ad.transpose(kh_rot), vh))  # (N, hd)
        key_sum = ad.reshape(ad.tsum(kh, axis=0), (hd, 1))
        denom = ad.add(ad.matmul(qh, key_sum), 1e-6)  # (N, 1)
        heads.append(ad.div(numer, denom))
    return ad.dense(ad.concat(heads, axis=1), params["attn.wo"], params["attn.bo"])


def patch_discrepancy(template: np.ndarray, query: np.ndarray) -> float:
    """1 - cosine between unit-norm template and query features, in [0, 2]."""
    return float(1.0 - np.dot(np.asarray(template, dtype=np.float64),
                              np.asarray(query, dtype=np.float64)))


def patch_discrepancies(query_feats: Tensor, template_feats: Tensor) -> Tensor:
    """(P, 1) tape version of patch_discrepancy for rank-paired lists."""
    dots = ad.tsum(ad.mul(query_feats, template_feats), axis=1, keepdims=True)
    return ad.sub(1.0, dots)


def gated_modulation(z_hat: Tensor, delta: Tensor, params: ModelParams) -> Tensor:
    """Scale/shift attended features by discrepancy-conditioned gating.

    delta is (N, 1): each point carries the discrepancy of its patch. The
    gate saturates in (0, 1)^32; gamma/beta come from one split projection.
    """
    g_hidden = ad.elu_plus_one(ad.dense(delta, params["gate.w1"], params["gate.b1"]))
    rho = ad.sigmoid(ad.dense(g_hidden, params["gate.w2"], params["gate.b2"]))
    m_hidden = ad.elu_plus_one(ad.dense(delta, params["mod.w1"], params["mod.b1"]))
    gamma_beta = ad.dense(m_hidden, params["mod.w2"], params["mod.b2"])
    gamma = ad.slice_cols(gamma_beta, 0, FEATURE_DIM)
    beta = ad.slice_cols(gamma_beta, FEATURE_DIM, 2 * FEATURE_DIM)
    return ad.mul(rho, ad.add(ad.mul(gamma, z_hat), beta))


def predict_head(z_mod: Tensor, z_hat: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Residual feature MLP then a 32 -> 4 projection: offsets + mask logit."""
    cat = ad.concat([z_mod, z_hat], axis=1)
    h = ad.elu_plus_one(ad.dense(cat, params["head.w1"], params["head.b1"]))
    h = ad.add(ad.dense(h, params["head.w2"], params["head.b2"]), z_hat)
    out = ad.dense(h, params["head.wp"], params["head.bp"])
    offsets = ad.slice_cols(out, 0, 3)
    mask_logits = ad.slice_cols(out, 3, 4)
    return offsets, mask_logits
