"""Loss terms and the online training loop.

Each step draws a normal cloud, augments it fresh (online negatives), runs
the shared forward pass and takes one Adam step on the combined loss. The
direction term only sees points with a nonzero ground-truth offset; zero
vectors have no direction to align with. The codebook is rebuilt from the
current encoder every rebuild_every epochs since, unlike a frozen pretrained
backbone, the encoder here moves during training.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .augment import ANOMALY_KINDS, negative_augment
from .codebook import Codebook, serialize
from .config import PipelineConfig
from .encoder import encoder_inputs
from .errors import NaNLoss, NonFiniteValues, ShapeMismatch
from .geometry import PointCloud, estimate_normals
from .model import ModelParams, save_checkpoint
from .pipeline import build_codebook, run_model


@dataclass(frozen=True)
class LossWeights:
    sim: float = 0.5
    bce: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.sim) and np.isfinite(self.bce) and self.sim >= 0 and self.bce >= 0):
            raise ValueError("loss weights must be finite and nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300            # paper-scale runs use 1500
    steps_per_epoch: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 1          # clouds per optimizer step
    anomalies_min: int = 1
    anomalies_max: int = 2
    amplitude_preset: str = "mixed"   # small | large | mixed
    seed: int = 0
    checkpoint_every: int = 100
    rebuild_every: int = 25
    dtype: str = "float32"       # float64 for deterministic-loss tests
    weights: LossWeights = field(default_factory=LossWeights)
    kind_weights: tuple[float, ...] | None = None
    sigma_range: tuple[float, float] = (0.08, 0.22)

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 1, learning rate positive")


# ---------------------------------------------------------------------------
# losses

def _check_offsets_shape(pred: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if pred.data.shape != gt.shape or gt.ndim != 2 or gt.shape[1] != 3:
        raise ShapeMismatch(f"offsets {pred.data.shape} vs ground truth {gt.shape}")
    return gt


def loss_dist(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-point L1 distance between predicted and true offsets."""
    gt = _check_offsets_shape(pred, gt)
    diff = ad.sub(pred, ad.constant(gt.astype(pred.dtype)))
    return ad.tmean(ad.tsum(ad.tabs(diff), axis=1))


def loss_sim(pred: Tensor, gt: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Negative mean of (1 + cosine)/2 over points with nonzero true offsets.

    Returns exactly 0 when no point has a nonzero offset (the direction of a
    zero vector is undefined; epsilon alone would align against noise).
    """
    gt = _check_offsets_shape(pred, gt)
    gt_norms = np.linalg.norm(gt, axis=1)
    valid = np.nonzero(gt_norms > 0.0)[0]
    if valid.size == 0:
        return ad.constant(np.zeros((), dtype=pred.dtype))
    p = ad.gather_rows(pred, valid)
    g = ad.constant(gt[valid].astype(pred.dtype))
    dots = ad.tsum(ad.mul(p, g), axis=1, keepdims=True)
    # 1e-30 floor keeps sqrt differentiable if a predicted row is exactly zero
    pn = ad.sqrt(ad.add(ad.tsum(ad.mul(p, p), axis=1, keepdims=True), 1e-30))
    gn = ad.constant(gt_norms[valid, None].astype(pred.dtype))
    cos = ad.div(dots, ad.add(ad.mul(pn, gn), eps))
    return ad.mul(ad.tmean(ad.add(cos, 1.0)), -0.5)


def loss_bce(mask_probs: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(gt_mask).reshape(-1)
    if mask_probs.data.size != y.size:
        raise ShapeMismatch(f"mask probs {mask_probs.data.shape} vs labels {y.shape}")
    p = ad.clip(ad.reshape(mask_probs, (-1, 1)), 1e-7, 1.0 - 1e-7)
    yc = ad.constant(y.astype(mask_probs.dtype).reshape(-1, 1))
    ll = ad.add(ad.mul(yc, ad.log(p)), ad.mul(ad.sub(1.0, yc), ad.log(ad.sub(1.0, p))))
    return ad.mul(ad.tmean(ll), -1.0)


def loss_total(dist: Tensor, sim: Tensor, bce: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    return ad.add(dist, ad.add(ad.mul(sim, weights.sim), ad.mul(bce, weights.bce)))


def sample_losses(output, sample, weights: LossWeights):
    """All four loss terms for one forward pass on an augmented sample."""
    ld = loss_dist(output.offsets, sample.offsets_gt)
    ls = loss_sim(output.offsets, sample.offsets_gt)
    lb = loss_bce(output.mask_probs, sample.mask_gt)
    return ld, ls, lb, loss_total(ld, ls, lb, weights)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: ModelParams
    codebook: Codebook
    log_rows: list[dict]
    checkpoint_path: Path
    codebook_path: Path
    log_path: Path


def _ensure_normals(cloud: PointCloud) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    normals, _ = estimate_normals(cloud, k=min(16, len(cloud) - 1))
    return cloud.with_normals(normals)


def train(normal_clouds: list[PointCloud], cfg: TrainConfig, pipe: PipelineConfig,
          out_dir, cloud_ids: list[str] | None = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    clouds = [_ensure_normals(c) for c in normal_clouds]
    ids = list(cloud_ids or [f"cloud_{i}" for i in range(len(clouds))])

    params = ModelParams(seed=cfg.seed, dtype=dtype)
    adam = AdamState(lr=cfg.learning_rate)
    enc_cache = [encoder_inputs(c, pipe.encoder_k) for c in clouds]
    book = build_codebook(clouds, params, pipe, ids, enc_cache)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB00C]))

    log_rows: list[dict] = []
    ckpt_path = out_dir / "model.pbck"
    book_path = out_dir / "codebook.pbcb"
    meta = {"pipeline": pipe.to_json(), "epochs": cfg.epochs, "seed": cfg.seed, "dtype": cfg.dtype}

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.rebuild_every and epoch > 1 and (epoch - 1) % cfg.rebuild_every == 0:
            book = build_codebook(clouds, params, pipe, ids, enc_cache)
        sums = np.zeros(4)
        for _ in range(cfg.steps_per_epoch):
            for _ in range(cfg.batch_size):
                ci = int(rng.integers(len(clouds)))
                preset = cfg.amplitude_preset
                if preset == "mixed":
                    preset = "small" if rng.random() < 0.5 else "large"
                n_anoms = int(rng.integers(cfg.anomalies_min, cfg.anomalies_max + 1))
                step_seed = int(rng.integers(2**31))
                sample = negative_augment(
                    clouds[ci], n_anoms, preset, step_seed,
                    kinds=ANOMALY_KINDS, kind_weights=cfg.kind_weights,
                    sigma_range=cfg.sigma_range,
                )
                try:
                    out = run_model(sample.abnormal, book, params, pipe)
                    ld, ls, lb, lt = sample_losses(out, sample, cfg.weights)
                    if not np.isfinite(lt.data):
                        raise NonFiniteValues("loss")
                    params.zero_grads()
                    lt.backward()
                    adam_step(params.tensors, params.grads(), adam)
                except NonFiniteValues as exc:
                    raise NaNLoss(
                        f"non-finite loss at epoch {epoch} (cloud {ids[ci]}, "
                        f"step seed {step_seed}): {exc}"
                    ) from exc
                sums += [lt.item(), ld.item(), ls.item(), lb.item()]
        denom = cfg.steps_per_epoch * cfg.batch_size
        log_rows.append({
            "epoch": epoch,
            "loss_total": sums[0] / denom,
            "loss_dist": sums[1] / denom,
            "loss_sim": sums[2] / denom,
            "loss_bce": sums[3] / denom,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        if cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_checkpoint(ckpt_path, params, meta)

    # final artifacts reflect the final encoder state
    book = build_codebook(clouds, params, pipe, ids, enc_cache)
    save_checkpoint(ckpt_path, params, meta)
    serialize(book, book_path)
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss_total", "loss_dist",
                                                "loss_sim", "loss_bce", "wall_ms"])
        writer.writeheader()
        writer.writerows(log_rows)
    return TrainResult(params, book, log_rows, ckpt_path, book_path, log_path)
