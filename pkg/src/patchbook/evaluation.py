"""Inference scoring, ranking metrics and the evaluation report.

Point scores are the L1 norms of predicted offsets normalized by the
per-cloud maximum, then gated to zero wherever the predicted mask falls
below threshold. The object score is the mean of the top 1% of point
scores. AUC-ROC is the Mann-Whitney statistic with half credit for ties;
AUC-PR is average precision over the step curve.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .codebook import Codebook
from .config import PipelineConfig
from .errors import CountMismatch, MissingLabels, SingleClass
from .geometry import PointCloud
from .model import ModelParams
from .pipeline import run_model
from .pointcloud_io import write_ply


@dataclass
class AnomalyScores:
    point_scores: np.ndarray  # in [0, 1], zero where the mask gate closed
    object_score: float
    mask: np.ndarray          # thresholded predicted mask


def point_scores(offsets: np.ndarray, mask_probs: np.ndarray, threshold: float = 0.5) -> AnomalyScores:
    """Per-point anomaly scores from offsets and mask probabilities."""
    off = np.asarray(offsets, dtype=np.float64)
    probs = np.asarray(mask_probs, dtype=np.float64).reshape(-1)
    raw = np.abs(off).sum(axis=1)
    scores = raw / (raw.max() + 1e-12)
    mask = probs >= threshold
    scores[~mask] = 0.0
    return AnomalyScores(point_scores=scores, object_score=object_score(scores), mask=mask)


def object_score(scores) -> float:
    """Mean of the top ceil(1% of N) point scores."""
    s = scores.point_scores if isinstance(scores, AnomalyScores) else np.asarray(scores)
    k = int(np.ceil(0.01 * s.size))
    top = np.partition(s, s.size - k)[s.size - k:]
    return float(top.mean())


def _check_binary(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels).astype(bool)
    if y.all() or (~y).all():
        raise SingleClass("labels must contain both classes")
    return y


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    ranks = _average_ranks(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision over the PR step curve (ties grouped)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order].astype(np.float64)
    # threshold group boundaries: last index of each tied block
    boundary = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y_sorted)[cut]
    fp = np.cumsum(1.0 - y_sorted)[cut]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def export_heatmap(cloud: PointCloud, scores: np.ndarray, path) -> None:
    """Binary PLY with a blue-to-red score ramp.

    Channels: red = floor(255*s + 0.5), green = 0, blue = floor(255*(1-s) + 0.5);
    a score of 0.5 maps to (128, 0, 128).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size != len(cloud):
        raise CountMismatch(f"{s.size} scores for {len(cloud)} points")
    r = np.floor(255.0 * s + 0.5).astype(np.uint8)
    b = np.floor(255.0 * (1.0 - s) + 0.5).astype(np.uint8)
    colors = np.stack([r, np.zeros_like(r), b], axis=1)
    write_ply(path, cloud.points, colors=colors, binary=True)


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class TestSample:
    name: str
    category: str
    cloud: PointCloud          # the test (possibly anomalous) shape
    point_labels: np.ndarray   # bool per point

    @property
    def object_label(self) -> bool:
        return bool(self.point_labels.any())


@dataclass
class ScoredSample:
    name: str
    category: str
    point_scores: np.ndarray
    point_labels: np.ndarray
    object_score: float
    object_label: bool


@dataclass
class MetricsReport:
    point_auc_roc: float
    point_auc_pr: float
    object_auc_roc: float
    object_auc_pr: float
    per_class: dict[str, dict]
    config_hash: str
    n_samples: int

    def to_json(self) -> dict:
        return {
            "point_auc_roc": self.point_auc_roc,
            "point_auc_pr": self.point_auc_pr,
            "object_auc_roc": self.object_auc_roc,
            "object_auc_pr": self.object_auc_pr,
            "per_class": self.per_class,
            "config_hash": self.config_hash,
            "n_samples": self.n_samples,
        }

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "point_auc_roc", "point_auc_pr",
                             "object_auc_roc", "object_auc_pr", "n_samples"])
            for name, row in sorted(self.per_class.items()):
                writer.writerow([name, row["point_auc_roc"], row["point_auc_pr"],
                                 row["object_auc_roc"], row["object_auc_pr"], row["n_samples"]])
            writer.writerow(["__overall__", self.point_auc_roc, self.point_auc_pr,
                             self.object_auc_roc, self.object_auc_pr, self.n_samples])


def score_sample(sample: TestSample, book: Codebook, params: ModelParams,
                 cfg: PipelineConfig) -> ScoredSample:
    with ad.no_grad():
        out = run_model(sample.cloud, book, params, cfg)
    sc = point_scores(out.offsets.data, out.mask_probs.data, cfg.mask_threshold)
    return ScoredSample(
        name=sample.name,
        category=sample.category,
        point_scores=sc.point_scores,
        point_labels=np.asarray(sample.point_labels, dtype=bool),
        object_score=sc.object_score,
        object_label=sample.object_label,
    )


def _metric_block(scored: list[ScoredSample]) -> dict:
    pts = np.concatenate([s.point_scores for s in scored])
    lbl = np.concatenate([s.point_labels for s in scored])
    objs = np.array([s.object_score for s in scored])
    olbl = np.array([s.object_label for s in scored])

    def safe(fn, a, b):
        try:
            return fn(a, b)
        except SingleClass:
            return None

    return {
        "point_auc_roc": safe(auc_roc, pts, lbl),
        "point_auc_pr": safe(auc_pr, pts, lbl),
        "object_auc_roc": safe(auc_roc, objs, olbl),
        "object_auc_pr": safe(auc_pr, objs, olbl),
        "n_samples": len(scored),
    }


def build_report(scored: list[ScoredSample], config_hash: str = "") -> MetricsReport:
    if not scored:
        raise MissingLabels("no labeled test samples")
    overall = _metric_block(scored)
    per_class = {}
    for cat in sorted({s.category for s in scored}):
        per_class[cat] = _metric_block([s for s in scored if s.category == cat])
    return MetricsReport(
        point_auc_roc=overall["point_auc_roc"],
        point_auc_pr=overall["point_auc_pr"],
        object_auc_roc=overall["object_auc_roc"],
        object_auc_pr=overall["object_auc_pr"],
        per_class=per_class,
        config_hash=config_hash,
        n_samples=len(scored),
    )


def evaluate(params: ModelParams, book: Codebook, samples: list[TestSample],
             cfg: PipelineConfig) -> MetricsReport:
    """Full inference + metrics over a labeled test set."""
    if not samples:
        raise MissingLabels("empty test set")
    scored = [score_sample(s, book, params, cfg) for s in samples]
    return build_report(scored, cfg.config_hash())
