"""On-disk sample bundles: <name>_normal.ply, <name>_abnormal.ply, <name>_labels.json.

The labels file holds the exact offsets, the anomaly mask and the applied
deformation specs; clean samples are just bundles with an all-false mask.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .augment import AugmentationSpec, AugmentedSample
from .errors import MalformedFile
from .evaluation import TestSample
from .geometry import PointCloud
from .pointcloud_io import load_pointcloud, write_ply


def write_bundle(directory, name: str, sample: AugmentedSample, category: str | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(directory / f"{name}_normal.ply", sample.normal.points, normals=sample.normal.normals)
    write_ply(directory / f"{name}_abnormal.ply", sample.abnormal.points, normals=sample.abnormal.normals)
    labels = {
        "offsets": np.asarray(sample.offsets_gt, dtype=np.float64).tolist(),
        "mask": np.asarray(sample.mask_gt, dtype=bool).tolist(),
        "specs": [s.to_json() for s in sample.specs],
    }
    if category is not None:
        labels["category"] = category
    with open(directory / f"{name}_labels.json", "w") as fh:
        json.dump(labels, fh)


def list_bundles(directory) -> list[str]:
    directory = Path(directory)
    return sorted(p.name[: -len("_labels.json")] for p in directory.glob("*_labels.json"))


def load_bundle(directory, name: str):
    """Returns (normal, abnormal, offsets, mask, specs, category)."""
    directory = Path(directory)
    normal = load_pointcloud(directory / f"{name}_normal.ply")
    abnormal = load_pointcloud(directory / f"{name}_abnormal.ply")
    labels_path = directory / f"{name}_labels.json"
    if not labels_path.exists():
        raise MalformedFile(f"missing labels file for bundle {name}")
    labels = json.loads(labels_path.read_text())
    offsets = np.asarray(labels["offsets"], dtype=np.float64)
    mask = np.asarray(labels["mask"], dtype=bool)
    if offsets.shape != abnormal.points.shape or mask.shape[0] != len(abnormal):
        raise MalformedFile(f"label shapes do not match cloud in bundle {name}")
    specs = tuple(
        AugmentationSpec(
            kind=s["kind"], center=tuple(s["center"]), sigma=s["sigma"],
            amplitude=s["amplitude"], extra=s.get("extra", {}), seed=s.get("seed", 0),
        )
        for s in labels.get("specs", [])
    )
    category = labels.get("category", name.split("_")[0])
    return normal, abnormal, offsets, mask, specs, category


def load_test_samples(directory) -> list[TestSample]:
    """Test views of every bundle in a directory (abnormal cloud + labels)."""
    out = []
    for name in list_bundles(directory):
        _, abnormal, _, mask, _, category = load_bundle(directory, name)
        out.append(TestSample(name=name, category=category, cloud=abnormal, point_labels=mask))
    return out
