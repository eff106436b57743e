"""Dataclass configs, dataset presets and JSON config loading for the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .patchify import PatchConfig

# patch numbers / sizes per dataset regime, stored fine -> coarse
PRESETS = {
    "shapenet": {"patch_counts": (192, 64, 32), "patch_sizes": (8, 32, 64)},
    "real3d": {"patch_counts": (192, 64, 32), "patch_sizes": (8, 32, 64)},
    "industrial": {"patch_counts": (64, 32, 8), "patch_sizes": (32, 64, 192)},
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to run the model on a cloud besides the weights."""

    patch: PatchConfig = field(default_factory=PatchConfig)
    feature_mode: str = "mean_point"
    attention_variant: str = "rope_linear"
    scale_norm: bool = True
    encoder_k: int = 16
    mask_threshold: float = 0.5
    codebook_threshold: float = 0.85

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = {
            "strategy": self.patch.strategy,
            "patch_counts": list(self.patch.patch_counts),
            "patch_sizes": list(self.patch.patch_sizes),
            "seed": self.patch.seed,
            "levels": list(self.patch.levels),
            "voxel_resolution": self.patch.voxel_resolution,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        pd = dict(d.pop("patch", {}))
        if "levels" in pd and pd["levels"] is not None:
            pd["levels"] = tuple(pd["levels"])
        for key in ("patch_counts", "patch_sizes"):
            if key in pd:
                pd[key] = tuple(pd[key])
        return cls(patch=PatchConfig(**pd), **d)

    def config_hash(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def preset_pipeline(name: str, seed: int = 0, **overrides) -> PipelineConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    patch = PatchConfig(seed=seed, **PRESETS[name])
    return PipelineConfig(patch=patch, **overrides)


def load_config_file(path, seed: int | None = None, preset: str | None = None) -> PipelineConfig:
    """Build a PipelineConfig from preset defaults overridden by a JSON file."""
    base = preset_pipeline(preset or "shapenet", seed=seed or 0)
    if path is None:
        return base
    user = json.loads(open(path).read())
    merged = base.to_json()
    for key, value in user.items():
        if key == "patch":
            merged["patch"].update(value)
        else:
            merged[key] = value
    if seed is not None:
        merged["patch"]["seed"] = seed
    return PipelineConfig.from_json(merged)
