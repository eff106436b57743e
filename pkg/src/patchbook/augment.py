"""Procedural normal shapes and pseudo-anomalous variants.

Shapes come with analytic surface normals. Deformations return samples whose
ground truth is exact by construction: abnormal + offsets_gt reproduces the
normal cloud bit-for-bit, and the anomaly mask is true exactly where the
offset norm exceeds 1e-9. Cut-offs project points onto the mask boundary
instead of deleting them so the point correspondence (and the offset target)
stays well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BadCount,
    BadWavelength,
    EmptyIntersection,
    MissingNormals,
    PatchbookError,
    RatioOutOfRange,
)
from .geometry import PointCloud, estimate_normals

MASK_EPS = 1e-9
AMPLITUDE_PRESETS = {"small": 0.01, "large": 0.1}
ANOMALY_KINDS = (
    "gaussian_bump",
    "sine_bulge",
    "cutoff_cube",
    "cutoff_cylinder",
    "planar_shift",
    "angular_shift",
)


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    center: tuple[float, float, float]
    sigma: float
    amplitude: float
    extra: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "sigma": self.sigma,
            "amplitude": self.amplitude,
            "extra": self.extra,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AugmentedSample:
    normal: PointCloud
    abnormal: PointCloud
    offsets_gt: np.ndarray
    mask_gt: np.ndarray
    specs: tuple[AugmentationSpec, ...]

    def __post_init__(self):
        if self.offsets_gt.shape != self.normal.points.shape:
            raise ValueError("offsets_gt must be N x 3")
        if self.mask_gt.shape != (len(self.normal),):
            raise ValueError("mask_gt must be length N")


# ---------------------------------------------------------------------------
# shape generation

def gen_shape(kind: str, n: int, seed: int, **params) -> PointCloud:
    """Surface-uniform sample of a procedural shape with analytic normals."""
    if n < 100:
        raise BadCount(f"need n >= 100, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        return _gen_sphere(n, rng, **params)
    if kind == "box":
        return _gen_box(n, rng, **params)
    if kind == "cylinder":
        return _gen_cylinder(n, rng, **params)
    if kind == "torus":
        return _gen_torus(n, rng, **params)
    if kind == "gear":
        return _gen_gear(n, rng, **params)
    raise ValueError(f"unknown shape kind {kind!r}")


def _gen_sphere(n, rng, radius=1.0):
    v = rng.standard_normal((n, 3))
    u = v / np.linalg.norm(v, axis=1)[:, None]
    return PointCloud(radius * u, u)


def _gen_box(n, rng, half_extents=(1.0, 0.8, 0.6)):
    h = np.asarray(half_extents, dtype=np.float64)
    # face order: +x, -x, +y, -y, +z, -z
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * h[axis]
        pts[m, others[0]] = uv[m, 0] * h[others[0]]
        pts[m, others[1]] = uv[m, 1] * h[others[1]]
        nrm[m, axis] = sign
    return PointCloud(pts, nrm)


def _gen_cylinder(n, rng, radius=0.7, half_height=1.0):
    lateral = 2.0 * math.pi * radius * 2.0 * half_height
    cap = math.pi * radius * radius
    region = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    side = region == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-half_height, half_height, size=int(side.sum()))
    nrm[side] = np.stack([np.cos(theta[side]), np.sin(theta[side]), np.zeros(int(side.sum()))], axis=1)
    for which, z in ((1, half_height), (2, -half_height)):
        m = region == which
        rho = radius * np.sqrt(rng.random(int(m.sum())))
        pts[m, 0] = rho * np.cos(theta[m])
        pts[m, 1] = rho * np.sin(theta[m])
        pts[m, 2] = z
        nrm[m] = [0.0, 0.0, math.copysign(1.0, z)]
    return PointCloud(pts, nrm)


def _gen_torus(n, rng, major=1.0, minor=0.3):
    u = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # rejection sample the tube angle against the area element R + r*cos(v)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * math.pi, size=2 * (n - filled))
        accept = rng.random(cand.size) <= (major + minor * np.cos(cand)) / (major + minor)
        take = cand[accept][: n - filled]
        v[filled : filled + take.size] = take
        filled += take.size
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return PointCloud(pts, nrm)


def _gear_profile(theta, base_radius, tooth_amp, teeth):
    r = base_radius + tooth_amp * np.cos(teeth * theta)
    dr = -tooth_amp * teeth * np.sin(teeth * theta)
    return r, dr


def _gen_gear(n, rng, teeth=12, base_radius=0.85, tooth_amp=0.15, half_height=0.25):
    grid = np.linspace(0.0, 2.0 * math.pi, 4096, endpoint=False)
    rg, drg = _gear_profile(grid, base_radius, tooth_amp, teeth)
    lateral_density = np.sqrt(rg * rg + drg * drg)
    area_lateral = 2.0 * half_height * lateral_density.mean() * 2.0 * math.pi
    area_caps = (rg * rg).mean() * 2.0 * math.pi  # two caps, each mean(r^2)/2 * 2*pi
    region = rng.choice(3, size=n, p=np.array(
        [area_lateral, area_caps / 2.0, area_caps / 2.0]) / (area_lateral + area_caps))

    def sample_theta(count, density):
        out = np.empty(count)
        top = density.max()
        filled = 0
        while filled < count:
            cand = rng.uniform(0.0, 2.0 * math.pi, size=2 * (count - filled))
            r, dr = _gear_profile(cand, base_radius, tooth_amp, teeth)
            w = np.sqrt(r * r + dr * dr) if density is lateral_density else r * r
            accept = rng.random(cand.size) <= w / top
            take = cand[accept][: count - filled]
            out[filled : filled + take.size] = take
            filled += take.size
        return out

    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    side = region == 0
    ns = int(side.sum())
    th = sample_theta(ns, lateral_density)
    r, dr = _gear_profile(th, base_radius, tooth_amp, teeth)
    pts[side] = np.stack([r * np.cos(th), r * np.sin(th),
                          rng.uniform(-half_height, half_height, size=ns)], axis=1)
    raw = np.stack([r * np.cos(th) + dr * np.sin(th), r * np.sin(th) - dr * np.cos(th),
                    np.zeros(ns)], axis=1)
    nrm[side] = raw / np.linalg.norm(raw, axis=1)[:, None]
    cap_density = rg * rg
    for which, z in ((1, half_height), (2, -half_height)):
        m = region == which
        cnt = int(m.sum())
        th = sample_theta(cnt, cap_density)
        r, _ = _gear_profile(th, base_radius, tooth_amp, teeth)
        rho = r * np.sqrt(rng.random(cnt))
        pts[m] = np.stack([rho * np.cos(th), rho * np.sin(th), np.full(cnt, z)], axis=1)
        nrm[m] = [0.0, 0.0, math.copysign(1.0, z)]
    return PointCloud(pts, nrm)


# ---------------------------------------------------------------------------
# deformations

# Coordinates of generated samples live on a dyadic grid. Grid multiples of
# 2^-40 (~9e-13, three orders below the mask epsilon and geometrically
# invisible) make every sum and difference of sample coordinates exact in
# float64, so S == S_tilde + o_gt holds bit-for-bit with no reconciliation.
GRID_BITS = 40
_GRID_SCALE = float(2 ** GRID_BITS)


def snap_to_grid(points: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(points, dtype=np.float64) * _GRID_SCALE) / _GRID_SCALE


def _finish_sample(cloud: PointCloud, abnormal_pts: np.ndarray, specs) -> AugmentedSample:
    normal = snap_to_grid(cloud.points)
    abnormal = snap_to_grid(abnormal_pts)
    offsets = normal - abnormal  # both on the grid: exact
    mask = np.linalg.norm(offsets, axis=1) > MASK_EPS
    return AugmentedSample(
        normal=PointCloud(normal, cloud.normals),
        abnormal=PointCloud(abnormal, cloud.normals),
        offsets_gt=offsets,
        mask_gt=mask,
        specs=tuple(specs),
    )


def _require_normals(cloud: PointCloud) -> np.ndarray:
    if cloud.normals is None:
        raise MissingNormals("deformation needs per-point normals")
    return cloud.normals


def gaussian_bump_displacement(points, normals, center, sigma, amplitude):
    """Normal-direction Gaussian displacement with sub-1e-9 truncation."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d2 = np.einsum("ij,ij->i", points - center, points - center)
    mag = amplitude * np.exp(-d2 / (2.0 * sigma * sigma))
    mag[np.abs(mag) < MASK_EPS] = 0.0
    return mag[:, None] * normals


def apply_gaussian_bump(cloud: PointCloud, center, sigma: float, amplitude: float,
                        spec: Optional[AugmentationSpec] = None) -> AugmentedSample:
    normals = _require_normals(cloud)
    center = np.asarray(center, dtype=np.float64)
    d = gaussian_bump_displacement(cloud.points, normals, center, sigma, amplitude)
    spec = spec or AugmentationSpec("gaussian_bump", tuple(center), sigma, amplitude)
    return _finish_sample(cloud, cloud.points + d, [spec])


def sine_bulge_displacement(points, normals, center, sigma, amplitude, wavelength):
    """Gaussian-windowed radial sine wave along normals, alternating sign."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not wavelength > 0:
        raise BadWavelength(f"wavelength must be positive, got {wavelength}")
    r = np.linalg.norm(points - center, axis=1)
    mag = amplitude * np.exp(-(r * r) / (2.0 * sigma * sigma)) * np.sin(2.0 * math.pi * r / wavelength)
    mag[np.abs(mag) < MASK_EPS] = 0.0
    return mag[:, None] * normals


def apply_sine_bulge(cloud: PointCloud, center, sigma: float, amplitude: float, wavelength: float,
                     spec: Optional[AugmentationSpec] = None) -> AugmentedSample:
    normals = _require_normals(cloud)
    center = np.asarray(center, dtype=np.float64)
    d = sine_bulge_displacement(cloud.points, normals, center, sigma, amplitude, wavelength)
    spec = spec or AugmentationSpec("sine_bulge", tuple(center), sigma, amplitude,
                                    extra={"wavelength": wavelength})
    return _finish_sample(cloud, cloud.points + d, [spec])


def apply_cutoff(cloud: PointCloud, shape: str, center, size: float,
                 axis=(0.0, 0.0, 1.0), half_height: Optional[float] = None,
                 spec: Optional[AugmentationSpec] = None) -> AugmentedSample:
    """Project points strictly inside a cubic/cylindrical mask onto its boundary."""
    center = np.asarray(center, dtype=np.float64)
    pts = cloud.points.copy()
    if shape == "cube":
        d = pts - center
        linf = np.abs(d).max(axis=1)
        inside = linf < size
        if not inside.any():
            raise EmptyIntersection("cube mask touches no points")
        which = np.abs(d[inside]).argmax(axis=1)
        rows = np.nonzero(inside)[0]
        signs = np.sign(d[rows, which])
        signs[signs == 0.0] = 1.0
        pts[rows, which] = center[which] + signs * size
    elif shape == "cylinder":
        ax = np.asarray(axis, dtype=np.float64)
        ax = ax / np.linalg.norm(ax)
        hh = size if half_height is None else half_height
        rel = pts - center
        z = rel @ ax
        radial = rel - z[:, None] * ax[None, :]
        rho = np.linalg.norm(radial, axis=1)
        inside = (rho < size) & (np.abs(z) < hh)
        if not inside.any():
            raise EmptyIntersection("cylinder mask touches no points")
        rows = np.nonzero(inside)[0]
        to_wall = size - rho[rows]
        to_cap = hh - np.abs(z[rows])
        use_wall = (to_wall < to_cap) & (rho[rows] > 1e-12)
        wall = rows[use_wall]
        pts[wall] = (
            center
            + z[wall, None] * ax[None, :]
            + radial[wall] * (size / rho[wall])[:, None]
        )
        cap = rows[~use_wall]
        zs = np.sign(z[cap])
        zs[zs == 0.0] = 1.0
        pts[cap] = pts[cap] + ((zs * hh) - z[cap])[:, None] * ax[None, :]
    else:
        raise ValueError(f"unknown cutoff shape {shape!r}")
    spec = spec or AugmentationSpec(
        f"cutoff_{shape}", tuple(center), sigma=size, amplitude=0.0,
        extra={"axis": list(np.asarray(axis, dtype=float)), "half_height": half_height},
    )
    return _finish_sample(cloud, pts, [spec])


def halfspace_region(cloud: PointCloud, direction, ratio: float) -> np.ndarray:
    """Boolean mask of the ratio-quantile of points along a direction."""
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    proj = cloud.points @ u
    cut = np.quantile(proj, 1.0 - ratio)
    return proj > cut


def angular_sector_region(cloud: PointCloud, axis, ratio: float, start_fraction: float = 0.0) -> np.ndarray:
    """Contiguous azimuthal sector (about an axis through the centroid)."""
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ ax) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ ax) * ax
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(ax, e1)
    rel = cloud.points - cloud.centroid
    az = np.arctan2(rel @ e2, rel @ e1)  # (-pi, pi]
    order = np.argsort(az, kind="stable")
    n = len(cloud)
    take = int(round(ratio * n))
    take = max(1, min(take, n))
    startpos = int(start_fraction * n) % n
    sel = order[np.arange(startpos, startpos + take) % n]
    mask = np.zeros(n, dtype=bool)
    mask[sel] = True
    return mask


def _rotation_matrix(axis, angle: float) -> np.ndarray:
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    x, y, z = ax
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def apply_rigid_shift(cloud: PointCloud, kind: str, region: np.ndarray, motion: dict,
                      spec: Optional[AugmentationSpec] = None) -> AugmentedSample:
    """Rigidly move a region: translation (planar) or rotation about the centroid."""
    region = np.asarray(region, dtype=bool)
    frac = region.mean()
    if not 0.1 <= frac <= 0.5:
        raise RatioOutOfRange(f"region holds {frac:.3f} of points, need [0.1, 0.5]")
    pts = cloud.points.copy()
    if kind == "planar_shift":
        t = np.asarray(motion["translation"], dtype=np.float64)
        pts[region] = pts[region] + t
    elif kind == "angular_shift":
        rot = _rotation_matrix(motion["axis"], float(motion["angle"]))
        centroid = cloud.centroid
        pts[region] = (pts[region] - centroid) @ rot.T + centroid
    else:
        raise ValueError(f"unknown rigid shift kind {kind!r}")
    spec = spec or AugmentationSpec(kind, tuple(cloud.centroid), sigma=1.0, amplitude=0.0,
                                    extra={k: np.asarray(v).tolist() if not np.isscalar(v) else v
                                           for k, v in motion.items()})
    return _finish_sample(cloud, pts, [spec])


# ---------------------------------------------------------------------------
# composed negative augmentation

def negative_augment(
    cloud: PointCloud,
    n_anomalies: int,
    preset: str = "large",
    seed: int = 0,
    kinds: tuple[str, ...] = ANOMALY_KINDS,
    kind_weights: Optional[tuple[float, ...]] = None,
    sigma_range: tuple[float, float] = (0.08, 0.22),
) -> AugmentedSample:
    """Compose random deformations into one pseudo-anomalous sample.

    Deformations apply sequentially to the already-deformed cloud; the final
    offsets are recomputed from the composition so the exactness invariant
    holds regardless of intermediate states. Fragment placements that raise
    EmptyIntersection are redrawn up to 8 times.
    """
    if cloud.normals is None:
        normals, _ = estimate_normals(cloud, k=min(16, len(cloud) - 1))
        cloud = cloud.with_normals(normals)
    amplitude = AMPLITUDE_PRESETS[preset] if preset in AMPLITUDE_PRESETS else float(preset)
    rng = np.random.default_rng(seed)
    weights = None
    if kind_weights is not None:
        w = np.asarray(kind_weights, dtype=np.float64)
        weights = w / w.sum()

    current = cloud.points.copy()
    specs: list[AugmentationSpec] = []
    for _ in range(n_anomalies):
        for attempt in range(8):
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            try:
                current, spec = _apply_random_fragment(
                    PointCloud(current, cloud.normals), kind, amplitude, rng, sigma_range)
                specs.append(spec)
                break
            except (EmptyIntersection, RatioOutOfRange):
                if attempt == 7:
                    raise
    sample = _finish_sample(cloud, current, specs)
    if n_anomalies > 0 and not sample.mask_gt.any():
        raise PatchbookError("augmentation produced an empty anomaly mask")
    return sample


def _apply_random_fragment(cloud, kind, amplitude, rng, sigma_range):
    center = cloud.points[int(rng.integers(len(cloud)))]
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == "gaussian_bump":
        sigma = rng.uniform(*sigma_range)
        frag = apply_gaussian_bump(cloud, center, sigma, sign * amplitude)
    elif kind == "sine_bulge":
        sigma = rng.uniform(*sigma_range)
        wavelength = rng.uniform(1.5 * sigma, 4.0 * sigma)
        frag = apply_sine_bulge(cloud, center, sigma, sign * amplitude, wavelength)
    elif kind == "cutoff_cube":
        size = rng.uniform(0.8, 2.0) * max(amplitude, 0.05)
        frag = apply_cutoff(cloud, "cube", center, size)
    elif kind == "cutoff_cylinder":
        size = rng.uniform(0.8, 2.0) * max(amplitude, 0.05)
        axis = rng.standard_normal(3)
        frag = apply_cutoff(cloud, "cylinder", center, size, axis=axis)
    elif kind == "planar_shift":
        ratio = rng.uniform(0.1, 0.5)
        direction = rng.standard_normal(3)
        region = halfspace_region(cloud, direction, ratio)
        t = rng.standard_normal(3)
        t = amplitude * t / np.linalg.norm(t)
        frag = apply_rigid_shift(cloud, "planar_shift", region, {"translation": t})
    elif kind == "angular_shift":
        ratio = rng.uniform(0.1, 0.5)
        axis = rng.standard_normal(3)
        region = angular_sector_region(cloud, axis, ratio, start_fraction=rng.random())
        angle = sign * amplitude * math.pi
        frag = apply_rigid_shift(cloud, "angular_shift", region, {"axis": axis, "angle": angle})
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    return frag.abnormal.points, frag.specs[0]
