"""Synthetic CT phantoms with inserted nodules and simulated reader ratings.

Volumes are lung-like noise around -800 HU; nodules are soft-edged blobs
near +40 HU whose in-plane boundary can be made irregular. Each nodule gets
four simulated reader ratings whose averages encode its class: benign mean
malignancy in [1, 2.5], malignant in [3.5, 5], so nothing ever lands in the
excluded band at exactly 3. Appearance drives the ratings (irregular
boundaries raise spiculation/lobulation and lower sphericity/margin), which
gives the alignment stage a learnable signal.

The generator emits exactly the manifest format that `load_manifest` reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .ingest import CTVolume, NoduleAnnotation, SliceContour, median_nodule_slice
from .manifest import load_manifest, mask_to_rle, save_volume, write_manifest

BACKGROUND_HU = -800.0
NODULE_PEAK_HU = 40.0


@dataclass(frozen=True)
class PhantomSpec:
    """Configuration for one synthetic dataset."""

    n_volumes: int = 1
    dims: tuple[int, int, int] = (10, 64, 64)
    nodules_per_volume: tuple[int, int] = (1, 2)
    malignant_fraction: float = 0.5
    benign_radius: tuple[float, float] = (4.5, 6.0)
    malignant_radius: tuple[float, float] = (6.5, 9.0)
    benign_irregularity: tuple[float, float] = (0.0, 0.12)
    malignant_irregularity: tuple[float, float] = (0.3, 0.55)
    peak_hu_range: tuple[float, float] = (25.0, 70.0)
    noise_hu: float = 150.0
    rating_noise: float = 0.3
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        radius_disjoint = (
            self.benign_radius[1] < self.malignant_radius[0]
            or self.malignant_radius[1] < self.benign_radius[0]
        )
        irregularity_disjoint = (
            self.benign_irregularity[1] < self.malignant_irregularity[0]
            or self.malignant_irregularity[1] < self.benign_irregularity[0]
        )
        if not (radius_disjoint or irregularity_disjoint):
            raise ValueError(
                "benign and malignant appearance ranges must be disjoint in at "
                "least one dimension (radius or irregularity)"
            )
        if self.nodules_per_volume[0] > self.nodules_per_volume[1]:
            raise ValueError(f"bad nodules_per_volume range {self.nodules_per_volume}")


@dataclass(frozen=True)
class NoduleTruth:
    """Generator bookkeeping for one inserted nodule."""

    scan_id: str
    nodule_id: str
    cls: str
    radius: float
    irregularity: float
    peak_hu: float
    mean_malignancy: float
    median_slice: int


@dataclass
class PhantomDataset:
    manifest_path: Path
    volumes: list[CTVolume] = field(default_factory=list)
    annotations: list[NoduleAnnotation] = field(default_factory=list)
    truth: list[NoduleTruth] = field(default_factory=list)

    def load_handle(self):
        return load_manifest(self.manifest_path)


def _boundary_shape(theta: np.ndarray, irregularity: float, rng: np.random.Generator) -> np.ndarray:
    """Angular radius modulation in [1 - irr, 1 + irr]."""
    a1, a2 = rng.uniform(0.4, 1.0, size=2)
    p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
    raw = a1 * np.sin(3 * theta + p1) + a2 * np.sin(5 * theta + p2)
    return 1.0 + irregularity * raw / (a1 + a2)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _round_rating(value: float, lo: float = 1.0, hi: float = 5.0) -> float:
    return round(float(np.clip(value, lo, hi)), 4)


def _simulate_readings(cls, radius, irregularity, peak_hu, spec, rng):
    """Four reader ratings whose means reflect the nodule's appearance."""
    rmin = min(spec.benign_radius[0], spec.malignant_radius[0])
    rmax = max(spec.benign_radius[1], spec.malignant_radius[1])
    size01 = (radius - rmin) / max(rmax - rmin, 1e-9)
    contrast01 = (peak_hu - spec.peak_hu_range[0]) / max(
        spec.peak_hu_range[1] - spec.peak_hu_range[0], 1e-9
    )
    means = {
        "subtlety": 1.0 + 4.0 * contrast01,
        "internal_structure": 2.5,
        "sphericity": 5.0 - 5.5 * irregularity,
        "calcification": 4.0 - 2.0 * irregularity,
        "margin": 5.0 - 5.0 * irregularity,
        "lobulation": 1.0 + 5.0 * irregularity,
        "spiculation": 1.0 + 6.0 * irregularity,
        "texture": 2.0 + 3.0 * size01,
    }
    if cls == "malignant":
        mal_mean = 3.8 + 2.0 * (irregularity - spec.malignant_irregularity[0])
        mal_band = (3.5, 5.0)
    else:
        mal_mean = 2.0 - 2.0 * irregularity
        mal_band = (1.0, 2.5)
    readings = []
    for reader in range(4):
        rec = {"reader_id": f"reader_{reader}"}
        for name, mean in means.items():
            rec[name] = _round_rating(mean + rng.normal(0.0, spec.rating_noise))
        rec["malignancy"] = _round_rating(
            mal_mean + rng.normal(0.0, spec.rating_noise), lo=mal_band[0], hi=mal_band[1]
        )
        readings.append(rec)
    return readings


def _place_nodules(spec: PhantomSpec, n: int, rng: np.random.Generator):
    """Sample non-overlapping nodule geometries for one volume."""
    depth, height, width = spec.dims
    placed = []
    for _ in range(n):
        is_malignant = rng.uniform() < spec.malignant_fraction
        cls = "malignant" if is_malignant else "benign"
        r_lo, r_hi = spec.malignant_radius if is_malignant else spec.benign_radius
        i_lo, i_hi = spec.malignant_irregularity if is_malignant else spec.benign_irregularity
        for attempt in range(spec.max_attempts):
            radius = rng.uniform(r_lo, r_hi)
            irregularity = rng.uniform(i_lo, i_hi)
            z_extent = max(1.6, 0.45 * radius)
            margin = radius * 1.5 + 2
            if 2 * margin >= min(height, width) or depth < 3:
                raise GenerationError(f"volume dims {spec.dims} too small for radius {radius:.1f}")
            cz = rng.uniform(z_extent, depth - 1 - z_extent)
            cy = rng.uniform(margin, height - 1 - margin)
            cx = rng.uniform(margin, width - 1 - margin)
            ok = all(
                np.hypot(cy - p["cy"], cx - p["cx"]) > radius + p["radius"] + 4
                for p in placed
            )
            if ok:
                placed.append(
                    dict(cls=cls, radius=radius, irregularity=irregularity,
                         cz=cz, cy=cy, cx=cx, z_extent=z_extent,
                         peak_hu=rng.uniform(*spec.peak_hu_range))
                )
                break
        else:
            raise GenerationError(
                f"could not place nodule without overlap after {spec.max_attempts} attempts"
            )
    return placed


def _rasterize_nodule(voxels: np.ndarray, geo: dict, rng: np.random.Generator):
    """Paint one nodule into the volume; returns per-slice masks and boxes."""
    depth, height, width = voxels.shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - geo["cy"], xx - geo["cx"]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    shape_mod = _boundary_shape(theta, geo["irregularity"], rng)
    contours = {}
    for z in range(depth):
        dz = (z - geo["cz"]) / geo["z_extent"]
        if abs(dz) >= 1.0:
            continue
        scale = np.sqrt(1.0 - dz * dz)
        r_slice = geo["radius"] * scale * shape_mod
        if (geo["radius"] * scale) < 1.3:
            continue
        r_rel = dist / np.maximum(r_slice, 1e-9)
        # Intensity profile: flat core, 0.85 of peak at the mask edge, then a
        # fast soft falloff, so every mask pixel stays visible after windowing.
        blend = np.where(
            r_rel <= 0.55,
            1.0,
            np.where(
                r_rel <= 1.0,
                1.0 - 0.15 * _smoothstep((r_rel - 0.55) / 0.45),
                0.85 * (1.0 - _smoothstep((r_rel - 1.0) / 0.4)),
            ),
        )
        mask = r_rel <= 1.0
        if not mask.any():
            continue
        voxels[z] = voxels[z] * (1.0 - blend) + geo["peak_hu"] * blend
        ys, xs = np.nonzero(mask)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        contours[z] = (mask, bbox)
    if not contours:
        raise GenerationError("nodule rasterized to zero contoured slices")
    return contours


def generate(spec: PhantomSpec, out_dir) -> PhantomDataset:
    """Generate phantom volumes, write the manifest, and return bookkeeping.

    Deterministic given spec.seed; each volume derives its own seed so the
    result does not depend on generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_volumes)
    dataset = PhantomDataset(manifest_path=manifest_path)
    scan_records = []
    for vi in range(spec.n_volumes):
        rng = np.random.default_rng(seeds[vi])
        scan_id = f"phantom_{vi:03d}"
        depth, height, width = spec.dims
        voxels = rng.normal(BACKGROUND_HU, spec.noise_hu, size=spec.dims)
        n_nodules = int(rng.integers(spec.nodules_per_volume[0], spec.nodules_per_volume[1] + 1))
        geos = _place_nodules(spec, n_nodules, rng)
        nodule_records = []
        for ni, geo in enumerate(geos):
            nodule_id = f"{scan_id}_n{ni:02d}"
            contours = _rasterize_nodule(voxels, geo, rng)
            readings = _simulate_readings(
                geo["cls"], geo["radius"], geo["irregularity"], geo["peak_hu"], spec, rng
            )
            slice_records = [
                {"index": z, "bbox": list(bbox), "rle": mask_to_rle(mask)}
                for z, (mask, bbox) in sorted(contours.items())
            ]
            nodule_records.append(
                {"nodule_id": nodule_id, "slices": slice_records, "readings": readings}
            )
            annotation = NoduleAnnotation(
                scan_id=scan_id,
                nodule_id=nodule_id,
                slices=tuple(
                    SliceContour(index=z, mask=mask, bbox=bbox)
                    for z, (mask, bbox) in sorted(contours.items())
                ),
                readings=(),
            )
            dataset.annotations.append(annotation)
            dataset.truth.append(
                NoduleTruth(
                    scan_id=scan_id,
                    nodule_id=nodule_id,
                    cls=geo["cls"],
                    radius=geo["radius"],
                    irregularity=geo["irregularity"],
                    peak_hu=geo["peak_hu"],
                    mean_malignancy=float(np.mean([r["malignancy"] for r in readings])),
                    median_slice=median_nodule_slice(annotation),
                )
            )
        voxels = np.rint(np.clip(voxels, -1024, 3071)).astype(np.int16)
        volume_rel = f"volumes/{scan_id}.raw"
        spacing = (2.5, 1.0, 1.0)
        save_volume(out_dir / volume_rel, voxels, spacing)
        dataset.volumes.append(
            CTVolume(voxels=voxels.astype(np.float64), spacing=spacing, scan_id=scan_id)
        )
        scan_records.append(
            {
                "scan_id": scan_id,
                "volume_path": volume_rel,
                "spacing": list(spacing),
                "nodules": nodule_records,
            }
        )
    write_manifest(scan_records, manifest_path)
    return dataset
