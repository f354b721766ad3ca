"""CT volume types and slice/patch preprocessing.

Volumes are (z, y, x) Hounsfield-unit grids. Windowing maps HU to [0, 1]
intensities; slices and fixed-size nodule patches are cut from windowed
volumes. Bounding boxes are half-open pixel rectangles (x0, y0, x1, y1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .validation import check_unit_interval

HU_MIN = -1024
HU_MAX = 3071
WINDOW_LEVEL = 40.0
WINDOW_WIDTH = 400.0
PATCH_SIZE = 96


@dataclass(frozen=True)
class CTVolume:
    """A CT scan as a voxel grid with physical spacing.

    Raw volumes hold HU values clamped to [-1024, 3071] at load time;
    windowed volumes hold unit-interval intensities.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    scan_id: str

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be (z, y, x), got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be positive, got {self.spacing}")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class SliceImage:
    """A single axial slice with unit-interval intensities."""

    pixels: np.ndarray
    slice_index: int
    scan_id: str

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"slice pixels must be 2-D, got shape {self.pixels.shape}")
        check_unit_interval(self.pixels, "slice pixels")


@dataclass(frozen=True)
class SliceContour:
    """Per-slice ground truth for one nodule: binary mask plus tight box."""

    index: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise ValueError("contour mask must be 2-D")
        if not self.mask.any():
            raise ValueError(f"contour mask at slice {self.index} has no positive pixels")
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate bbox {self.bbox} at slice {self.index}")


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    nodule_id: str
    slices: tuple[SliceContour, ...]
    readings: tuple = ()

    def __post_init__(self):
        indices = [s.index for s in self.slices]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"contour slice indices must be strictly increasing, got {indices}")

    def slice_indices(self) -> list[int]:
        return [s.index for s in self.slices]

    def contour_at(self, index: int) -> SliceContour:
        for s in self.slices:
            if s.index == index:
                return s
        raise KeyError(f"nodule {self.nodule_id} has no contour at slice {index}")


@dataclass(frozen=True)
class NodulePatch:
    """A fixed-size crop around a nodule, resized from its bounding box."""

    pixels: np.ndarray
    nodule_id: str
    slice_index: int

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"patch must be square, got shape {self.pixels.shape}")
        check_unit_interval(self.pixels, "patch pixels")


@dataclass(frozen=True)
class DatasetSplit:
    """Scan-level train/test partition, never split below scan granularity."""

    train_scan_ids: frozenset
    test_scan_ids: frozenset
    seed: int

    def __post_init__(self):
        overlap = self.train_scan_ids & self.test_scan_ids
        if overlap:
            raise ValueError(f"train and test scan sets overlap: {sorted(overlap)}")

    def side(self, name: str) -> frozenset:
        if name == "train":
            return self.train_scan_ids
        if name == "test":
            return self.test_scan_ids
        raise ValueError(f"split side must be 'train' or 'test', got {name!r}")


def window_normalize(volume: CTVolume, level: float = WINDOW_LEVEL, width: float = WINDOW_WIDTH) -> CTVolume:
    """Apply an intensity window, mapping HU to clamped [0, 1] intensities.

    A voxel v maps to clamp((v - (level - width/2)) / width, 0, 1), so the
    window level lands at 0.5 and the window endpoints at 0 and 1.
    """
    if width <= 0:
        raise ConfigError(f"window width must be positive, got {width}")
    lo = level - width / 2.0
    out = np.clip((volume.voxels.astype(np.float64) - lo) / width, 0.0, 1.0)
    return CTVolume(voxels=out, spacing=volume.spacing, scan_id=volume.scan_id)


def extract_slices(volume: CTVolume) -> list[SliceImage]:
    """Split a windowed volume into its axial slices, in order."""
    if volume.voxels.size == 0:
        raise ValueError("cannot extract slices from an empty volume")
    check_unit_interval(volume.voxels, "volume voxels (window the volume first)")
    return [
        SliceImage(pixels=volume.voxels[z], slice_index=z, scan_id=volume.scan_id)
        for z in range(volume.depth)
    ]


def median_nodule_slice(annotation: NoduleAnnotation) -> int:
    """Median contoured slice index; even counts take the lower median.

    The lower-median rule guarantees the returned slice actually carries
    a contour.
    """
    indices = sorted(annotation.slice_indices())
    if not indices:
        raise ValueError(f"nodule {annotation.nodule_id} has no contoured slices")
    return indices[(len(indices) - 1) // 2]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment, so corner values are preserved."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float64).copy()
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def extract_patch(
    slice_image: SliceImage,
    bbox: tuple[int, int, int, int],
    out_size: int = PATCH_SIZE,
    padding: int = 0,
    nodule_id: str = "",
) -> NodulePatch:
    """Crop a bounding box from a slice and bilinear-resize it to a square patch.

    The box may be padded outward by `padding` pixels before cropping; the
    crop is clamped to the slice bounds.
    """
    h, w = slice_image.pixels.shape
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate bbox {bbox}")
    x0, y0 = x0 - padding, y0 - padding
    x1, y1 = x1 + padding, y1 + padding
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {bbox} does not intersect slice bounds {(w, h)}")
    crop = slice_image.pixels[y0:y1, x0:x1]
    resized = np.clip(_resize_bilinear(crop, out_size, out_size), 0.0, 1.0)
    return NodulePatch(pixels=resized, nodule_id=nodule_id, slice_index=slice_image.slice_index)


def split_by_scan(manifest, train_fraction: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Deterministically partition scans into train/test sets.

    Accepts a dataset handle (anything with a `scan_ids` attribute) or a
    plain iterable of scan ids. The split is by scan, so no scan's slices
    ever straddle the partition.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = sorted(manifest.scan_ids if hasattr(manifest, "scan_ids") else manifest)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 scans to split, got {len(ids)}")
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    n_train = min(max(n_train, 1), len(ids) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    train = frozenset(ids[i] for i in order[:n_train])
    test = frozenset(ids[i] for i in order[n_train:])
    return DatasetSplit(train_scan_ids=train, test_scan_ids=test, seed=seed)


def positive_slice_pairs(
    handle,
    scan_ids,
    level: float = WINDOW_LEVEL,
    width: float = WINDOW_WIDTH,
    negative_ratio: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Collect (slice, mask) training pairs from the scans of one split side.

    Positive slices are those with at least one nodule contour; their mask
    is the union of contours on that slice. When negative_ratio > 0, that
    many empty-mask slices per positive slice are sampled (without
    replacement) from the remaining slices of the same scans.
    """
    if negative_ratio < 0:
        raise ConfigError(f"negative_ratio must be >= 0, got {negative_ratio}")
    slices, masks = [], []
    negatives = []
    for scan_id in sorted(scan_ids):
        volume = window_normalize(handle.load_volume(scan_id), level=level, width=width)
        by_index: dict[int, np.ndarray] = {}
        for nodule in handle.nodules_of(scan_id):
            for contour in nodule.slices:
                acc = by_index.setdefault(contour.index, np.zeros_like(contour.mask, dtype=bool))
                by_index[contour.index] = acc | contour.mask.astype(bool)
        for z in range(volume.depth):
            if z in by_index:
                slices.append(volume.voxels[z])
                masks.append(by_index[z].astype(np.float64))
            else:
                negatives.append(volume.voxels[z])
    if not slices:
        raise ValueError("no annotated slices found in the requested scans")
    if negative_ratio > 0 and negatives:
        rng = np.random.default_rng(seed)
        n_neg = min(len(negatives), int(round(negative_ratio * len(slices))))
        for i in rng.choice(len(negatives), size=n_neg, replace=False):
            slices.append(negatives[i])
            masks.append(np.zeros_like(negatives[i]))
    return np.stack(slices), np.stack(masks)


def median_slice_patch(
    handle,
    nodule: NoduleAnnotation,
    level: float = WINDOW_LEVEL,
    width: float = WINDOW_WIDTH,
    out_size: int = PATCH_SIZE,
    padding: int = 0,
) -> NodulePatch:
    """Cut the nodule patch from its median contoured slice."""
    z = median_nodule_slice(nodule)
    volume = window_normalize(handle.load_volume(nodule.scan_id), level=level, width=width)
    slice_image = SliceImage(pixels=volume.voxels[z], slice_index=z, scan_id=nodule.scan_id)
    contour = nodule.contour_at(z)
    return extract_patch(slice_image, contour.bbox, out_size=out_size, padding=padding, nodule_id=nodule.nodule_id)
