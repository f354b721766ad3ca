"""Radiomic ratings, malignancy labels, and the retrieval gallery.

Each nodule carries up to four radiologist readings: eight attribute
ratings plus a malignancy score, all on a 1-5 scale. Readings are averaged
into a single feature vector per nodule; the averaged malignancy score is
thresholded at 3 into benign / malignant, with exactly-3 nodules excluded
everywhere.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import DatasetSplit, NoduleAnnotation, NodulePatch, median_slice_patch
from .validation import check_rating

logger = logging.getLogger(__name__)

ATTRIBUTE_NAMES = (
    "subtlety",
    "internal_structure",
    "sphericity",
    "calcification",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
)

BENIGN, MALIGNANT, EXCLUDED = "benign", "malignant", "excluded"

# Means of small integer ratings are not exactly representable, so equality
# with the raw score 3 is decided after rounding to 6 decimals.
_SCORE_DECIMALS = 6


@dataclass(frozen=True)
class RadiomicReading:
    """One radiologist's assessment of a nodule."""

    subtlety: float
    internal_structure: float
    sphericity: float
    calcification: float
    margin: float
    lobulation: float
    spiculation: float
    texture: float
    malignancy: float
    reader_id: str = ""

    def __post_init__(self):
        for name in ATTRIBUTE_NAMES + ("malignancy",):
            check_rating(getattr(self, name), name)

    def attribute_values(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in ATTRIBUTE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class RadiomicFeatureVector:
    """Ordered 8-vector of averaged attribute ratings, each in [1, 5]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(ATTRIBUTE_NAMES),):
            raise ValueError(f"feature vector must have length {len(ATTRIBUTE_NAMES)}, got shape {v.shape}")
        if v.min() < 1.0 or v.max() > 5.0:
            raise ValueError(f"feature values must lie in [1, 5], got range [{v.min()}, {v.max()}]")
        object.__setattr__(self, "values", v)

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(ATTRIBUTE_NAMES, self.values)}


@dataclass(frozen=True)
class MalignancyLabel:
    raw_score: float
    cls: str

    def __post_init__(self):
        if self.cls not in (BENIGN, MALIGNANT, EXCLUDED):
            raise ValueError(f"unknown label class {self.cls!r}")

    @property
    def is_malignant(self) -> bool:
        return self.cls == MALIGNANT


def consolidate_readings(readings) -> tuple[RadiomicFeatureVector, float]:
    """Average the available readings componentwise into one feature vector.

    Returns the averaged attribute vector and the averaged raw malignancy
    score. Works for 1 to 4 readers; a single reading passes through
    unchanged.
    """
    readings = list(readings)
    if not readings:
        raise ValueError("cannot consolidate an empty reading list")
    attrs = np.mean([r.attribute_values() for r in readings], axis=0)
    malignancy = float(np.mean([r.malignancy for r in readings]))
    return RadiomicFeatureVector(values=attrs), malignancy


def derive_label(raw_score: float) -> MalignancyLabel:
    """Threshold the averaged malignancy score: >3 malignant, =3 excluded, <3 benign."""
    check_rating(raw_score, "malignancy score")
    rounded = round(float(raw_score), _SCORE_DECIMALS)
    if rounded > 3.0:
        cls = MALIGNANT
    elif rounded == 3.0:
        cls = EXCLUDED
    else:
        cls = BENIGN
    return MalignancyLabel(raw_score=float(raw_score), cls=cls)


@dataclass(frozen=True)
class GalleryEntry:
    nodule_id: str
    features: RadiomicFeatureVector
    patch: NodulePatch
    label: MalignancyLabel


class FeatureGallery:
    """Immutable indexed store of (features, patch, label) retrieval entries."""

    def __init__(self, entries, skipped: int = 0):
        entries = tuple(entries)
        ids = [e.nodule_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("gallery nodule_ids must be unique")
        if any(e.label.cls == EXCLUDED for e in entries):
            raise ValueError("excluded nodules must not enter a gallery")
        self.entries = entries
        self.skipped = skipped

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> GalleryEntry:
        return self.entries[i]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([e.features.values for e in self.entries])

    def labels(self) -> np.ndarray:
        return np.array([1 if e.label.is_malignant else 0 for e in self.entries], dtype=int)

    def patches(self) -> np.ndarray:
        return np.stack([e.patch.pixels for e in self.entries])

    def save_jsonl(self, path, patch_dir=None) -> None:
        """Write one JSON object per entry; patches go to .npy files alongside."""
        path = Path(path)
        patch_dir = Path(patch_dir) if patch_dir is not None else path.parent / "patches"
        patch_dir.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for entry in self.entries:
                patch_path = patch_dir / f"{entry.nodule_id}.npy"
                np.save(patch_path, entry.patch.pixels)
                record = {
                    "nodule_id": entry.nodule_id,
                    "features": entry.features.as_dict(),
                    "malignancy_raw": entry.label.raw_score,
                    "label": entry.label.cls,
                    "patch_path": str(patch_path),
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "FeatureGallery":
        entries = []
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            features = RadiomicFeatureVector(
                values=np.array([rec["features"][name] for name in ATTRIBUTE_NAMES])
            )
            pixels = np.load(rec["patch_path"])
            entries.append(
                GalleryEntry(
                    nodule_id=rec["nodule_id"],
                    features=features,
                    patch=NodulePatch(pixels=pixels, nodule_id=rec["nodule_id"], slice_index=-1),
                    label=MalignancyLabel(raw_score=rec["malignancy_raw"], cls=rec["label"]),
                )
            )
        return cls(entries)


def build_gallery(handle, split: DatasetSplit, side: str, padding: int = 0) -> FeatureGallery:
    """Build the retrieval gallery for one side of a split.

    One entry per non-excluded nodule, with the patch cut from the median
    contoured slice. Nodules without any reading are skipped with a warning
    and counted in the gallery's `skipped` tally. Entry order is sorted by
    (scan_id, nodule_id) so repeated builds serialize identically.
    """
    scan_ids = split.side(side)
    nodules: list[NoduleAnnotation] = []
    for scan_id in sorted(scan_ids):
        nodules.extend(sorted(handle.nodules_of(scan_id), key=lambda n: n.nodule_id))
    entries = []
    skipped = 0
    for nodule in nodules:
        if not nodule.readings:
            logger.warning("nodule %s has no readings; skipping", nodule.nodule_id)
            skipped += 1
            continue
        features, raw = consolidate_readings(nodule.readings)
        label = derive_label(raw)
        if label.cls == EXCLUDED:
            continue
        patch = median_slice_patch(handle, nodule, padding=padding)
        entries.append(GalleryEntry(nodule_id=nodule.nodule_id, features=features, patch=patch, label=label))
    return FeatureGallery(entries, skipped=skipped)
