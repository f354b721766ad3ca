"""Dataset manifest loading and on-disk formats.

A manifest is one JSON document: a top-level list of scans, each

    {
      "scan_id": str,
      "volume_path": str,            # raw little-endian int16 HU voxels
      "spacing": [z, y, x],          # millimeters
      "nodules": [
        {
          "nodule_id": str,
          "slices": [
            {"index": int,
             "bbox": [x0, y0, x1, y1],            # half-open pixel box
             "rle": {"shape": [h, w], "counts": [...]}  # or "mask_path": png
            }, ...
          ],
          "readings": [
            {"reader_id": str, "subtlety": 1-5, ..., "malignancy": 1-5}, ...
          ]
        }, ...
      ]
    }

Every volume file has a JSON sidecar at "<volume_path>.json" holding
{"dims": [z, y, x], "spacing": [z, y, x]}. RLE masks are alternating
run lengths over the row-major flattened mask, starting with a zero run.
Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DanglingReferenceError, SchemaError
from .gallery import ATTRIBUTE_NAMES, RadiomicReading
from .ingest import HU_MAX, HU_MIN, CTVolume, NoduleAnnotation, SliceContour


def mask_to_rle(mask: np.ndarray) -> dict:
    """Run-length encode a binary mask (row-major, first run counts zeros)."""
    flat = np.asarray(mask).astype(bool).ravel()
    counts = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return {"shape": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["shape"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise SchemaError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def save_volume(path, voxels: np.ndarray, spacing) -> None:
    """Write HU voxels as raw little-endian int16 plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.rint(np.clip(np.asarray(voxels), HU_MIN, HU_MAX)).astype("<i2")
    path.write_bytes(arr.tobytes())
    sidecar = {"dims": [int(d) for d in arr.shape], "spacing": [float(s) for s in spacing]}
    Path(f"{path}.json").write_text(json.dumps(sidecar, sort_keys=True))


def load_volume(path, scan_id: str = "") -> CTVolume:
    """Read a raw int16 volume via its sidecar header, clamped to the CT range."""
    path = Path(path)
    sidecar_path = Path(f"{path}.json")
    if not path.exists():
        raise DanglingReferenceError(f"volume file not found: {path}")
    if not sidecar_path.exists():
        raise DanglingReferenceError(f"volume sidecar not found: {sidecar_path}")
    header = json.loads(sidecar_path.read_text())
    dims = tuple(int(d) for d in header["dims"])
    voxels = np.frombuffer(path.read_bytes(), dtype="<i2").reshape(dims).astype(np.float64)
    voxels = np.clip(voxels, HU_MIN, HU_MAX)
    spacing = tuple(float(s) for s in header["spacing"])
    return CTVolume(voxels=voxels, spacing=spacing, scan_id=scan_id or path.stem)


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise SchemaError(f"{context}: missing required key {key!r}")
    return record[key]


def _load_mask(slice_rec: dict, root: Path, context: str) -> np.ndarray:
    if "rle" in slice_rec:
        return rle_to_mask(slice_rec["rle"])
    if "mask_path" in slice_rec:
        mask_path = root / slice_rec["mask_path"]
        if not mask_path.exists():
            raise DanglingReferenceError(f"{context}: mask file not found: {mask_path}")
        return np.asarray(Image.open(mask_path)) > 0
    raise SchemaError(f"{context}: slice needs either 'rle' or 'mask_path'")


def _parse_reading(rec: dict, context: str) -> RadiomicReading:
    kwargs = {"reader_id": str(rec.get("reader_id", ""))}
    for name in ATTRIBUTE_NAMES + ("malignancy",):
        value = _require(rec, name, context)
        try:
            kwargs[name] = float(value)
        except (TypeError, ValueError):
            raise SchemaError(f"{context}: rating {name!r} is not a number: {value!r}") from None
    try:
        return RadiomicReading(**kwargs)
    except ValueError as exc:
        raise SchemaError(f"{context}: {exc}") from None


class DatasetHandle:
    """Read-only view over a loaded manifest.

    Annotations and readings are materialized at load time; volumes are
    read from disk on demand so large datasets stay out of memory.
    """

    def __init__(self, manifest_path, scans: dict):
        self.manifest_path = Path(manifest_path)
        self._scans = scans

    @property
    def scan_ids(self) -> list[str]:
        return sorted(self._scans)

    def __len__(self) -> int:
        return len(self._scans)

    def nodules_of(self, scan_id: str) -> list[NoduleAnnotation]:
        return list(self._scans[scan_id]["nodules"])

    def all_nodules(self) -> list[NoduleAnnotation]:
        return [n for sid in self.scan_ids for n in self._scans[sid]["nodules"]]

    def spacing_of(self, scan_id: str) -> tuple[float, float, float]:
        return self._scans[scan_id]["spacing"]

    def volume_path(self, scan_id: str) -> Path:
        return self._scans[scan_id]["volume_path"]

    def load_volume(self, scan_id: str) -> CTVolume:
        return load_volume(self._scans[scan_id]["volume_path"], scan_id=scan_id)


def load_manifest(path) -> DatasetHandle:
    """Load and validate a manifest, returning a read-only dataset handle.

    Raises FileNotFoundError for a missing manifest file, SchemaError for a
    malformed document, and DanglingReferenceError when a referenced volume
    or mask file does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise SchemaError(f"manifest root must be a list of scans, got {type(doc).__name__}")
    root = path.parent
    scans: dict[str, dict] = {}
    for i, scan_rec in enumerate(doc):
        ctx = f"scan[{i}]"
        if not isinstance(scan_rec, dict):
            raise SchemaError(f"{ctx}: scan record must be an object")
        scan_id = str(_require(scan_rec, "scan_id", ctx))
        if scan_id in scans:
            raise SchemaError(f"{ctx}: duplicate scan_id {scan_id!r}")
        volume_path = root / _require(scan_rec, "volume_path", ctx)
        if not volume_path.exists():
            raise DanglingReferenceError(f"{ctx} ({scan_id}): volume file not found: {volume_path}")
        spacing = _require(scan_rec, "spacing", ctx)
        if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
            raise SchemaError(f"{ctx}: spacing must be 3 positive numbers, got {spacing}")
        nodules = []
        for j, nodule_rec in enumerate(scan_rec.get("nodules", [])):
            nctx = f"{ctx}.nodules[{j}]"
            nodule_id = str(_require(nodule_rec, "nodule_id", nctx))
            contours = []
            for slice_rec in _require(nodule_rec, "slices", nctx):
                sctx = f"{nctx} slice {slice_rec.get('index')}"
                index = int(_require(slice_rec, "index", sctx))
                bbox = tuple(int(v) for v in _require(slice_rec, "bbox", sctx))
                if len(bbox) != 4:
                    raise SchemaError(f"{sctx}: bbox must be [x0, y0, x1, y1]")
                mask = _load_mask(slice_rec, root, sctx)
                try:
                    contours.append(SliceContour(index=index, mask=mask, bbox=bbox))
                except ValueError as exc:
                    raise SchemaError(f"{sctx}: {exc}") from None
            readings = tuple(
                _parse_reading(r, f"{nctx}.readings[{k}]")
                for k, r in enumerate(nodule_rec.get("readings", []))
            )
            try:
                nodules.append(
                    NoduleAnnotation(
                        scan_id=scan_id,
                        nodule_id=nodule_id,
                        slices=tuple(sorted(contours, key=lambda c: c.index)),
                        readings=readings,
                    )
                )
            except ValueError as exc:
                raise SchemaError(f"{nctx}: {exc}") from None
        scans[scan_id] = {
            "volume_path": volume_path,
            "spacing": tuple(float(s) for s in spacing),
            "nodules": tuple(nodules),
        }
    return DatasetHandle(path, scans)


def write_manifest(scan_records: list[dict], path) -> None:
    """Serialize scan records (already JSON-shaped) as a manifest document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scan_records, sort_keys=True, indent=1) + "\n")
