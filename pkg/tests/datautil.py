"""Helpers for building tiny hand-controlled datasets in tests."""

import numpy as np

from lungcad.manifest import mask_to_rle, save_volume, write_manifest


def blob_volume(depth=6, size=32, center=(3, 16, 16), radius=5.0, peak=40.0):
    """HU volume with one bright spherical blob on a -800 background."""
    zz, yy, xx = np.mgrid[0:depth, 0:size, 0:size].astype(float)
    dist = np.sqrt(
        ((zz - center[0]) * 2.0) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    )
    vol = np.full((depth, size, size), -800.0)
    vol[dist <= radius] = peak
    mask3d = dist <= radius
    return vol, mask3d


def reading(malignancy, reader_id="r0", **overrides):
    rec = {
        "reader_id": reader_id,
        "subtlety": 3.0,
        "internal_structure": 2.0,
        "sphericity": 4.0,
        "calcification": 4.0,
        "margin": 4.0,
        "lobulation": 2.0,
        "spiculation": 2.0,
        "texture": 3.0,
        "malignancy": malignancy,
    }
    rec.update(overrides)
    return rec


def write_tiny_dataset(root, scans):
    """Write a manifest plus volumes from a compact description.

    `scans` maps scan_id -> {"volume": 3-D HU array, "nodules": [
        {"nodule_id": str, "mask3d": bool array, "readings": [dict, ...]}
    ]}.
    """
    records = []
    for scan_id, scan in sorted(scans.items()):
        vol = scan["volume"]
        rel = f"volumes/{scan_id}.raw"
        save_volume(root / rel, vol, (2.5, 1.0, 1.0))
        nodules = []
        for nod in scan.get("nodules", []):
            slices = []
            for z in range(vol.shape[0]):
                mask = np.asarray(nod["mask3d"][z], dtype=bool)
                if not mask.any():
                    continue
                ys, xs = np.nonzero(mask)
                bbox = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
                slices.append({"index": z, "bbox": bbox, "rle": mask_to_rle(mask)})
            nodules.append(
                {
                    "nodule_id": nod["nodule_id"],
                    "slices": slices,
                    "readings": nod.get("readings", []),
                }
            )
        records.append(
            {
                "scan_id": scan_id,
                "volume_path": rel,
                "spacing": [2.5, 1.0, 1.0],
                "nodules": nodules,
            }
        )
    path = root / "manifest.json"
    write_manifest(records, path)
    return path
