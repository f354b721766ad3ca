import logging

import numpy as np
import pytest

from lungcad.gallery import (
    ATTRIBUTE_NAMES,
    FeatureGallery,
    RadiomicFeatureVector,
    RadiomicReading,
    build_gallery,
    consolidate_readings,
    derive_label,
)
from lungcad.ingest import split_by_scan
from lungcad.manifest import load_manifest

from datautil import blob_volume, reading, write_tiny_dataset
from oracles import mean_vector_scalar


def make_reading(malignancy=3.0, **overrides):
    kwargs = {name: 3.0 for name in ATTRIBUTE_NAMES}
    kwargs["malignancy"] = malignancy
    kwargs.update(overrides)
    return RadiomicReading(**kwargs)


def test_consolidate_malignancy_mean():
    readings = [make_reading(malignancy=m) for m in (4, 5, 4, 5)]
    _, raw = consolidate_readings(readings)
    assert raw == pytest.approx(4.5)


def test_consolidate_single_reading_passes_through():
    r = make_reading(malignancy=2.0, subtlety=1.5, texture=4.25)
    vec, raw = consolidate_readings([r])
    assert raw == 2.0
    assert np.array_equal(vec.values, r.attribute_values())


def test_consolidate_componentwise_means_match_oracle():
    rng = np.random.default_rng(4)
    readings = []
    for i in range(4):
        vals = {name: float(rng.uniform(1, 5)) for name in ATTRIBUTE_NAMES}
        vals["subtlety"] = float(i + 1)  # (1,2,3,4) -> 2.5
        readings.append(make_reading(malignancy=3.0, **vals))
    vec, _ = consolidate_readings(readings)
    expected = mean_vector_scalar([r.attribute_values().tolist() for r in readings])
    assert vec.values == pytest.approx(expected, abs=1e-12)
    assert vec.values[0] == pytest.approx(2.5)


def test_consolidate_empty_list_raises():
    with pytest.raises(ValueError):
        consolidate_readings([])


def test_consolidate_is_permutation_invariant():
    rng = np.random.default_rng(5)
    readings = [
        make_reading(malignancy=float(rng.uniform(1, 5)),
                     **{name: float(rng.uniform(1, 5)) for name in ATTRIBUTE_NAMES})
        for _ in range(4)
    ]
    vec_a, raw_a = consolidate_readings(readings)
    vec_b, raw_b = consolidate_readings(readings[::-1])
    assert np.allclose(vec_a.values, vec_b.values)
    assert raw_a == pytest.approx(raw_b)


def test_reading_rejects_out_of_range():
    with pytest.raises(ValueError):
        make_reading(malignancy=0.5)
    with pytest.raises(ValueError):
        make_reading(spiculation=5.5)


def test_derive_label_threshold_rules():
    assert derive_label(4.5).cls == "malignant"
    assert derive_label(3.0).cls == "excluded"
    assert derive_label(2.0).cls == "benign"


def test_derive_label_mean_of_integers_near_three():
    # 2.9999999 vs an arithmetic mean that is exactly 3 only after rounding.
    raw = np.mean([3.0, 3.0, 3.0, 2.9999999])
    assert derive_label(float(raw)).cls == "excluded"
    assert derive_label(3.0000004).cls == "excluded"
    assert derive_label(3.000001).cls == "malignant"
    assert derive_label(2.999999).cls == "benign"


def test_derive_label_sweep_has_no_gaps():
    for score in np.linspace(1.0, 5.0, 401):
        label = derive_label(float(score))
        if round(score, 6) > 3:
            assert label.cls == "malignant"
        elif round(score, 6) == 3:
            assert label.cls == "excluded"
        else:
            assert label.cls == "benign"


def test_derive_label_out_of_range():
    with pytest.raises(ValueError):
        derive_label(0.0)


def test_feature_vector_validation():
    with pytest.raises(ValueError):
        RadiomicFeatureVector(values=np.ones(7))
    with pytest.raises(ValueError):
        RadiomicFeatureVector(values=np.full(8, 6.0))


def _triple_nodule_dataset(tmp_path):
    vol, mask3d = blob_volume()
    scans = {}
    for i, mal in enumerate([4.0, 3.0, 2.0]):
        scans[f"scan_{i}"] = {
            "volume": vol,
            "nodules": [
                {
                    "nodule_id": f"scan_{i}_n0",
                    "mask3d": mask3d,
                    "readings": [reading(mal, reader_id=f"r{k}") for k in range(4)],
                }
            ],
        }
    path = write_tiny_dataset(tmp_path, scans)
    handle = load_manifest(path)
    split = split_by_scan(handle, train_fraction=0.7, seed=0)
    # Put everything on one side for a deterministic 3-nodule pool.
    return handle


def test_build_gallery_excludes_score_three(tmp_path):
    from lungcad.ingest import DatasetSplit

    handle = _triple_nodule_dataset(tmp_path)
    split = DatasetSplit(
        train_scan_ids=frozenset(handle.scan_ids), test_scan_ids=frozenset(), seed=0
    )
    gallery = build_gallery(handle, split, "train")
    assert len(gallery) == 2
    assert {e.label.cls for e in gallery} == {"malignant", "benign"}
    assert all(e.label.cls != "excluded" for e in gallery)


def test_build_gallery_skips_unread_nodules_with_tally(tmp_path, caplog):
    from lungcad.ingest import DatasetSplit

    vol, mask3d = blob_volume()
    path = write_tiny_dataset(
        tmp_path,
        {
            "s0": {
                "volume": vol,
                "nodules": [
                    {"nodule_id": "s0_read", "mask3d": mask3d, "readings": [reading(4.0)]},
                    {"nodule_id": "s0_unread", "mask3d": mask3d, "readings": []},
                ],
            }
        },
    )
    handle = load_manifest(path)
    split = DatasetSplit(train_scan_ids=frozenset(["s0"]), test_scan_ids=frozenset(), seed=0)
    with caplog.at_level(logging.WARNING):
        gallery = build_gallery(handle, split, "train")
    assert len(gallery) == 1
    assert gallery.skipped == 1
    assert any("s0_unread" in rec.message for rec in caplog.records)


def test_build_gallery_deterministic_serialization(tmp_path):
    from lungcad.ingest import DatasetSplit

    handle = _triple_nodule_dataset(tmp_path)
    split = DatasetSplit(
        train_scan_ids=frozenset(handle.scan_ids), test_scan_ids=frozenset(), seed=0
    )
    out_a = tmp_path / "a.jsonl"
    out_b = tmp_path / "b.jsonl"
    build_gallery(handle, split, "train").save_jsonl(out_a, patch_dir=tmp_path / "pa")
    build_gallery(handle, split, "train").save_jsonl(out_b, patch_dir=tmp_path / "pb")
    assert out_a.read_bytes().replace(b"/pa/", b"/pb/") == out_b.read_bytes()


def test_gallery_jsonl_round_trip(tmp_path):
    from lungcad.ingest import DatasetSplit

    handle = _triple_nodule_dataset(tmp_path)
    split = DatasetSplit(
        train_scan_ids=frozenset(handle.scan_ids), test_scan_ids=frozenset(), seed=0
    )
    gallery = build_gallery(handle, split, "train")
    out = tmp_path / "gallery.jsonl"
    gallery.save_jsonl(out)
    loaded = FeatureGallery.load_jsonl(out)
    assert len(loaded) == len(gallery)
    for a, b in zip(gallery, loaded):
        assert a.nodule_id == b.nodule_id
        assert a.label.cls == b.label.cls
        assert np.allclose(a.features.values, b.features.values)
        assert np.allclose(a.patch.pixels, b.patch.pixels)


def test_gallery_rejects_excluded_and_duplicate_entries(tmp_path):
    from lungcad.gallery import GalleryEntry, MalignancyLabel
    from lungcad.ingest import NodulePatch

    patch = NodulePatch(pixels=np.zeros((96, 96)), nodule_id="n", slice_index=0)
    vec = RadiomicFeatureVector(values=np.full(8, 3.0))
    good = GalleryEntry(nodule_id="n", features=vec, patch=patch,
                        label=MalignancyLabel(raw_score=4.0, cls="malignant"))
    with pytest.raises(ValueError):
        FeatureGallery([good, good])
    bad = GalleryEntry(nodule_id="m", features=vec, patch=patch,
                       label=MalignancyLabel(raw_score=3.0, cls="excluded"))
    with pytest.raises(ValueError):
        FeatureGallery([bad])
