import numpy as np
import pytest

from lungcad.gallery import build_gallery, derive_label
from lungcad.ingest import DatasetSplit, split_by_scan, window_normalize
from lungcad.phantom import PhantomSpec, generate


def test_generation_is_deterministic(tmp_path):
    spec = PhantomSpec(n_volumes=3, seed=123)
    a = generate(spec, tmp_path / "a")
    b = generate(spec, tmp_path / "b")
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    for va, vb in zip(a.volumes, b.volumes):
        assert np.array_equal(va.voxels, vb.voxels)


def test_zero_nodule_spec(tmp_path):
    spec = PhantomSpec(n_volumes=2, nodules_per_volume=(0, 0), seed=1)
    ds = generate(spec, tmp_path)
    assert ds.annotations == []
    handle = ds.load_handle()
    assert all(not handle.nodules_of(s) for s in handle.scan_ids)


def test_masks_lie_inside_their_bboxes(tmp_path):
    ds = generate(PhantomSpec(n_volumes=4, seed=7), tmp_path)
    for ann in ds.annotations:
        for contour in ann.slices:
            ys, xs = np.nonzero(contour.mask)
            x0, y0, x1, y1 = contour.bbox
            assert xs.min() >= x0 and xs.max() < x1
            assert ys.min() >= y0 and ys.max() < y1


def test_ratings_in_range_and_mean_never_three(tmp_path):
    ds = generate(PhantomSpec(n_volumes=6, seed=11), tmp_path)
    handle = ds.load_handle()
    for nodule in handle.all_nodules():
        for r in nodule.readings:
            for value in r.attribute_values():
                assert 1.0 <= value <= 5.0
            assert 1.0 <= r.malignancy <= 5.0
        mean = np.mean([r.malignancy for r in nodule.readings])
        assert round(float(mean), 6) != 3.0


def test_twenty_nodule_gallery_has_no_exclusions(tmp_path):
    spec = PhantomSpec(
        n_volumes=10, nodules_per_volume=(2, 2), malignant_fraction=0.5, seed=21
    )
    ds = generate(spec, tmp_path)
    assert len(ds.truth) == 20
    handle = ds.load_handle()
    split = DatasetSplit(
        train_scan_ids=frozenset(handle.scan_ids), test_scan_ids=frozenset(), seed=0
    )
    gallery = build_gallery(handle, split, "train")
    assert len(gallery) == 20


def test_round_trip_matches_generator_truth(tmp_path):
    ds = generate(PhantomSpec(n_volumes=5, seed=3), tmp_path)
    handle = ds.load_handle()
    split = DatasetSplit(
        train_scan_ids=frozenset(handle.scan_ids), test_scan_ids=frozenset(), seed=0
    )
    gallery = build_gallery(handle, split, "train")
    truth_by_id = {t.nodule_id: t for t in ds.truth}
    assert {e.nodule_id for e in gallery} == set(truth_by_id)
    for entry in gallery:
        truth = truth_by_id[entry.nodule_id]
        assert entry.label.cls == truth.cls
        assert entry.label.raw_score == pytest.approx(truth.mean_malignancy, abs=1e-9)
        assert derive_label(truth.mean_malignancy).cls == truth.cls


def test_truth_median_slice_matches_annotations(tmp_path):
    from lungcad.ingest import median_nodule_slice

    ds = generate(PhantomSpec(n_volumes=3, seed=17), tmp_path)
    by_id = {a.nodule_id: a for a in ds.annotations}
    for truth in ds.truth:
        assert truth.median_slice == median_nodule_slice(by_id[truth.nodule_id])


def test_nodules_visible_after_default_windowing(tmp_path):
    ds = generate(PhantomSpec(n_volumes=4, seed=29), tmp_path)
    handle = ds.load_handle()
    for ann in handle.all_nodules():
        windowed = window_normalize(handle.load_volume(ann.scan_id))
        for contour in ann.slices:
            inside = windowed.voxels[contour.index][contour.mask]
            outside = np.delete(
                windowed.voxels[contour.index].ravel(),
                np.flatnonzero(contour.mask.ravel()),
            )
            assert inside.mean() > 0.15
            assert np.median(outside) < 0.05


def test_overlap_appearance_ranges_rejected():
    with pytest.raises(ValueError):
        PhantomSpec(
            benign_radius=(4, 7),
            malignant_radius=(6, 9),
            benign_irregularity=(0.0, 0.4),
            malignant_irregularity=(0.3, 0.6),
        )


def test_split_interops_with_phantom_manifest(tmp_path):
    ds = generate(PhantomSpec(n_volumes=10, seed=2), tmp_path)
    handle = ds.load_handle()
    split = split_by_scan(handle, train_fraction=0.7, seed=4)
    assert len(split.train_scan_ids) == 7
    assert len(split.test_scan_ids) == 3
