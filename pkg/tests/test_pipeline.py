import json
from dataclasses import replace

import numpy as np
import pytest

from spinecascade.phantom import PhantomSpec, crop_phantom_fov, generate_phantom, random_phantom_spec
from spinecascade.pipeline import (
    CascadeParams,
    NoSpineFound,
    OracleSegmenter,
    OracleStage1,
    Region,
    WorkingInstance,
    assign_classes,
    finalize,
    preprocess,
    run_cascade,
    spine_roi,
    stage1_infer,
    stage2_iterate,
    write_result,
)
from spinecascade.pipeline.cascade import extract_patch, paste_patch, window_starts
from spinecascade.volume import Geometry, LabelVolume, Volume, VoxelBox, read_volume


class NonLocalStub:
    """Logits that depend on the whole window, so overlap averaging is visible."""

    def __call__(self, patch):
        p = patch[0, 0].astype(np.float64)
        return np.stack([p * c + p.mean() * (3 - c) for c in range(4)])[None]


class LocalStub:
    def __call__(self, patch):
        p = patch[0, 0].astype(np.float64)
        return np.stack([np.sin(3 * p + c) for c in range(4)])[None]


def test_window_starts():
    assert window_starts(12, 8, 0.5) == [0, 4]
    assert window_starts(13, 8, 0.5) == [0, 4, 5]
    assert window_starts(8, 8, 0.5) == [0]
    assert window_starts(5, 8, 0.5) == [0]


def test_single_window_is_one_forward_pass():
    rng = np.random.default_rng(0)
    v = Volume(rng.uniform(-1, 1, (8, 8, 8)))
    out = stage1_infer(NonLocalStub(), v, (8, 8, 8))
    assert np.array_equal(out.data, np.argmax(NonLocalStub()(v.data[None, None])[0], axis=0))


def test_two_half_overlapping_windows_average_logits():
    rng = np.random.default_rng(1)
    v = Volume(rng.uniform(-1, 1, (8, 8, 12)))
    stub = NonLocalStub()
    a = stub(v.data[None, None, :, :, 0:8])[0]
    b = stub(v.data[None, None, :, :, 4:12])[0]
    hand = np.zeros((4, 8, 8, 12))
    hand[..., 0:4] = a[..., 0:4]
    hand[..., 8:12] = b[..., 4:8]
    hand[..., 4:8] = (a[..., 4:8] + b[..., 0:4]) / 2
    out = stage1_infer(stub, v, (8, 8, 8), 0.5)
    assert np.array_equal(out.data, np.argmax(hand, axis=0))


def test_window_partition_invariance_for_voxelwise_stub():
    rng = np.random.default_rng(2)
    v = Volume(rng.uniform(-1, 1, (13, 10, 17)))
    full = np.argmax(LocalStub()(v.data[None, None])[0], axis=0)
    for window, overlap in [((8, 8, 8), 0.5), ((4, 4, 4), 0.0), ((16, 16, 16), 0.25)]:
        out = stage1_infer(LocalStub(), v, window, overlap)
        assert out.data.shape == v.dims
        if all(w <= d for w, d in zip(window, v.dims)):
            assert np.array_equal(out.data, full)


def test_extract_and_paste_out_of_range():
    a = np.arange(27).reshape(3, 3, 3)
    p = extract_patch(a, (-1, 1, 2), (3, 3, 3), -5)
    assert p[0].max() == -5 and p[1, 0, 0] == a[0, 1, 2] and p[1, 2, 0] == -5
    t = paste_patch(np.zeros((3, 3, 3), int), p, (-1, 1, 2))
    assert t[0, 1, 2] == a[0, 1, 2] and t[0, 0, 0] == 0


def test_spine_roi_contains_every_instance_voxel():
    for seed in range(5):
        t = generate_phantom(random_phantom_spec(seed))
        roi, boxes = spine_roi(t.class_labels, 8)
        inside = np.zeros(t.image.dims, bool)
        inside[roi.slices] = True
        assert not (t.instance_labels.data > 0)[~inside].any()
        assert set(boxes) == set(int(c) for c in np.unique(t.class_labels.data) if c)


def test_spine_roi_single_class_and_outlier_suppression():
    lab = np.zeros((30, 30, 30), np.uint16)
    lab[10:14, 10:14, 5:9] = 2
    lab[10:14, 10:14, 11:15] = 2  # two bodies 2 voxels apart: bridged
    lab[28, 28, 28] = 3  # stray voxel far away
    roi, boxes = spine_roi(LabelVolume(lab), margin_vox=1)
    assert list(boxes) == [2]
    assert boxes[2] == VoxelBox((10, 10, 5), (14, 14, 15))
    assert roi == VoxelBox((9, 9, 4), (15, 15, 16))


def test_spine_roi_empty_raises():
    with pytest.raises(NoSpineFound):
        spine_roi(LabelVolume(np.zeros((4, 4, 4), np.uint16)))


def five_vertebra_phantom():
    return generate_phantom(PhantomSpec(first_label="T10", last_label="L2", seed=3))


def test_oracle_stage2_finds_exactly_the_truth():
    t = five_vertebra_phantom()
    work = preprocess(t.image)
    roi, _ = spine_roi(t.class_labels)
    seg = OracleSegmenter(t.instance_labels).bind(work)
    found = stage2_iterate(seg, work, roi, CascadeParams())
    assert len(found) == 5
    for k, inst in enumerate(found, start=1):
        assert np.array_equal(inst.mask, t.instance_labels.data == k)


def test_preseeded_memory_yields_nothing():
    t = five_vertebra_phantom()
    work = preprocess(t.image)
    roi, _ = spine_roi(t.class_labels)
    seg = OracleSegmenter(t.instance_labels).bind(work)
    assert stage2_iterate(seg, work, roi, CascadeParams(), memory=t.instance_labels.data > 0) == []


def test_instance_cap():
    t = five_vertebra_phantom()
    work = preprocess(t.image)
    roi, _ = spine_roi(t.class_labels)
    seg = OracleSegmenter(t.instance_labels).bind(work)
    assert len(stage2_iterate(seg, work, roi, CascadeParams(max_instances=2))) == 2


def test_stage2_stops_below_min_voxels():
    calls = []

    def faint(ct, mem, box):
        calls.append(box)
        return np.full(ct.shape, 0.2)

    v = Volume(np.zeros((40, 40, 40), np.float32))
    assert stage2_iterate(faint, v, VoxelBox((0, 0, 0), (40, 40, 40))) == []
    assert len(calls) == 1 and calls[0].lo == (4, 4, 0)


def _inst(mask):
    return WorkingInstance(np.asarray(mask, bool))


def test_assign_classes_majority_and_ties():
    stage1 = np.zeros((10, 1, 1), np.uint16)
    stage1[0:2, 0, 0] = 1  # cervical
    stage1[2:5, 0, 0] = 2
    stage1[5:7, 0, 0] = 3
    stage1[7:9, 0, 0] = 1
    masks = []
    for lo, hi in [(0, 2), (2, 5), (3, 8)]:
        m = np.zeros((10, 1, 1), bool)
        m[lo:hi] = True
        masks.append(m)
    insts = [_inst(m) for m in masks]
    w = []
    assign_classes(insts, LabelVolume(stage1), w)
    assert [x.coarse_class for x in insts] == [Region.CERVICAL, Region.THORACIC, Region.THORACIC]
    assert w == []


def test_assign_classes_sixty_forty_and_tie_to_previous():
    stage1 = np.zeros((20, 1, 1), np.uint16)
    stage1[0:6, 0, 0] = 2
    stage1[6:10, 0, 0] = 3
    stage1[10:12, 0, 0] = 1
    stage1[12:14, 0, 0] = 2
    a = np.zeros((20, 1, 1), bool)
    a[0:10] = True  # 6 thoracic vs 4 lumbar
    b = np.zeros((20, 1, 1), bool)
    b[10:14] = True  # 2 cervical vs 2 thoracic, previous is thoracic
    insts = [_inst(a), _inst(b)]
    assign_classes(insts, LabelVolume(stage1), [])
    assert [x.coarse_class for x in insts] == [Region.THORACIC, Region.THORACIC]
    # with a cervical predecessor the tie resolves to cervical
    stage1b = stage1.copy()
    stage1b[0:10] = 1
    insts = [_inst(a), _inst(b)]
    assign_classes(insts, LabelVolume(stage1b), [])
    assert [x.coarse_class for x in insts] == [Region.CERVICAL, Region.CERVICAL]


def test_assign_classes_zero_overlap_takes_nearest_neighbour():
    stage1 = np.zeros((20, 1, 1), np.uint16)
    stage1[0:3, 0, 0] = 3
    stage1[15:18, 0, 0] = 2
    masks = []
    for lo, hi in [(0, 3), (5, 8), (15, 18)]:
        m = np.zeros((20, 1, 1), bool)
        m[lo:hi] = True
        masks.append(_inst(m))
    w = []
    assign_classes(masks, LabelVolume(stage1), w)
    assert masks[1].coarse_class == Region.LUMBAR and len(w) == 1


def test_finalize_voxel_center_centroid():
    g = Geometry((4, 5, 6), (0.5, 0.5, 2.0))
    m = np.zeros(g.dims, bool)
    m[2, 3, 4] = True
    inst = _inst(m)
    inst.coarse_class = Region.THORACIC
    out, ids = finalize([inst], [None], False, g, g, [])
    np.testing.assert_allclose(out[0].centroid_mm, (1.25, 1.75, 9.0))
    assert np.array_equal(out[0].mask, m) and ids.data.sum() == 1


def test_finalize_maps_truth_back_exactly():
    t = generate_phantom(replace(random_phantom_spec(4), spacing=(1.0, 1.25, 1.5)))
    work = preprocess(t.image)
    assert work.spacing == (1.0, 1.0, 1.0)
    ids = OracleSegmenter(t.instance_labels)._ids_on(work.geometry)
    insts = []
    for k, lab in enumerate(t.anatomical, start=1):
        inst = _inst(ids == k)
        inst.coarse_class = lab.region
        insts.append(inst)
    out, _ = finalize(insts, t.anatomical, True, work.geometry, t.image.geometry, [])
    cents = np.array([x.centroid_mm for x in out])
    assert np.abs(cents - t.centroids_mm).max() <= 0.5 * 1.5
    for k, x in enumerate(out, start=1):
        assert np.array_equal(x.mask, t.instance_labels.data == k)


@pytest.mark.parametrize("seed", range(8))
def test_oracle_cascade_reproduces_truth(seed):
    rng = np.random.default_rng(seed)
    spacing = [(1.0, 1.0, 1.0), (1.0, 1.0, 1.25), (1.25, 1.25, 1.0), (1.0, 1.0, 1.5)][seed % 4]
    t = generate_phantom(replace(random_phantom_spec(100 + seed), spacing=spacing))
    z0 = int(rng.integers(0, 10))
    t = crop_phantom_fov(t, VoxelBox((0, 0, z0), t.image.dims))
    params = CascadeParams(min_voxels=1, patch_dims=(48, 48, 48))
    r = run_cascade(t.image, OracleStage1(t.class_labels), OracleSegmenter(t.instance_labels), params)
    assert [x.anatomical for x in r.instances] == t.anatomical
    assert all(x.anchored for x in r.instances)
    for k, x in enumerate(r.instances, start=1):
        assert np.array_equal(x.mask, t.instance_labels.data == k)
    cents = np.array([x.centroid_mm for x in r.instances])
    assert np.abs(cents - t.centroids_mm).max() <= 0.5 * max(spacing)
    masks = np.stack([x.mask for x in r.instances])
    assert masks.sum(axis=0).max() <= 1


def test_cascade_label_counting_is_crop_invariant():
    t = generate_phantom(PhantomSpec(first_label="T8", last_label="L3", seed=8))
    params = CascadeParams(min_voxels=1)
    full = run_cascade(t.image, OracleStage1(t.class_labels), OracleSegmenter(t.instance_labels), params)
    z = np.nonzero((t.instance_labels.data == 3).any(axis=(0, 1)))[0][0]
    c = crop_phantom_fov(t, VoxelBox((0, 0, z), t.image.dims))
    part = run_cascade(c.image, OracleStage1(c.class_labels), OracleSegmenter(c.instance_labels), params)
    assert [x.anatomical for x in part.instances] == [x.anatomical for x in full.instances][2:]


@pytest.mark.parametrize("patch", [(32, 32, 32), (48, 48, 48)])
def test_vertebra_cut_by_caudal_edge_is_found(patch):
    t = generate_phantom(PhantomSpec(first_label="T10", last_label="L3", seed=3))
    # keep only a few slices of the last vertebra
    z_last = np.nonzero((t.instance_labels.data == t.n_instances).any(axis=(0, 1)))[0]
    c = crop_phantom_fov(t, VoxelBox((0, 0, 0), (*t.image.dims[:2], int(z_last[0]) + 2)))
    assert c.truncated[-1]
    r = run_cascade(c.image, OracleStage1(c.class_labels), OracleSegmenter(c.instance_labels), CascadeParams(min_voxels=1, patch_dims=patch))
    assert [x.anatomical for x in r.instances] == c.anatomical
    assert r.instances[-1].truncated


def test_air_volume_has_no_spine():
    v = Volume(np.full((16, 16, 16), -1000.0))
    with pytest.raises(NoSpineFound):
        run_cascade(v, lambda w: LabelVolume(np.zeros(w.dims, np.uint16), w.spacing, w.origin), None)


def test_result_bundle(tmp_path):
    t = five_vertebra_phantom()
    r = run_cascade(t.image, OracleStage1(t.class_labels), OracleSegmenter(t.instance_labels))
    write_result(r, tmp_path)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [x["anatomical"] for x in rep["instances"]] == ["T10", "T11", "T12", "L1", "L2"]
    assert set(rep["instances"][0]) == {"id", "class", "anatomical", "anchored", "truncated", "centroid_mm", "voxels"}
    assert read_volume(tmp_path / "instances.json") == r.instance_labels
    assert read_volume(tmp_path / "stage1_labels.json") == t.class_labels
