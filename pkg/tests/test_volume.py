from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecascade.volume import (
    Geometry,
    LabelVolume,
    PayloadLengthError,
    Volume,
    VolumeHeaderError,
    VoxelBox,
    class_bounding_boxes,
    clip_normalize,
    largest_component,
    read_volume,
    resample_isotropic,
    resample_labels_to,
    write_volume,
)


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    v = Volume(np.zeros((2, 3, 4)))
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


# file I/O


def test_read_zero_payload(tmp_path):
    (tmp_path / "z.raw").write_bytes(np.zeros(8, "<f4").tobytes())
    (tmp_path / "z.json").write_text(
        '{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","data":"z.raw"}'
    )
    v = read_volume(tmp_path / "z.json")
    assert isinstance(v, Volume) and v.dims == (2, 2, 2)
    assert not v.data.any()


def test_short_payload_is_a_length_error(tmp_path):
    (tmp_path / "z.raw").write_bytes(np.zeros(7, "<f4").tobytes())
    (tmp_path / "z.json").write_text(
        '{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","data":"z.raw"}'
    )
    with pytest.raises(PayloadLengthError):
        read_volume(tmp_path / "z.json")


def test_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text('{"dims": [2, 2]')
    with pytest.raises(VolumeHeaderError):
        read_volume(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text('{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"i8","data":"x"}')
    with pytest.raises(VolumeHeaderError):
        read_volume(tmp_path / "bad2.json")


def test_write_zeros_payload_bytes(tmp_path):
    write_volume(Volume(np.zeros((3, 2, 2))), tmp_path / "zeros.json")
    assert (tmp_path / "zeros.raw").read_bytes() == bytes(12 * 4)


def test_round_trip_random(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.standard_normal((5, 4, 3)), spacing=(0.5, 0.7, 2.5), origin=(-3, 1, 9))
    write_volume(v, tmp_path / "r")
    back = read_volume(tmp_path / "r.json")
    assert back == v
    assert back.data.tobytes() == v.data.tobytes()
    lab = LabelVolume(rng.integers(0, 26, (5, 4, 3)))
    write_volume(lab, tmp_path / "l.json")
    assert read_volume(tmp_path / "l.json") == lab


def test_payload_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(Volume(data), tmp_path / "o.json")
    raw = np.frombuffer((tmp_path / "o.raw").read_bytes(), "<f4")
    assert raw[1] == data[1, 0, 0]
    assert raw[2] == data[0, 1, 0]
    assert raw[6] == data[0, 0, 1]


def test_unwritable_directory(tmp_path):
    with pytest.raises(OSError):
        write_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "missing" / "v.json")


# intensity


@pytest.mark.parametrize("hu, expected", [(1024, 1.0), (-512, -1.0), (256, 0.0), (3000, 1.0), (-3000, -1.0)])
def test_clip_normalize_values(hu, expected):
    assert clip_normalize(Volume(np.full((1, 1, 1), hu))).data[0, 0, 0] == expected


def test_clip_normalize_on_clipped_data_equals_full_map():
    rng = np.random.default_rng(1)
    raw = rng.uniform(-3000, 3000, (6, 6, 6))
    once = clip_normalize(Volume(raw))
    clipped = clip_normalize(Volume(np.clip(raw, -512, 1024)))
    np.testing.assert_array_equal(once.data, clipped.data)
    assert once.data.min() >= -1 and once.data.max() <= 1


# resampling


def test_resample_constant():
    v = Volume(np.full((3, 4, 5), 7.5), spacing=(0.8, 1.3, 2.0))
    out = resample_isotropic(v, 1.0)
    assert out.dims == (2, 5, 10)
    assert np.all(out.data == 7.5)


def test_resample_ramp_against_closed_form():
    # source voxel centers sit at 1, 3, 5, 7 mm; clamp-to-edge holds outside [1, 7]
    x = (np.arange(4) + 0.5) * 2.0
    ramp = 3.0 * x[:, None, None] - 2.0 * x[None, :, None] + 0.5 * x[None, None, :]
    v = Volume(ramp, spacing=(2, 2, 2))
    out = resample_isotropic(v, 1.0)
    assert out.dims == (8, 8, 8)
    p = np.clip(np.arange(8) + 0.5, 1.0, 7.0)
    expected = 3.0 * p[:, None, None] - 2.0 * p[None, :, None] + 0.5 * p[None, None, :]
    assert np.abs(out.data - expected).max() < 1e-5


def test_resample_identity_on_isotropic():
    rng = np.random.default_rng(2)
    v = Volume(rng.standard_normal((4, 5, 6)), spacing=(1.5, 1.5, 1.5), origin=(1, 2, 3))
    for mode in ("linear", "nearest"):
        out = resample_isotropic(v, 1.5, mode)
        assert out == v


def test_resample_dims_round_half_away():
    v = Volume(np.zeros((5, 3, 1)), spacing=(0.5, 0.5, 0.2))
    # 2.5 -> 3, 1.5 -> 2, 0.2 -> clamped to 1
    assert resample_isotropic(v, 1.0).dims == (3, 2, 1)


def brute_nearest_labels(src, target):
    """Per target voxel: label of the source voxel whose center is closest (0 if outside)."""
    out = np.zeros(target.dims, dtype=np.uint16)
    s_idx = np.indices(src.dims).reshape(3, -1).T
    s_pos = src.geometry.index_to_mm(s_idx)
    lo = np.asarray(src.origin)
    hi = lo + np.asarray(src.dims) * np.asarray(src.spacing)
    for t in np.ndindex(*target.dims):
        p = target.index_to_mm(np.array(t))
        if np.any(p < lo) or np.any(p >= hi):
            continue
        # per-axis distance; the nearest center along each axis is the containing voxel
        d = np.abs(s_pos - p) / np.asarray(src.spacing)
        j = np.flatnonzero(np.all(d <= 0.5, axis=1))[-1]
        out[t] = src.data[tuple(s_idx[j])]
    return out


def test_resample_labels_identity_and_empty():
    rng = np.random.default_rng(3)
    lab = LabelVolume(rng.integers(0, 4, (4, 4, 4)), spacing=(1, 2, 1))
    assert resample_labels_to(lab, lab.geometry) == lab
    empty = LabelVolume(np.zeros((3, 3, 3)))
    assert not resample_labels_to(empty, Geometry((6, 6, 6), (0.5, 0.5, 0.5))).data.any()


def test_resample_labels_upscale_single_voxel():
    data = np.zeros((3, 3, 3))
    data[1, 2, 0] = 9
    lab = LabelVolume(data, spacing=(2, 2, 2))
    out = resample_labels_to(lab, Geometry((6, 6, 6), (1, 1, 1)))
    expected = np.zeros((6, 6, 6))
    expected[2:4, 4:6, 0:2] = 9
    np.testing.assert_array_equal(out.data, expected)
    np.testing.assert_array_equal(out.data, brute_nearest_labels(lab, out.geometry))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_resample_labels_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    src = LabelVolume(
        rng.integers(0, 6, rng.integers(1, 6, 3)),
        spacing=tuple(rng.choice([0.7, 1.0, 1.5, 2.0], 3)),
        origin=tuple(rng.uniform(-2, 2, 3)),
    )
    target = Geometry(
        tuple(rng.integers(1, 7, 3)), tuple(rng.choice([0.6, 1.0, 1.25], 3)), tuple(rng.uniform(-3, 1, 3))
    )
    out = resample_labels_to(src, target)
    np.testing.assert_array_equal(out.data, brute_nearest_labels(src, target))
    assert set(np.unique(out.data)) <= set(np.unique(src.data)) | {0}


# boxes and components


def test_single_voxel_box():
    data = np.zeros((10, 10, 10))
    data[3, 4, 5] = 2
    lab = LabelVolume(data)
    assert class_bounding_boxes(lab, 0) == {2: VoxelBox((3, 4, 5), (4, 5, 6))}
    assert class_bounding_boxes(lab, 2) == {2: VoxelBox((1, 2, 3), (6, 7, 8))}
    assert class_bounding_boxes(LabelVolume(np.zeros((2, 2, 2))), 1) == {}


def brute_boxes(data, margin):
    boxes = {}
    dims = data.shape
    for idx in np.ndindex(*dims):
        c = int(data[idx])
        if c == 0:
            continue
        lo, hi = boxes.get(c, (list(idx), list(idx)))
        boxes[c] = ([min(a, b) for a, b in zip(lo, idx)], [max(a, b) for a, b in zip(hi, idx)])
    return {
        c: VoxelBox(
            tuple(max(v - margin, 0) for v in lo), tuple(min(v + 1 + margin, d) for v, d in zip(hi, dims))
        )
        for c, (lo, hi) in boxes.items()
    }


def test_boxes_match_brute_force_on_random_volumes():
    rng = np.random.default_rng(4)
    for _ in range(100):
        dims = tuple(rng.integers(1, 17, 3))
        data = rng.choice(4, size=dims, p=[0.9, 0.04, 0.03, 0.03])
        margin = int(rng.integers(0, 3))
        assert class_bounding_boxes(LabelVolume(data), margin) == brute_boxes(data, margin)


def flood_components(mask, connectivity):
    """BFS labelling in x-fastest scan order; returns list of voxel lists."""
    if connectivity == 6:
        steps = [s for s in np.ndindex(3, 3, 3) if sum(abs(v - 1) for v in s) == 1]
    else:
        steps = [s for s in np.ndindex(3, 3, 3) if s != (1, 1, 1)]
    steps = [tuple(v - 1 for v in s) for s in steps]
    seen = np.zeros(mask.shape, bool)
    comps = []
    nx, ny, nz = mask.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[x, y, z] or seen[x, y, z]:
                    continue
                comp, queue = [], deque([(x, y, z)])
                seen[x, y, z] = True
                while queue:
                    p = queue.popleft()
                    comp.append(p)
                    for s in steps:
                        q = tuple(a + b for a, b in zip(p, s))
                        if all(0 <= q[i] < mask.shape[i] for i in range(3)) and mask[q] and not seen[q]:
                            seen[q] = True
                            queue.append(q)
                comps.append(comp)
    return comps


def test_largest_component_two_blobs():
    m = np.zeros((8, 8, 8))
    m[0:2, 0:5, 0] = 1  # 10 voxels
    m[5, 5, 5:7] = 1  # 2 voxels
    out = largest_component(LabelVolume(m), 6)
    comps = flood_components(m > 0, 6)
    biggest = max(comps, key=len)
    expected = np.zeros_like(m)
    for p in biggest:
        expected[p] = 1
    np.testing.assert_array_equal(out.data, expected)
    assert out.data.sum() == 10


def test_largest_component_trivial_cases():
    one = np.zeros((4, 4, 4))
    one[1:3, 1:3, 1:3] = 1
    assert largest_component(LabelVolume(one)) == LabelVolume(one)
    assert not largest_component(LabelVolume(np.zeros((3, 3, 3)))).data.any()


@pytest.mark.parametrize("connectivity", [6, 26])
def test_largest_component_tie_break_and_oracle(connectivity):
    rng = np.random.default_rng(5 + connectivity)
    for _ in range(30):
        m = rng.random((6, 5, 4)) < 0.3
        comps = flood_components(m, connectivity)
        # flood order is x-fastest scan order, so the first seed is the smallest linear index
        best = max(range(len(comps)), key=lambda i: (len(comps[i]), -i)) if comps else None
        expected = np.zeros(m.shape, np.uint16)
        if best is not None:
            for p in comps[best]:
                expected[p] = 1
        out = largest_component(LabelVolume(m.astype(np.uint16)), connectivity)
        np.testing.assert_array_equal(out.data, expected)


def test_crop_moves_origin():
    v = Volume(np.arange(27, dtype=float).reshape(3, 3, 3), spacing=(2, 1, 1), origin=(10, 0, 0))
    c = v.crop(VoxelBox((1, 0, 0), (3, 2, 1)))
    assert c.origin == (12.0, 0.0, 0.0)
    assert c.dims == (2, 2, 1)
