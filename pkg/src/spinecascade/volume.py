"""Volumes, label volumes, their file format and geometry helpers.

Arrays are indexed ``[x, y, z]``; the on-disk payload is x-fastest, i.e. the
Fortran-order flattening of that array. Physical position of voxel index
``i`` along an axis is ``origin + (i + 0.5) * spacing``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_CLIP = (-512.0, 1024.0)


class VolumeIOError(ValueError):
    """Base class for volume file problems."""


class VolumeHeaderError(VolumeIOError):
    pass


class PayloadLengthError(VolumeIOError):
    pass


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin must have three components")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not all(math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def index_to_mm(self, index):
        """Voxel-center position(s) in mm for integer index array(s) ``[..., 3]``."""
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.spacing)


@dataclass(frozen=True)
class _Grid:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    geometry: Geometry = field(init=False, repr=False, compare=False)

    _dtype = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=self._dtype, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {arr.shape}")
        geometry = Geometry(arr.shape, self.spacing, self.origin)
        self._validate(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", geometry.spacing)
        object.__setattr__(self, "origin", geometry.origin)
        object.__setattr__(self, "geometry", geometry)

    def _validate(self, arr):
        pass

    @property
    def dims(self):
        return self.geometry.dims

    def with_data(self, data):
        """Same geometry, new voxel values."""
        return type(self)(data, self.spacing, self.origin)

    def crop(self, box: VoxelBox):
        lo, hi = box.lo, box.hi
        origin = tuple(o + l * s for o, l, s in zip(self.origin, lo, self.spacing))
        return type(self)(self.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]], self.spacing, origin)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


class Volume(_Grid):
    """Scalar image (HU or normalized intensities), float32."""

    _dtype = np.float32

    def _validate(self, arr):
        if not np.isfinite(arr).all():
            raise ValueError("volume data must be finite")


class LabelVolume(_Grid):
    """Integer labels (classes, instance ids or anatomical codes), uint16."""

    _dtype = np.uint16


@dataclass(frozen=True)
class VoxelBox:
    """Axis-aligned box, ``lo`` inclusive and ``hi`` exclusive."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self):
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def within(self, dims):
        return all(a >= 0 and b <= d for a, b, d in zip(self.lo, self.hi, dims))

    def expand(self, margin, dims):
        lo = tuple(max(a - margin, 0) for a in self.lo)
        hi = tuple(min(b + margin, d) for b, d in zip(self.hi, dims))
        return VoxelBox(lo, hi)

    def union(self, other):
        return VoxelBox(
            tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(max(a, b) for a, b in zip(self.hi, other.hi)),
        )

    def intersect(self, other):
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if not all(a < b for a, b in zip(lo, hi)):
            return None
        return VoxelBox(lo, hi)

    def to_json(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}


# file format

_DTYPES = {"f32": ("<f4", Volume), "u16": ("<u2", LabelVolume)}


def _header_paths(path):
    path = Path(path)
    header = path if path.suffix == ".json" else path.with_suffix(".json")
    return header, header.with_suffix(".raw")


def write_volume(v: Volume | LabelVolume, path):
    """Write ``<stem>.json`` + ``<stem>.raw``; returns the header path.

    Both files are written under temporary names and renamed on success.
    """
    header_path, raw_path = _header_paths(path)
    code = "u16" if isinstance(v, LabelVolume) else "f32"
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": code,
        "data": raw_path.name,
    }
    payload = np.asarray(v.data, dtype=_DTYPES[code][0]).ravel(order="F").tobytes()
    tmp_raw = raw_path.with_name(raw_path.name + ".tmp")
    tmp_header = header_path.with_name(header_path.name + ".tmp")
    try:
        with open(tmp_raw, "wb") as fh:
            fh.write(payload)
        with open(tmp_header, "w") as fh:
            json.dump(header, fh)
        os.replace(tmp_raw, raw_path)
        os.replace(tmp_header, header_path)
    except OSError:
        for tmp in (tmp_raw, tmp_header):
            if tmp.exists():
                tmp.unlink()
        raise
    return header_path


def read_volume(path) -> Volume | LabelVolume:
    """Read a volume written by :func:`write_volume`.

    Raises ``FileNotFoundError`` for a missing header or payload,
    :class:`VolumeHeaderError` for a malformed header and
    :class:`PayloadLengthError` when the payload size disagrees with ``dims``.
    """
    header_path, _ = _header_paths(path)
    text = header_path.read_text()
    try:
        header = json.loads(text)
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        origin = [float(o) for o in header["origin"]]
        np_dtype, cls = _DTYPES[header["dtype"]]
        raw_name = str(header["data"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeHeaderError(f"malformed volume header {header_path}: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise VolumeHeaderError(f"malformed volume header {header_path}: bad geometry")
    raw = (header_path.parent / raw_name).read_bytes()
    expected = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
    if len(raw) != expected:
        raise PayloadLengthError(f"{raw_name}: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=np_dtype).reshape(dims, order="F")
    try:
        return cls(data, tuple(spacing), tuple(origin))
    except ValueError as exc:
        raise VolumeHeaderError(f"invalid volume {header_path}: {exc}") from exc


# intensity and resampling


def clip_normalize(v: Volume) -> Volume:
    """Clip HU to [-512, 1024] and map affinely onto [-1, 1]."""
    lo, hi = HU_CLIP
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    data = (np.clip(v.data, lo, hi) - np.float32(mid)) / np.float32(half)
    return v.with_data(data)


def _round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_dims(dims, spacing, target_mm):
    return tuple(max(1, _round_half_away(d * s / target_mm)) for d, s in zip(dims, spacing))


def _linear_axis(n_src, s_src, n_dst, s_dst):
    # continuous source index of each destination voxel center, clamped to the edge centers
    pos = (np.arange(n_dst) + 0.5) * s_dst / s_src - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def resample_isotropic(v: Volume, target_mm: float, mode: str = "linear"):
    """Resample onto a ``target_mm`` isotropic grid with the same origin.

    ``linear`` is separable trilinear interpolation with clamp-to-edge;
    ``nearest`` picks the source voxel whose center is closest.
    """
    if not target_mm > 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    new_dims = resampled_dims(v.dims, v.spacing, target_mm)
    if mode == "nearest":
        idx = [
            np.minimum(np.floor((np.arange(n) + 0.5) * target_mm / s).astype(np.intp), d - 1)
            for n, s, d in zip(new_dims, v.spacing, v.dims)
        ]
        data = v.data[np.ix_(*idx)]
    elif mode == "linear":
        data = np.asarray(v.data, dtype=np.float64)
        for axis, (d, s, n) in enumerate(zip(v.dims, v.spacing, new_dims)):
            i0, i1, w = _linear_axis(d, s, n, target_mm)
            shape = [1, 1, 1]
            shape[axis] = n
            w = w.reshape(shape)
            data = np.take(data, i0, axis=axis) * (1 - w) + np.take(data, i1, axis=axis) * w
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    return type(v)(data, (target_mm,) * 3, v.origin)


def resample_labels_to(src: LabelVolume, target: Geometry) -> LabelVolume:
    """Nearest-neighbour label transfer onto ``target`` in physical coordinates.

    Target voxels whose centers fall outside the source grid become 0.
    """
    idx, inside = [], []
    for n, s_t, o_t, d, s_s, o_s in zip(target.dims, target.spacing, target.origin, src.dims, src.spacing, src.origin):
        pos = o_t + (np.arange(n) + 0.5) * s_t
        i = np.floor((pos - o_s) / s_s).astype(np.intp)
        ok = (i >= 0) & (i < d)
        idx.append(np.clip(i, 0, d - 1))
        inside.append(ok)
    data = src.data[np.ix_(*idx)].copy()
    mask = inside[0][:, None, None] & inside[1][None, :, None] & inside[2][None, None, :]
    data[~mask] = 0
    return LabelVolume(data, target.spacing, target.origin)


# label geometry


def _tight_box(mask):
    coords = [np.flatnonzero(mask.any(axis=axes)) for axes in ((1, 2), (0, 2), (0, 1))]
    if any(c.size == 0 for c in coords):
        return None
    return VoxelBox(tuple(int(c[0]) for c in coords), tuple(int(c[-1]) + 1 for c in coords))


def class_bounding_boxes(labels: LabelVolume, margin_vox: int = 0) -> dict[int, VoxelBox]:
    """Tight box of every nonzero class present, grown by ``margin_vox`` and clamped."""
    if margin_vox < 0:
        raise ValueError("margin must be nonnegative")
    boxes = {}
    for cls in np.unique(labels.data):
        if cls == 0:
            continue
        box = _tight_box(labels.data == cls)
        boxes[int(cls)] = box.expand(margin_vox, labels.dims)
    return boxes


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component_mask(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Boolean array keeping only the largest connected component.

    Equal sizes are broken by the smallest x-fastest linear index in the component.
    """
    mask = np.asarray(mask, dtype=bool)
    comp, n = ndimage.label(mask, structure=_structure(connectivity))
    if n <= 1:
        return comp > 0
    sizes = np.bincount(comp.ravel())[1:]
    nx, ny, _ = mask.shape
    x, y, z = np.indices(mask.shape)
    linear = x + nx * (y + ny * z)
    seeds = ndimage.minimum(linear, comp, index=np.arange(1, n + 1))
    # most voxels first, then earliest seed
    best = min(range(n), key=lambda i: (-sizes[i], seeds[i])) + 1
    return comp == best


def largest_component(mask: LabelVolume, connectivity: int = 6) -> LabelVolume:
    return mask.with_data(largest_component_mask(mask.data > 0, connectivity).astype(np.uint16))
