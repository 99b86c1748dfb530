"""Seedable training-patch augmentation: crop, rotate/scale, additive noise.

Every function takes an explicit ``numpy.random.Generator`` and accepts
either plain arrays or :class:`Volume`/:class:`LabelVolume` values, returning
the same kind it was given. Geometry is handled in voxel units about the
array center, which assumes the isotropic working grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume

IMAGE_FILL = -1.0
LABEL_FILL = 0


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.8, 1.2)
    noise_sigma: tuple[float, float] = (0.0, 50.0 / 1536.0)
    crop_dims: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "noise_sigma"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ValueError(f"AugmentSpec.{name}: min {lo} exceeds max {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.scale[0] <= 0 or self.noise_sigma[0] < 0:
            raise ValueError("scale must be positive and noise sigma nonnegative")
        dims = tuple(int(d) for d in self.crop_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"crop_dims must be three positive extents, got {self.crop_dims}")
        object.__setattr__(self, "crop_dims", dims)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


IDENTITY = AugmentSpec(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0), noise_sigma=(0.0, 0.0))


def _unwrap(v):
    if isinstance(v, (Volume, LabelVolume)):
        return v.data, v
    return np.asarray(v), None


def _rewrap(arr, like, origin=None):
    if like is None:
        return arr
    return type(like)(arr, like.spacing, like.origin if origin is None else origin)


# crop


def crop_offset(shape, dims, rng):
    """Uniform offset of a ``dims`` window inside ``shape`` (extents already padded)."""
    return tuple(int(rng.integers(0, s - d + 1)) for s, d in zip(shape, dims))


def pad_to(arr, dims, value):
    pad = [(0, max(0, d - s)) for s, d in zip(arr.shape, dims)]
    if not any(p[1] for p in pad):
        return arr
    return np.pad(arr, pad, constant_values=value)


def random_crop(v, labels, dims, rng, pad_value=0.0):
    """Aligned crop of an image and its labels at one uniformly drawn offset.

    Inputs smaller than ``dims`` are padded at the high end first (image with
    ``pad_value``, labels with 0).
    """
    img, vlike = _unwrap(v)
    lab, llike = _unwrap(labels)
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and labels {lab.shape} differ")
    dims = tuple(int(d) for d in dims)
    img = pad_to(img, dims, pad_value)
    lab = pad_to(lab, dims, 0)
    off = crop_offset(img.shape, dims, rng)
    sl = tuple(slice(o, o + d) for o, d in zip(off, dims))
    out_img, out_lab = img[sl], lab[sl]
    if vlike is not None:
        origin = tuple(o + k * s for o, k, s in zip(vlike.origin, off, vlike.spacing))
        return _rewrap(out_img, vlike, origin), _rewrap(out_lab, llike, origin)
    return out_img, out_lab


# affine


def rotation_matrix(angles_deg):
    """``Rz @ Ry @ Rx`` for per-axis angles in degrees."""
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_affine(spec: AugmentSpec, rng):
    angles = tuple(float(rng.uniform(*spec.rotation_deg)) for _ in range(3))
    scale = float(rng.uniform(*spec.scale))
    return angles, scale


def apply_affine(arr, angles_deg, scale, order, cval):
    """Rotate by ``angles_deg`` and scale by ``scale`` about the array center.

    A feature at offset ``d`` from the center moves to ``scale * R @ d``.
    """
    arr = np.asarray(arr)
    forward = scale * rotation_matrix(angles_deg)
    if np.allclose(forward, np.eye(3), rtol=0, atol=1e-12):
        return arr.copy()
    inverse = np.linalg.inv(forward)
    center = (np.asarray(arr.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - inverse @ center
    work = arr if order == 0 else arr.astype(np.float64)
    out = ndimage.affine_transform(work, inverse, offset=offset, order=order, mode="grid-constant", cval=cval, prefilter=False)
    return out.astype(arr.dtype)


def random_affine(v, labels, spec: AugmentSpec, rng):
    """One random rotation (per axis) and isotropic scale applied to image and labels."""
    img, vlike = _unwrap(v)
    lab, llike = _unwrap(labels)
    angles, scale = sample_affine(spec, rng)
    out_img = apply_affine(img, angles, scale, order=1, cval=IMAGE_FILL)
    out_lab = apply_affine(lab, angles, scale, order=0, cval=LABEL_FILL)
    return _rewrap(out_img, vlike), _rewrap(out_lab, llike)


# noise


def add_gaussian_noise(v, spec: AugmentSpec, rng):
    """Add zero-mean noise with ``sigma ~ U(noise_sigma)``; no re-clipping."""
    img, like = _unwrap(v)
    sigma = float(rng.uniform(*spec.noise_sigma))
    noisy = (img + rng.normal(0.0, 1.0, size=img.shape) * sigma).astype(img.dtype)
    return _rewrap(noisy, like)


def augment(v, labels, spec: AugmentSpec, rng, pad_value=0.0):
    """Crop to ``spec.crop_dims``, then random affine, then noise."""
    img, lab = random_crop(v, labels, spec.crop_dims, rng, pad_value=pad_value)
    img, lab = random_affine(img, lab, spec, rng)
    return add_gaussian_noise(img, spec, rng), lab
