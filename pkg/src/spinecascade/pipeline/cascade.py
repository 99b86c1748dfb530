"""Two-stage cascade: region segmentation, iterative vertebra extraction, labeling.

Work happens on a 1 mm isotropic grid of normalized intensities (the
*working* grid); :func:`finalize` maps the result back onto the geometry of
the input volume.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..volume import (
    Geometry,
    LabelVolume,
    Volume,
    VoxelBox,
    clip_normalize,
    largest_component_mask,
    resample_isotropic,
    resample_labels_to,
    write_volume,
)
from .anatomy import Region, count_labels

PAD_INTENSITY = -1.0  # normalized value of anything at or below -512 HU


class NoSpineFound(RuntimeError):
    """Stage 1 labelled every voxel as background."""


@dataclass(frozen=True)
class CascadeParams:
    working_mm: float = 1.0
    window: tuple[int, int, int] = (48, 48, 48)
    overlap: float = 0.5
    roi_margin: int = 8
    roi_bridge: int = 2
    patch_dims: tuple[int, int, int] = (32, 32, 32)
    prob_threshold: float = 0.5
    min_voxels: int = 30
    max_instances: int = 25
    keep_largest_component: bool = True

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        object.__setattr__(self, "patch_dims", tuple(int(w) for w in self.patch_dims))
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if min(self.window) < 1 or min(self.patch_dims) < 1:
            raise ValueError("window and patch dims must be positive")
        if self.min_voxels < 1 or self.max_instances < 0 or self.roi_margin < 0 or self.roi_bridge < 0:
            raise ValueError("min_voxels >= 1, max_instances/roi_margin/roi_bridge >= 0 required")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class WorkingInstance:
    """One vertebra found by the iterative loop, on the working grid."""

    mask: np.ndarray
    coarse_class: Region | None = None

    @property
    def voxels(self):
        return int(self.mask.sum())

    @property
    def centroid_vox(self):
        return np.array([c.mean() for c in np.nonzero(self.mask)]) + 0.5


@dataclass
class VertebraInstance:
    instance_id: int
    mask: np.ndarray  # boolean, input geometry
    coarse_class: Region
    anatomical: object  # AnatomicalLabel or None
    centroid_mm: np.ndarray
    anchored: bool
    truncated: bool

    @property
    def voxels(self):
        return int(self.mask.sum())

    def to_json(self):
        return {
            "id": self.instance_id,
            "class": self.coarse_class.name.lower(),
            "anatomical": None if self.anatomical is None else self.anatomical.name,
            "anchored": bool(self.anchored),
            "truncated": bool(self.truncated),
            "centroid_mm": [float(c) for c in self.centroid_mm],
            "voxels": self.voxels,
        }


@dataclass
class CascadeResult:
    instances: list
    stage1_labels: LabelVolume
    instance_labels: LabelVolume
    warnings: list = field(default_factory=list)

    def report(self):
        return {"instances": [x.to_json() for x in self.instances], "warnings": list(self.warnings)}


# preprocessing


def preprocess(v: Volume, working_mm: float = 1.0) -> Volume:
    """HU volume to the normalized isotropic working grid."""
    return resample_isotropic(clip_normalize(v), working_mm, mode="linear")


def extract_patch(arr, lo, dims, fill):
    """``arr[lo:lo+dims]`` with out-of-range voxels set to ``fill``."""
    out = np.full(dims, fill, dtype=arr.dtype)
    src, dst = [], []
    for a, l, d in zip(arr.shape, lo, dims):
        s0, s1 = max(l, 0), min(l + d, a)
        if s1 <= s0:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - l, s1 - l))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def paste_patch(target, patch, lo):
    """Write the in-range part of ``patch`` into ``target`` at ``lo`` (in place)."""
    src, dst = [], []
    for a, l, d in zip(target.shape, lo, patch.shape):
        s0, s1 = max(l, 0), min(l + d, a)
        if s1 <= s0:
            return target
        dst.append(slice(s0, s1))
        src.append(slice(s0 - l, s1 - l))
    target[tuple(dst)] = patch[tuple(src)]
    return target


# stage 1


def window_starts(n, w, overlap):
    """Start offsets of windows of size ``w`` covering ``n`` voxels, last one clamped inward."""
    if n <= w:
        return [0]
    stride = max(1, int(w * (1.0 - overlap)))
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def _semantic_logits(net, patch):
    if hasattr(net, "infer_logits"):
        return net.infer_logits(patch)
    return np.asarray(net(patch))


def stage1_infer(net, v: Volume, window=(48, 48, 48), overlap=0.5) -> LabelVolume:
    """Sliding-window class map; logits of overlapping windows are averaged.

    ``net`` is a semantic network or any callable mapping ``[1,1,D,H,W]`` to
    ``[1,C,D,H,W]`` logits. Volumes smaller than the window are padded with
    the air intensity and cropped back.
    """
    window = tuple(int(w) for w in window)
    data = v.data
    dims = data.shape
    padded = extract_patch(data, (0, 0, 0), tuple(max(d, w) for d, w in zip(dims, window)), np.float32(PAD_INTENSITY))
    total = None
    count = np.zeros(padded.shape, np.float32)
    starts = [window_starts(n, w, overlap) for n, w in zip(padded.shape, window)]
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                sl = (slice(sx, sx + window[0]), slice(sy, sy + window[1]), slice(sz, sz + window[2]))
                logits = _semantic_logits(net, padded[sl][None, None])[0]
                if total is None:
                    total = np.zeros((logits.shape[0],) + padded.shape, np.float64)
                total[(slice(None),) + sl] += logits
                count[sl] += 1
    classes = np.argmax(total / count, axis=0)[: dims[0], : dims[1], : dims[2]]
    return LabelVolume(classes.astype(np.uint16), v.spacing, v.origin)


def spine_roi(stage1: LabelVolume, margin_vox: int = 8, bridge_vox: int = 2):
    """Region of interest around the spine and per-class boxes.

    Foreground is dilated by ``bridge_vox`` so neighbouring vertebrae join
    across their discs; only the largest bridged 6-connected component is
    kept, which drops isolated false positives. Class boxes are tight boxes
    of the kept voxels; the returned union box is grown by ``margin_vox``.
    """
    fg = stage1.data > 0
    if not fg.any():
        raise NoSpineFound("stage 1 found no vertebra voxels")
    bridged = ndimage.binary_dilation(fg, ndimage.generate_binary_structure(3, 1), iterations=bridge_vox) if bridge_vox else fg
    keep = largest_component_mask(bridged, 6) & fg
    boxes = {}
    for cls in (1, 2, 3):
        m = keep & (stage1.data == cls)
        if m.any():
            coords = [np.flatnonzero(m.any(axis=ax)) for ax in ((1, 2), (0, 2), (0, 1))]
            boxes[cls] = VoxelBox(tuple(int(c[0]) for c in coords), tuple(int(c[-1]) + 1 for c in coords))
    union = None
    for box in boxes.values():
        union = box if union is None else union.union(box)
    return union.expand(margin_vox, stage1.dims), boxes


# stage 2


def first_patch_lo(roi: VoxelBox, patch_dims):
    """Patch at the cranial (low z) end of ``roi``, centered in-plane."""
    lo = [int(round((a + b) / 2.0 - p / 2.0)) for a, b, p in zip(roi.lo[:2], roi.hi[:2], patch_dims[:2])]
    return (lo[0], lo[1], roi.lo[2])


def next_patch_center(prev_mask):
    """Previous centroid moved caudally by the previous cranio-caudal extent."""
    idx = np.nonzero(prev_mask)
    center = np.array([c.mean() for c in idx]) + 0.5
    center[2] += idx[2].max() - idx[2].min() + 1
    return center


def lo_from_center(center, patch_dims):
    return tuple(int(np.floor(c - p / 2.0 + 0.5)) for c, p in zip(center, patch_dims))


def fit_patch_lo(lo, patch_dims, vol_dims):
    """Shift a patch inside the volume where possible; larger patches start at 0."""
    return tuple(0 if p >= n else min(max(l, 0), n - p) for l, p, n in zip(lo, patch_dims, vol_dims))


class NetSegmenter:
    """Adapter giving an instance network the segmenter call signature."""

    def __init__(self, net):
        self.net = net

    def __call__(self, ct_patch, memory_patch, box):
        x = np.stack([ct_patch, memory_patch.astype(ct_patch.dtype)])[None]
        logits = self.net.infer_logits(x)[0, 0]
        return 0.5 * (1.0 + np.tanh(0.5 * logits))


def stage2_iterate(segmenter, v: Volume, roi: VoxelBox, params: CascadeParams = CascadeParams(), memory=None):
    """Segment vertebrae one by one, cranial to caudal, feeding back a memory mask.

    ``segmenter(ct_patch, memory_patch, box)`` returns next-vertebra
    probabilities for the patch at ``box`` (working-grid indices, possibly
    reaching outside the volume). Returns :class:`WorkingInstance` objects in
    discovery order.
    """
    if not isinstance(segmenter, NetSegmenter) and hasattr(segmenter, "infer_logits"):
        segmenter = NetSegmenter(segmenter)
    dims = v.data.shape
    pd = params.patch_dims
    M = np.zeros(dims, bool) if memory is None else np.asarray(memory, bool).copy()
    found = []
    lo = fit_patch_lo(first_patch_lo(roi, pd), pd, dims)
    while len(found) < params.max_instances:
        box = VoxelBox(lo, tuple(l + p for l, p in zip(lo, pd)))
        ct = extract_patch(v.data, lo, pd, np.float32(PAD_INTENSITY))
        mem = extract_patch(M, lo, pd, False)
        prob = np.asarray(segmenter(ct, mem, box))
        new = (prob > params.prob_threshold) & ~mem
        if params.keep_largest_component and new.any():
            new = largest_component_mask(new, 6)
        if new.sum() < params.min_voxels:
            break
        mask = paste_patch(np.zeros(dims, bool), new, lo)
        mask &= ~M
        if mask.sum() < params.min_voxels:
            break
        found.append(WorkingInstance(mask))
        M |= mask
        # clamping the center into the volume keeps a vertebra cut by the
        # caudal edge in reach when the roi runs up to that edge
        center = np.minimum(next_patch_center(mask), np.asarray(dims) - 0.5)
        if not all(a <= c < b for a, c, b in zip(roi.lo, center, roi.hi)):
            break
        lo = fit_patch_lo(lo_from_center(center, pd), pd, dims)
    return found


# classes and labels


def assign_classes(instances, stage1: LabelVolume, warnings):
    """Majority stage-1 class over each mask, with cranial tie-breaking."""
    counts = []
    for inst in instances:
        c = np.bincount(stage1.data[inst.mask], minlength=4)[1:4]
        counts.append(c)
    prev = None
    unresolved = []
    for i, (inst, c) in enumerate(zip(instances, counts)):
        if c.sum() == 0:
            unresolved.append(i)
            inst.coarse_class = None
            continue
        winners = [k + 1 for k in np.flatnonzero(c == c.max())]
        if len(winners) > 1 and prev in winners:
            cls = prev
        else:
            cls = winners[0]  # lowest code is the most cranial region
        inst.coarse_class = Region(cls)
        prev = cls
    classified = [i for i in range(len(instances)) if instances[i].coarse_class is not None]
    for i in unresolved:
        if not classified:
            instances[i].coarse_class = Region.THORACIC
            warnings.append(f"instance {i}: no stage-1 class overlap and no classified neighbour; assumed thoracic")
            continue
        ci = instances[i].centroid_vox
        j = min(classified, key=lambda j: (np.linalg.norm(instances[j].centroid_vox - ci), j))
        instances[i].coarse_class = instances[j].coarse_class
        warnings.append(
            f"instance {i}: no stage-1 class overlap; took {instances[j].coarse_class.name.lower()} from instance {j}"
        )
    return instances


def assign_anatomical_labels(instances, warnings):
    """Boundary-anchored counting over cranio-caudally ordered instances."""
    labels, anchored = count_labels([inst.coarse_class for inst in instances], warnings)
    return labels, anchored


def finalize(instances, labels, anchored, working: Geometry, original: Geometry, warnings):
    """Map working-grid instances onto ``original``; ids follow cranio-caudal order."""
    ids = np.zeros(working.dims, np.uint16)
    for k, inst in enumerate(instances, start=1):
        ids[inst.mask & (ids == 0)] = k
    mapped = resample_labels_to(LabelVolume(ids, working.spacing, working.origin), original).data
    spacing, origin = np.asarray(original.spacing), np.asarray(original.origin)
    entries = []
    for k, inst in enumerate(instances, start=1):
        mask = mapped == k
        if not mask.any():
            warnings.append(f"instance {k - 1}: vanished when mapped to the input grid; dropped")
            continue
        idx = np.nonzero(mask)
        centroid = origin + (np.array([c.mean() for c in idx]) + 0.5) * spacing
        touches = any(c.min() == 0 or c.max() == n - 1 for c, n in zip(idx, original.dims))
        entries.append((centroid[2], k, mask, centroid, inst.coarse_class, labels[k - 1], touches))
    entries.sort(key=lambda e: (e[0], e[1]))
    out_ids = np.zeros(original.dims, np.uint16)
    result = []
    for new_id, (_, _, mask, centroid, cls, label, touches) in enumerate(entries, start=1):
        out_ids[mask] = new_id
        result.append(VertebraInstance(new_id, mask, cls, label, centroid, anchored, touches))
    return result, LabelVolume(out_ids, original.spacing, original.origin)


def run_cascade(v: Volume, stage1, segmenter, params: CascadeParams = CascadeParams()) -> CascadeResult:
    """Full cascade on an HU volume.

    ``stage1`` is a semantic network or a callable taking the working volume
    and returning a class :class:`LabelVolume` on the same grid.
    """
    work = preprocess(v, params.working_mm)
    if hasattr(stage1, "infer_logits"):
        classes = stage1_infer(stage1, work, params.window, params.overlap)
    else:
        classes = stage1(work)
    warnings = []
    stage1_input = resample_labels_to(classes, v.geometry)
    roi, _ = spine_roi(classes, params.roi_margin, params.roi_bridge)
    if hasattr(segmenter, "bind"):
        segmenter = segmenter.bind(work)
    found = stage2_iterate(segmenter, work, roi, params)
    if not found:
        warnings.append("stage 2 found no vertebra inside the spine region")
        empty = LabelVolume(np.zeros(v.dims, np.uint16), v.spacing, v.origin)
        return CascadeResult([], stage1_input, empty, warnings)
    found.sort(key=lambda inst: inst.centroid_vox[2])
    assign_classes(found, classes, warnings)
    labels, anchored = assign_anatomical_labels(found, warnings)
    instances, ids = finalize(found, labels, anchored, work.geometry, v.geometry, warnings)
    return CascadeResult(instances, stage1_input, ids, warnings)


def write_result(result: CascadeResult, directory):
    """Result bundle: ``stage1_labels``, ``instances`` volumes and ``report.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(result.stage1_labels, d / "stage1_labels.json")
    write_volume(result.instance_labels, d / "instances.json")
    tmp = d / "report.json.tmp"
    tmp.write_text(json.dumps(result.report(), indent=1))
    os.replace(tmp, d / "report.json")
