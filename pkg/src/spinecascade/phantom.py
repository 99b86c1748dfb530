"""Synthetic spine phantoms with exact class, instance and centroid truth.

A phantom is a stack of ellipsoidal vertebral bodies along a cranio-caudal
(z) axis that sways sideways along x as a sinusoid. Thoracic vertebrae carry
two short cylindrical ribs along +-x at mid-height; lumbar bodies are larger
and have a darker marrow core; cervical bodies are smaller. Everything sits
inside an elliptic soft-tissue cylinder surrounded by air.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .pipeline.anatomy import AnatomicalLabel, Region, label_range, parse_label
from .volume import LabelVolume, Volume, VoxelBox, read_volume, write_volume

# (in-plane, height) size factors relative to the thoracic reference body
CLASS_SIZE = {Region.CERVICAL: (0.7, 0.75), Region.THORACIC: (1.0, 1.0), Region.LUMBAR: (1.25, 1.25)}
MARROW_SCALE = 0.55
STACK_MARGIN_VOX = 2


class PhantomSpecError(ValueError):
    """The requested vertebra stack does not fit, or the spec is inconsistent."""


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    first_label: str = "T9"
    last_label: str = "L4"
    vertebra_size_vox: tuple[float, float, float] = (14.0, 14.0, 8.0)
    gap_vox: int = 2
    curvature_amp_vox: float = 3.0
    curvature_period_vox: tuple[float, float] = (80.0, 160.0)
    rib_length_vox: int = 6
    rib_radius_vox: float = 1.5
    intensity_bone: float = 700.0
    intensity_marrow: float = 250.0
    intensity_soft: float = 40.0
    intensity_air: float = -1000.0
    body_semi_axes_vox: tuple[float, float] = (21.0, 19.0)
    noise_sigma_hu: float = 20.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "vertebra_size_vox", tuple(float(s) for s in self.vertebra_size_vox))
        object.__setattr__(self, "curvature_period_vox", tuple(float(s) for s in self.curvature_period_vox))
        object.__setattr__(self, "body_semi_axes_vox", tuple(float(s) for s in self.body_semi_axes_vox))
        first, last = parse_label(self.first_label), parse_label(self.last_label)
        object.__setattr__(self, "first_label", first.name)
        object.__setattr__(self, "last_label", last.name)
        if last < first:
            raise PhantomSpecError(f"label range {first.name}..{last.name} is empty")
        if len(self.dims) != 3 or min(self.dims) < 1 or min(self.spacing) <= 0:
            raise PhantomSpecError("dims must be >= 1 and spacing > 0")
        if min(self.vertebra_size_vox) <= 0 or self.gap_vox < 0:
            raise PhantomSpecError("vertebra size must be positive and gap nonnegative")
        if not self.intensity_bone > self.intensity_soft > self.intensity_air:
            raise PhantomSpecError("intensities must satisfy bone > soft > air")
        if not self.intensity_bone > self.intensity_marrow > self.intensity_soft:
            raise PhantomSpecError("marrow intensity must lie between soft tissue and bone")
        lo, hi = self.curvature_period_vox
        if not 0 < lo <= hi:
            raise PhantomSpecError("curvature period range must be positive and ordered")

    @property
    def labels(self):
        return label_range(self.first_label, self.last_label)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def body_size(spec: PhantomSpec, region: Region):
    """Full extents (x, y, z) in voxels of a body of the given region."""
    f_xy, f_z = CLASS_SIZE[Region(region)]
    sx, sy, sz = spec.vertebra_size_vox
    return sx * f_xy, sy * f_xy, max(1, round(sz * f_z))


def stack_height(spec: PhantomSpec, labels=None):
    labels = spec.labels if labels is None else labels
    heights = [body_size(spec, lab.region)[2] for lab in labels]
    return sum(heights) + spec.gap_vox * (len(labels) - 1)


def check_feasible(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    need = stack_height(spec) + 2 * STACK_MARGIN_VOX
    if need > nz:
        raise PhantomSpecError(
            f"{spec.first_label}..{spec.last_label} needs {need} voxels along z but dims give {nz}"
        )
    sx, sy, _ = body_size(spec, Region.LUMBAR)
    rib_reach = body_size(spec, Region.THORACIC)[0] / 2 + spec.rib_length_vox
    half_x = max(sx / 2, rib_reach) + abs(spec.curvature_amp_vox) + 1
    if 2 * half_x > nx or sy + 2 > ny:
        raise PhantomSpecError(f"vertebrae with ribs and curvature do not fit in-plane dims {nx}x{ny}")


@dataclass
class PhantomTruth:
    image: Volume
    class_labels: LabelVolume
    instance_labels: LabelVolume
    anatomical: list
    centroids_mm: np.ndarray
    truncated: list = field(default_factory=list)
    rib_labels: LabelVolume | None = None

    @property
    def n_instances(self):
        return len(self.anatomical)

    @property
    def classes(self):
        return [lab.region for lab in self.anatomical]

    def instance_mask(self, i):
        """Boolean mask of instance ``i`` (1-based)."""
        return self.instance_labels.data == i

    def __eq__(self, other):
        return (
            isinstance(other, PhantomTruth)
            and self.image == other.image
            and self.class_labels == other.class_labels
            and self.instance_labels == other.instance_labels
            and self.anatomical == other.anatomical
            and np.array_equal(self.centroids_mm, other.centroids_mm)
            and self.truncated == other.truncated
            and self.rib_labels == other.rib_labels
        )

    __hash__ = None


def instance_centroids(instances: np.ndarray, n: int, spacing, origin) -> np.ndarray:
    """Voxel-center mean position in mm of each id ``1..n``; NaN rows for absent ids."""
    out = np.full((n, 3), np.nan)
    if n == 0:
        return out
    flat = instances.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1 : n + 1]
    grids = np.indices(instances.shape, dtype=np.float64)
    for axis in range(3):
        sums = np.bincount(flat, weights=grids[axis].ravel(), minlength=n + 1)[1 : n + 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, axis] = origin[axis] + (sums / counts + 0.5) * spacing[axis]
    return out


def generate_phantom(spec: PhantomSpec) -> PhantomTruth:
    """Render the phantom described by ``spec`` (deterministic in ``spec.seed``)."""
    check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    labels = spec.labels
    total = stack_height(spec, labels)
    slack = nz - total - 2 * STACK_MARGIN_VOX
    z0 = STACK_MARGIN_VOX + int(rng.integers(0, slack + 1))
    period = rng.uniform(*spec.curvature_period_vox)
    phase = rng.uniform(0.0, 2 * math.pi)

    x = np.arange(nx) + 0.5
    y = np.arange(ny) + 0.5
    z = np.arange(nz) + 0.5
    X, Y = np.meshgrid(x, y, indexing="ij")
    cx0, cy = nx / 2.0, ny / 2.0

    image = np.full(spec.dims, spec.intensity_air, dtype=np.float64)
    bx, by = spec.body_semi_axes_vox
    soft = ((X - cx0) / bx) ** 2 + ((Y - cy) / by) ** 2 <= 1.0
    image[soft] = spec.intensity_soft

    classes = np.zeros(spec.dims, np.uint16)
    instances = np.zeros(spec.dims, np.uint16)
    ribs = np.zeros(spec.dims, np.uint16)
    zc = z0
    for k, label in enumerate(labels, start=1):
        sx, sy, h = body_size(spec, label.region)
        cz = zc + h / 2.0
        cx = cx0 + spec.curvature_amp_vox * math.sin(2 * math.pi * cz / period + phase)
        zs = slice(zc, zc + h)
        dz = (z[zs] - cz) / (h / 2.0)
        r2 = ((X - cx) / (sx / 2)) ** 2 + ((Y - cy) / (sy / 2)) ** 2
        body = r2[:, :, None] + dz[None, None, :] ** 2 <= 1.0
        bone = body.copy()
        if label.region == Region.THORACIC:
            rib = _rib_mask(X, Y, z[zs], cx, cy, cz, sx / 2, spec)
            ribs[:, :, zs][rib & ~body] = k
            bone |= rib
        sub_img = image[:, :, zs]
        sub_img[bone] = spec.intensity_bone
        if label.region == Region.LUMBAR:
            core = r2[:, :, None] / MARROW_SCALE**2 + (dz[None, None, :] / MARROW_SCALE) ** 2 <= 1.0
            sub_img[core] = spec.intensity_marrow
        classes[:, :, zs][bone] = int(label.region)
        instances[:, :, zs][bone] = k
        zc += h + spec.gap_vox

    if spec.noise_sigma_hu > 0:
        image += rng.normal(0.0, spec.noise_sigma_hu, size=image.shape)
    centroids = instance_centroids(instances, len(labels), spec.spacing, (0.0, 0.0, 0.0))
    return PhantomTruth(
        image=Volume(image.astype(np.float32), spec.spacing),
        class_labels=LabelVolume(classes, spec.spacing),
        instance_labels=LabelVolume(instances, spec.spacing),
        anatomical=list(labels),
        centroids_mm=centroids,
        truncated=[False] * len(labels),
        rib_labels=LabelVolume(ribs, spec.spacing),
    )


def _rib_mask(X, Y, zs, cx, cy, cz, half_width, spec):
    """Two horizontal cylinders along +-x leaving the body at mid-height."""
    radial = (Y[:, :, None] - cy) ** 2 + (zs[None, None, :] - cz) ** 2 <= spec.rib_radius_vox**2
    dx = np.abs(X - cx)[:, :, None]
    along = (dx >= half_width - 1.0) & (dx <= half_width + spec.rib_length_vox)
    return radial & along


def crop_phantom_fov(t: PhantomTruth, box: VoxelBox) -> PhantomTruth:
    """Restrict a phantom to ``box``; partially visible vertebrae are flagged truncated."""
    clipped = box.intersect(VoxelBox((0, 0, 0), t.image.dims))
    if clipped is None:
        raise ValueError(f"box {box.lo}..{box.hi} does not intersect the phantom")
    inst = t.instance_labels.crop(clipped)
    n = t.n_instances
    before = np.bincount(t.instance_labels.data.ravel(), minlength=n + 1)[1:]
    after = np.bincount(inst.data.ravel(), minlength=n + 1)[1:]
    keep = [i for i in range(n) if after[i] > 0]
    if not keep:
        raise ValueError("cropped field of view contains no vertebra")
    remap = np.zeros(n + 1, np.uint16)
    for new, old in enumerate(keep, start=1):
        remap[old + 1] = new
    new_inst = remap[inst.data]
    ribs = None
    if t.rib_labels is not None:
        ribs = t.rib_labels.crop(clipped)
        ribs = ribs.with_data(remap[ribs.data])
    truncated = [bool(t.truncated[i]) or bool(after[i] < before[i]) for i in keep]
    inst = inst.with_data(new_inst)
    return PhantomTruth(
        image=t.image.crop(clipped),
        class_labels=t.class_labels.crop(clipped),
        instance_labels=inst,
        anatomical=[t.anatomical[i] for i in keep],
        centroids_mm=instance_centroids(new_inst, len(keep), inst.spacing, inst.origin),
        truncated=truncated,
        rib_labels=ribs,
    )


def random_label_range(rng, spec: PhantomSpec, require_boundary=True, last_allowed="L5"):
    """Pick the longest stack that fits from a random start label.

    With ``require_boundary`` the stack always contains a cervico-thoracic or
    thoraco-lumbar transition so counting can be anchored.
    """
    order = label_range("C1", last_allowed)
    candidates = []
    for i in range(len(order)):
        j = i
        while j + 1 < len(order):
            trial = replace(spec, first_label=order[i].name, last_label=order[j + 1].name)
            if stack_height(trial) + 2 * STACK_MARGIN_VOX > spec.dims[2]:
                break
            j += 1
        regions = {lab.region for lab in order[i : j + 1]}
        if j > i and (len(regions) > 1 or not require_boundary):
            candidates.append((order[i], order[j]))
    if not candidates:
        raise PhantomSpecError("no label range fits the phantom dims")
    first, last = candidates[int(rng.integers(len(candidates)))]
    return first.name, last.name


def random_phantom_spec(seed: int, base: PhantomSpec | None = None, require_boundary=True) -> PhantomSpec:
    base = base or PhantomSpec()
    rng = np.random.default_rng([seed, 7])
    first, last = random_label_range(rng, base, require_boundary)
    return replace(base, first_label=first, last_label=last, seed=int(seed))


# files


def truth_json(t: PhantomTruth):
    return {
        "instances": [
            {
                "id": i + 1,
                "label": lab.name,
                "class": lab.region.name.lower(),
                "centroid_mm": [float(c) for c in t.centroids_mm[i]],
                "truncated": bool(t.truncated[i]),
            }
            for i, lab in enumerate(t.anatomical)
        ]
    }


def write_phantom(t: PhantomTruth, directory, spec: PhantomSpec | None = None):
    """Write image, class, instance and rib volumes plus ``truth.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(t.image, d / "image.json")
    write_volume(t.class_labels, d / "classes.json")
    write_volume(t.instance_labels, d / "instances.json")
    if t.rib_labels is not None:
        write_volume(t.rib_labels, d / "ribs.json")
    doc = truth_json(t)
    if spec is not None:
        doc["spec"] = spec.to_dict()
    tmp = d / "truth.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, d / "truth.json")
    # plain centroid list in the shared label/centroid format
    tmp = d / "centroids.json.tmp"
    tmp.write_text(json.dumps([{"label": x["label"], "centroid_mm": x["centroid_mm"]} for x in doc["instances"]]))
    os.replace(tmp, d / "centroids.json")


def read_phantom(directory) -> PhantomTruth:
    d = Path(directory)
    doc = json.loads((d / "truth.json").read_text())
    ribs = read_volume(d / "ribs.json") if (d / "ribs.json").exists() else None
    inst = doc["instances"]
    return PhantomTruth(
        image=read_volume(d / "image.json"),
        class_labels=read_volume(d / "classes.json"),
        instance_labels=read_volume(d / "instances.json"),
        anatomical=[AnatomicalLabel[x["label"]] for x in inst],
        centroids_mm=np.array([x["centroid_mm"] for x in inst], dtype=np.float64).reshape(-1, 3),
        truncated=[bool(x["truncated"]) for x in inst],
        rib_labels=ribs,
    )
