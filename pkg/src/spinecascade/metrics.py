"""Overlap, surface-distance, localization and identification metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .pipeline.anatomy import Region, parse_label
from .volume import LabelVolume

ID_RADIUS_MM = 20.0
REGIONS = ("all", "cervical", "thoracic", "lumbar")
CSV_COLUMNS = ("region", "mean_mm", "std_mm", "id_rate", "n")


class MetricUndefinedError(ValueError):
    """A distance metric was requested for an empty mask."""


@dataclass(frozen=True)
class SegMetrics:
    dice: float
    assd_mm: float
    hd_mm: float


def _mask_and_spacing(m, spacing=None):
    if isinstance(m, LabelVolume):
        return m.data > 0, m.spacing if spacing is None else spacing
    return np.asarray(m).astype(bool), (1.0, 1.0, 1.0) if spacing is None else spacing


def _pair(a, b, spacing):
    ma, sa = _mask_and_spacing(a, spacing)
    mb, sb = _mask_and_spacing(b, spacing)
    if ma.shape != mb.shape or tuple(sa) != tuple(sb):
        raise ValueError(f"geometry mismatch: {ma.shape}/{sa} vs {mb.shape}/{sb}")
    if isinstance(a, LabelVolume) and isinstance(b, LabelVolume) and a.origin != b.origin:
        raise ValueError("geometry mismatch: origins differ")
    return ma, mb, tuple(float(s) for s in sa)


def dice(a, b, spacing=None) -> float:
    """``2|A∩B| / (|A|+|B|)``, and 1.0 when both masks are empty."""
    ma, mb, _ = _pair(a, b, spacing)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_mask(m) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or outside the grid."""
    m, _ = _mask_and_spacing(m)
    if not m.any():
        return m.copy()
    return m & ~ndimage.binary_erosion(m, _SIX, border_value=0)


def surface_voxels(m) -> set:
    return {tuple(int(i) for i in idx) for idx in np.argwhere(surface_mask(m))}


def _directed(ma, mb, spacing):
    """Distances (mm) from each surface voxel of ``ma`` to the nearest surface voxel of ``mb``."""
    sa, sb = surface_mask(ma), surface_mask(mb)
    if not sa.any() or not sb.any():
        raise MetricUndefinedError("surface distance is undefined for an empty mask")
    dt = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dt[sa]


def assd(a, b, spacing=None) -> float:
    ma, mb, sp = _pair(a, b, spacing)
    dab, dba = _directed(ma, mb, sp), _directed(mb, ma, sp)
    return float((dab.sum() + dba.sum()) / (dab.size + dba.size))


def hausdorff(a, b, spacing=None) -> float:
    ma, mb, sp = _pair(a, b, spacing)
    return float(max(_directed(ma, mb, sp).max(), _directed(mb, ma, sp).max()))


def seg_metrics(a, b, spacing=None) -> SegMetrics:
    """Dice plus surface distances; distances are NaN when either mask is empty."""
    d = dice(a, b, spacing)
    try:
        return SegMetrics(d, assd(a, b, spacing), hausdorff(a, b, spacing))
    except MetricUndefinedError:
        return SegMetrics(d, math.nan, math.nan)


# localization and identification


def _as_table(points, what):
    table = {}
    for label, centroid in points:
        lab = parse_label(label)
        if lab in table:
            raise ValueError(f"duplicate label {lab.name} in {what}")
        table[lab] = np.asarray(centroid, dtype=np.float64)
    return table


def _region_name(label):
    return label.region.name.lower()


def localization_errors(pred, truth):
    """``{truth label: distance mm}`` for every truth label that was also predicted."""
    p, t = _as_table(pred, "predictions"), _as_table(truth, "truth")
    return {lab: float(np.linalg.norm(p[lab] - c)) for lab, c in t.items() if lab in p}


def identified(pred, truth, radius_mm=ID_RADIUS_MM):
    """``{truth label: bool}`` under the same-label, mutually-nearest, within-radius rule."""
    p, t = _as_table(pred, "predictions"), _as_table(truth, "truth")
    labels = list(t)
    cents = np.array([t[lab] for lab in labels]).reshape(-1, 3)
    out = {}
    for lab, c in t.items():
        if lab not in p:
            out[lab] = False
            continue
        d = np.linalg.norm(cents - p[lab], axis=1)
        nearest = labels[int(np.argmin(d))]
        out[lab] = nearest == lab and float(np.linalg.norm(p[lab] - c)) < radius_mm
    return out


def id_rate(pred, truth, radius_mm=ID_RADIUS_MM) -> float:
    flags = identified(pred, truth, radius_mm)
    return sum(flags.values()) / len(flags) if flags else math.nan


def _mean_std(values):
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def localization_stats(pred, truth):
    """Mean and population std of localization error, pooled and per region."""
    errs = localization_errors(pred, truth)
    out = {}
    for region in REGIONS:
        vals = [e for lab, e in errs.items() if region == "all" or _region_name(lab) == region]
        out[region] = _mean_std(vals)
    return out


def report_rows(cases, radius_mm=ID_RADIUS_MM):
    """Per-region rows pooled over ``cases`` (a list of ``(pred, truth)`` pairs).

    ``n`` counts truth vertebrae; regions without truth vertebrae are omitted.
    """
    errs = {r: [] for r in REGIONS}
    hits = {r: [] for r in REGIONS}
    for pred, truth in cases:
        e = localization_errors(pred, truth)
        ids = identified(pred, truth, radius_mm)
        for lab, ok in ids.items():
            for region in ("all", _region_name(lab)):
                hits[region].append(ok)
                if lab in e:
                    errs[region].append(e[lab])
    rows = []
    for region in REGIONS:
        if not hits[region]:
            continue
        mean, std = _mean_std(errs[region])
        rows.append(
            {
                "region": region,
                "mean_mm": mean,
                "std_mm": std,
                "id_rate": sum(hits[region]) / len(hits[region]),
                "n": len(hits[region]),
            }
        )
    return rows


def rows_to_csv(rows, columns=CSV_COLUMNS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def rows_to_text(rows, columns=CSV_COLUMNS):
    cells = [list(columns)] + [
        [f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in columns] for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"


def report_table(cases, radius_mm=ID_RADIUS_MM):
    """``(csv_text, aligned_text)`` for the pooled per-region table."""
    rows = report_rows(cases, radius_mm)
    return rows_to_csv(rows), rows_to_text(rows)


def region_of(label) -> Region:
    return parse_label(label).region
