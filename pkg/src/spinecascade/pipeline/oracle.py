"""Truth-backed stand-ins for the two networks.

They let the cascade plumbing (patch scheduling, memory, class voting,
counting, mapping back to the input grid) be checked independently of
training quality.
"""

from __future__ import annotations

import numpy as np

from ..volume import Geometry, LabelVolume, resample_labels_to
from .cascade import extract_patch


class OracleStage1:
    """Returns the true class map, transferred onto whatever grid it is asked about."""

    def __init__(self, class_labels: LabelVolume):
        self.class_labels = class_labels

    def __call__(self, work):
        return resample_labels_to(self.class_labels, Geometry(work.data.shape, work.spacing, work.origin))


class OracleSegmenter:
    """Emits the lowest-id true instance that has unmemorized voxels in the patch.

    Instance ids are assumed to increase cranio-caudally, so the lowest id is
    the next vertebra in traversal order.
    """

    def __init__(self, instance_labels: LabelVolume):
        self.instance_labels = instance_labels
        self._cache = {}

    def _ids_on(self, work_geometry):
        key = (work_geometry.dims, work_geometry.spacing, work_geometry.origin)
        if key not in self._cache:
            self._cache[key] = resample_labels_to(self.instance_labels, work_geometry).data
        return self._cache[key]

    def bind(self, work):
        self._ids = self._ids_on(Geometry(work.data.shape, work.spacing, work.origin))
        return self

    def __call__(self, ct_patch, memory_patch, box):
        ids = extract_patch(self._ids, box.lo, box.shape, 0)
        free = ids[~memory_patch.astype(bool)]
        free = free[free > 0]
        if free.size == 0:
            return np.zeros(box.shape, np.float32)
        return (ids == free.min()).astype(np.float32)
