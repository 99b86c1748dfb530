"""Vertebra identities, spine regions and the boundary-anchored counting rule."""

from __future__ import annotations

from enum import IntEnum


class Region(IntEnum):
    """Stage-1 class codes; 0 is background."""

    CERVICAL = 1
    THORACIC = 2
    LUMBAR = 3

    @property
    def letter(self):
        return self.name[0]


_NAMES = [f"C{i}" for i in range(1, 8)] + [f"T{i}" for i in range(1, 13)] + [f"L{i}" for i in range(1, 7)]

AnatomicalLabel = IntEnum("AnatomicalLabel", [(name, i + 1) for i, name in enumerate(_NAMES)])
AnatomicalLabel.__doc__ = "C1..C7, T1..T12, L1..L6 with ordinals 1..25 in cranio-caudal order."


def _region(self) -> Region:
    if self.value <= 7:
        return Region.CERVICAL
    if self.value <= 19:
        return Region.THORACIC
    return Region.LUMBAR


AnatomicalLabel.region = property(_region)

FIRST_OF_REGION = {Region.CERVICAL: AnatomicalLabel.C1, Region.THORACIC: AnatomicalLabel.T1, Region.LUMBAR: AnatomicalLabel.L1}
LAST_OF_REGION = {Region.CERVICAL: AnatomicalLabel.C7, Region.THORACIC: AnatomicalLabel.T12, Region.LUMBAR: AnatomicalLabel.L6}
THORACIC_COUNT = 12


def parse_label(value) -> AnatomicalLabel:
    """Accept an AnatomicalLabel, its name (``"T12"``) or its ordinal."""
    if isinstance(value, AnatomicalLabel):
        return value
    if isinstance(value, str):
        try:
            return AnatomicalLabel[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown vertebra label {value!r}") from None
    return AnatomicalLabel(int(value))


def label_range(first, last) -> list[AnatomicalLabel]:
    first, last = parse_label(first), parse_label(last)
    if last < first:
        raise ValueError(f"label range {first.name}..{last.name} is empty")
    return [AnatomicalLabel(v) for v in range(first, last + 1)]


def monotone_classes(classes, warnings):
    """Repair a cranio-caudal class sequence so it never steps back (C <= T <= L).

    Runs of equal class are merged into a neighbour, smallest offending run
    first, until the run classes strictly increase. Every repair appends a
    message to ``warnings``.
    """
    classes = list(classes)
    while True:
        runs = []
        for i, c in enumerate(classes):
            if runs and runs[-1][0] == c:
                runs[-1][2] = i + 1
            else:
                runs.append([c, i, i + 1])
        bad = [
            r
            for j, r in enumerate(runs)
            if (j > 0 and runs[j - 1][0] > r[0]) or (j + 1 < len(runs) and runs[j + 1][0] < r[0])
        ]
        if not bad:
            return classes
        j = runs.index(min(bad, key=lambda r: (r[2] - r[1], r[1])))
        run = runs[j]
        # merge into the cranial neighbour when there is one
        target = runs[j - 1] if j > 0 else runs[j + 1]
        warnings.append(
            f"non-monotone region sequence: instances {run[1]}..{run[2] - 1} "
            f"reassigned from {Region(run[0]).name.lower()} to {Region(target[0]).name.lower()}"
        )
        for i in range(run[1], run[2]):
            classes[i] = target[0]


def count_labels(classes, warnings):
    """Anatomical labels for a cranio-caudal list of region classes.

    Returns ``(labels, anchored)`` where ``labels[i]`` is an
    :class:`AnatomicalLabel` or ``None`` when counting leaves the valid range.
    """
    if not classes:
        raise ValueError("cannot label an empty instance list")
    classes = monotone_classes([Region(c) for c in classes], warnings)
    n = len(classes)
    ct = [i for i in range(n - 1) if classes[i] == Region.CERVICAL and classes[i + 1] == Region.THORACIC]
    tl = [i for i in range(n - 1) if classes[i] == Region.THORACIC and classes[i + 1] == Region.LUMBAR]
    cl = [i for i in range(n - 1) if classes[i] == Region.CERVICAL and classes[i + 1] == Region.LUMBAR]

    if ct:
        anchor = ct[0]
        if tl and tl[0] - anchor != THORACIC_COUNT:
            warnings.append(
                f"found {tl[0] - anchor} thoracic vertebrae between the two region boundaries "
                f"(expected {THORACIC_COUNT}); labels counted from the cervico-thoracic boundary"
            )
        ordinals = [AnatomicalLabel.C7 + (i - anchor) for i in range(n)]
    elif tl:
        anchor = tl[0]
        ordinals = [AnatomicalLabel.T12 + (i - anchor) for i in range(n)]
    elif cl:
        anchor = cl[0]
        warnings.append("cervical instances directly followed by lumbar ones; counting C7 upward and L1 downward")
        ordinals = [
            AnatomicalLabel.C7 - (anchor - i) if i <= anchor else AnatomicalLabel.L1 + (i - anchor - 1)
            for i in range(n)
        ]
    else:
        return _count_unanchored(classes, warnings), False

    labels = []
    for i, (cls, ordinal) in enumerate(zip(classes, ordinals)):
        if not 1 <= ordinal <= len(AnatomicalLabel):
            warnings.append(f"instance {i}: counted label ordinal {ordinal} is outside C1..L6; left unlabeled")
            labels.append(None)
            continue
        label = AnatomicalLabel(ordinal)
        if label.region != cls:
            warnings.append(f"instance {i}: counted label {label.name} disagrees with its {cls.name.lower()} class")
        labels.append(label)
    return labels, True


def _count_unanchored(classes, warnings):
    region = classes[0]
    first = FIRST_OF_REGION[region]
    last = LAST_OF_REGION[region]
    warnings.append(
        f"no region boundary visible; labels counted from {first.name} and marked unanchored"
    )
    labels = []
    for i in range(len(classes)):
        ordinal = first + i
        if ordinal > last:
            warnings.append(f"instance {i}: counting from {first.name} passes {last.name}; left unlabeled")
            labels.append(None)
        else:
            labels.append(AnatomicalLabel(ordinal))
    return labels
