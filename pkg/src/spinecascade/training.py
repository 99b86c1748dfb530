"""Datasets, patch samplers, training loops and held-out evaluation for both stages."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .augment import AugmentSpec, add_gaussian_noise, augment, random_affine
from .autodiff import Adam, Tensor, bootstrapped_ce, dice_loss
from .metrics import dice, id_rate, localization_errors
from .nets import INSTANCE, SEMANTIC, InstanceNet, NetConfig, SemanticNet, build_net
from .phantom import PhantomTruth, read_phantom
from .pipeline.cascade import (
    PAD_INTENSITY,
    CascadeParams,
    extract_patch,
    first_patch_lo,
    fit_patch_lo,
    lo_from_center,
    next_patch_center,
    preprocess,
    run_cascade,
    stage1_infer,
)
from .volume import LabelVolume, Volume, class_bounding_boxes


@dataclass
class Case:
    """One phantom on the working grid, ready for sampling."""

    name: str
    image: np.ndarray  # normalized, float32
    classes: np.ndarray  # uint16
    instances: np.ndarray  # uint16, ids cranial to caudal
    truth: PhantomTruth | None = None

    @property
    def n_instances(self):
        return int(self.instances.max())


def case_from_truth(t: PhantomTruth, name="case") -> Case:
    if t.image.spacing != (1.0, 1.0, 1.0):
        raise ValueError("training cases must be on the 1 mm grid")
    return Case(name, preprocess(t.image).data, t.class_labels.data, t.instance_labels.data, t)


def load_dataset(directory, names=None) -> list[Case]:
    """Cases listed in ``manifest.json`` of a dataset directory (optionally a subset by name)."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cases = []
    for entry in manifest["cases"]:
        if names is not None and entry["name"] not in names:
            continue
        cases.append(case_from_truth(read_phantom(d / entry["path"]), entry["name"]))
    if not cases:
        raise ValueError(f"no cases found in {d}")
    return cases


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    net: NetConfig = SEMANTIC
    augment: AugmentSpec = AugmentSpec()
    lr: float = 1e-3
    batch_size: int = 1
    iterations: int = 800
    seed: int = 0
    keep_fraction: float = 0.10
    jitter_vox: int = 2
    roi_margin: int = 8
    class_balance: float = 0.5

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not self.lr > 0 or self.iterations < 1 or self.batch_size < 1:
            raise ValueError("lr > 0, iterations >= 1 and batch_size >= 1 are required")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must lie in [0, 1]")
        want = (1, 4) if self.stage == 1 else (2, 1)
        if (self.net.in_channels, self.net.out_channels) != want:
            raise ValueError(f"stage {self.stage} needs in/out channels {want}")
        if any(d % self.net.multiple for d in self.augment.crop_dims):
            raise ValueError(f"crop dims {self.augment.crop_dims} must be divisible by {self.net.multiple}")

    @classmethod
    def default(cls, stage, **kw):
        return cls(stage=stage, net=SEMANTIC if stage == 1 else INSTANCE, **kw)


# samplers


def class_centered_crop(case: Case, dims, rng):
    """Crop of ``dims`` centered on a random voxel of a uniformly chosen present class."""
    present = [c for c in (1, 2, 3) if (case.classes == c).any()]
    cls = present[int(rng.integers(len(present)))]
    where = np.argwhere(case.classes == cls)
    center = where[int(rng.integers(len(where)))]
    lo = fit_patch_lo(tuple(int(c) - d // 2 for c, d in zip(center, dims)), dims, case.image.shape)
    img = extract_patch(case.image, lo, dims, np.float32(PAD_INTENSITY))
    return img, extract_patch(case.classes, lo, dims, 0)


def sample_stage1(cases, spec: AugmentSpec, rng, class_balance=0.0):
    """Random augmented crop of a random case: ``(image, classes)``.

    With probability ``class_balance`` the crop is centered on a voxel of one
    of the case's classes (chosen uniformly) instead of being placed uniformly,
    so that the rarer cervical and lumbar regions are seen as often as thoracic.
    """
    case = cases[int(rng.integers(len(cases)))]
    if class_balance > 0 and rng.random() < class_balance:
        img, lab = class_centered_crop(case, spec.crop_dims, rng)
        img, lab = random_affine(img, lab, spec, rng)
        return add_gaussian_noise(img, spec, rng), lab
    return augment(case.image, case.classes, spec, rng, pad_value=PAD_INTENSITY)


def truth_roi(case: Case, margin):
    boxes = class_bounding_boxes(LabelVolume(case.classes), 0)
    union = None
    for b in boxes.values():
        union = b if union is None else union.union(b)
    return union.expand(margin, case.classes.shape)


def stage2_patch_lo(case: Case, k, patch_dims, roi_margin):
    """Patch corner the inference loop would use when looking for instance ``k``."""
    if k == 1:
        return first_patch_lo(truth_roi(case, roi_margin), patch_dims)
    center = np.minimum(next_patch_center(case.instances == k - 1), np.asarray(case.instances.shape) - 0.5)
    return lo_from_center(center, patch_dims)


def stage2_example(case: Case, k, patch_dims, roi_margin, jitter=(0, 0, 0)):
    """``(ct, memory, target)`` patches for target instance ``k`` (``n+1`` means none left).

    Memory holds exactly instances ``1..k-1``.
    """
    lo = stage2_patch_lo(case, k, patch_dims, roi_margin)
    lo = fit_patch_lo(tuple(a + j for a, j in zip(lo, jitter)), patch_dims, case.image.shape)
    ids = extract_patch(case.instances, lo, patch_dims, 0)
    ct = extract_patch(case.image, lo, patch_dims, np.float32(PAD_INTENSITY))
    memory = (ids > 0) & (ids < k)
    target = ids == k
    return ct, memory, target


def sample_stage2(cases, cfg: TrainConfig, rng):
    case = cases[int(rng.integers(len(cases)))]
    k = int(rng.integers(1, case.n_instances + 2))
    jitter = tuple(int(j) for j in rng.integers(-cfg.jitter_vox, cfg.jitter_vox + 1, 3))
    ct, memory, target = stage2_example(case, k, cfg.augment.crop_dims, cfg.roi_margin, jitter)
    labels = memory.astype(np.uint16) + 2 * target.astype(np.uint16)
    ct, labels = random_affine(ct, labels, cfg.augment, rng)
    ct = add_gaussian_noise(ct, cfg.augment, rng)
    return ct, labels == 1, labels == 2


# training loops


@dataclass
class TrainResult:
    net: object
    optimizer: Adam
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def _batch(sampler, n):
    items = [sampler() for _ in range(n)]
    return [np.stack(parts) for parts in zip(*items)]


def train(cases, cfg: TrainConfig, log=None, net=None) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on patches sampled from ``cases``.

    ``log`` is called with ``(iteration, loss)`` after every step.
    """
    rng = np.random.default_rng([cfg.seed, cfg.stage])
    net = net or build_net(cfg.net, seed=cfg.seed)
    net.train()
    opt = Adam(net.parameters(), lr=cfg.lr)
    losses = []
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        for it in range(cfg.iterations):
            if cfg.stage == 1:
                img, lab = _batch(lambda: sample_stage1(cases, cfg.augment, rng, cfg.class_balance), cfg.batch_size)
                logits = net.logits(Tensor(img[:, None]))
                loss = bootstrapped_ce(logits, lab.astype(np.int64), cfg.keep_fraction)
            else:
                ct, mem, tgt = _batch(lambda: sample_stage2(cases, cfg, rng), cfg.batch_size)
                x = np.stack([ct, mem.astype(np.float32)], axis=1)
                prob = net.forward(Tensor(x))
                loss = dice_loss(prob, tgt[:, None].astype(np.float32))
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.data)
            losses.append(value)
            if log is not None:
                log(it, value)
    return TrainResult(net, opt, losses, time.perf_counter() - start)


# held-out evaluation


def eval_stage1(net: SemanticNet, cases, window=CascadeParams.window, overlap=0.5):
    """Per-(case, present class) Dice of the sliding-window class map."""
    scores = []
    with threadpool_limits(limits=1):
        for case in cases:
            pred = stage1_infer(net, Volume(case.image), window, overlap).data
            for cls in (1, 2, 3):
                if (case.classes == cls).any():
                    scores.append(dice(pred == cls, case.classes == cls))
    return scores


def eval_stage2(net: InstanceNet, cases, patch_dims=(32, 32, 32), roi_margin=8, threshold=0.5):
    """Teacher-forced Dice of the predicted next vertebra for every target ``k``."""
    scores = []
    with threadpool_limits(limits=1):
        for case in cases:
            for k in range(1, case.n_instances + 1):
                ct, memory, target = stage2_example(case, k, patch_dims, roi_margin)
                x = np.stack([ct, memory.astype(np.float32)])[None]
                prob = 0.5 * (1 + np.tanh(0.5 * net.infer_logits(x)[0, 0]))
                scores.append(dice(prob > threshold, target))
    return scores


def match_instances(pred_ids: np.ndarray, truth_ids: np.ndarray):
    """Dice of every truth instance against the prediction that overlaps it most."""
    out = []
    n_pred = int(pred_ids.max())
    for k in range(1, int(truth_ids.max()) + 1):
        t = truth_ids == k
        overlap = np.bincount(pred_ids[t], minlength=n_pred + 1)[1:]
        if overlap.size == 0 or overlap.max() == 0:
            out.append(0.0)
            continue
        j = int(np.argmax(overlap)) + 1
        out.append(dice(pred_ids == j, t))
    return out


def eval_end_to_end(stage1_net, stage2_net, truths, params: CascadeParams = CascadeParams()):
    """Run the cascade on phantoms and pool identification, localization and Dice."""
    rates_hits, errors, dices, reports = [], [], [], []
    with threadpool_limits(limits=1):
        for t in truths:
            r = run_cascade(t.image, stage1_net, stage2_net, params)
            pred = [(x.anatomical, x.centroid_mm) for x in r.instances if x.anatomical is not None]
            truth = list(zip(t.anatomical, t.centroids_mm))
            rate = id_rate(pred, truth)
            rates_hits.append((rate * len(truth), len(truth)))
            errors.extend(localization_errors(pred, truth).values())
            dices.extend(match_instances(r.instance_labels.data, t.instance_labels.data))
            reports.append(r.report())
    hits = sum(h for h, _ in rates_hits)
    total = sum(n for _, n in rates_hits)
    return {
        "id_rate": hits / total if total else float("nan"),
        "mean_error_mm": float(np.mean(errors)) if errors else float("nan"),
        "mean_dice": float(np.mean(dices)) if dices else float("nan"),
        "reports": reports,
    }
