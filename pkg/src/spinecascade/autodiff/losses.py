"""Training objectives for the two networks."""

import math

import numpy as np

from .tensor import make_result

DICE_EPS = 1e-5


def bootstrapped_ce(logits, target, keep_fraction=0.10):
    """Cross entropy averaged over the hardest ``ceil(keep_fraction * V)`` voxels.

    ``logits`` is ``[N, K, D, H, W]``; ``target`` holds integer classes of
    shape ``[N, D, H, W]`` (a singleton channel axis is accepted too). Voxels
    outside the kept set receive zero gradient.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n, k = logits.shape[:2]
    t = np.asarray(target)
    if t.ndim == logits.data.ndim:
        t = t[:, 0]
    if t.shape != (n,) + logits.shape[2:]:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    t = t.astype(np.intp)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target labels must lie in [0, {k - 1}]")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    ce = -np.take_along_axis(log_p, t[:, None], axis=1)[:, 0]

    flat = ce.reshape(-1)
    n_vox = flat.size
    n_keep = min(n_vox, math.ceil(keep_fraction * n_vox))
    if n_keep == n_vox:
        keep = np.arange(n_vox)
    else:
        keep = np.argpartition(-flat, n_keep - 1)[:n_keep]
    loss = flat[keep].astype(np.float64).sum() / n_keep
    out = np.asarray(loss, dtype=z.dtype)

    def backward(g):
        weight = np.zeros(n_vox, dtype=z.dtype)
        weight[keep] = 1.0 / n_keep
        weight = weight.reshape(ce.shape)[:, None]
        grad = np.exp(log_p)
        np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1)
        logits._accumulate(grad * weight * g)

    return make_result(out, (logits,), backward)


def dice_loss(prob, target, eps=DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``."""
    t = np.asarray(target, dtype=prob.dtype).reshape(prob.shape)
    p = prob.data
    inter = float((p * t).sum(dtype=np.float64))
    total = float(p.sum(dtype=np.float64) + t.sum(dtype=np.float64))
    out = np.asarray(1.0 - (2.0 * inter + eps) / (total + eps), dtype=p.dtype)

    def backward(g):
        denom = total + eps
        grad = -(2.0 * t * denom - (2.0 * inter + eps)) / (denom * denom)
        prob._accumulate((grad * g).astype(p.dtype))

    return make_result(out, (prob,), backward)
