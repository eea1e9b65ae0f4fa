"""Segmentation losses: soft Dice, voxel-mean cross-entropy, and their sum."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, div, log_softmax, mul, neg, softmax, sum_all, sum_axes

DICE_EPS = 1e-5
LOSS_MODES = ("dice", "dice+ce")


def one_hot(labels: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """[N,S,S,S] integer labels -> [N,C,S,S,S] float one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes}): {np.unique(labels)}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def _check_target(logits: Tensor, target: np.ndarray):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.data.shape:
        raise ValueError(
            f"target shape {target.shape} != logits shape {logits.data.shape}"
        )
    if not np.isin(target, (0.0, 1.0)).all() or not np.all(target.sum(axis=1) == 1.0):
        raise ValueError("target is not one-hot over the class axis")
    return target


def dice_loss(logits: Tensor, target_onehot: np.ndarray) -> Tensor:
    """1 - mean over classes of (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps)."""
    target = _check_target(logits, target_onehot)
    reduce_axes = (0, 2, 3, 4)
    p = softmax(logits, axis=1)
    num = sum_axes(mul(p, Tensor(target)), reduce_axes)
    den = add(sum_axes(p, reduce_axes), Tensor(target.sum(axis=reduce_axes)))
    dice = div(add(mul(num, 2.0), DICE_EPS), add(den, DICE_EPS))
    mean_dice = mul(sum_all(dice), 1.0 / logits.data.shape[1])
    return add(neg(mean_dice), 1.0)


def cross_entropy(logits: Tensor, target_onehot: np.ndarray) -> Tensor:
    """Mean over voxels of -log softmax probability of the true class."""
    target = _check_target(logits, target_onehot)
    voxels = target.size // target.shape[1]
    lp = log_softmax(logits, axis=1)
    return mul(sum_all(mul(lp, Tensor(target))), -1.0 / voxels)


def composite_loss(
    logits: Tensor, target_onehot: np.ndarray, mode: str = "dice+ce"
) -> Tensor:
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}, expected one of {LOSS_MODES}")
    loss = dice_loss(logits, target_onehot)
    if mode == "dice+ce":
        loss = add(loss, cross_entropy(logits, target_onehot))
    return loss
