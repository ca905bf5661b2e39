"""Soft Dice, deep supervision, the decorrelation ramp and the total objective."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from wisernet.autodiff import functional as F
from wisernet.autodiff.tensor import Tensor, as_tensor
from wisernet.exceptions import UsageError


def _target_array(target, like: Tensor) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if arr.shape != like.shape:
        raise UsageError(f"prediction {like.shape} and target {arr.shape} shapes differ")
    if not np.all((arr == 0) | (arr == 1)):
        raise UsageError("target must be binary (0/1)")
    return arr.astype(like.dtype, copy=False)


def dice_loss(probs: Tensor, target, smooth: float = 1.0, weighted: bool = False) -> Tensor:
    """Soft Dice loss averaged over classes and samples.

    Per ``(sample, class)``: ``1 - (2 * sum(p * y) + smooth) / (sum(p) + sum(y) + smooth)``.
    With ``weighted=True`` the generalised form is used instead: classes are
    pooled per sample with weights ``1 / (sum(y) + 1)^2``.
    """
    probs = as_tensor(probs)
    y = _target_array(target, probs)
    inter = (probs * y).sum(axis=(2, 3))
    p_sum = probs.sum(axis=(2, 3))
    y_sum = y.sum(axis=(2, 3))
    if not weighted:
        score = (inter * 2.0 + smooth) / (p_sum + (y_sum + smooth))
        return 1.0 - score.mean()
    w = 1.0 / (y_sum + 1.0) ** 2
    num = (inter * w).sum(axis=1) * 2.0 + smooth
    den = ((p_sum + y_sum) * w).sum(axis=1) + smooth
    return 1.0 - (num / den).mean()


def ds_loss(aux_probs: Sequence[Tensor], target, weights: Sequence[float], smooth: float = 1.0,
            weighted: bool = False) -> Tensor:
    """Weighted Dice of every auxiliary map after bilinear upsampling to the target size."""
    if len(aux_probs) != len(weights):
        raise UsageError(f"{len(aux_probs)} auxiliary maps but {len(weights)} weights")
    size = np.shape(target.data if isinstance(target, Tensor) else target)[2]
    total = None
    for probs, w in zip(aux_probs, weights):
        factor = size // probs.shape[2]
        if factor * probs.shape[2] != size:
            raise UsageError(f"auxiliary map {probs.shape[2:]} does not divide target size {size}")
        term = dice_loss(F.upsample(probs, factor, "bilinear"), target, smooth, weighted) * float(w)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def lambda_schedule(epoch: int, warmup: int, ramp: int, lambda_max: float) -> float:
    """Zero through ``warmup``, linear up to ``lambda_max`` over ``ramp`` epochs, then flat."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    if epoch <= warmup:
        return 0.0
    if epoch < warmup + ramp:
        return lambda_max * (epoch - warmup) / ramp
    return float(lambda_max)


def total_loss(out, target, cfg, epoch: int) -> Tuple[Tensor, Dict[str, float]]:
    """``main + ds + lambda(epoch) / L * sum(ortho)``, plus its logged parts.

    The decorrelation term stays in the graph even while ``lambda`` is zero so
    every style-branch weight receives a (zero) gradient.
    """
    main = dice_loss(out.main_probs, target, cfg.dice_smooth, cfg.weighted_dice)
    loss = main
    parts = {"main": main.item(), "ds": 0.0, "ortho": 0.0, "ortho_weighted": 0.0}
    if out.aux_probs:
        ds = ds_loss(out.aux_probs, target, cfg.ds_weights, cfg.dice_smooth, cfg.weighted_dice)
        loss = loss + ds
        parts["ds"] = ds.item()
    lam = lambda_schedule(epoch, cfg.warmup_epochs, cfg.ramp_epochs, cfg.lambda_max)
    parts["lambda"] = lam
    if out.ortho_terms:
        ortho_sum = out.ortho_terms[0]
        for term in out.ortho_terms[1:]:
            ortho_sum = ortho_sum + term
        weighted = ortho_sum * (lam / len(out.ortho_terms))
        loss = loss + weighted
        parts["ortho"] = ortho_sum.item() / len(out.ortho_terms)
        parts["ortho_weighted"] = weighted.item()
    parts["total"] = loss.item()
    return loss, parts
