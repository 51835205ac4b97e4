"""
Soft Dice objectives for the two networks.

All functions take probability tensors shaped ``(classes, x, y, z)`` or
batched ``(batch, classes, x, y, z)`` together with a one-hot target of the
same shape. Sums run over every voxel in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

WEIGHTING_MODES = ("normalized_inverse_count", "literal", "uniform")
ROI_MODES = ("unit", "literal")


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1.0
    weighting_mode: str = "normalized_inverse_count"
    roi_mode: str = "unit"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ValueError(f"weighting_mode must be one of {WEIGHTING_MODES}")
        if self.roi_mode not in ROI_MODES:
            raise ValueError(f"roi_mode must be one of {ROI_MODES}")


@dataclass
class ProbabilityField:
    """Softmax output of network 1 or 2, shaped like the tensors above."""

    data: torch.Tensor
    source_net: int

    def __post_init__(self):
        if self.source_net not in (1, 2):
            raise ValueError("source_net must be 1 or 2")


def _unwrap(p, required_net: int | None = None) -> torch.Tensor:
    if isinstance(p, ProbabilityField):
        if required_net is not None and p.source_net != required_net:
            raise ValueError(f"expected output of net {required_net}, got net {p.source_net}")
        return p.data
    return p


def _class_major(x: torch.Tensor) -> torch.Tensor:
    """Reshape to ``(classes, voxels)``."""
    if x.ndim == 5:
        return x.transpose(0, 1).reshape(x.shape[1], -1)
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"expected a 4D or 5D tensor, got {x.ndim}D")


def _check(p: torch.Tensor, t: torch.Tensor) -> None:
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(t.shape)}")


def one_hot_tensor(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``(B, x, y, z)`` integer labels to a ``(B, classes, x, y, z)`` float one-hot."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1 if labels.ndim == 4 else 0).float()


def class_counts(t: torch.Tensor) -> torch.Tensor:
    return _class_major(t).sum(dim=1)


def soft_dice_per_class(p, t: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-class smoothed soft Dice, summed over all voxels."""
    p = _unwrap(p)
    _check(p, t)
    pf, tf = _class_major(p), _class_major(t.to(p.dtype))
    eps = cfg.epsilon
    return (2.0 * (tf * pf).sum(dim=1) + eps) / ((tf + pf).sum(dim=1) + eps)


def class_weights(counts: torch.Tensor, mode: str) -> torch.Tensor:
    """Weights over classes; classes absent from the target get weight 0."""
    present = counts > 0
    if not counts.is_floating_point():
        counts = counts.to(torch.get_default_dtype())
    if mode == "literal":
        return torch.where(present, 1.0 / counts.clamp(min=1), torch.zeros_like(counts))
    if mode == "uniform":
        w = present.to(counts.dtype)
    else:
        w = torch.where(present, 1.0 / counts.clamp(min=1), torch.zeros_like(counts))
    return w / w.sum().clamp(min=torch.finfo(w.dtype).tiny)


def multiclass_dice_loss(p, t: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """
    ``1 - sum_c w_c * S_c``. In ``literal`` mode ``w_c = 1 / N_c``; in
    ``normalized_inverse_count`` mode the inverse counts are normalised to
    sum to one; in ``uniform`` mode every present class weighs the same.
    """
    scores = soft_dice_per_class(p, t, cfg)
    w = class_weights(class_counts(t), cfg.weighting_mode).to(scores.dtype)
    return 1.0 - (w * scores).sum()


def foreground_score(p1, t: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Soft Dice of the foreground, computed from the reversed background channel."""
    p1 = _unwrap(p1, required_net=1)
    _check(p1, t)
    p0 = _class_major(p1)[0]
    t0 = _class_major(t.to(p1.dtype))[0]
    eps = cfg.epsilon
    return (2.0 * ((1 - t0) * (1 - p0)).sum() + eps) / ((2 - t0 - p0).sum() + eps)


def foreground_loss(p1, t: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    score = foreground_score(p1, t, cfg)
    if cfg.roi_mode == "literal":
        n0 = class_counts(t)[0].clamp(min=1).to(score.dtype)
        return 1.0 - score / n0
    return 1.0 - score


class StepLoss(NamedTuple):
    total: torch.Tensor
    terms: dict


STEP_TERMS = {
    1: ("roi1",),
    2: ("roi1", "dice1"),
    3: ("dice1", "dice2"),
    4: ("dice2",),
}


def step_loss(step: int, p1, p2, t_coarse, t_fine, cfg: LossConfig = LossConfig()) -> StepLoss:
    """
    Loss for one stage of the four-step schedule.

    ``p1``/``t_coarse`` are network 1's output and target, ``p2``/``t_fine``
    network 2's output and its target slices. Step 4 never touches ``p1``.
    """
    if step not in STEP_TERMS:
        raise ValueError(f"step must be in 1..4, got {step}")
    names = STEP_TERMS[step]
    if "dice2" in names and p2 is None:
        raise ValueError(f"step {step} requires the output of network 2")
    terms = {}
    for name in names:
        if name == "roi1":
            terms[name] = foreground_loss(p1, t_coarse, cfg)
        elif name == "dice1":
            terms[name] = multiclass_dice_loss(_unwrap(p1, 1), t_coarse, cfg)
        else:
            terms[name] = multiclass_dice_loss(_unwrap(p2, 2), t_fine, cfg)
    total = sum(terms.values())
    return StepLoss(total, terms)
