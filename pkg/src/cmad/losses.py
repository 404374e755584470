"""Training objectives: focal, Dice, MSE, and their weighted composite."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PROB_EPS = 1e-7  # probability clamp to keep log() finite


@dataclass
class FocalParams:
    alpha: float = 0.75
    gamma: float = 2.0
    # If set, alpha weights positives and (1 - alpha) negatives instead of
    # scaling the whole loss uniformly.
    alpha_balanced: bool = False


@dataclass
class LossWeights:
    w_mse: float = 1.0
    w_dice: float = 1.0
    w_focal: float = 1.0

    def __post_init__(self):
        if min(self.w_mse, self.w_dice, self.w_focal) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.w_mse == self.w_dice == self.w_focal == 0:
            raise ConfigError("loss weights must not all be zero")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def focal_loss(p: torch.Tensor, y: torch.Tensor, params: FocalParams) -> torch.Tensor:
    """Mean of alpha * (1 - p_t)^gamma * BCE where p_t is the probability of
    the true class. alpha is applied uniformly unless ``alpha_balanced``."""
    _check_same_shape(p, y, "focal_loss")
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = y.to(p.dtype)
    bce = F.binary_cross_entropy(p, y, reduction="none")  # -log(p_t) for binary y
    p_t = torch.where(y > 0.5, p, 1.0 - p)
    focus = torch.square(1.0 - p_t) if params.gamma == 2.0 else (1.0 - p_t) ** params.gamma
    if params.alpha_balanced:
        alpha_t = torch.where(y > 0.5, p.new_tensor(params.alpha), p.new_tensor(1.0 - params.alpha))
    else:
        alpha_t = p.new_tensor(params.alpha)
    return (alpha_t * focus * bce).mean()


def dice_loss(p: torch.Tensor, y: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)."""
    _check_same_shape(p, y, "dice_loss")
    if smooth <= 0:
        raise ConfigError("dice smooth must be > 0")
    y = y.to(p.dtype)
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + y.sum() + smooth)


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b, "mse_loss")
    return ((a - b) ** 2).mean()


def composite_objective(
    recon_pair: tuple[torch.Tensor, torch.Tensor],
    seg_pred: torch.Tensor,
    seg_target: torch.Tensor,
    weights: LossWeights,
    focal: FocalParams,
    dice_smooth: float = 1.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of reconstruction MSE and segmentation Dice + focal.

    Returns (total, per-term breakdown). The breakdown holds the weighted
    contributions, so they sum to the total exactly. Terms with zero weight
    are reported as exact zeros and never evaluated, so disabled components
    contribute neither loss nor gradient.
    """
    zero = seg_pred.new_zeros(())
    terms = {
        "mse": weights.w_mse * mse_loss(*recon_pair) if weights.w_mse > 0 else zero,
        "dice": weights.w_dice * dice_loss(seg_pred, seg_target, dice_smooth)
        if weights.w_dice > 0
        else zero,
        "focal": weights.w_focal * focal_loss(seg_pred, seg_target, focal)
        if weights.w_focal > 0
        else zero,
    }
    total = terms["mse"] + terms["dice"] + terms["focal"]
    return total, terms
