"""Training objective: Dice on affordances plus weighted BCE on the arm and object masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, EncodingError, ShapeError

BCE_DELTA = 1e-7
BCE_REDUCTIONS = ("mean_all", "sum_pixels_mean_batch")


@dataclass(frozen=True)
class LossWeights:
    lambda_o: float = 1.0
    lambda_h: float = 1.0

    def __post_init__(self):
        for name in ("lambda_o", "lambda_h"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class DiceConfig:
    """``absent_class="literal"`` scores a class missing from both prediction and
    target as 0; ``"smoothed"`` adds epsilon to the numerator so it scores 1."""

    epsilon: float = 1e-7
    absent_class: str = "literal"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.absent_class not in ("literal", "smoothed"):
            raise ConfigError(f"absent_class must be 'literal' or 'smoothed', got {self.absent_class!r}")


def one_hot_encode(seg: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(H, W) -> (HW, C) or (B, H, W) -> (B, HW, C), row-major pixel order."""
    seg = torch.as_tensor(seg)
    if seg.dim() not in (2, 3):
        raise ShapeError(f"segmentation map must be (H, W) or (B, H, W), got {tuple(seg.shape)}")
    seg = seg.long()
    if seg.numel() and (seg.min() < 0 or seg.max() >= num_classes):
        bad = sorted(set(seg[(seg < 0) | (seg >= num_classes)].unique().tolist()))
        raise EncodingError(f"class IDs {bad} outside [0, {num_classes})")
    flat = seg.reshape(*seg.shape[:-2], -1)
    return F.one_hot(flat, num_classes).to(torch.get_default_dtype())


def flatten_probs(probs: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, HW, C)."""
    b, c = probs.shape[:2]
    return probs.permute(0, 2, 3, 1).reshape(b, -1, c)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, cfg: DiceConfig = DiceConfig()) -> torch.Tensor:
    """Multi-class Dice with per-class sums pooled over the whole batch.

    ``pred`` and ``target`` share a (..., C) layout, typically (B, HW, C).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    target = target.to(pred.dtype)
    dims = tuple(range(pred.dim() - 1))
    inter = (pred * target).sum(dim=dims)
    denom = cfg.epsilon + (pred + target).sum(dim=dims)
    num = 2 * inter
    if cfg.absent_class == "smoothed":
        num = num + cfg.epsilon
    return 1 - (num / denom).mean()


def binary_cross_entropy(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean_all") -> torch.Tensor:
    """Pixel-independent BCE over a (B, ...) batch of probability maps.

    ``sum_pixels_mean_batch`` sums over pixels and averages over the batch;
    ``mean_all`` additionally divides by the pixel count.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if reduction not in BCE_REDUCTIONS:
        raise ValueError(f"reduction must be one of {BCE_REDUCTIONS}, got {reduction!r}")
    v = target.to(pred.dtype)
    v_hat = pred.clamp(BCE_DELTA, 1 - BCE_DELTA)
    per_pixel = -(v * torch.log(v_hat) + (1 - v) * torch.log(1 - v_hat))
    per_sample = per_pixel.reshape(per_pixel.shape[0], -1).sum(dim=1)
    loss = per_sample.mean()
    if reduction == "mean_all":
        loss = loss / per_pixel[0].numel()
    return loss


def weighted_total(l_a, l_o, l_h, weights: LossWeights):
    return l_a + weights.lambda_o * l_o + weights.lambda_h * l_h


def combined_loss(
    aff_pred: torch.Tensor,
    aff_target: torch.Tensor,
    obj_pred: Optional[torch.Tensor],
    obj_target: Optional[torch.Tensor],
    arm_pred: Optional[torch.Tensor],
    arm_target: Optional[torch.Tensor],
    weights: LossWeights = LossWeights(),
    cfg: DiceConfig = DiceConfig(),
    bce_reduction: str = "mean_all",
):
    """Returns ``(total, {"L_a": ..., "L_o": ..., "L_h": ...})``.

    ``aff_pred`` may be (B, C, H, W) probabilities or already (B, HW, C);
    ``aff_target`` may be an integer class map or a one-hot tensor. With no
    object/arm predictions (baseline) only the Dice term is used.
    """
    if aff_pred.dim() == 4:
        aff_pred = flatten_probs(aff_pred)
    if not aff_target.is_floating_point():
        aff_target = one_hot_encode(aff_target, aff_pred.shape[-1])
    l_a = dice_loss(aff_pred, aff_target.to(aff_pred.dtype), cfg)
    components = {"L_a": l_a}
    if obj_pred is None and arm_pred is None:
        return l_a, components
    l_o = binary_cross_entropy(obj_pred, obj_target, bce_reduction)
    l_h = binary_cross_entropy(arm_pred, arm_target, bce_reduction)
    components.update(L_o=l_o, L_h=l_h)
    return weighted_total(l_a, l_o, l_h, weights), components
