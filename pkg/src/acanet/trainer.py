"""
Training loop, plateau learning-rate schedule, early stopping, evaluation and
a finite-difference gradient check.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import (
    ARM_CLASS,
    OBJECT_CLASSES,
    AffordanceDataset,
    AugmentationConfig,
    DatasetManifest,
    resolve_normalization,
)
from .errors import ConfigError, TrainingError
from .losses import DiceConfig, LossWeights, combined_loss
from .metrics import ConfusionCounts, MetricsReport, compute_report, update_counts
from .model import ACANet, predict_segmentation, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr_initial: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    lr_factor: float = 0.5
    lr_patience: int = 3
    early_stop_patience: int = 10
    max_epochs: int = 100
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    # stop as soon as validation mIoU reaches this value (None: never)
    target_miou: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr_initial > 0 and 0 < self.lr_factor < 1):
            raise ConfigError("lr_initial must be > 0 and lr_factor in (0, 1)")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be >= 0")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    loss_affordance: float
    loss_object: Optional[float]
    loss_arm: Optional[float]
    val_mean_iou: Optional[float]
    lr: float
    wall_time: float


@dataclass(frozen=True)
class TrainState:
    best_val_miou: float = -math.inf
    epochs_since_improvement: int = 0
    epochs_since_lr_drop: int = 0
    current_lr: float = 0.001

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        return cls(current_lr=cfg.lr_initial)


def lr_schedule_step(state: TrainState, val_miou: Optional[float], cfg: TrainConfig) -> TrainState:
    """Strict improvement resets both counters; ``lr_patience`` stale epochs halve the rate."""
    if val_miou is not None and val_miou > state.best_val_miou:
        return replace(state, best_val_miou=val_miou, epochs_since_improvement=0, epochs_since_lr_drop=0)
    stale = state.epochs_since_lr_drop + 1
    lr = state.current_lr
    if stale >= cfg.lr_patience:
        lr *= cfg.lr_factor
        stale = 0
    return replace(
        state,
        epochs_since_improvement=state.epochs_since_improvement + 1,
        epochs_since_lr_drop=stale,
        current_lr=lr,
    )


def early_stop_check(state: TrainState, cfg: TrainConfig) -> bool:
    return state.epochs_since_improvement >= cfg.early_stop_patience


def object_target(seg: torch.Tensor) -> torch.Tensor:
    return torch.isin(seg, torch.tensor(sorted(OBJECT_CLASSES), device=seg.device))


def arm_target(seg: torch.Tensor) -> torch.Tensor:
    return seg == ARM_CLASS


def model_loss(model: ACANet, images: torch.Tensor, seg: torch.Tensor, weights: LossWeights, dice: DiceConfig):
    probs, arm, obj = model(images)
    dtype = probs.dtype
    return combined_loss(
        probs, seg,
        obj, None if obj is None else object_target(seg).to(dtype),
        arm, None if arm is None else arm_target(seg).to(dtype),
        weights, dice,
    )


@torch.no_grad()
def evaluate(
    model: torch.nn.Module,
    manifest: DatasetManifest | AffordanceDataset,
    window: Optional[int] = None,
    mean=None,
    std=None,
) -> MetricsReport:
    """Pool per-image confusion counts over ``manifest`` (cropping only, no augmentation)."""
    if isinstance(manifest, AffordanceDataset):
        dataset = manifest
    else:
        window = window or model.config.input_size
        if mean is None or std is None:
            if manifest.mean is None and getattr(model, "normalization", None) is not None:
                mean, std = model.normalization
            else:
                mean, std = resolve_normalization(manifest, bool(getattr(model.config, "pretrained_encoder_path", None)))
        dataset = AffordanceDataset(manifest, window, None, mean, std)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    counts = ConfusionCounts.zeros(model.config.num_classes)
    for i in range(len(dataset)):
        image, seg = dataset[i]
        probs = model(image.unsqueeze(0).to(dtype))[0]
        counts = update_counts(counts, predict_segmentation(probs)[0], seg)
    model.train(was_training)
    return compute_report(counts)


@dataclass
class TrainResult:
    model: ACANet
    logs: list[EpochLog]
    best_state: Optional[dict]
    best_epoch: Optional[int]
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size].tolist()


def train(
    model: ACANet,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
    augmentation: Optional[AugmentationConfig] = AugmentationConfig(),
    output_dir: Optional[str | Path] = None,
    dice: DiceConfig = DiceConfig(),
) -> TrainResult:
    """Momentum SGD on the combined loss with plateau LR halving and early stopping.

    On return the model holds the best-validation weights. With ``output_dir``
    every improving epoch is saved as ``best_epochXXX_miouY.pt`` and the final
    weights as ``last.pt``; ``train_log.jsonl`` gets one row per epoch.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise TrainingError("training and validation manifests must be non-empty")
    torch.manual_seed(cfg.seed)
    window = model.config.input_size
    pretrained = bool(model.config.pretrained_encoder_path)
    mean, std = resolve_normalization(train_manifest, pretrained)
    model.normalization = (tuple(mean), tuple(std))
    if augmentation is not None and augmentation.seed != cfg.seed:
        augmentation = replace(augmentation, seed=cfg.seed)
    train_set = AffordanceDataset(train_manifest, window, augmentation, mean, std)
    val_set = AffordanceDataset(val_manifest, window, None, mean, std)

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.lr_initial, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    state = TrainState.initial(cfg)
    logs: list[EpochLog] = []
    best_state, best_epoch, best_path = None, None, None

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        for group in optimizer.param_groups:
            group["lr"] = state.current_lr
        train_set.set_epoch(epoch)
        model.train()
        sums = {"L": 0.0, "L_a": 0.0, "L_o": 0.0, "L_h": 0.0}
        n_seen = 0
        for idx in _batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
            items = [train_set[i] for i in idx]
            images = torch.stack([x for x, _ in items]).to(dtype)
            seg = torch.stack([y for _, y in items])
            total, parts = model_loss(model, images, seg, cfg.loss_weights, dice)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {idx}: "
                    + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            k = len(idx)
            n_seen += k
            sums["L"] += total.item() * k
            for name, v in parts.items():
                sums[name] += v.item() * k

        report = evaluate(model, val_set)
        miou = report.mean_iou
        has_aux = model.config.is_acanet
        entry = EpochLog(
            epoch,
            sums["L"] / n_seen,
            sums["L_a"] / n_seen,
            sums["L_o"] / n_seen if has_aux else None,
            sums["L_h"] / n_seen if has_aux else None,
            miou,
            state.current_lr,
            time.perf_counter() - t0,
        )
        logs.append(entry)
        log.info(
            "epoch %d loss %.4f val mIoU %s lr %.3g (%.1fs)",
            epoch, entry.loss, "n/a" if miou is None else f"{miou:.4f}", entry.lr, entry.wall_time,
        )
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(entry)) + "\n")

        improved = miou is not None and miou > state.best_val_miou
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            if out is not None:
                best_path = save_checkpoint(model, out / f"best_epoch{epoch:03d}_miou{miou:.4f}.pt", epoch=epoch, val_mean_iou=miou)
        state = lr_schedule_step(state, miou, cfg)
        if cfg.target_miou is not None and miou is not None and miou >= cfg.target_miou:
            log.info("target mIoU %.3f reached at epoch %d", cfg.target_miou, epoch)
            break
        if early_stop_check(state, cfg):
            log.info("early stop at epoch %d", epoch)
            break

    last_path = None
    if out is not None and logs:
        last_path = save_checkpoint(model, out / "last.pt", epoch=logs[-1].epoch)
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, logs, best_state, best_epoch, best_path, last_path)


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    entries: list[tuple[str, tuple, float, float]]  # name, index, analytic, numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@torch.no_grad()
def calibrate_batchnorm(model: torch.nn.Module, images: torch.Tensor):
    """Replace batch-norm running statistics with those of ``images``."""
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.training
    model.train()
    model(images)
    model.train(was_training)
    for m, mom in zip(bns, saved):
        m.momentum = mom


def default_objective(model: ACANet, image: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
    total, _ = model_loss(model, image, seg, LossWeights(), DiceConfig())
    return total


def _pick_entries(model: torch.nn.Module, n_random: int, n_fusion: int, rng: np.random.Generator):
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    picks = []
    fusion = [(n, p) for n, p in named if ".fusion." in f".{n}"]
    for name, p in fusion:
        for flat in rng.choice(p.numel(), size=min(n_fusion, p.numel()), replace=False):
            picks.append((name, p, np.unravel_index(int(flat), p.shape)))
    for j in rng.choice(len(named), size=min(n_random, len(named)), replace=False):
        name, p = named[int(j)]
        picks.append((name, p, np.unravel_index(int(rng.integers(p.numel())), p.shape)))
    return picks


def gradient_check(
    model: ACANet,
    sample: tuple[torch.Tensor, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    n_random: int = 8,
    n_fusion: int = 4,
    seed: int = 0,
    objective: Callable = default_objective,
    abs_floor: float = 1e-9,
    calibrate_bn: bool = True,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled parameters.

    Runs on a float64 copy of ``model`` in inference mode. With
    ``calibrate_bn`` the copy's batch-norm statistics are first estimated on
    noisy copies of the sample: freshly initialised statistics (mean 0, var 1)
    leave many ReLU inputs at exactly 0, where finite differences straddle the
    kink. Entries whose gradients are both below ``abs_floor`` count as agreeing.
    """
    model = copy.deepcopy(model).double()
    image, seg = sample
    if image.dim() == 3:
        image, seg = image.unsqueeze(0), seg.unsqueeze(0)
    image = image.double()
    if calibrate_bn:
        noise = torch.randn((8, *image.shape[1:]), generator=torch.Generator().manual_seed(seed), dtype=image.dtype)
        calibrate_batchnorm(model, image[:1] + 0.5 * noise)
    model.eval()
    picks = _pick_entries(model, n_random, n_fusion, np.random.default_rng(seed))

    model.zero_grad()
    objective(model, image, seg).backward()
    analytic = [p.grad[idx].item() if p.grad is not None else 0.0 for _, p, idx in picks]

    entries = []
    max_rel = max_abs = 0.0
    with torch.no_grad():
        for (name, p, idx), a in zip(picks, analytic):
            orig = p[idx].item()
            p[idx] = orig + step
            f_plus = objective(model, image, seg).item()
            p[idx] = orig - step
            f_minus = objective(model, image, seg).item()
            p[idx] = orig
            num = (f_plus - f_minus) / (2 * step)
            err = abs(a - num)
            scale = max(abs(a), abs(num))
            rel = 0.0 if scale < abs_floor else err / scale
            max_rel, max_abs = max(max_rel, rel), max(max_abs, err)
            entries.append((name, tuple(int(i) for i in idx), a, num))
    return GradCheckReport(max_rel, max_abs, tolerance, entries)
