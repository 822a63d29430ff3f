"""
ACANet and its single-branch RN18-U baseline.

Architecture (stride relative to the input):

    ResNet-18 encoder   -> [s4: 64, s8: 128, s16: 256, s32: 512]
    arm / object branch -> UNet decoder, skips at s16 and s8 only, sigmoid head
    affordance branch   -> two UNet blocks (s32 -> s8) give phi_a,
                           phi_a is fused with the down-sampled arm/object masks,
                           concatenated with the s8 encoder map, then three
                           UNet blocks without skips and a softmax head.

Decoder widths follow [4b, 2b, b, b/2, b/4] with b = decoder_base_channels.
All tensors carry a leading batch dimension.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .errors import ConfigError, LoadError, ShapeError

ENCODER_CHANNELS = (64, 128, 256, 512)
ENCODER_STRIDES = (4, 8, 16, 32)
VARIANTS = ("acanet", "rn18u_baseline")


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_size: int = 480
    encoder_depth: int = 4
    decoder_base_channels: int = 64
    # channels of phi_a; None means 2 * decoder_base_channels
    fusion_channels: Optional[int] = None
    pretrained_encoder_path: Optional[str] = None
    variant: str = "acanet"

    def __post_init__(self):
        if self.fusion_channels is None:
            self.fusion_channels = 2 * self.decoder_base_channels
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.encoder_depth != 4:
            raise ConfigError("only the 4-stage ResNet-18 encoder (output stride 32) is supported")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.decoder_base_channels < 4 or self.decoder_base_channels % 4:
            raise ConfigError(
                f"decoder_base_channels must be a multiple of 4 and >= 4, got {self.decoder_base_channels}"
            )
        if self.fusion_channels < 1:
            raise ConfigError(f"fusion_channels must be >= 1, got {self.fusion_channels}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def is_acanet(self) -> bool:
        return self.variant == "acanet"


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class UpBlock(nn.Module):
    """Nearest x2 up-sampling, optional skip concatenation, two 3x3 conv layers.

    With ``widened=True`` the first conv outputs ``2 * out_channels`` and a
    third conv brings the width back down (the first block after fusion).
    """

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, widened: bool = False):
        super().__init__()
        self.skip_channels = skip_channels
        mid = 2 * out_channels if widened else out_channels
        layers = [ConvBNReLU(in_channels + skip_channels, mid), ConvBNReLU(mid, mid)]
        if widened:
            layers.append(ConvBNReLU(mid, out_channels))
        self.convs = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.skip_channels:
            x = torch.cat([x, skip], dim=1)
        return self.convs(x)


def head_conv(in_channels: int, out_channels: int) -> nn.Conv2d:
    # 3x3, stride 1, padded: the last layer sees neighbouring pixels
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)


class ResNet18Encoder(nn.Module):
    """torchvision ResNet-18 minus the classifier; attribute names match its state_dict."""

    def __init__(self):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        self.conv1 = net.conv1
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f4 = self.layer1(x)
        f8 = self.layer2(f4)
        f16 = self.layer3(f8)
        f32 = self.layer4(f16)
        return [f4, f8, f16, f32]

    def load_pretrained(self, path: str | Path):
        path = Path(path)
        if not path.is_file():
            raise LoadError(f"encoder weights file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise LoadError(f"cannot read encoder weights from {path}: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise LoadError(f"{path} does not contain a state dict")
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            self.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise LoadError(f"encoder weights in {path} do not match ResNet-18: {exc}") from exc


class MaskDecoder(nn.Module):
    """Arm or object branch: a single-channel probability map at full resolution."""

    def __init__(self, base: int):
        super().__init__()
        c4, c8, c16, _ = ENCODER_CHANNELS
        b = base
        self.block1 = UpBlock(ENCODER_CHANNELS[3], c16, 4 * b)
        self.block2 = UpBlock(4 * b, c8, 2 * b)
        self.block3 = UpBlock(2 * b, 0, b)
        self.block4 = UpBlock(b, 0, b // 2)
        self.block5 = UpBlock(b // 2, 0, b // 4)
        self.head = head_conv(b // 4, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        f4, f8, f16, f32 = feats
        x = self.block1(f32, f16)
        x = self.block2(x, f8)
        x = self.block5(self.block4(self.block3(x)))
        return torch.sigmoid(self.head(x)).squeeze(1)


def fuse_features(phi_a, m_h_ds, m_o_ds, filters_h, filters_o):
    """phi_a + filters_h(phi_a) * m_h + filters_o(phi_a) * m_o.

    ``phi_a`` is (B, C', H', W'); the masks are (B, H', W') and are broadcast
    over channels. ``filters_h`` / ``filters_o`` are any callables mapping
    phi_a to a tensor of the same shape (1x1 convolutions in the model).
    """
    if phi_a.dim() != 4:
        raise ShapeError(f"phi_a must be (B, C, H, W), got {tuple(phi_a.shape)}")
    expected = (phi_a.shape[0], *phi_a.shape[2:])
    for name, m in (("arm", m_h_ds), ("object", m_o_ds)):
        if tuple(m.shape) != expected:
            raise ShapeError(f"{name} mask shape {tuple(m.shape)} does not match features {expected}")
    phi_h = filters_h(phi_a)
    phi_o = filters_o(phi_a)
    return phi_a + phi_h * m_h_ds.unsqueeze(1) + phi_o * m_o_ds.unsqueeze(1)


class FeatureFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.filters_h = nn.Conv2d(channels, channels, kernel_size=1)
        self.filters_o = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, phi_a, m_h_ds, m_o_ds):
        return fuse_features(phi_a, m_h_ds, m_o_ds, self.filters_h, self.filters_o)


class AffordanceDecoder(nn.Module):
    def __init__(self, num_classes: int, base: int, fusion_channels: int, fused: bool):
        super().__init__()
        c4, c8, c16, c32 = ENCODER_CHANNELS
        b = base
        self.fused = fused
        self.block1 = UpBlock(c32, c16, 4 * b)
        self.block2 = UpBlock(4 * b, c8, fusion_channels)
        if fused:
            self.fusion = FeatureFusion(fusion_channels)
            # fused features are concatenated with the s8 map before this block
            self.block3 = UpBlock(fusion_channels + c8, 0, b, widened=True)
        else:
            self.block3 = UpBlock(fusion_channels, c4, b)
        self.block4 = UpBlock(b, 0, b // 2)
        self.block5 = UpBlock(b // 2, 0, b // 4)
        self.head = head_conv(b // 4, num_classes)

    def intermediate(self, feats: list[torch.Tensor]) -> torch.Tensor:
        f4, f8, f16, f32 = feats
        return self.block2(self.block1(f32, f16), f8)

    def finish(self, feats: list[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        f4, f8 = feats[0], feats[1]
        if self.fused:
            x = self.block3(torch.cat([x, f8], dim=1))
        else:
            x = self.block3(x, f4)
        x = self.block5(self.block4(x))
        return torch.softmax(self.head(x), dim=1)


class ACANet(nn.Module):
    """Returns ``(probs, arm, obj)``: (B, C, S, S), (B, S, S), (B, S, S).

    The baseline variant returns ``(probs, None, None)``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        # (mean, std) the model was trained with; stored in checkpoints
        self.normalization = None
        self.encoder = ResNet18Encoder()
        if config.pretrained_encoder_path:
            self.encoder.load_pretrained(config.pretrained_encoder_path)
        if config.is_acanet:
            self.arm_decoder = MaskDecoder(config.decoder_base_channels)
            self.object_decoder = MaskDecoder(config.decoder_base_channels)
        else:
            self.arm_decoder = None
            self.object_decoder = None
        self.affordance_decoder = AffordanceDecoder(
            config.num_classes, config.decoder_base_channels, config.fusion_channels, fused=config.is_acanet
        )

    @property
    def fusion(self) -> Optional[FeatureFusion]:
        return getattr(self.affordance_decoder, "fusion", None)

    def check_input(self, x: torch.Tensor):
        s = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"expected input (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(x)
        return self.encoder(x)

    def forward(self, x: torch.Tensor):
        feats = self.encode(x)
        phi_a = self.affordance_decoder.intermediate(feats)
        if not self.config.is_acanet:
            return self.affordance_decoder.finish(feats, phi_a), None, None
        arm = self.arm_decoder(feats)
        obj = self.object_decoder(feats)
        h, w = phi_a.shape[2:]
        fused = self.fusion(phi_a, downsample_mask(arm, w, h), downsample_mask(obj, w, h))
        probs = self.affordance_decoder.finish(feats, fused)
        return probs, arm, obj


def build_model(config: ModelConfig) -> ACANet:
    return ACANet(config)


def _batched(image: torch.Tensor):
    if image.dim() == 3:
        return image.unsqueeze(0), True
    return image, False


def encode(model: ACANet, image: torch.Tensor) -> list[torch.Tensor]:
    x, single = _batched(image)
    feats = model.encode(x)
    return [f[0] for f in feats] if single else feats


def decode_arm(model: ACANet, encoder_maps: list[torch.Tensor]) -> torch.Tensor:
    if model.arm_decoder is None:
        raise ConfigError("the rn18u_baseline variant has no arm branch")
    return model.arm_decoder(encoder_maps)


def decode_object(model: ACANet, encoder_maps: list[torch.Tensor]) -> torch.Tensor:
    if model.object_decoder is None:
        raise ConfigError("the rn18u_baseline variant has no object branch")
    return model.object_decoder(encoder_maps)


def affordance_features(model: ACANet, encoder_maps: list[torch.Tensor]) -> torch.Tensor:
    """phi_a: output of the two affordance-branch blocks above the encoder (stride 8)."""
    return model.affordance_decoder.intermediate(encoder_maps)


def decode_affordance(model: ACANet, encoder_maps: list[torch.Tensor], fused: torch.Tensor) -> torch.Tensor:
    expected = encoder_maps[1].shape[2:]
    if fused.shape[2:] != expected:
        raise ShapeError(f"fused features must be at stride 8 {tuple(expected)}, got {tuple(fused.shape[2:])}")
    return model.affordance_decoder.finish(encoder_maps, fused)


def downsample_mask(mask: torch.Tensor, target_w: int, target_h: int) -> torch.Tensor:
    """Bilinear resize of a (B, H, W) or (H, W) probability map."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be >= 1, got {target_w}x{target_h}")
    single = mask.dim() == 2
    x = mask.reshape(1, 1, *mask.shape) if single else mask.unsqueeze(1)
    out = F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)
    out = out.clamp(0.0, 1.0)
    return out[0, 0] if single else out[:, 0]


def forward(model: ACANet, image: torch.Tensor):
    """Run the model on one (3, S, S) image or a (B, 3, S, S) batch."""
    x, single = _batched(image)
    probs, arm, obj = model(x)
    if single:
        probs = probs[0]
        arm = None if arm is None else arm[0]
        obj = None if obj is None else obj[0]
    return probs, arm, obj


def predict_segmentation(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over the channel axis (dim -3); ties go to the lowest class ID."""
    # torch.argmax returns the first maximal index
    return torch.argmax(probs, dim=-3)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(model: ACANet, path: str | Path, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = model.config.to_dict()
    config["pretrained_encoder_path"] = None
    norm = model.normalization
    if norm is not None:
        norm = [list(map(float, norm[0])), list(map(float, norm[1]))]
    torch.save({"config": config, "state_dict": model.state_dict(), "normalization": norm, **extra}, path)
    return path


def load_checkpoint(path: str | Path, config: Optional[ModelConfig] = None) -> ACANet:
    """Rebuild a model from a checkpoint; a given ``config`` must match the stored one."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        stored = ModelConfig.from_dict(blob["config"])
        state = blob["state_dict"]
    except (ConfigError, LoadError):
        raise
    except Exception as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if config is not None:
        mine = dataclasses.replace(config, pretrained_encoder_path=None)
        if mine != stored:
            diff = {k: (v, getattr(stored, k)) for k, v in mine.to_dict().items() if getattr(stored, k) != v}
            raise LoadError(f"checkpoint {path} was saved with a different config: {diff}")
    model = ACANet(stored)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise LoadError(f"checkpoint {path} does not match its config: {exc}") from exc
    norm = blob.get("normalization")
    if norm is not None:
        model.normalization = (tuple(norm[0]), tuple(norm[1]))
    return model
