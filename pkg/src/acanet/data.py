"""
Dataset manifests, object-centred cropping, augmentation and synthetic fixtures.

Images are ``uint8`` arrays of shape (H, W, 3); masks are ``uint8`` arrays of
shape (H, W) holding raw class IDs. Coordinates are (x, y) = (column, row) and
boxes are ``(x_min, y_min, x_max, y_max)`` with exclusive maxima.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, EmptyObjectError, EncodingError, LoadError, ShapeError

CLASS_MAP = {"background": 0, "graspable": 1, "contain": 2, "arm": 3}
OBJECT_CLASSES = frozenset({CLASS_MAP["graspable"], CLASS_MAP["contain"]})
ARM_CLASS = CLASS_MAP["arm"]
SPLITS = ("train", "val", "test")

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

Box = tuple[int, int, int, int]


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


@dataclass
class SampleRecord:
    image_path: str
    mask_path: str
    bbox: Optional[Box] = None
    split: str = "train"
    object_category: Optional[str] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.bbox is not None:
            self.bbox = tuple(int(v) for v in self.bbox)
            x0, y0, x1, y1 = self.bbox
            if not (x0 < x1 and y0 < y1 and x0 >= 0 and y0 >= 0):
                raise ConfigError(f"invalid bbox {self.bbox}")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    class_map: dict = field(default_factory=lambda: dict(CLASS_MAP))
    # None means "pick from the encoder initialisation", see resolve_normalization
    mean: Optional[tuple] = None
    std: Optional[tuple] = None
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        ids = sorted(self.class_map.values())
        if ids != list(range(len(ids))):
            raise ConfigError(f"class IDs must be contiguous from 0, got {ids}")
        if self.mean is not None:
            self.mean = tuple(float(v) for v in self.mean)
        if self.std is not None:
            self.std = tuple(float(v) for v in self.std)

    def __len__(self):
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel

    def subset(self, split: str) -> "DatasetManifest":
        recs = [r for r in self.records if r.split == split]
        return DatasetManifest(recs, dict(self.class_map), self.mean, self.std, self.root)


def resolve_normalization(manifest: DatasetManifest, pretrained: bool):
    if manifest.mean is not None and manifest.std is not None:
        return manifest.mean, manifest.std
    return (IMAGENET_MEAN, IMAGENET_STD) if pretrained else (DEFAULT_MEAN, DEFAULT_STD)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write as JSON; record paths are stored relative to the manifest's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    records = []
    for r in manifest.records:
        entry = {
            "image_path": os.path.relpath(manifest.resolve(r.image_path).resolve(), base),
            "mask_path": os.path.relpath(manifest.resolve(r.mask_path).resolve(), base),
            "bbox": list(r.bbox) if r.bbox is not None else None,
            "split": r.split,
        }
        if r.object_category is not None:
            entry["object_category"] = r.object_category
        records.append(entry)
    doc = {
        "class_map": manifest.class_map,
        "mean": list(manifest.mean) if manifest.mean is not None else None,
        "std": list(manifest.std) if manifest.std is not None else None,
        "records": records,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        records = [SampleRecord(**r) for r in doc["records"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError(f"malformed manifest {path}: {exc}") from exc
    manifest = DatasetManifest(
        records, doc.get("class_map", dict(CLASS_MAP)), doc.get("mean"), doc.get("std"), root=path.parent
    )
    if check_files:
        for r in records:
            for rel in (r.image_path, r.mask_path):
                if not manifest.resolve(rel).is_file():
                    raise LoadError(f"manifest {path} references missing file {manifest.resolve(rel)}")
    return manifest


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def encode_mask(data: bytes, class_map: dict = CLASS_MAP) -> np.ndarray:
    """Decode a single-channel PNG of raw class IDs into an (H, W) uint8 map."""
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise EncodingError(f"cannot decode mask image: {exc}") from exc
    if im.mode not in ("L", "P", "I", "I;16"):
        raise EncodingError(f"mask must be single-channel, got mode {im.mode}")
    arr = np.array(im)
    valid = np.array(sorted(class_map.values()))
    bad = np.setdiff1d(np.unique(arr), valid)
    if bad.size:
        raise EncodingError(f"mask contains unknown class values {bad.tolist()}")
    return arr.astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: str | Path, class_map: dict = CLASS_MAP) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read mask {path}: {exc}") from exc
    return encode_mask(data, class_map)


def write_png(array: np.ndarray, path: str | Path):
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def load_sample(manifest: DatasetManifest, index: int) -> tuple[np.ndarray, np.ndarray]:
    r = manifest.records[index]
    image = read_image(manifest.resolve(r.image_path))
    mask = read_mask(manifest.resolve(r.mask_path), manifest.class_map)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ for {r.image_path}")
    return image, mask


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def resize_labels(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize: output pixel d samples source floor((d + 0.5) * in / out)."""
    h, w = mask.shape[:2]
    ys = ((2 * np.arange(height) + 1) * h) // (2 * height)
    xs = ((2 * np.arange(width) + 1) * w) // (2 * width)
    return mask[ys[:, None], xs[None, :]]


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.array(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def compute_bbox(mask: np.ndarray, object_classes=OBJECT_CLASSES) -> Box:
    ys, xs = np.nonzero(np.isin(mask, list(object_classes)))
    if xs.size == 0:
        raise EmptyObjectError("mask contains no object pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


@dataclass(frozen=True)
class CropWindow:
    """Source region ``[x0, x0 + width) x [y0, y0 + height)``, resampled to
    ``size x size`` when ``resize_applied``."""

    x0: int
    y0: int
    size: int
    resize_applied: bool = False
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        if self.width is None:
            object.__setattr__(self, "width", self.size)
        if self.height is None:
            object.__setattr__(self, "height", self.size)


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(v, hi))


def plan_crop(image_w: int, image_h: int, bbox: Optional[Box], window: int) -> CropWindow:
    """Choose the crop region for a ``window``-sized object-centred view.

    * bbox fits in the window: a window x window region centred on the bbox,
      shifted back inside the image where it would cross a border;
    * bbox larger than the window: the bbox region itself, resized;
    * image smaller than the window: the largest region of side
      min(W, H) (widened to cover the bbox) around the bbox centre, resized.
    """
    if window <= 0:
        raise ValueError(f"window must be > 0, got {window}")
    if bbox is None:
        bbox = (image_w // 2, image_h // 2, image_w // 2 + 1, image_h // 2 + 1)
    x_min, y_min, x_max, y_max = bbox
    if not (0 <= x_min < x_max <= image_w and 0 <= y_min < y_max <= image_h):
        raise ValueError(f"bbox {bbox} outside {image_w}x{image_h} image")
    bw, bh = x_max - x_min, y_max - y_min
    cx, cy = (x_min + x_max) // 2, (y_min + y_max) // 2
    if bw > window or bh > window:
        return CropWindow(x_min, y_min, window, True, bw, bh)
    if window > image_w or window > image_h:
        side = min(image_w, image_h)
        rw, rh = max(side, bw), max(side, bh)
        x0 = _clamp(cx - rw // 2, 0, image_w - rw)
        y0 = _clamp(cy - rh // 2, 0, image_h - rh)
        return CropWindow(x0, y0, window, (rw, rh) != (window, window), rw, rh)
    x0 = _clamp(cx - window // 2, 0, image_w - window)
    y0 = _clamp(cy - window // 2, 0, image_h - window)
    return CropWindow(x0, y0, window)


def apply_crop(image: np.ndarray, mask: np.ndarray, win: CropWindow):
    img = image[win.y0 : win.y0 + win.height, win.x0 : win.x0 + win.width]
    msk = mask[win.y0 : win.y0 + win.height, win.x0 : win.x0 + win.width]
    if win.resize_applied:
        img = resize_image(np.ascontiguousarray(img), win.size, win.size)
        msk = resize_labels(msk, win.size, win.size)
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def crop_object_centered(image: np.ndarray, mask: np.ndarray, bbox: Optional[Box], window: int):
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    h, w = mask.shape
    return apply_crop(image, mask, plan_crop(w, h, bbox, window))


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    scale_min: float = 1.0
    scale_max: float = 1.5
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.scale_min <= self.scale_max:
            raise ConfigError(f"need 1 <= scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")


def scale_and_flip(image: np.ndarray, mask: np.ndarray, scale: float, flip: bool):
    """Resize by ``scale``, centre-crop back to the input size, optionally mirror."""
    h, w = mask.shape
    if scale != 1.0:
        nw, nh = round(w * scale), round(h * scale)
        ox, oy = (nw - w) // 2, (nh - h) // 2
        image = resize_image(image, nw, nh)[oy : oy + h, ox : ox + w]
        mask = resize_labels(mask, nw, nh)[oy : oy + h, ox : ox + w]
    if flip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    flip = bool(rng.random() < cfg.hflip_prob)
    return scale_and_flip(image, mask, scale, flip)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # independent of worker scheduling: depends only on (seed, epoch, record index)
    return np.random.default_rng([seed, epoch, index])


# --------------------------------------------------------------------------
# Torch dataset
# --------------------------------------------------------------------------


def to_tensor(image: np.ndarray, mean, std) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(std, dtype=x.dtype).view(3, 1, 1)
    return (x - mean) / std


def prepare_sample(image: np.ndarray, mask: np.ndarray, bbox: Optional[Box], window: int):
    if bbox is None:
        try:
            bbox = compute_bbox(mask)
        except EmptyObjectError:
            bbox = None
    return crop_object_centered(image, mask, bbox, window)


class AffordanceDataset(torch.utils.data.Dataset):
    """Yields ``(image (3, S, S) float, mask (S, S) int64)`` after cropping and,
    when ``augmentation`` is given, random scale/flip."""

    def __init__(
        self,
        manifest: DatasetManifest,
        window: int,
        augmentation: Optional[AugmentationConfig] = None,
        mean: Sequence[float] = DEFAULT_MEAN,
        std: Sequence[float] = DEFAULT_STD,
    ):
        self.manifest = manifest
        self.window = window
        self.augmentation = augmentation
        self.mean = tuple(mean)
        self.std = tuple(std)
        self.epoch = 0
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest)

    def cropped(self, index: int):
        if index not in self._cache:
            image, mask = load_sample(self.manifest, index)
            self._cache[index] = prepare_sample(image, mask, self.manifest.records[index].bbox, self.window)
        return self._cache[index]

    def __getitem__(self, index: int):
        image, mask = self.cropped(index)
        if self.augmentation is not None:
            rng = sample_rng(self.augmentation.seed, self.epoch, index)
            image, mask = augment(image, mask, self.augmentation, rng)
        return to_tensor(image, self.mean, self.std), torch.from_numpy(mask.astype(np.int64))


# --------------------------------------------------------------------------
# Synthetic fixtures
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FixtureShapes:
    """Geometry of one synthetic scene, enough to re-rasterise its mask."""

    kind: str  # "rectangle" or "ellipse"
    container: tuple[float, float, float, float]  # x0, y0, x1, y1
    contain_inset: float
    contain_bottom: float  # contain region lies above this y
    arm_start: tuple[float, float]
    arm_end: tuple[float, float]
    arm_half_width: float


def _inside_container(px, py, s: FixtureShapes, inset: float = 0.0):
    x0, y0, x1, y1 = s.container
    if s.kind == "rectangle":
        return (px >= x0 + inset) & (px < x1 - inset) & (py >= y0 + inset) & (py < y1 - inset)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2 - inset, (y1 - y0) / 2 - inset
    return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0


def _on_arm(px, py, s: FixtureShapes):
    (ax, ay), (bx, by) = s.arm_start, s.arm_end
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return (px - ax - t * dx) ** 2 + (py - ay - t * dy) ** 2 <= s.arm_half_width**2


def rasterize_fixture(shapes: FixtureShapes, size: int) -> np.ndarray:
    """Label map in painter's order: container, contain region, then arm on top."""
    py, px = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[_inside_container(px, py, shapes)] = CLASS_MAP["graspable"]
    contain = _inside_container(px, py, shapes, shapes.contain_inset) & (py < shapes.contain_bottom)
    mask[contain] = CLASS_MAP["contain"]
    mask[_on_arm(px, py, shapes)] = ARM_CLASS
    return mask


def _separated_colors(rng: np.random.Generator, n: int, min_dist: float = 90.0) -> list[np.ndarray]:
    while True:
        cols = [rng.integers(0, 256, size=3) for _ in range(n)]
        if all(np.linalg.norm(a - b) >= min_dist for i, a in enumerate(cols) for b in cols[i + 1 :]):
            return cols


def render_fixture(rng: np.random.Generator, size: int):
    """One synthetic scene: ``(image, mask, shapes)``; every class is present."""
    while True:
        kind = "rectangle" if rng.random() < 0.5 else "ellipse"
        w = rng.uniform(0.35, 0.6) * size
        h = rng.uniform(0.45, 0.75) * size
        cx = size / 2 + rng.uniform(-0.1, 0.1) * size
        cy = size / 2 + rng.uniform(-0.1, 0.1) * size
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        inset = rng.uniform(0.08, 0.15) * min(w, h)
        contain_bottom = box[1] + rng.uniform(0.35, 0.55) * h
        side = -1 if rng.random() < 0.5 else 1
        grip_y = box[1] + rng.uniform(0.6, 0.85) * h
        # arm runs from the image border to just inside the container edge
        end_x = cx + side * (w / 2 - rng.uniform(0.05, 0.2) * w)
        start = (size / 2 + side * size * 0.75, grip_y + rng.uniform(0.0, 0.3) * size)
        shapes = FixtureShapes(
            kind, tuple(float(v) for v in box), float(inset), float(contain_bottom),
            (float(start[0]), float(start[1])), (float(end_x), float(grip_y)),
            float(rng.uniform(0.05, 0.08) * size),
        )
        mask = rasterize_fixture(shapes, size)
        if len(np.unique(mask)) == len(CLASS_MAP):
            break
    bg, body, inner, arm = _separated_colors(rng, 4)
    palette = np.stack([bg, body, inner, arm]).astype(np.float64)
    image = palette[mask] + rng.normal(0.0, 6.0, size=(size, size, 3))
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), mask, shapes


def split_for_index(i: int, n: int, ratios=(0.7, 0.15, 0.15)) -> str:
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    if i < n_train:
        return "train"
    return "val" if i < n_train + n_val else "test"


def generate_synthetic_fixture(n: int, size: int, seed: int, out_dir: str | Path, ratios=(0.7, 0.15, 0.15)):
    """Render ``n`` scenes under ``out_dir`` and write ``manifest.json`` plus
    per-split ``train.json`` / ``val.json`` / ``test.json``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 32 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    if not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        image, mask, _ = render_fixture(np.random.default_rng([seed, i]), size)
        img_rel, mask_rel = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        write_png(image, out / img_rel)
        write_png(mask, out / mask_rel)
        records.append(SampleRecord(img_rel, mask_rel, compute_bbox(mask), split_for_index(i, n, ratios), "synthetic"))
    manifest = DatasetManifest(records, root=out)
    save_manifest(manifest, out / "manifest.json")
    for split in SPLITS:
        save_manifest(manifest.subset(split), out / f"{split}.json")
    return manifest
