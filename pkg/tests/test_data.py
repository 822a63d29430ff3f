import io
import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from acanet.data import (
    AffordanceDataset,
    AugmentationConfig,
    DatasetManifest,
    SampleRecord,
    augment,
    compute_bbox,
    crop_object_centered,
    encode_mask,
    generate_synthetic_fixture,
    load_manifest,
    plan_crop,
    rasterize_fixture,
    render_fixture,
    resize_labels,
    sample_rng,
    save_manifest,
    scale_and_flip,
    split_for_index,
)
from acanet.errors import ConfigError, EmptyObjectError, EncodingError, LoadError


def png_bytes(arr, mode=None):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def coded_image(h, w):
    """Image whose pixel (y, x) stores its own coordinates, so every crop pixel is traceable."""
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = (np.arange(w)[None, :] % 256)
    img[..., 1] = (np.arange(h)[:, None] % 256)
    img[..., 2] = (np.arange(w)[None, :] // 256 + 4 * (np.arange(h)[:, None] // 256))
    return img


# -- masks --------------------------------------------------------------------


def test_encode_mask_examples():
    assert (encode_mask(png_bytes(np.zeros((4, 4), np.uint8))) == 0).all()
    ids = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    assert np.array_equal(encode_mask(png_bytes(ids)), ids)
    with pytest.raises(EncodingError):
        encode_mask(png_bytes(np.array([[0, 9]], dtype=np.uint8)))


def test_encode_mask_corrupt_and_rgb():
    with pytest.raises(EncodingError):
        encode_mask(b"\x89PNG garbage")
    with pytest.raises(EncodingError):
        encode_mask(png_bytes(np.zeros((2, 2, 3), np.uint8)))


# -- bbox ---------------------------------------------------------------------


def test_compute_bbox_examples():
    m = np.zeros((10, 10), np.uint8)
    m[3, 2] = 1
    m[7, 5] = 2
    assert compute_bbox(m) == (2, 3, 6, 8)
    single = np.zeros((10, 10), np.uint8)
    single[4, 4] = 1
    assert compute_bbox(single) == (4, 4, 5, 5)
    with pytest.raises(EmptyObjectError):
        compute_bbox(np.zeros((5, 5), np.uint8))


def test_compute_bbox_ignores_arm():
    m = np.zeros((10, 10), np.uint8)
    m[0, 0] = 3
    m[5, 5] = 1
    assert compute_bbox(m) == (5, 5, 6, 6)


# -- cropping -----------------------------------------------------------------


def bbox_around(cx, cy, half=5):
    return (cx - half, cy - half, cx + half, cy + half)


def test_crop_centered_window():
    win = plan_crop(640, 480, bbox_around(320, 240), 480)
    assert (win.x0, win.y0, win.width, win.height, win.resize_applied) == (80, 0, 480, 480, False)


def test_crop_border_shift():
    win = plan_crop(640, 480, (5, 5, 15, 15), 480)
    assert (win.x0, win.y0, win.width, win.height) == (0, 0, 480, 480)
    win = plan_crop(640, 480, (620, 460, 640, 480), 480)
    assert (win.x0, win.y0) == (160, 0)


def test_crop_no_padding_every_pixel_from_source():
    img = coded_image(480, 640)
    mask = np.zeros((480, 640), np.uint8)
    mask[10:20, 600:630] = 1
    out, _ = crop_object_centered(img, mask, compute_bbox(mask), 480)
    assert out.shape == (480, 480, 3)
    ys, xs = np.mgrid[0:480, 0:480]
    expected = img[ys, xs + 160]
    assert np.array_equal(out, expected)


def test_crop_oversized_bbox_resized_nn_oracle():
    rng = np.random.default_rng(0)
    mask = np.zeros((640, 640), np.uint8)
    mask[20:620, 20:620] = rng.choice([1, 2, 3], size=(600, 600))
    mask[20, 20] = 1
    mask[619, 619] = 2
    img = rng.integers(0, 256, (640, 640, 3), dtype=np.uint8)
    bbox = compute_bbox(mask)
    assert bbox == (20, 20, 620, 620)
    out_img, out_mask = crop_object_centered(img, mask, bbox, 480)
    assert out_img.shape == (480, 480, 3) and out_mask.shape == (480, 480)
    assert set(np.unique(out_mask)) <= set(np.unique(mask[20:620, 20:620]))
    # pixel-centre nearest-neighbour oracle using exact rational arithmetic
    for y, x in [(0, 0), (479, 479), (17, 300), (240, 3), (123, 456)]:
        sy = int((Fraction(2 * y + 1, 2) * Fraction(600, 480)))
        sx = int((Fraction(2 * x + 1, 2) * Fraction(600, 480)))
        assert out_mask[y, x] == mask[20 + sy, 20 + sx]


def test_crop_bbox_taller_than_window_only():
    win = plan_crop(640, 640, (300, 10, 310, 600), 480)
    assert win.resize_applied and (win.x0, win.y0, win.width, win.height) == (300, 10, 10, 590)


def test_crop_degenerate_image_smaller_than_window():
    img = coded_image(100, 150)
    mask = np.zeros((100, 150), np.uint8)
    mask[40:60, 100:120] = 2
    out, out_mask = crop_object_centered(img, mask, compute_bbox(mask), 128)
    assert out.shape == (128, 128, 3)
    assert set(np.unique(out_mask)) == {0, 2}


def test_crop_without_bbox_uses_center():
    win = plan_crop(640, 480, None, 480)
    assert (win.x0, win.y0) == (80, 0)


def test_crop_rejects_bad_window():
    with pytest.raises(ValueError):
        plan_crop(64, 64, None, 0)


@settings(max_examples=60, deadline=None)
@given(
    w=st.integers(40, 200),
    h=st.integers(40, 200),
    window=st.sampled_from([32, 64, 96]),
    data=st.data(),
)
def test_crop_geometric_consistency(w, h, window, data):
    x0 = data.draw(st.integers(0, w - 1))
    y0 = data.draw(st.integers(0, h - 1))
    x1 = data.draw(st.integers(x0 + 1, w))
    y1 = data.draw(st.integers(y0 + 1, h))
    rng = np.random.default_rng(w * 1000 + h)
    mask = rng.integers(0, 4, (h, w)).astype(np.uint8)
    win = plan_crop(w, h, (x0, y0, x1, y1), window)
    assert 0 <= win.x0 and win.x0 + win.width <= w
    assert 0 <= win.y0 and win.y0 + win.height <= h
    _, out = crop_object_centered(np.zeros((h, w, 3), np.uint8), mask, (x0, y0, x1, y1), window)
    assert out.shape == (window, window)
    src = mask[win.y0 : win.y0 + win.height, win.x0 : win.x0 + win.width]
    assert set(np.unique(out)) <= set(np.unique(src))
    if not win.resize_applied:
        assert np.array_equal(out, src)
        # bbox fully inside the crop when it fits
        assert win.x0 <= x0 and x1 <= win.x0 + window and win.y0 <= y0 and y1 <= win.y0 + window


# -- resizing -----------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 30), w=st.integers(1, 30), oh=st.integers(1, 40), ow=st.integers(1, 40))
def test_resize_labels_pixel_centre_oracle(h, w, oh, ow):
    mask = np.arange(h * w).reshape(h, w)
    out = resize_labels(mask, ow, oh)
    assert out.shape == (oh, ow)
    for y in range(oh):
        for x in range(ow):
            sy = int(Fraction(2 * y + 1, 2) * Fraction(h, oh))
            sx = int(Fraction(2 * x + 1, 2) * Fraction(w, ow))
            assert out[y, x] == mask[sy, sx]


# -- augmentation -------------------------------------------------------------


class FixedDraw:
    def __init__(self, scale, flip_draw):
        self._u, self._r = scale, flip_draw

    def uniform(self, lo, hi):
        return self._u

    def random(self):
        return self._r


def test_augment_identity_draw():
    img = coded_image(64, 64)
    mask = np.random.default_rng(0).integers(0, 4, (64, 64)).astype(np.uint8)
    out_img, out_mask = augment(img, mask, AugmentationConfig(), FixedDraw(1.0, 0.9))
    assert np.array_equal(out_img, img) and np.array_equal(out_mask, mask)


def test_flip_involution_and_mirror():
    img = coded_image(32, 48)
    mask = np.random.default_rng(1).integers(0, 4, (32, 48)).astype(np.uint8)
    once_img, once = scale_and_flip(img, mask, 1.0, True)
    for x in range(48):
        assert np.array_equal(once[:, x], mask[:, 47 - x])
    twice_img, twice = scale_and_flip(once_img, once, 1.0, True)
    assert np.array_equal(twice, mask) and np.array_equal(twice_img, img)


def scale_crop_oracle(x, y, w, h, scale):
    """Pre-image of output pixel (x, y) after scale + centre-crop, via pixel centres."""
    nw, nh = round(w * scale), round(h * scale)
    ox, oy = (nw - w) // 2, (nh - h) // 2
    sx = int((Fraction(x + ox) + Fraction(1, 2)) * Fraction(w, nw))
    sy = int((Fraction(y + oy) + Fraction(1, 2)) * Fraction(h, nh))
    return sx, sy


def test_scale_single_pixel_location():
    mask = np.zeros((480, 480), np.uint8)
    mask[100, 100] = 1
    _, out = scale_and_flip(np.zeros((480, 480, 3), np.uint8), mask, 1.5, False)
    ys, xs = np.nonzero(out)
    # pixel centre 100.5 scales to 150.75 -> pixel 150, minus the 120 crop offset
    assert list(zip(xs.tolist(), ys.tolist())) == [(30, 30)]
    assert scale_crop_oracle(30, 30, 480, 480, 1.5) == (100, 100)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(1.0, 1.5), flip=st.booleans(), seed=st.integers(0, 1000))
def test_augment_geometric_consistency(scale, flip, seed):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 4, (40, 56)).astype(np.uint8)
    _, out = scale_and_flip(np.zeros((40, 56, 3), np.uint8), mask, scale, flip)
    assert out.shape == mask.shape
    assert set(np.unique(out)) <= set(np.unique(mask))
    for _ in range(30):
        x, y = int(rng.integers(0, 56)), int(rng.integers(0, 40))
        xs = 55 - x if flip else x
        sx, sy = scale_crop_oracle(xs, y, 56, 40, scale)
        assert out[y, x] == mask[sy, sx]


def test_augment_deterministic_given_rng():
    img = coded_image(64, 64)
    mask = np.random.default_rng(2).integers(0, 4, (64, 64)).astype(np.uint8)
    cfg = AugmentationConfig()
    a = augment(img, mask, cfg, sample_rng(3, 1, 5))
    b = augment(img, mask, cfg, sample_rng(3, 1, 5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("kwargs", [{"scale_min": 0.5}, {"scale_min": 2.0, "scale_max": 1.5}, {"hflip_prob": 1.5}])
def test_augmentation_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AugmentationConfig(**kwargs)


# -- manifests ----------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    for name in ("a.png", "a_mask.png"):
        (tmp_path / name).write_bytes(b"")
    m = DatasetManifest(
        [SampleRecord("a.png", "a_mask.png", (1, 2, 3, 4), "val", "cup")], mean=(0.1, 0.2, 0.3), std=(1, 1, 1), root=tmp_path
    )
    assert load_manifest(save_manifest(m, tmp_path / "m.json")) == m


def test_manifest_relocated_paths_stay_valid(tmp_path, fixture_manifest):
    path = save_manifest(fixture_manifest, tmp_path / "sub" / "copy.json")
    loaded = load_manifest(path)
    assert [r.bbox for r in loaded.records] == [r.bbox for r in fixture_manifest.records]
    doc = json.loads(path.read_text())
    assert all(not r["image_path"].startswith("/") for r in doc["records"])
    for a, b in zip(loaded.records, fixture_manifest.records):
        assert loaded.resolve(a.image_path).resolve() == fixture_manifest.resolve(b.image_path).resolve()


def test_manifest_missing_file_named(tmp_path):
    m = DatasetManifest([SampleRecord("images/none.png", "masks/none.png")], root=tmp_path)
    path = save_manifest(m, tmp_path / "m.json")
    with pytest.raises(LoadError, match="none.png"):
        load_manifest(path)
    assert len(load_manifest(path, check_files=False)) == 1


def test_manifest_malformed(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(LoadError):
        load_manifest(tmp_path / "bad.json")
    with pytest.raises(LoadError):
        load_manifest(tmp_path / "absent.json")


def test_record_validation():
    with pytest.raises(ConfigError):
        SampleRecord("a.png", "b.png", split="holdout")
    with pytest.raises(ConfigError):
        SampleRecord("a.png", "b.png", bbox=(5, 5, 5, 9))


# -- synthetic fixtures -------------------------------------------------------


def test_fixture_deterministic_bytes(tmp_path):
    generate_synthetic_fixture(1, 64, 11, tmp_path / "a")
    generate_synthetic_fixture(1, 64, 11, tmp_path / "b")
    for rel in ("images/000000.png", "masks/000000.png", "manifest.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_fixture_every_mask_has_all_classes(fixture_manifest):
    from acanet.data import load_sample

    for i in range(len(fixture_manifest)):
        _, mask = load_sample(fixture_manifest, i)
        assert set(np.unique(mask)) == {0, 1, 2, 3}


def painter_oracle(shapes, size):
    """Per-pixel scalar re-rasterisation: later layers overwrite earlier ones."""
    out = np.zeros((size, size), np.uint8)
    x0, y0, x1, y1 = shapes.container
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    (ax, ay), (bx, by) = shapes.arm_start, shapes.arm_end
    for r in range(size):
        for c in range(size):
            px, py = c + 0.5, r + 0.5

            def inside(inset):
                if shapes.kind == "rectangle":
                    return x0 + inset <= px < x1 - inset and y0 + inset <= py < y1 - inset
                rx, ry = (x1 - x0) / 2 - inset, (y1 - y0) / 2 - inset
                return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1

            label = 0
            if inside(0.0):
                label = 1
            if inside(shapes.contain_inset) and py < shapes.contain_bottom:
                label = 2
            t = ((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / ((bx - ax) ** 2 + (by - ay) ** 2)
            t = min(max(t, 0.0), 1.0)
            qx, qy = ax + t * (bx - ax), ay + t * (by - ay)
            if (px - qx) ** 2 + (py - qy) ** 2 <= shapes.arm_half_width**2:
                label = 3
            out[r, c] = label
    return out


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_fixture_arm_overrides_object(seed):
    _, mask, shapes = render_fixture(np.random.default_rng(seed), 64)
    oracle = painter_oracle(shapes, 64)
    assert np.array_equal(mask, oracle)
    assert np.array_equal(rasterize_fixture(shapes, 64), oracle)
    # the stripe reaches into the container, so some arm pixels sit on object area
    covered = painter_oracle(shapes.__class__(**{**shapes.__dict__, "arm_half_width": 0.0}), 64)
    assert ((mask == 3) & np.isin(covered, [1, 2])).any()


def test_fixture_invalid_arguments(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_fixture(1, 100, 0, tmp_path)
    with pytest.raises(ValueError):
        generate_synthetic_fixture(0, 64, 0, tmp_path)


def test_fixture_splits(fixture_dir):
    assert [split_for_index(i, 20) for i in (0, 13, 14, 16, 17, 19)] == ["train", "train", "val", "val", "test", "test"]
    for split, n in (("train", 7), ("val", 2), ("test", 1)):
        assert len(load_manifest(fixture_dir / f"{split}.json")) == n


# -- torch dataset ------------------------------------------------------------


def test_dataset_items(fixture_manifest):
    ds = AffordanceDataset(fixture_manifest, 32)
    x, y = ds[0]
    assert x.shape == (3, 32, 32) and x.dtype == torch.float32
    assert y.shape == (32, 32) and y.dtype == torch.int64


def test_dataset_augmentation_reproducible(fixture_manifest):
    cfg = AugmentationConfig(seed=5)
    a, b = AffordanceDataset(fixture_manifest, 64, cfg), AffordanceDataset(fixture_manifest, 64, cfg)
    for ds in (a, b):
        ds.set_epoch(3)
    assert all(torch.equal(a[i][0], b[i][0]) and torch.equal(a[i][1], b[i][1]) for i in range(len(a)))
    # order of access does not change the draws
    later = [b[i] for i in reversed(range(len(b)))][::-1]
    assert all(torch.equal(a[i][1], later[i][1]) for i in range(len(a)))


def test_dataset_normalization(fixture_manifest):
    ds = AffordanceDataset(fixture_manifest, 64, mean=(0.5,) * 3, std=(0.25,) * 3)
    raw = np.array(Image.open(fixture_manifest.resolve(fixture_manifest.records[0].image_path)))
    x, _ = ds[0]
    assert torch.allclose(x[:, 0, 0], (torch.tensor(raw[0, 0], dtype=torch.float) / 255 - 0.5) / 0.25)
