"""Dataset forging: chroma keying, compositing, augmentation and samplers.

Egocentric training data is manufactured by keying green-screen captures
and compositing the foreground over background plates; exocentric data
comes from COCO-style annotations with pre-rasterized masks.  A synthetic
ellipse ("blob") generator provides a desk-scale stand-in for both.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import imaging


@dataclass
class Sample:
    """One training/eval item: image in [0,1], binary mask, origin tag."""

    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    mask: np.ndarray             # (H, W) uint8 in {0, 1}
    origin: str = "exo"          # "ego" | "exo"
    meta: dict | None = None     # optional: height_m, orientation_deg

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape[1:]} and mask {self.mask.shape} dims differ")
        if self.origin not in ("ego", "exo"):
            raise ValueError(f"origin must be 'ego' or 'exo', got {self.origin!r}")


@dataclass(frozen=True)
class ChromaConfig:
    """Green-screen keying thresholds (HSV)."""

    hue_min: float = 75.0
    hue_max: float = 165.0
    min_saturation: float = 0.3
    min_value: float = 0.15

    def __post_init__(self):
        if not (0.0 <= self.hue_min <= 360.0 and 0.0 <= self.hue_max <= 360.0):
            raise ValueError("hue bounds must lie in [0, 360]")
        if self.hue_min == self.hue_max:
            raise ValueError("hue window is empty")


def chroma_key(image, cfg: ChromaConfig = ChromaConfig()):
    """Non-keyable pixels are foreground: 1 = person, 0 = keyed background."""
    hsv = imaging.rgb_to_hsv(image)
    hue = hsv[0] * 360.0
    if cfg.hue_min <= cfg.hue_max:
        in_window = (hue >= cfg.hue_min) & (hue <= cfg.hue_max)
    else:  # window wraps through 0
        in_window = (hue >= cfg.hue_min) | (hue <= cfg.hue_max)
    keyed = in_window & (hsv[1] >= cfg.min_saturation) & (hsv[2] >= cfg.min_value)
    return (~keyed).astype(np.uint8)


def composite(foreground, mask, background):
    """Per-pixel selection: mask*fg + (1-mask)*bg."""
    if foreground.shape != background.shape:
        raise ValueError(
            f"foreground {foreground.shape} and background {background.shape} differ")
    if foreground.shape[1:] != mask.shape:
        raise ValueError(
            f"mask {mask.shape} does not match image dims {foreground.shape[1:]}")
    m = mask.astype(foreground.dtype)[None]
    return m * foreground + (1.0 - m) * background


# ------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for the photometric and geometric transforms.

    A None range disables the transform.  There is deliberately no
    vertical flip: the capture rig is head-worn, so upside-down bodies
    never occur.  Rotation is hard-bounded to +/-30 degrees and scaling
    to +/-10%.
    """

    brightness: float | None = 0.2             # additive delta in +/- range
    saturation: float | None = 0.2             # multiplicative, 1 +/- range
    hue_deg: float | None = 10.0               # hue rotation in +/- degrees
    contrast: tuple[float, float] | None = (0.8, 1.25)
    noise_sigma: float | None = 0.03           # gaussian, on [0,1] intensities
    hflip_prob: float = 0.5
    scale_range: tuple[float, float] | None = (0.9, 1.1)
    rotation_deg: tuple[float, float] | None = (-30.0, 30.0)

    def __post_init__(self):
        if self.rotation_deg is not None:
            lo, hi = self.rotation_deg
            if lo < -30.0 or hi > 30.0 or lo > hi:
                raise ValueError(f"rotation range {self.rotation_deg} outside [-30, 30]")
        if self.scale_range is not None:
            lo, hi = self.scale_range
            if lo < 0.9 or hi > 1.1 or lo > hi:
                raise ValueError(f"scale range {self.scale_range} outside [0.9, 1.1]")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be a probability")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw from an AugmentConfig."""

    brightness: float = 0.0
    saturation: float = 1.0
    hue_deg: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    hflip: bool = False
    scale: float = 1.0
    rotation_deg: float = 0.0


def draw_augment_params(cfg: AugmentConfig, rng) -> AugmentParams:
    """Fixed draw order so a seeded rng reproduces the exact transform."""
    br = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness else 0.0
    sat = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation) if cfg.saturation else 1.0
    hue = rng.uniform(-cfg.hue_deg, cfg.hue_deg) if cfg.hue_deg else 0.0
    con = rng.uniform(*cfg.contrast) if cfg.contrast else 1.0
    sigma, seed = 0.0, 0
    if cfg.noise_sigma:
        sigma = cfg.noise_sigma
        seed = int(rng.integers(0, 2 ** 63))
    flip = bool(rng.uniform() < cfg.hflip_prob) if cfg.hflip_prob > 0 else False
    scale = rng.uniform(*cfg.scale_range) if cfg.scale_range else 1.0
    rot = rng.uniform(*cfg.rotation_deg) if cfg.rotation_deg else 0.0
    return AugmentParams(br, sat, hue, con, sigma, seed, flip, scale, rot)


def _apply_photometric(img, p: AugmentParams):
    out = img.astype(np.float32)
    if p.brightness:
        out = out + p.brightness
    if p.saturation != 1.0:
        luma = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = luma[None] + p.saturation * (out - luma[None])
    if p.hue_deg:
        hsv = imaging.rgb_to_hsv(out.clip(0.0, 1.0))
        hsv[0] = (hsv[0] + p.hue_deg / 360.0) % 1.0
        out = imaging.hsv_to_rgb(hsv).astype(np.float32)
    if p.contrast != 1.0:
        out = (out - 0.5) * p.contrast + 0.5
    if p.noise_sigma:
        noise_rng = np.random.default_rng(p.noise_seed)
        out = out + noise_rng.normal(0.0, p.noise_sigma, out.shape).astype(np.float32)
    return out.clip(0.0, 1.0)


def _geometry_matrix(h, w, p: AugmentParams):
    # inverse map: output pixel -> source pixel, rotation+scale about center
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(p.rotation_deg)
    c, s = math.cos(th) / p.scale, math.sin(th) / p.scale
    return np.array([
        [c, -s, cx - c * cx + s * cy],
        [s, c, cy - s * cx - c * cy],
    ])


def apply_augment(sample: Sample, p: AugmentParams) -> Sample:
    """Photometric ops on the image, geometric ops on image and mask alike."""
    img = _apply_photometric(sample.image, p)
    mask = sample.mask
    if p.hflip:
        img = img[:, :, ::-1]
        mask = mask[:, ::-1]
    if p.scale != 1.0 or p.rotation_deg != 0.0:
        h, w = mask.shape
        m = _geometry_matrix(h, w, p)
        sx, sy = imaging.affine_sample_coords(h, w, m)
        img = imaging.bilinear_sample(np.ascontiguousarray(img), sx, sy)
        mask = imaging.nearest_sample(mask[None].astype(np.float32), sx, sy)[0]
        mask = (mask > 0.5).astype(np.uint8)
    return Sample(np.ascontiguousarray(img, dtype=np.float32),
                  np.ascontiguousarray(mask, dtype=np.uint8),
                  sample.origin, sample.meta)


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    return apply_augment(sample, draw_augment_params(cfg, rng))


# ----------------------------------------------------------- COCO filtering

def coco_body_filter(annotation_file) -> list[dict]:
    """Image records with at least one person annotation, ascending by id."""
    with open(annotation_file) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{annotation_file}: not valid JSON ({e})") from None
    for key in ("images", "annotations"):
        if key not in doc or not isinstance(doc[key], list):
            raise ValueError(f"{annotation_file}: missing or non-list '{key}' section")

    person_id = 1
    for i, cat in enumerate(doc.get("categories", [])):
        if not isinstance(cat, dict) or "id" not in cat:
            raise ValueError(f"{annotation_file}: categories[{i}] missing 'id'")
        if cat.get("name") == "person":
            person_id = cat["id"]

    keep = set()
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict) or "image_id" not in ann or "category_id" not in ann:
            raise ValueError(
                f"{annotation_file}: annotations[{i}] missing image_id/category_id")
        if ann["category_id"] == person_id:
            keep.add(ann["image_id"])

    records = []
    for i, img in enumerate(doc["images"]):
        if not isinstance(img, dict) or "id" not in img:
            raise ValueError(f"{annotation_file}: images[{i}] missing 'id'")
        if img["id"] in keep:
            records.append(img)
    records.sort(key=lambda r: r["id"])
    return records


def balanced_sampler(ego_set, exo_set, rng):
    """All ego samples plus an equal-count random exo subset, shuffled."""
    if len(exo_set) < len(ego_set):
        raise ValueError(
            f"cannot balance: {len(exo_set)} exo samples < {len(ego_set)} ego samples")
    pick = rng.choice(len(exo_set), size=len(ego_set), replace=False)
    merged = list(ego_set) + [exo_set[i] for i in pick]
    order = rng.permutation(len(merged))
    return [merged[i] for i in order]


# ------------------------------------------------------------- toy dataset

@dataclass
class ToyDataset:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)


def _ellipse_mask(h, w, cx, cy, a, b):
    # analytic half-plane test per pixel center
    ys, xs = np.mgrid[0:h, 0:w]
    return (((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2) <= 1.0


def _blob_sample(rng, size, variant) -> Sample:
    if size < 16:
        raise ValueError(f"blob frames need at least 16 px, got {size}")
    h = w = size
    # dull textured background: grayish base + linear ramp + noise
    base = rng.uniform(0.25, 0.55)
    bg = np.full((3, h, w), base, dtype=np.float32)
    bg += rng.uniform(-0.05, 0.05, size=3).astype(np.float32)[:, None, None]
    ramp = np.linspace(-0.08, 0.08, w, dtype=np.float32)
    if rng.uniform() < 0.5:
        bg += ramp[None, None, :]
    else:
        bg += ramp[None, :, None]

    mask = np.zeros((h, w), dtype=bool)
    img = bg
    for _ in range(int(rng.integers(1, 4))):
        # semi-axes scale with the frame: 6..16 px at the default 64
        a = rng.uniform(size * 3.0 / 32.0, size * 8.0 / 32.0)
        b = rng.uniform(size * 3.0 / 32.0, size * 8.0 / 32.0)
        cx = rng.uniform(a, w - 1 - a)
        if variant == "ego":
            # anchor to the bottom edge: the ellipse always crosses the last row
            cy = rng.uniform(h - 1 - b / 2.0, h - 1)
        else:
            cy = rng.uniform(b, h - 1 - b)
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.6, 1.0)
        val = rng.uniform(0.6, 1.0)
        color = imaging.hsv_to_rgb(
            np.array([[[hue]], [[sat]], [[val]]], dtype=np.float64))[:, 0, 0]
        m = _ellipse_mask(h, w, cx, cy, a, b)
        img = np.where(m[None], color[:, None, None].astype(np.float32), img)
        mask |= m
    img = img + rng.normal(0.0, 0.02, img.shape).astype(np.float32)
    return Sample(img.clip(0.0, 1.0).astype(np.float32),
                  mask.astype(np.uint8), origin=variant)


def synth_blobs(n_train, n_val, rng, size=64, variant="exo") -> ToyDataset:
    """Synthetic ellipse dataset.  'ego' blobs anchor to the bottom edge."""
    if n_train < 1 or n_val < 1:
        raise ValueError("need at least one train and one val sample")
    if variant not in ("ego", "exo"):
        raise ValueError(f"variant must be 'ego' or 'exo', got {variant!r}")
    ds = ToyDataset()
    ds.train = [_blob_sample(rng, size, variant) for _ in range(n_train)]
    ds.val = [_blob_sample(rng, size, variant) for _ in range(n_val)]
    return ds


# -------------------------------------------------------------- directory IO

def _img_to_u8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img):
    """(3,H,W) float [0,1] -> 8-bit RGB PNG."""
    Image.fromarray(_img_to_u8(img).transpose(1, 2, 0), "RGB").save(path)


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_mask(path, mask):
    """(H,W) {0,1} -> 8-bit gray PNG with values 0/255."""
    Image.fromarray((mask.astype(np.uint8) * 255), "L").save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def save_samples(root, split, samples):
    """Standard layout: <root>/<split>/<id>_img.png + <id>_mask.png (+ meta)."""
    out = os.path.join(root, split)
    os.makedirs(out, exist_ok=True)
    for i, s in enumerate(samples):
        sid = f"{i:05d}"
        save_image(os.path.join(out, f"{sid}_img.png"), s.image)
        save_mask(os.path.join(out, f"{sid}_mask.png"), s.mask)
        if s.meta:
            with open(os.path.join(out, f"{sid}_meta.txt"), "w") as f:
                if "height_m" in s.meta:
                    f.write(f"height_m {s.meta['height_m']}\n")
                if "orientation_deg" in s.meta:
                    y, p, r = s.meta["orientation_deg"]
                    f.write(f"orientation_deg {y} {p} {r}\n")


def _load_meta(path):
    meta = {}
    with open(path) as f:
        for line in f:
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "height_m":
                meta["height_m"] = float(fields[1])
            elif fields[0] == "orientation_deg":
                meta["orientation_deg"] = tuple(float(v) for v in fields[1:4])
    return meta or None


def load_loose_images(src) -> list[tuple[np.ndarray, dict | None]]:
    """Every PNG in a directory plus its optional <name>_meta.txt."""
    names = sorted(n for n in os.listdir(src) if n.lower().endswith(".png"))
    if not names:
        raise ValueError(f"{src}: no .png files found")
    out = []
    for name in names:
        img = load_image(os.path.join(src, name))
        meta_path = os.path.join(src, os.path.splitext(name)[0] + "_meta.txt")
        meta = _load_meta(meta_path) if os.path.exists(meta_path) else None
        out.append((img, meta))
    return out


def pair_background(fg_meta, bg_metas, fallback_index):
    """Background index for a foreground: nearest recorded head orientation
    when both sides carry meta, round-robin otherwise."""
    if fg_meta and fg_meta.get("orientation_deg"):
        fo = np.array(fg_meta["orientation_deg"])
        best, best_d = None, None
        for i, meta in enumerate(bg_metas):
            if not meta or not meta.get("orientation_deg"):
                continue
            d = float(np.linalg.norm(fo - np.array(meta["orientation_deg"])))
            if best_d is None or d < best_d:
                best, best_d = i, d
        if best is not None:
            return best
    return fallback_index % len(bg_metas)


def load_samples(root, split, origin="exo") -> list[Sample]:
    src = os.path.join(root, split)
    ids = sorted(m.group(1) for m in
                 (re.match(r"(.+)_img\.png$", n) for n in os.listdir(src)) if m)
    if not ids:
        raise ValueError(f"{src}: no <id>_img.png files found")
    samples = []
    for sid in ids:
        img = load_image(os.path.join(src, f"{sid}_img.png"))
        mask_path = os.path.join(src, f"{sid}_mask.png")
        if not os.path.exists(mask_path):
            raise ValueError(f"{src}: {sid}_img.png has no matching {sid}_mask.png")
        mask = load_mask(mask_path)
        meta_path = os.path.join(src, f"{sid}_meta.txt")
        meta = _load_meta(meta_path) if os.path.exists(meta_path) else None
        samples.append(Sample(img, mask, origin, meta))
    return samples
