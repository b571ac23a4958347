"""Textured Multi-dSprites: saturated sprites over shifted sinusoidal gratings.

Everything is a pure function of (config, seed). Images are float arrays in
[-1, 1] with shape (H, W, 3); masks are boolean (H, W).
"""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig
from .errors import GenerationError, IngestionError

MANIFEST_VERSION = 1
SHAPES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class Texture:
    frequency: float  # cycles per image width
    orientation: float  # radians
    phase: float

    def evaluate(self, x, y, shift=0.0):
        """Grating value at normalized coordinates (x, y) in [0, 1)."""
        u = x * np.cos(self.orientation) + y * np.sin(self.orientation)
        return np.sin(2 * np.pi * self.frequency * u + self.phase + shift)

    def render(self, size, shift=0.0):
        coords = np.arange(size) / size
        y, x = np.meshgrid(coords, coords, indexing="ij")
        return self.evaluate(x, y, shift)


@dataclass
class TextureBank:
    textures: list
    seed: int

    def __len__(self):
        return len(self.textures)

    def __getitem__(self, i):
        return self.textures[i]


def make_texture_bank(n=20, seed=0, freq_range=(2.0, 8.0)):
    """``n`` gratings with distinct (frequency, orientation) pairs."""
    if n < 1:
        raise ValueError("texture bank needs n >= 1")
    rng = np.random.default_rng(seed)
    textures, seen = [], set()
    while len(textures) < n:
        f = float(rng.uniform(*freq_range))
        theta = float(rng.uniform(0.0, np.pi))
        key = (round(f, 6), round(theta, 6))
        if key in seen:
            continue
        seen.add(key)
        textures.append(Texture(f, theta, float(rng.uniform(0.0, 2 * np.pi))))
    return TextureBank(textures, seed)


@dataclass
class SpriteSpec:
    shape: str
    color: tuple  # RGB in [-1, 1]
    center: tuple  # (x, y) in pixels
    scale: float  # fraction of the image width

    def support(self, size):
        """Hard-edged boolean footprint sampled at pixel centers."""
        ys, xs = np.mgrid[0:size, 0:size] + 0.5
        cx, cy = self.center
        half = 0.5 * self.scale * size
        if self.shape == "square":
            return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
        if self.shape == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
        # equilateral triangle with side scale*size, pointing up, centered on its bbox
        h = np.sqrt(3) * half
        top, bottom = cy - h / 2, cy + h / 2
        rel = (ys - top) / h  # 0 at apex, 1 at base
        return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= half * rel)

    def to_dict(self):
        return {"shape": self.shape, "color": list(self.color), "center": list(self.center),
                "scale": self.scale}


@dataclass
class SceneSample:
    image: np.ndarray
    gt_mask: np.ndarray
    sprites: list = field(default_factory=list)
    texture_id: int = 0
    seed: int = 0


def _saturated_color(rng):
    r, g, b = colorsys.hsv_to_rgb(float(rng.uniform()), 1.0, 1.0)
    return (2 * r - 1, 2 * g - 1, 2 * b - 1)


def sample_scene(config: DataConfig, seed, bank: TextureBank | None = None) -> SceneSample:
    """One scene: a randomly shifted texture with 2-3 non-overlapping sprites on top."""
    if bank is None:
        bank = make_texture_bank(config.n_textures, config.texture_bank_seed, config.freq_range)
    size = config.resolution
    rng = np.random.default_rng(seed)
    texture_id = int(rng.integers(len(bank)))
    shift = float(rng.uniform(0.0, 2 * np.pi))
    lo, hi = config.sprite_count_range
    n_sprites = int(rng.integers(lo, hi + 1))

    sprites, mask = [], np.zeros((size, size), dtype=bool)
    tries = 0
    while len(sprites) < n_sprites:
        if tries >= config.max_tries:
            raise GenerationError(
                f"could not place {n_sprites} non-overlapping sprites in {config.max_tries} tries (seed {seed})"
            )
        tries += 1
        scale = float(rng.uniform(*config.scale_range))
        half = 0.5 * scale * size
        cx = float(rng.uniform(half, size - half))
        cy = float(rng.uniform(half, size - half))
        sprite = SpriteSpec(SHAPES[int(rng.integers(3))], _saturated_color(rng), (cx, cy), scale)
        support = sprite.support(size)
        if not support.any() or (support & mask).any():
            continue
        sprites.append(sprite)
        mask |= support

    image = np.repeat(bank[texture_id].render(size, shift)[..., None], 3, axis=-1)
    for sprite in sprites:
        image[sprite.support(size)] = sprite.color
    return SceneSample(image, mask, sprites, texture_id, int(seed))


def scene_seed(run_seed, index):
    """Independent per-index seed derived from (run seed, index)."""
    return int(np.random.SeedSequence(run_seed, spawn_key=(index,)).generate_state(1)[0])


def quantize(image):
    """[-1, 1] float image -> uint8."""
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def dequantize(pixels):
    return pixels.astype(np.float64) / 127.5 - 1.0


def write_dataset(n_samples, out_dir, config: DataConfig, seed=0):
    """Write images/, masks/ and manifest.json; returns the manifest dict.

    The manifest is written last, so a failed run never leaves one behind.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    bank = make_texture_bank(config.n_textures, config.texture_bank_seed, config.freq_range)
    files = []
    for i in range(n_samples):
        s = scene_seed(seed, i)
        scene = sample_scene(config, s, bank)
        name = f"{i:05d}.png"
        _save_png(out / "images" / name, quantize(scene.image))
        _save_png(out / "masks" / name, scene.gt_mask.astype(np.uint8) * 255)
        files.append({"image": f"images/{name}", "mask": f"masks/{name}", "seed": s})
    manifest = {
        "version": MANIFEST_VERSION,
        "n": n_samples,
        "resolution": config.resolution,
        "sprite_count_range": list(config.sprite_count_range),
        "texture_bank_seed": config.texture_bank_seed,
        "seed": seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(config).items()},
        "files": files,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, out / "manifest.json")
    return manifest


def _save_png(path, array):
    # fixed encoder settings and no metadata keep files byte-identical across runs
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


class ImageFolderDataset:
    """Images (and optional masks) loaded into memory as arrays.

    ``images`` is float32 (N, 3, S, S) in [-1, 1]; ``masks`` is bool (N, S, S)
    or None when the folder has no masks.
    """

    def __init__(self, images, masks, names, root=None):
        self.images = images
        self.masks = masks
        self.names = names
        self.root = root

    @property
    def has_masks(self):
        return self.masks is not None

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.images[i], (None if self.masks is None else self.masks[i])


def _center_crop_resize(img: Image.Image, size, resample):
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), resample)
    return img


def ingest_folder(root, size=None) -> ImageFolderDataset:
    """Load a dataset folder laid out as written by :func:`write_dataset`.

    ``manifest.json`` is optional; without it every PNG/JPEG under images/
    is used in sorted order. Masks are optional as a whole.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
            entries = [(f["image"], f.get("mask")) for f in manifest["files"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"malformed manifest.json in {root}: {exc}", manifest_path) from exc
        if size is None:
            size = manifest.get("resolution")
    else:
        image_dir = root / "images"
        if not image_dir.is_dir():
            raise IngestionError(f"{root} has neither manifest.json nor an images/ folder", root)
        names = sorted(p.name for p in image_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        mask_dir = root / "masks"
        entries = [(f"images/{n}", f"masks/{Path(n).stem}.png" if mask_dir.is_dir() else None)
                   for n in names]

    has_masks = bool(entries) and all(m is not None and (root / m).exists() for _, m in entries)
    images, masks, names = [], [], []
    for image_rel, mask_rel in entries:
        path = root / image_rel
        if not path.exists():
            raise IngestionError(f"missing image file {path}", path)
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is None:
                size = min(im.size)
            im = _center_crop_resize(im, size, Image.BILINEAR)
            images.append(dequantize(np.asarray(im)).transpose(2, 0, 1))
        if has_masks:
            with Image.open(root / mask_rel) as m:
                m = _center_crop_resize(m.convert("L"), size, Image.NEAREST)
                masks.append(np.asarray(m) > 127)
        names.append(Path(image_rel).stem)
    imgs = np.stack(images).astype(np.float32) if images else np.zeros((0, 3, size or 1, size or 1), np.float32)
    return ImageFolderDataset(imgs, np.stack(masks) if has_masks and masks else None, names, root)
