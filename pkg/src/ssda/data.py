"""Datasets: synthetic two-domain generator, manifests, batch iteration.

Images are float numpy arrays of shape (H, W, Ch) with values in [0, 1],
stored on disk as 8-bit PNG next to a plain-text manifest so every run is
diffable and inspectable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

IGNORE_LABEL = 255

GLYPHS = ("disk", "square", "triangle", "cross", "ring")

_SPLIT_ID = {"train": 0, "test": 1}

# class-correlated glyph base colors (RGB in [0,1]); shape stays fully
# informative, color is the cue a source-only model is tempted to rely on
GLYPH_COLORS = (
    (0.90, 0.20, 0.20),
    (0.20, 0.85, 0.25),
    (0.25, 0.35, 0.95),
    (0.90, 0.80, 0.15),
    (0.80, 0.25, 0.85),
)


class DataError(Exception):
    """Raised for malformed manifests, bad paths or out-of-range labels."""


class ConfigurationError(Exception):
    """Raised for invalid generation or training configuration."""


def validate_image(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise DataError(f"expected HxWxCh with Ch in (1,3), got {pixels.shape}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DataError("empty image")
    if not np.all(np.isfinite(pixels)):
        raise DataError("non-finite pixel values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError("pixel values outside [0,1]")
    return pixels


@dataclass
class SyntheticShiftSpec:
    image_size: int = 32
    num_classes: int = 4
    samples_per_class: int = 125
    test_samples_per_class: int = 50
    task: str = "classification"  # or "segmentation"
    # default shift: strong enough that source-only models degrade on
    # target while the shape cue stays fully class-informative
    hue_rotation: float = 45.0  # degrees
    noise_sigma: float = 0.05
    blur_radius: float = 0.5
    background_texture: str = "none"  # {"none", "stripes", "checker"}
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.background_texture not in ("none", "stripes", "checker"):
            raise ConfigurationError(
                f"unknown background_texture {self.background_texture!r}")

    @property
    def num_glyph_classes(self) -> int:
        # segmentation reserves class 0 for background
        if self.task == "segmentation":
            return self.num_classes - 1
        return self.num_classes


@dataclass
class DatasetManifest:
    entries: list  # (image_path, label: int | str, domain)
    task: str
    num_classes: int
    split: str
    root: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def domain_counts(self) -> dict:
        counts: dict = {}
        for _, _, dom in self.entries:
            counts[dom] = counts.get(dom, 0) + 1
        return counts


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    """3x3 linear RGB rotation about the gray axis."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    one_third = 1.0 / 3.0
    sq = np.sqrt(one_third)
    m = np.empty((3, 3))
    m[0, 0] = c + (1 - c) * one_third
    m[0, 1] = one_third * (1 - c) - sq * s
    m[0, 2] = one_third * (1 - c) + sq * s
    m[1, 0] = one_third * (1 - c) + sq * s
    m[1, 1] = c + one_third * (1 - c)
    m[1, 2] = one_third * (1 - c) - sq * s
    m[2, 0] = one_third * (1 - c) - sq * s
    m[2, 1] = one_third * (1 - c) + sq * s
    m[2, 2] = c + one_third * (1 - c)
    return m


def _glyph_mask(glyph: str, size: int, cy: float, cx: float, radius: float,
                angle: float) -> np.ndarray:
    """Boolean mask of a glyph rendered on a size x size canvas."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y = yy - cy
    x = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    xr = ca * x - sa * y
    yr = sa * x + ca * y
    if glyph == "disk":
        return x * x + y * y <= radius * radius
    if glyph == "square":
        return (np.abs(xr) <= radius) & (np.abs(yr) <= radius)
    if glyph == "triangle":
        h = radius * 1.3
        return (yr <= h * 0.5) & (yr >= 1.73 * np.abs(xr) - h * 0.5)
    if glyph == "cross":
        arm = radius * 0.45
        return ((np.abs(xr) <= arm) & (np.abs(yr) <= radius)) | \
               ((np.abs(yr) <= arm) & (np.abs(xr) <= radius))
    if glyph == "ring":
        rr = x * x + y * y
        return (rr <= radius * radius) & (rr >= (0.55 * radius) ** 2)
    raise ConfigurationError(f"unknown glyph {glyph!r}")


def _render_scene(spec: SyntheticShiftSpec, class_id: int,
                  rng: np.random.Generator):
    """Render one canonical (source-style) scene.

    Returns (pixels HxWx3 in [0,1], label_map HxW int) where label_map uses
    class 0 for background in segmentation mode.
    """
    size = spec.image_size
    # background: soft diagonal luminance gradient plus low-level texture
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    base = 0.25 + 0.35 * yy + 0.10 * xx
    tex = 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(2.0, 4.0)
                                     + rng.uniform(0, 1)))
    bg = np.clip(base + tex, 0.0, 1.0)
    tint = rng.uniform(0.85, 1.0, size=3)
    pixels = bg[:, :, None] * tint[None, None, :]

    glyph = GLYPHS[class_id % len(GLYPHS)]
    color = np.asarray(GLYPH_COLORS[class_id % len(GLYPH_COLORS)])
    color = np.clip(color + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    radius = rng.uniform(0.22, 0.34) * size
    cy = rng.uniform(radius * 0.9, size - radius * 0.9)
    cx = rng.uniform(radius * 0.9, size - radius * 0.9)
    angle = rng.uniform(-0.25, 0.25)  # small jitter, shapes stay upright
    mask = _glyph_mask(glyph, size, cy, cx, radius, angle)

    pixels = np.where(mask[:, :, None], color[None, None, :], pixels)
    label_map = np.zeros((size, size), dtype=np.int64)
    if spec.task == "segmentation":
        label_map[mask] = class_id + 1  # background is class 0
    return np.clip(pixels, 0.0, 1.0), label_map


def _apply_shift(pixels: np.ndarray, spec: SyntheticShiftSpec,
                 noise_rng: np.random.Generator) -> np.ndarray:
    out = pixels
    if spec.hue_rotation != 0.0:
        m = _hue_rotation_matrix(spec.hue_rotation)
        out = out @ m.T
    if spec.background_texture == "stripes":
        size = out.shape[0]
        yy = np.arange(size)[:, None] + np.zeros((1, out.shape[1]))
        out = out + 0.06 * np.sin(2 * np.pi * yy / 6.0)[:, :, None]
    elif spec.background_texture == "checker":
        yy, xx = np.mgrid[0:out.shape[0], 0:out.shape[1]]
        out = out + 0.06 * (((yy // 4 + xx // 4) % 2) - 0.5)[:, :, None]
    if spec.blur_radius > 0.0:
        out = gaussian_filter(out, sigma=(spec.blur_radius,
                                          spec.blur_radius, 0.0))
    if spec.noise_sigma > 0.0:
        out = out + noise_rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def save_image(pixels: np.ndarray, path: str) -> None:
    arr = np.round(pixels * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path)


def load_image(path: str) -> np.ndarray:
    arr = np.asarray(PILImage.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_label_map(label_map: np.ndarray, path: str) -> None:
    PILImage.fromarray(label_map.astype(np.uint8)).save(path)


def load_label_map(path: str) -> np.ndarray:
    return np.asarray(PILImage.open(path), dtype=np.int64)


def manifest_path(root: str, domain: str, split: str) -> str:
    return os.path.join(root, f"manifest_{domain}_{split}.csv")


def generate_synthetic_pair(spec: SyntheticShiftSpec, out_dir: str):
    """Render the paired two-domain dataset under out_dir.

    Source and target scenes are paired: sample i of both domains renders
    the same underlying scene; the target copy additionally gets the spec's
    shift. Returns (source_train_manifest, target_train_manifest); the test
    manifests are written alongside and reachable via manifest_path().
    """
    spec.validate()
    splits = {"train": spec.samples_per_class,
              "test": spec.test_samples_per_class}
    manifests = {}
    for domain in ("source", "target"):
        for split in splits:
            os.makedirs(os.path.join(out_dir, domain, split, "images"),
                        exist_ok=True)
            if spec.task == "segmentation":
                os.makedirs(os.path.join(out_dir, domain, split, "labels"),
                            exist_ok=True)

    for split, per_class in splits.items():
        entries = {"source": [], "target": []}
        idx = 0
        for class_id in range(spec.num_glyph_classes):
            for k in range(per_class):
                scene_seed = np.random.SeedSequence(
                    [spec.seed, _SPLIT_ID[split], class_id, k])
                noise_seed = np.random.SeedSequence(
                    [spec.seed + 1, _SPLIT_ID[split], class_id, k])
                pixels, label_map = _render_scene(
                    spec, class_id, np.random.default_rng(scene_seed))
                shifted = _apply_shift(pixels, spec,
                                       np.random.default_rng(noise_seed))
                for domain, img in (("source", pixels), ("target", shifted)):
                    rel_img = os.path.join(domain, split, "images",
                                           f"{idx:05d}.png")
                    save_image(img, os.path.join(out_dir, rel_img))
                    if spec.task == "segmentation":
                        rel_lab = os.path.join(domain, split, "labels",
                                               f"{idx:05d}.png")
                        save_label_map(label_map,
                                       os.path.join(out_dir, rel_lab))
                        entries[domain].append((rel_img, rel_lab, domain))
                    else:
                        entries[domain].append((rel_img, class_id, domain))
                idx += 1
        for domain in ("source", "target"):
            path = manifest_path(out_dir, domain, split)
            write_manifest(DatasetManifest(entries[domain], spec.task,
                                           spec.num_classes, split, out_dir),
                           path)
        if split == "train":
            manifests = {d: DatasetManifest(entries[d], spec.task,
                                            spec.num_classes, split, out_dir)
                         for d in ("source", "target")}
    return manifests["source"], manifests["target"]


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{manifest.task},{manifest.num_classes}\n")
        for img, label, domain in manifest.entries:
            f.write(f"{img},{label},{domain}\n")


def load_manifest(path: str, split: str = "train") -> DatasetManifest:
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise DataError("empty manifest")
    header = lines[0].split(",")
    if len(header) != 2:
        raise DataError(f"malformed header: {lines[0]!r}")
    task = header[0]
    if task not in ("classification", "segmentation"):
        raise DataError(f"unknown task {task!r}")
    try:
        num_classes = int(header[1])
    except ValueError as e:
        raise DataError(f"malformed num_classes: {header[1]!r}") from e
    entries = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise DataError(f"malformed row: {ln!r}")
        img, label, domain = parts
        if domain not in ("source", "target"):
            raise DataError(f"unknown domain {domain!r} in row {ln!r}")
        if not os.path.isfile(os.path.join(root, img)):
            raise DataError(f"image path does not resolve: {img}")
        if task == "classification":
            try:
                label = int(label)
            except ValueError as e:
                raise DataError(f"malformed class id: {label!r}") from e
            if not 0 <= label < num_classes:
                raise DataError(
                    f"label out of range: {label} (num_classes={num_classes})")
        else:
            if not os.path.isfile(os.path.join(root, label)):
                raise DataError(f"label path does not resolve: {label}")
        entries.append((img, label, domain))
    if not entries:
        raise DataError("empty manifest")
    return DatasetManifest(entries, task, num_classes, split, root)


class ManifestDataset:
    """Lazy image/label access over a manifest with label-read accounting.

    `label_reads` counts how many times ground-truth labels were touched;
    the taint guarantee test asserts it stays zero for target-domain data
    in every adaptation mode.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.label_reads = 0
        self._img_cache: dict = {}
        self._lab_cache: dict = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def image(self, i: int) -> np.ndarray:
        if i not in self._img_cache:
            rel, _, _ = self.manifest.entries[i]
            self._img_cache[i] = validate_image(
                load_image(os.path.join(self.manifest.root, rel)))
        return self._img_cache[i]

    def label(self, i: int):
        self.label_reads += 1
        _, label, _ = self.manifest.entries[i]
        if self.manifest.task == "classification":
            return int(label)
        if i not in self._lab_cache:
            self._lab_cache[i] = load_label_map(
                os.path.join(self.manifest.root, label))
        return self._lab_cache[i]

    def domain(self, i: int) -> str:
        return self.manifest.entries[i][2]


def batch_iterator(n: int, batch_size: int, seed: int, cycle: bool = False):
    """Yield index arrays; shuffled per (seed, epoch), optionally cycling.

    With cycle=True the iterator reshuffles and restarts forever so streams
    of unequal length can be consumed in lock-step.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if not cycle and batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch = 0
    buf: list = []
    while True:
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch])).permutation(n)
        if cycle:
            buf.extend(order.tolist())
            while len(buf) >= batch_size:
                yield np.asarray(buf[:batch_size])
                buf = buf[batch_size:]
        else:
            for start in range(0, n - batch_size + 1, batch_size):
                yield order[start:start + batch_size]
            rem = n % batch_size
            if rem:
                yield order[n - rem:]
            return
        epoch += 1
