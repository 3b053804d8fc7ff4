"""Self-supervised sample creation: crop-then-rotate and spatial variants.

All rotations are exact 90-degree index permutations (no interpolation), so
pixel sums and histograms are invariant and pretext labels derive purely
from applied transforms, never from annotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigurationError, DatasetManifest, ManifestDataset


class PretextError(Exception):
    pass


@dataclass
class PretextConfig:
    mode: str = "Rot"  # {"Rot", "MixRot", "SPRot"}
    crop_size: int = 16
    expand_all_rotations: bool = True

    def validate(self) -> None:
        if self.mode not in ("Rot", "MixRot", "SPRot"):
            raise ConfigurationError(f"unknown pretext mode {self.mode!r}")
        if self.crop_size < 8:
            raise ConfigurationError("crop_size must be >= 8")

    @property
    def num_labels(self) -> int:
        return 16 if self.mode == "SPRot" else 4


@dataclass
class PretextSample:
    patch: np.ndarray  # square, rotated
    label: int  # r, or 4*q + r for SPRot
    region_q: int | None
    domain: str


def rotate90(img: np.ndarray, r: int) -> np.ndarray:
    """Rotate by r*90 degrees counter-clockwise; exact index permutation."""
    if not 0 <= r <= 3:
        raise PretextError(f"rotation id {r} outside [0,3]")
    if r % 2 == 1 and img.shape[0] != img.shape[1]:
        raise PretextError("odd rotations require a square image")
    return np.ascontiguousarray(np.rot90(img, k=r, axes=(0, 1)))


def crop_random(img: np.ndarray, size: int, rng: np.random.Generator
                ) -> np.ndarray:
    h, w = img.shape[:2]
    if size > min(h, w):
        raise PretextError(f"crop size {size} exceeds image dims {(h, w)}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size]


def split_quadrants(img: np.ndarray) -> list:
    """Quadrants in fixed order: 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right. Odd dims floor-split; the remainder row/column goes to
    the lower/right quadrants."""
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise PretextError("image too small to split")
    hh, hw = h // 2, w // 2
    return [img[:hh, :hw], img[:hh, hw:], img[hh:, :hw], img[hh:, hw:]]


def make_pretext_samples(img: np.ndarray, domain: str, cfg: PretextConfig,
                         rng: np.random.Generator) -> list:
    cfg.validate()
    samples = []
    if cfg.mode in ("Rot", "MixRot"):
        crop = crop_random(img, cfg.crop_size, rng)
        if cfg.expand_all_rotations:
            for r in range(4):
                samples.append(PretextSample(rotate90(crop, r), r, None,
                                             domain))
        else:
            r = int(rng.integers(0, 4))
            samples.append(PretextSample(rotate90(crop, r), r, None, domain))
    else:  # SPRot
        for q, region in enumerate(split_quadrants(img)):
            crop = crop_random(region, cfg.crop_size, rng)
            if cfg.expand_all_rotations:
                for r in range(4):
                    samples.append(PretextSample(rotate90(crop, r),
                                                 4 * q + r, q, domain))
            else:
                r = int(rng.integers(0, 4))
                samples.append(PretextSample(rotate90(crop, r), 4 * q + r,
                                             q, domain))
    return samples


class PretextPool:
    """Image pool the pretext stream draws from.

    Rot/SPRot use target images only; MixRot interleaves source and target.
    Sampling is deterministic given (manifests, cfg, seed): image order and
    crop positions come from rng streams derived from the seed.
    """

    def __init__(self, target: DatasetManifest,
                 source: DatasetManifest | None, cfg: PretextConfig,
                 seed: int):
        cfg.validate()
        if cfg.mode == "MixRot" and source is None:
            raise ConfigurationError("MixRot requires a source manifest")
        self.cfg = cfg
        self.seed = seed
        self._datasets = [ManifestDataset(target)]
        self._index = [(0, i) for i in range(len(target))]
        if cfg.mode == "MixRot":
            self._datasets.append(ManifestDataset(source))
            self._index += [(1, i) for i in range(len(source))]

    def __len__(self) -> int:
        return len(self._index)

    def materialize(self) -> list:
        """Expand every pooled image once, in pool order (for inspection
        and counting tests; training uses sample_batches)."""
        out = []
        for k, (ds_i, img_i) in enumerate(self._index):
            ds = self._datasets[ds_i]
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 0, k]))
            out.extend(make_pretext_samples(ds.image(img_i),
                                            ds.domain(img_i), self.cfg, rng))
        return out

    def sample_batches(self, images_per_batch: int):
        """Infinite deterministic stream of pretext-sample batches, one
        shuffled epoch of pooled images at a time."""
        n = len(self._index)
        epoch = 0
        while True:
            order = np.random.default_rng(
                np.random.SeedSequence([self.seed, 1, epoch])).permutation(n)
            for start in range(0, n - images_per_batch + 1, images_per_batch):
                batch = []
                for k in order[start:start + images_per_batch]:
                    ds_i, img_i = self._index[k]
                    ds = self._datasets[ds_i]
                    rng = np.random.default_rng(
                        np.random.SeedSequence([self.seed, 2, epoch, int(k)]))
                    batch.extend(make_pretext_samples(
                        ds.image(img_i), ds.domain(img_i), self.cfg, rng))
                yield batch
            epoch += 1


def build_pretext_pool(target: DatasetManifest,
                       source: DatasetManifest | None,
                       cfg: PretextConfig, seed: int) -> PretextPool:
    return PretextPool(target, source, cfg, seed)
