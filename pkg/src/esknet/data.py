"""Dataset indexing, fold partitioning, resizing, augmentation, degradation,
and the synthetic ellipse generator used for desk-scale runs.

On-disk layout: ``<root>/images/<id>.png`` holds 8-bit grayscale images and
``<root>/masks/<id>.png`` the matching masks (foreground = pixel value of at
least 128). In memory both are 1,H,W float32 arrays, the image in [0, 1] and
the mask strictly binary; every pipeline stage keeps the mask binary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage


class DataError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray       # 1,H,W float32 in [0,1]
    mask: np.ndarray        # 1,H,W float32 in {0,1}
    provenance: str = "original"

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} "
                            f"shapes differ for {self.id!r}")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"samples are 1,H,W; got {self.image.shape} for {self.id!r}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"mask for {self.id!r} is not binary")


@dataclass
class DatasetIndex:
    records: Dict[str, SampleRecord]
    folds: List[List[str]]
    validation_fraction: float = 0.2

    def __post_init__(self):
        covered = [i for fold in self.folds for i in fold]
        if sorted(covered) != sorted(self.records):
            raise DataError("folds must partition the record ids exactly")

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_ids(self, fold: int) -> List[str]:
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> List[str]:
        return [i for f, ids in enumerate(self.folds) if f != fold for i in ids]

    def manifest_text(self) -> str:
        """Plain-text audit manifest: id and fold per record."""
        lines = ["id\tfold"]
        for fold, ids in enumerate(self.folds):
            for i in ids:
                lines.append(f"{i}\t{fold}")
        return "\n".join(lines) + "\n"


def partition_folds(ids: Sequence[str], k: int, rng: np.random.Generator) -> List[List[str]]:
    """Deterministic shuffled k-way partition; fold sizes differ by at most
    one, larger folds first."""
    if k < 1 or k > len(ids):
        raise DataError(f"cannot split {len(ids)} ids into {k} folds")
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds, start = [], 0
    for size in sizes:
        folds.append(shuffled[start:start + size])
        start += size
    return folds


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def _read_grayscale(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    return arr


def load_sample(image_path: str, mask_path: str, sample_id: str) -> SampleRecord:
    image = _read_grayscale(image_path) / 255.0
    mask = (_read_grayscale(mask_path) >= 128).astype(np.float32)
    return SampleRecord(id=sample_id, image=image[None], mask=mask[None])


def load_dataset(root_path: str, k: int = 4, seed: int = 0) -> DatasetIndex:
    """Index an images/ + masks/ tree and partition it into k folds."""
    images_dir = os.path.join(root_path, "images")
    masks_dir = os.path.join(root_path, "masks")
    if not os.path.isdir(images_dir) or not os.path.isdir(masks_dir):
        raise DataError(f"{root_path} must contain images/ and masks/ directories")
    image_stems = {os.path.splitext(f)[0]: f for f in sorted(os.listdir(images_dir))
                   if f.lower().endswith(".png")}
    mask_stems = {os.path.splitext(f)[0]: f for f in sorted(os.listdir(masks_dir))
                  if f.lower().endswith(".png")}
    if set(image_stems) != set(mask_stems):
        odd = sorted(set(image_stems) ^ set(mask_stems))
        raise DataError(f"unmatched image/mask stems: {odd[:5]}")
    if not image_stems:
        raise DataError(f"no samples under {root_path}")

    records = {}
    for stem in sorted(image_stems):
        records[stem] = load_sample(os.path.join(images_dir, image_stems[stem]),
                                    os.path.join(masks_dir, mask_stems[stem]), stem)
    folds = partition_folds(sorted(records), k, np.random.default_rng(seed))
    return DatasetIndex(records=records, folds=folds)


def save_dataset(index: DatasetIndex, root_path: str) -> None:
    os.makedirs(os.path.join(root_path, "images"), exist_ok=True)
    os.makedirs(os.path.join(root_path, "masks"), exist_ok=True)
    for rec in index.records.values():
        img = np.clip(np.round(rec.image[0] * 255.0), 0, 255).astype(np.uint8)
        msk = (rec.mask[0] * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(os.path.join(root_path, "images", f"{rec.id}.png"))
        Image.fromarray(msk, mode="L").save(os.path.join(root_path, "masks", f"{rec.id}.png"))
    with open(os.path.join(root_path, "manifest.txt"), "w") as fh:
        fh.write(index.manifest_text())


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _resize_bilinear(plane: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    th, tw = target
    h, w = plane.shape
    ys = np.clip((np.arange(th) + 0.5) * (h / th) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * (w / tw) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    top = plane[np.ix_(y0, x0)] * (1 - wx) + plane[np.ix_(y0, x1)] * wx
    bottom = plane[np.ix_(y1, x0)] * (1 - wx) + plane[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _resize_nearest(plane: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    th, tw = target
    h, w = plane.shape
    ys = np.minimum(np.floor((np.arange(th) + 0.5) * (h / th)).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(tw) + 0.5) * (w / tw)).astype(int), w - 1)
    return plane[np.ix_(ys, xs)]


def resize(sample: SampleRecord, target: Tuple[int, int]) -> SampleRecord:
    """Bilinear image resampling; the mask is nearest-neighbor resampled and
    re-binarized."""
    th, tw = target
    if th < 1 or tw < 1:
        raise DataError(f"resize target {target} must be positive")
    image = _resize_bilinear(sample.image[0], target)[None]
    mask = (_resize_nearest(sample.mask[0], target) >= 0.5).astype(np.float32)[None]
    return replace(sample, image=np.clip(image, 0.0, 1.0), mask=mask)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotation_ranges: Tuple[Tuple[float, float], ...] = ((0.0, 20.0), (340.0, 357.0))
    flip_x: bool = True
    flip_y: bool = True
    elastic_alpha: float = 10.0
    elastic_sigma: float = 2.0
    elastic_alpha_affine: float = 2.0
    noise_std_range: Tuple[float, float] = (5.0, 10.0)   # on the 0-255 scale
    blur_kernel: int = 3
    gamma: float = 1.0
    multiplier: int = 20

    def __post_init__(self):
        if self.multiplier < 1:
            raise ValueError("multiplier must be >= 1")


def _draw_rotation(ranges, rng) -> float:
    # Sample uniformly over the union of the angle ranges, weighted by span.
    spans = [hi - lo for lo, hi in ranges]
    u = rng.uniform(0.0, sum(spans))
    for (lo, hi), span in zip(ranges, spans):
        if u <= span:
            return lo + u
        u -= span
    return ranges[-1][1]


def _rotate(image: np.ndarray, mask: np.ndarray, angle: float):
    image = ndimage.rotate(image, angle, reshape=False, order=1,
                           mode="constant", cval=0.0)
    mask = ndimage.rotate(mask, angle, reshape=False, order=0,
                          mode="constant", cval=0.0)
    return image, mask


def _affine_from_points(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Solve the 2x2 matrix + offset mapping dst -> src from three point pairs
    # (scipy's affine_transform pulls output coordinates back to the input).
    a = np.column_stack([dst, np.ones(3)])
    sol = np.linalg.solve(a, src)       # 3x2; rows are matrix columns + offset
    matrix = sol[:2].T
    offset = sol[2]
    return matrix, offset


def _elastic(image: np.ndarray, mask: np.ndarray, alpha: float, sigma: float,
             alpha_affine: float, rng: np.random.Generator):
    """Gaussian-smoothed random displacement plus a small random affine jitter
    of the frame corners."""
    h, w = image.shape
    if alpha_affine > 0:
        center = np.array([h, w], dtype=np.float64) / 2
        square = min(h, w) / 3.0
        src = np.array([center + square, center - square,
                        [center[0] + square, center[1] - square]])
        dst = src + rng.uniform(-alpha_affine, alpha_affine, src.shape)
        matrix, offset = _affine_from_points(src, dst)
        image = ndimage.affine_transform(image, matrix, offset=offset, order=1,
                                         mode="constant", cval=0.0)
        mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0,
                                        mode="constant", cval=0.0)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([ys + dy, xs + dx])
    image = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)
    mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0.0)
    return image, mask


def _gaussian_noise(image: np.ndarray, std255: float, rng: np.random.Generator) -> np.ndarray:
    # Applied on the 0-255 scale, then renormalized.
    noisy = image * 255.0 + rng.normal(0.0, std255, image.shape)
    return np.clip(noisy, 0.0, 255.0).astype(np.float32) / 255.0


def _box_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    return ndimage.uniform_filter(image, size=kernel, mode="nearest").astype(np.float32)


def _gamma_map(image: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(np.clip(image, 0.0, 1.0), gamma).astype(np.float32)


def augment(sample: SampleRecord, config: AugmentConfig, seed: int) -> List[SampleRecord]:
    """Emit ``config.multiplier`` randomized variants of one sample.

    Geometric operations (rotation, flips, elastic deformation) transform
    image and mask identically and the mask is re-binarized afterwards;
    photometric operations (noise, blur, gamma) touch only the image. Each
    variant records its operation list and seed in its provenance.
    """
    variants = []
    for v in range(config.multiplier):
        rng = np.random.default_rng([seed, v])
        image = sample.image[0].astype(np.float32)
        mask = sample.mask[0].astype(np.float32)
        ops: List[str] = []

        angle = _draw_rotation(config.rotation_ranges, rng)
        image, mask = _rotate(image, mask, angle)
        ops.append(f"rotate:{angle:.2f}")
        if config.flip_x and rng.random() < 0.5:
            image, mask = image[:, ::-1], mask[:, ::-1]
            ops.append("flip_x")
        if config.flip_y and rng.random() < 0.5:
            image, mask = image[::-1, :], mask[::-1, :]
            ops.append("flip_y")
        image, mask = _elastic(image, mask, config.elastic_alpha,
                               config.elastic_sigma, config.elastic_alpha_affine, rng)
        ops.append(f"elastic:a={config.elastic_alpha},s={config.elastic_sigma}")
        mask = (mask >= 0.5).astype(np.float32)

        std = rng.uniform(*config.noise_std_range)
        image = _gaussian_noise(image, std, rng)
        ops.append(f"noise:std={std:.2f}")
        if rng.random() < 0.5:
            image = _box_blur(image, config.blur_kernel)
            ops.append(f"blur:{config.blur_kernel}")
        image = _gamma_map(image, config.gamma)
        ops.append(f"gamma:{config.gamma}")

        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        variants.append(SampleRecord(
            id=f"{sample.id}#aug{v}",
            image=np.ascontiguousarray(image)[None],
            mask=np.ascontiguousarray(mask)[None],
            provenance=f"augmented({','.join(ops)};seed={seed}/{v})"))
    return variants


def degrade(sample: SampleRecord, noise_sigma: float = 0.2, blur_kernel: int = 5,
            seed: int = 0) -> SampleRecord:
    """Multiplicative Gaussian noise followed by a box blur; the mask is
    ground truth and is left bitwise untouched."""
    rng = np.random.default_rng(seed)
    image = sample.image[0].astype(np.float32)
    noise = rng.normal(0.0, noise_sigma, image.shape) if noise_sigma > 0 else 0.0
    image = np.clip(image * (1.0 + noise), 0.0, 1.0).astype(np.float32)
    if blur_kernel > 1:
        image = _box_blur(image, blur_kernel)
    return SampleRecord(id=sample.id, image=image[None], mask=sample.mask.copy(),
                        provenance="degraded")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# The generator keeps each ellipse fully inside the frame with axes between
# these fractions of the image size, which bounds the mask area fraction to
# roughly [2.5%, 39.3%] — inside the declared [2%, 40%] audit band.
SYNTH_AXIS_RANGE = (0.09, 0.25)


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ay: float, ax: float,
                  angle: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = np.cos(angle), np.sin(angle)
    u = ys * cos + xs * sin
    v = -ys * sin + xs * cos
    return ((u / ay) ** 2 + (v / ax) ** 2 <= 1.0)


def synth_sample(sample_id: str, size: int, rng: np.random.Generator) -> SampleRecord:
    h = w = size
    base = rng.uniform(0.45, 0.65)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=4.0)
    texture /= max(np.abs(texture).max(), 1e-8)
    image = base + 0.06 * texture

    mask = np.zeros((h, w), dtype=bool)
    lesion = np.zeros((h, w), dtype=np.float64)
    for _ in range(int(rng.integers(1, 3))):
        ay = rng.uniform(*SYNTH_AXIS_RANGE) * size
        ax = rng.uniform(*SYNTH_AXIS_RANGE) * size
        margin_y, margin_x = ay + 3, ax + 3
        cy = rng.uniform(margin_y, h - margin_y)
        cx = rng.uniform(margin_x, w - margin_x)
        angle = rng.uniform(0, np.pi)
        ellipse = _ellipse_mask(h, w, cy, cx, ay, ax, angle)
        level = base - rng.uniform(0.25, 0.40)
        lesion = np.where(ellipse, level + 0.04 * texture, lesion)
        mask |= ellipse

    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0)
    image = image * (1.0 - soft) + lesion * soft
    image += rng.normal(0.0, 0.02, (h, w))    # speckle
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SampleRecord(id=sample_id, image=image[None],
                        mask=mask.astype(np.float32)[None], provenance="synthetic")


def synth_dataset(n: int, size: int = 64, seed: int = 0, k: int = 4) -> DatasetIndex:
    """Deterministic synthetic dataset: 1-2 darker ellipses per image on a
    textured speckled background."""
    if n < 1:
        raise DataError("need at least one sample")
    records = {}
    for i in range(n):
        sample_id = f"synth{i:04d}"
        records[sample_id] = synth_sample(sample_id, size, np.random.default_rng([seed, i]))
    k = min(k, n)
    folds = partition_folds(sorted(records), k, np.random.default_rng(seed))
    return DatasetIndex(records=records, folds=folds)
