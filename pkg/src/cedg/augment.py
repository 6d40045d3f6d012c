"""Image preprocessing and the training-time augmentation pipeline.

Images are numpy arrays in channel-planar [3,H,W] layout: uint8 for storage,
float32 after color normalization. The pipeline applied to every training
sample is

    hist_equalize -> color_normalize -> [random_crop, flip_vh, graying,
                                         smooth, masking]

where each enabled augmentation is independently skipped with probability 0.5.
All randomness comes from the per-sample generator handed in by the caller
(see `cedg.rng.stream`), so results are bit-identical for a given
(seed, epoch, sample index) regardless of batching or worker count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

# Channel means / standard deviations of the pretraining corpus, RGB order.
DEFAULT_MEANS = (136.2, 134.7, 118.9)
DEFAULT_STDS = (73.9, 71.3, 76.1)


def _require_image(img: np.ndarray, dtype, name: str) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"{name} expects [3,H,W] pixels, got "
                        f"{getattr(img, 'shape', type(img).__name__)}")
    if img.dtype != dtype:
        raise DataError(f"{name} expects {np.dtype(dtype).name} pixels, got {img.dtype}")


# -- deterministic preprocessing ----------------------------------------------


def hist_equalize(img: np.ndarray) -> np.ndarray:
    """Classic 256-bin histogram equalization, each channel independently.

    out = round((cdf(v) - cdf_min) / (N - cdf_min) * 255) with cdf_min the
    cdf of the lowest present intensity. A constant channel is returned
    unchanged (the denominator would be zero).
    """
    _require_image(img, np.uint8, "hist_equalize")
    out = np.empty_like(img)
    for c in range(3):
        ch = img[c]
        hist = np.bincount(ch.ravel(), minlength=256)
        cdf = hist.cumsum()
        cdf_min = int(cdf[np.nonzero(hist)[0][0]])
        n = ch.size
        if cdf_min == n:  # single intensity: leave untouched
            out[c] = ch
            continue
        lut = np.rint((cdf - cdf_min) / (n - cdf_min) * 255.0)
        out[c] = np.clip(lut, 0, 255).astype(np.uint8)[ch]
    return out


def color_normalize(img: np.ndarray, means=DEFAULT_MEANS, stds=DEFAULT_STDS) -> np.ndarray:
    """(v - mean) / std per channel; uint8 in, float32 out."""
    _require_image(img, np.uint8, "color_normalize")
    if any(s <= 0 for s in stds):
        raise ConfigError(f"stds must be positive, got {stds}")
    m = np.asarray(means, dtype=np.float32).reshape(3, 1, 1)
    s = np.asarray(stds, dtype=np.float32).reshape(3, 1, 1)
    return (img.astype(np.float32) - m) / s


def color_denormalize(img: np.ndarray, means=DEFAULT_MEANS, stds=DEFAULT_STDS) -> np.ndarray:
    """Inverse of color_normalize, rounded and clipped back to uint8."""
    _require_image(img, np.float32, "color_denormalize")
    m = np.asarray(means, dtype=np.float32).reshape(3, 1, 1)
    s = np.asarray(stds, dtype=np.float32).reshape(3, 1, 1)
    return np.clip(np.rint(img * s + m), 0, 255).astype(np.uint8)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-aligned sample centers, edges clamped.

    Source coordinate for output index i is (i + 0.5) * (in/out) - 0.5.
    uint8 images round back to uint8; float images stay float32.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"bilinear_resize expects [3,H,W] pixels, got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    _, h, w = img.shape
    # interpolate in float64: constant regions then resize to the same
    # constant after the final float32 cast
    data = img.astype(np.float64)

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ty = ys - y0
    tx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    ty = ty[None, :, None]
    tx = tx[None, None, :]
    top = data[:, y0c][:, :, x0c] * (1 - tx) + data[:, y0c][:, :, x1c] * tx
    bot = data[:, y1c][:, :, x0c] * (1 - tx) + data[:, y1c][:, :, x1c] * tx
    out = top * (1 - ty) + bot * ty
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(np.float32)


# -- randomized augmentations --------------------------------------------------


def random_crop(img: np.ndarray, rng: np.random.Generator, crop: int = 24) -> np.ndarray:
    """Crop a `crop`-square at a uniform top-left offset, resize back to input size."""
    _, h, w = img.shape
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return bilinear_resize(img[:, y:y + crop, x:x + crop], h, w)


def flip_vh(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent vertical and horizontal flips, probability 0.5 each."""
    out = img
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def graying(img: np.ndarray) -> np.ndarray:
    """Luma projection replicated to all three channels, in the current space.

    The weighted sum runs in float64 so a constant image round-trips
    bit-exactly (the weights sum to 1 only up to rounding).
    """
    _require_image(img, np.float32, "graying")
    planes = img.astype(np.float64)
    y = (GRAY_WEIGHTS[0] * planes[0] + GRAY_WEIGHTS[1] * planes[1]
         + GRAY_WEIGHTS[2] * planes[2]).astype(np.float32)
    return np.stack([y, y, y])


def _disk_offsets(k: int) -> list[tuple[int, int]]:
    # cells whose centers fall inside the radius-k/2 disk
    r = k // 2
    r2 = (k / 2.0) ** 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r2]


_DISK_CACHE = {3: _disk_offsets(3), 5: _disk_offsets(5)}  # 9 and 21 cells


def smooth(img: np.ndarray, rng: np.random.Generator, kernels=(3, 5)) -> np.ndarray:
    """Equal-weight disk average, kernel size drawn uniformly from `kernels`.

    Edges are clamp-padded so the support never leaves the image.
    """
    _require_image(img, np.float32, "smooth")
    k = int(kernels[int(rng.integers(0, len(kernels)))])
    offsets = _DISK_CACHE.get(k) or _disk_offsets(k)
    r = k // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    h, w = img.shape[1:]
    # float64 accumulator: an all-equal neighborhood must average back to
    # exactly the same float32 value
    acc = np.zeros_like(img, dtype=np.float64)
    for dy, dx in offsets:
        acc += padded[:, r + dy:r + dy + h, r + dx:r + dx + w]
    return (acc / len(offsets)).astype(np.float32)


def masking(img: np.ndarray, rng: np.random.Generator, total_width: int = 10,
            max_attempts: int = 1000) -> np.ndarray:
    """Blank full-height vertical lines totaling `total_width` columns.

    Line widths are drawn uniformly from [1, remaining]; each line's center
    column is uniform over the image width. A line of width w centered at c
    covers columns [c - w//2, c - w//2 + w - 1]. Candidates that overlap an
    already-placed line or stick out of the image are discarded and redrawn,
    up to `max_attempts` draws. Each placed line is filled with the
    per-channel mean of the pixels it covers.
    """
    _require_image(img, np.float32, "masking")
    w_img = img.shape[2]
    if total_width > w_img:
        raise ConfigError(f"mask width budget {total_width} exceeds image width {w_img}")
    out = img.copy()
    covered = np.zeros(w_img, dtype=bool)
    remaining = total_width
    attempts = 0
    while remaining > 0 and attempts < max_attempts:
        attempts += 1
        width = int(rng.integers(1, remaining + 1))
        center = int(rng.integers(0, w_img))
        start = center - width // 2
        stop = start + width
        if start < 0 or stop > w_img or covered[start:stop].any():
            continue
        fill = img[:, :, start:stop].mean(axis=(1, 2), dtype=np.float64)
        out[:, :, start:stop] = fill.astype(np.float32)[:, None, None]
        covered[start:stop] = True
        remaining -= width
    return out


# -- pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    flip: bool = True
    gray: bool = True
    smooth: bool = True
    mask: bool = True
    skip_probability: float = 0.5
    crop_size: int = 24
    mask_total_width: int = 10
    smooth_kernels: tuple[int, ...] = (3, 5)
    means: tuple[float, float, float] = DEFAULT_MEANS
    stds: tuple[float, float, float] = DEFAULT_STDS

    def __post_init__(self):
        if not 0.0 <= self.skip_probability <= 1.0:
            raise ConfigError(f"skip_probability must be in [0,1], got {self.skip_probability}")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        if self.mask_total_width < 1:
            raise ConfigError(f"mask_total_width must be positive, got {self.mask_total_width}")


# fixed application order; disabling a flag removes the stage and its rng draws
PIPELINE_ORDER = ("crop", "flip", "gray", "smooth", "mask")


def apply_pipeline(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Full per-sample pipeline: uint8 [3,H,W] in, normalized float32 out.

    For every enabled stage one skip decision is drawn first; a skipped stage
    consumes no further randomness.
    """
    out = color_normalize(hist_equalize(img), cfg.means, cfg.stds)
    for name in PIPELINE_ORDER:
        if not getattr(cfg, name):
            continue
        if rng.random() < cfg.skip_probability:
            continue
        if name == "crop":
            out = random_crop(out, rng, cfg.crop_size)
        elif name == "flip":
            out = flip_vh(out, rng)
        elif name == "gray":
            out = graying(out)
        elif name == "smooth":
            out = smooth(out, rng, cfg.smooth_kernels)
        else:
            out = masking(out, rng, cfg.mask_total_width)
    return out


def preview_stages(img: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    """Stage-by-stage outputs with no skipping, for the augment-preview command.

    Returns (name, uint8 image) pairs; normalized stages are mapped back to
    uint8 for viewing.
    """
    stages: list[tuple[str, np.ndarray]] = [("input", img.copy())]
    eq = hist_equalize(img)
    stages.append(("equalized", eq))
    out = color_normalize(eq, cfg.means, cfg.stds)
    stages.append(("normalized", color_denormalize(out, cfg.means, cfg.stds)))
    for name in PIPELINE_ORDER:
        if not getattr(cfg, name):
            continue
        if name == "crop":
            out = random_crop(out, rng, cfg.crop_size)
        elif name == "flip":
            out = flip_vh(out, rng)
        elif name == "gray":
            out = graying(out)
        elif name == "smooth":
            out = smooth(out, rng, cfg.smooth_kernels)
        else:
            out = masking(out, rng, cfg.mask_total_width)
        stages.append((name, color_denormalize(out, cfg.means, cfg.stds)))
    return stages
