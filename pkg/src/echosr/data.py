"""Image I/O, bicubic degradation, patch sampling, and augmentation.

The training pipeline reads 8-bit RGB PNGs from ``<root>/HR``, synthesizes
bicubic low-resolution counterparts (cached under
``<root>/LR_bicubic/X{r}``), and emits aligned LR/HR patch batches with
flip / rotation augmentation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor

log = logging.getLogger("echosr.data")

CUBIC_A = -0.5
MIN_LR_SIZE = 72


class DataError(RuntimeError):
    """File-level failures in the data pipeline, with path context."""


@dataclass
class ImageBuffer:
    """8-bit RGB raster: the bridge between files and tensors."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ShapeError(
                f"ImageBuffer pixels must be uint8 ({self.height}, {self.width}, 3), "
                f"got {self.pixels.dtype} {self.pixels.shape}"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageBuffer":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    def to_tensor(self) -> Tensor:
        """Unit-range float tensor (1, 3, h, w)."""
        arr = self.pixels.astype(np.float32) / 255.0
        return Tensor(arr.transpose(2, 0, 1)[None])

    @classmethod
    def from_tensor(cls, t: Tensor | np.ndarray) -> "ImageBuffer":
        """Round unit-range (1, 3, h, w) or (3, h, w) values back to 8 bits."""
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError("from_tensor expects a single image")
            arr = arr[0]
        pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        return cls.from_array(pixels.transpose(1, 2, 0))


def load_png(path) -> ImageBuffer:
    """Load an 8-bit PNG; grayscale inputs are expanded to RGB."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return ImageBuffer.from_array(arr)


def save_png(img: ImageBuffer, path) -> None:
    path = Path(path)
    try:
        Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
    except Exception as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    # Keys kernel with a = -0.5
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    a = CUBIC_A
    inner = (a + 2) * ax3 - (a + 3) * ax2 + 1
    outer = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, inner, np.where(ax < 2, outer, 0.0))


def _resize_weights(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Contribution indices and normalized weights for one axis.

    When downscaling the kernel is stretched by the inverse scale
    (antialiasing); source indices are clamped at the borders.
    """
    scale = out_size / in_size
    kernel_scale = min(scale, 1.0)
    support = 2.0 / kernel_scale
    pos = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(pos - support).astype(np.int64) + 1
    span = int(np.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(span)[None, :]
    weights = _cubic_kernel((pos[:, None] - idx) * kernel_scale) * kernel_scale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    return idx, weights


def _resize_axis(arr: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    arr = np.moveaxis(arr, axis, 0)
    idx, weights = _resize_weights(arr.shape[0], out_size)
    out = np.einsum("ok,ok...->o...", weights, arr[idx])
    return np.moveaxis(out, 0, axis)


def bicubic_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable antialiased bicubic resize of an (h, w) or (h, w, c) float array."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bicubic target size must be positive")
    out = _resize_axis(arr.astype(np.float64), out_h, 0)
    return _resize_axis(out, out_w, 1)


def bicubic_resize(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Bicubic resize of an 8-bit image through unit-range floats."""
    unit = img.pixels.astype(np.float64) / 255.0
    resized = bicubic_resize_array(unit, out_h, out_w)
    pixels = np.clip(np.rint(resized * 255.0), 0, 255).astype(np.uint8)
    return ImageBuffer.from_array(pixels)


# ---------------------------------------------------------------------------
# patches, augmentation, batches


def sample_patch(
    hr_img: np.ndarray,
    lr_img: np.ndarray,
    p: int,
    r: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Aligned random crop: LR patch (p, p), HR patch (p*r, p*r).

    Arrays are channel-first (3, h, w); the LR offset (x, y) maps to the HR
    offset (r*x, r*y).  Returns (lr_patch, hr_patch, (x, y)).
    """
    lh, lw = lr_img.shape[1], lr_img.shape[2]
    if lh < p or lw < p:
        raise ShapeError(f"LR image {lh}x{lw} smaller than patch size {p}")
    y = int(rng.integers(0, lh - p + 1))
    x = int(rng.integers(0, lw - p + 1))
    lr = lr_img[:, y : y + p, x : x + p]
    hr = hr_img[:, r * y : r * (y + p), r * x : r * (x + p)]
    return lr, hr, (x, y)


def augment_arrays(arrays: list[np.ndarray], hflip: bool, rot: int) -> list[np.ndarray]:
    """Apply the same flip + rotation to each channel-first array."""
    if rot not in (0, 90, 180, 270):
        raise ShapeError(f"rotation must be a multiple of 90, got {rot}")
    out = []
    for a in arrays:
        if hflip:
            a = a[:, :, ::-1]
        a = np.rot90(a, k=rot // 90, axes=(1, 2))
        out.append(np.ascontiguousarray(a))
    return out


def augment(pair, flags, rng: np.random.Generator | None = None):
    """Random or explicit flip/rotation applied identically to both members."""
    lr, hr = pair
    if flags is None:
        flags = (bool(rng.integers(0, 2)), int(rng.integers(0, 4)) * 90)
    hflip, rot = flags
    lr2, hr2 = augment_arrays([lr, hr], hflip, rot)
    return (lr2, hr2), (hflip, rot)


@dataclass
class PairBatch:
    """One training batch of aligned LR/HR patches plus provenance."""

    lr: Tensor  # (n, 3, p, p)
    hr: Tensor  # (n, 3, p*r, p*r)
    provenance: list[dict]


def _reflect_pad_min(arr: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    pad_h = max(0, min_h - arr.shape[0])
    pad_w = max(0, min_w - arr.shape[1])
    if pad_h == 0 and pad_w == 0:
        return arr
    return np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")


class PatchDataset:
    """HR image directory plus on-disk LR cache for one scale."""

    def __init__(self, root, scale: int, patch: int = MIN_LR_SIZE):
        self.root = Path(root)
        self.scale = scale
        self.patch = patch
        hr_dir = self.root / "HR"
        if not hr_dir.is_dir():
            raise DataError(f"dataset HR directory missing: {hr_dir}")
        self.hr_paths = sorted(hr_dir.glob("*.png"))
        if not self.hr_paths:
            raise DataError(f"no PNG images found in {hr_dir}")
        self._pairs: list[tuple[np.ndarray, np.ndarray, str]] = []
        cache_dir = self.root / "LR_bicubic" / f"X{scale}"
        cache_dir.mkdir(parents=True, exist_ok=True)
        for path in self.hr_paths:
            hr = load_png(path).pixels.astype(np.float32) / 255.0
            # crop HR to a multiple of the scale so LR/HR stay aligned
            h, w = (hr.shape[0] // scale) * scale, (hr.shape[1] // scale) * scale
            hr = hr[:h, :w]
            if h // scale < patch or w // scale < patch:
                log.warning("image %s is undersized for %dpx LR patches; reflect-padding", path.name, patch)
                hr = _reflect_pad_min(hr, patch * scale, patch * scale)
                h, w = hr.shape[0], hr.shape[1]
            cache_path = cache_dir / path.name
            if cache_path.exists():
                lr = load_png(cache_path).pixels.astype(np.float32) / 255.0
                if lr.shape[:2] != (h // scale, w // scale):
                    lr = None
            else:
                lr = None
            if lr is None:
                lr = bicubic_resize_array(hr.astype(np.float64), h // scale, w // scale)
                save_png(
                    ImageBuffer.from_array(np.clip(np.rint(lr * 255.0), 0, 255).astype(np.uint8)),
                    cache_path,
                )
                lr = lr.astype(np.float32)
            self._pairs.append(
                (hr.transpose(2, 0, 1).astype(np.float32), lr.transpose(2, 0, 1).astype(np.float32), path.name)
            )

    def __len__(self) -> int:
        return len(self._pairs)

    def pair(self, index: int):
        return self._pairs[index]


def make_batches(dataset: PatchDataset, batch_size: int, rng: np.random.Generator, augment_data: bool = True):
    """Infinite reproducible stream of augmented PairBatch values.

    Epochs shuffle the image order; determinism is defined per (seed,
    single producer) as documented.
    """
    r = dataset.scale
    p = dataset.patch
    order: list[int] = []
    while True:
        lrs, hrs, prov = [], [], []
        for _ in range(batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx = order.pop()
            hr_img, lr_img, name = dataset.pair(idx)
            lr, hr, (x, y) = sample_patch(hr_img, lr_img, p, r, rng)
            if augment_data:
                (lr, hr), flags = augment((lr, hr), None, rng)
            else:
                flags = (False, 0)
            lrs.append(lr)
            hrs.append(hr)
            prov.append({"source": name, "offset": [x, y], "hflip": flags[0], "rot": flags[1]})
        yield PairBatch(
            lr=Tensor(np.stack(lrs)),
            hr=Tensor(np.stack(hrs)),
            provenance=prov,
        )
