"""Image representation, augmentation, resizing, flipping and batch padding.

Images are float32 grids in [0, 1], shape (H, W, C) with C in {1, 3}.
Mini-batches are assembled by zero-padding every image to the element-wise
maximum height/width; a boolean mask records which pixels are content so
downstream attention can ignore the padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image


class ImagingError(ValueError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """Normalized pixel grid; ``data`` is float32 (H, W, C) in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ImagingError(f"expected (H, W, 1|3) array, got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ImagingError(f"zero-sized image: shape {d.shape}")
        if d.dtype != np.float32:
            object.__setattr__(self, "data", d.astype(np.float32))
        if not np.isfinite(self.data).all():
            raise ImagingError("non-finite pixel values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ImagingError("pixel values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the label-preserving augmentations.

    Each range is inclusive; a degenerate range at the identity value
    (0 deg, 0 brightness, contrast 1, 0 jitter, sigma 0) makes the
    augmentation a no-op. Defaults are small enough to preserve handwriting
    legibility.
    """

    rotation_deg: tuple[float, float] = (-2.0, 2.0)
    brightness_delta: tuple[float, float] = (-0.1, 0.1)
    contrast_factor: tuple[float, float] = (0.9, 1.1)
    perspective_jitter: float = 0.02
    gaussian_noise_sigma: tuple[float, float] = (0.0, 0.03)
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_deg", "brightness_delta", "contrast_factor", "gaussian_noise_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ImagingError(f"{name} range not well-ordered: ({lo}, {hi})")
        if self.gaussian_noise_sigma[0] < 0 or self.perspective_jitter < 0:
            raise ImagingError("sigma and jitter must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentParams":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0), 0.0, (0.0, 0.0), seed)


@dataclass(frozen=True)
class Batch:
    """Zero-padded image stack with per-item sizes and content mask."""

    images: np.ndarray  # (B, H_max, W_max, C) float32
    sizes: tuple[tuple[int, int], ...]  # original (h, w) per item
    mask: np.ndarray  # (B, H_max, W_max) bool, True where content

    def __len__(self) -> int:
        return self.images.shape[0]

    def crop(self, i: int) -> ImageTensor:
        h, w = self.sizes[i]
        return ImageTensor(self.images[i, :h, :w].copy())


def resize(img: ImageTensor, h: int, w: int) -> ImageTensor:
    """Bilinear resize to exactly (h, w); identity when the size matches."""
    if h < 1 or w < 1:
        raise ImagingError(f"invalid target size ({h}, {w})")
    if (h, w) == (img.height, img.width):
        return ImageTensor(img.data.copy())
    out = cv2.resize(img.data, (w, h), interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2:
        out = out[:, :, None]
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


def flip_horizontal(img: ImageTensor) -> ImageTensor:
    return ImageTensor(np.ascontiguousarray(img.data[:, ::-1, :]))


def augment(img: ImageTensor, p: AugmentParams) -> ImageTensor:
    """Random rotation, perspective, brightness, contrast and Gaussian noise.

    Deterministic for fixed (img, p): all randomness comes from ``p.seed``.
    Output has the input's dimensions; warped-in corners are filled with 0.
    """
    rng = np.random.default_rng(p.seed)
    angle = rng.uniform(*p.rotation_deg)
    brightness = rng.uniform(*p.brightness_delta)
    contrast = rng.uniform(*p.contrast_factor)
    jitter = rng.uniform(-p.perspective_jitter, p.perspective_jitter, size=(4, 2))
    sigma = rng.uniform(*p.gaussian_noise_sigma)

    h, w = img.height, img.width
    out = img.data

    if angle != 0.0 or np.any(jitter != 0.0):
        rot = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
        rot3 = np.vstack([rot, [0.0, 0.0, 1.0]]).astype(np.float64)
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        side = np.array([w, h], dtype=np.float64)
        persp = cv2.getPerspectiveTransform(
            corners.astype(np.float32), (corners + jitter * side).astype(np.float32)
        )
        out = cv2.warpPerspective(
            out,
            persp @ rot3,
            (w, h),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=0,
        )
        if out.ndim == 2:
            out = out[:, :, None]

    if contrast != 1.0:
        out = (out - 0.5) * contrast + 0.5
    if brightness != 0.0:
        out = out + brightness
    if sigma > 0.0:
        out = out + rng.normal(0.0, sigma, size=out.shape)

    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


def pad_batch(images: list[ImageTensor]) -> Batch:
    """Stack images at the top-left of a shared (H_max, W_max) canvas;
    the remainder is exactly zero."""
    if not images:
        raise ImagingError("empty batch")
    channels = images[0].channels
    if any(im.channels != channels for im in images):
        raise ImagingError("mixed channel counts in batch")
    h_max = max(im.height for im in images)
    w_max = max(im.width for im in images)
    stack = np.zeros((len(images), h_max, w_max, channels), dtype=np.float32)
    mask = np.zeros((len(images), h_max, w_max), dtype=bool)
    sizes = []
    for i, im in enumerate(images):
        stack[i, : im.height, : im.width] = im.data
        mask[i, : im.height, : im.width] = True
        sizes.append((im.height, im.width))
    return Batch(stack, tuple(sizes), mask)


def load_image(path, channels: int = 1) -> ImageTensor:
    """Load an 8-bit PNG (grayscale or RGB) and normalize to [0, 1]."""
    if channels not in (1, 3):
        raise ImagingError(f"channels must be 1 or 3, got {channels}")
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr)


def save_image(img: ImageTensor, path) -> None:
    arr = np.round(img.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def to_grayscale(img: ImageTensor) -> ImageTensor:
    if img.channels == 1:
        return img
    gray = img.data @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return ImageTensor(np.clip(gray, 0.0, 1.0)[:, :, None])


def replicate_channels(img: ImageTensor, channels: int) -> ImageTensor:
    """Adapt channel count: grayscale replicated to RGB or averaged down."""
    if img.channels == channels:
        return img
    if channels == 3:
        return ImageTensor(np.repeat(img.data, 3, axis=2))
    return to_grayscale(img)
