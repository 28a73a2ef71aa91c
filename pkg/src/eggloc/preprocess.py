"""Letterboxing to the model's square input and the matching box transforms.

A :class:`LetterboxTransform` records the exact affine map between original
image pixels and model-input pixels, ``c' = c * scale + pad``. Boxes move
through it losslessly; only the rendered pixel canvas rounds the content
size to whole pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from PIL import Image

from eggloc.errors import ValidationError
from eggloc.geometry import BoundingBox, clamp_to_image

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "LetterboxTransform",
    "PreprocessConfig",
    "compute_letterbox",
    "compute_stretch",
    "letterbox_image",
    "load_image",
    "make_transform",
    "normalize_pixels",
    "preprocess_image",
    "project_box",
    "unproject_box",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ImageLoader = Callable[[Union[str, Path]], np.ndarray]


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 768
    pad_value: int = 0
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    # "letterbox" keeps aspect ratio; "stretch" resizes each axis independently
    mode: str = "letterbox"

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if not isinstance(self.target_size, int) or self.target_size <= 0:
            raise ValidationError(f"target_size must be a positive integer, got {self.target_size!r}")
        if len(self.mean) != len(self.std) or not self.mean:
            raise ValidationError("mean and std must have the same, non-zero length")
        if any(s <= 0 for s in self.std):
            raise ValidationError(f"std components must be positive, got {self.std}")
        if not 0 <= self.pad_value <= 255:
            raise ValidationError(f"pad_value must be in [0, 255], got {self.pad_value}")
        if self.mode not in ("letterbox", "stretch"):
            raise ValidationError(f"mode must be 'letterbox' or 'stretch', got {self.mode!r}")

    @property
    def channels(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_left: float
    pad_top: float
    original_width: int
    original_height: int
    target_size: int
    # vertical scale when it differs from ``scale`` (stretch mode only)
    y_scale: Optional[float] = field(default=None)

    @property
    def scale_x(self) -> float:
        return self.scale

    @property
    def scale_y(self) -> float:
        return self.scale if self.y_scale is None else self.y_scale

    @property
    def content_size(self) -> tuple[int, int]:
        """Whole-pixel ``(width, height)`` of the resized image on the canvas."""
        w = max(1, min(self.target_size, round(self.original_width * self.scale_x)))
        h = max(1, min(self.target_size, round(self.original_height * self.scale_y)))
        return w, h

    @property
    def canvas_offset(self) -> tuple[int, int]:
        """Whole-pixel ``(left, top)`` padding; odd slack puts the extra pixel right/bottom."""
        w, h = self.content_size
        return (self.target_size - w) // 2, (self.target_size - h) // 2


def _check_dims(width: int, height: int, target_size: int) -> None:
    for name, v in (("width", width), ("height", height), ("target_size", target_size)):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValidationError(f"{name} must be a positive integer, got {v!r}")


def compute_letterbox(width: int, height: int, target_size: int = 768) -> LetterboxTransform:
    """Aspect-preserving fit of a ``width x height`` image into a square canvas.

    Slack on the short axis is split equally between both sides.
    """
    _check_dims(width, height, target_size)
    scale = target_size / max(width, height)
    return LetterboxTransform(
        scale=scale,
        pad_left=(target_size - width * scale) / 2,
        pad_top=(target_size - height * scale) / 2,
        original_width=int(width),
        original_height=int(height),
        target_size=int(target_size),
    )


def compute_stretch(width: int, height: int, target_size: int = 768) -> LetterboxTransform:
    """Non-uniform resize straight to the square, no padding."""
    _check_dims(width, height, target_size)
    return LetterboxTransform(
        scale=target_size / width,
        pad_left=0.0,
        pad_top=0.0,
        original_width=int(width),
        original_height=int(height),
        target_size=int(target_size),
        y_scale=target_size / height,
    )


def make_transform(width: int, height: int, config: PreprocessConfig) -> LetterboxTransform:
    if config.mode == "stretch":
        return compute_stretch(width, height, config.target_size)
    return compute_letterbox(width, height, config.target_size)


def project_box(box: BoundingBox, t: LetterboxTransform) -> BoundingBox:
    """Map a box from original-image pixels into model-input pixels.

    Raises:
        DegenerateBoxError: if the projected box has no area on the canvas.
    """
    raw = (
        box.x_min * t.scale_x + t.pad_left,
        box.y_min * t.scale_y + t.pad_top,
        box.x_max * t.scale_x + t.pad_left,
        box.y_max * t.scale_y + t.pad_top,
    )
    # clamping only removes floating-point excess at the canvas border
    return clamp_to_image(raw, t.target_size, t.target_size)


def unproject_box(box: BoundingBox, t: LetterboxTransform) -> BoundingBox:
    """Map a model-space box back to original pixels, clamped to the image.

    Raises:
        DegenerateBoxError: if the box lies entirely in the padding.
    """
    raw = (
        (box.x_min - t.pad_left) / t.scale_x,
        (box.y_min - t.pad_top) / t.scale_y,
        (box.x_max - t.pad_left) / t.scale_x,
        (box.y_max - t.pad_top) / t.scale_y,
    )
    return clamp_to_image(raw, t.original_width, t.original_height)


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Decode an image file into an ``H x W x 3`` uint8 RGB array."""
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"))


def _channels(image: np.ndarray) -> int:
    return 1 if image.ndim == 2 else image.shape[2]


def letterbox_image(
    image: np.ndarray, t: LetterboxTransform, pad_value: int = 0
) -> np.ndarray:
    """Resize ``image`` per ``t`` and paste it onto a padded square uint8 canvas."""
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValidationError(f"expected an HxW or HxWxC array, got shape {image.shape}")
    h, w = image.shape[:2]
    if (w, h) != (t.original_width, t.original_height):
        raise ValidationError(
            f"image is {w}x{h} but transform expects {t.original_width}x{t.original_height}"
        )
    cw, ch = t.content_size
    left, top = t.canvas_offset
    arr = image.astype(np.uint8, copy=False)
    if (cw, ch) != (w, h):
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        resized = np.asarray(Image.fromarray(arr).resize((cw, ch), Image.BILINEAR))
        if image.ndim == 3 and resized.ndim == 2:
            resized = resized[:, :, None]
        arr = resized
    canvas_shape = (t.target_size, t.target_size) + image.shape[2:]
    canvas = np.full(canvas_shape, pad_value, dtype=np.uint8)
    canvas[top : top + ch, left : left + cw] = arr
    return canvas


def normalize_pixels(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Per-channel ``(value / 255 - mean) / std`` as float32.

    Raises:
        ValidationError: if the channel count differs from the config's.
    """
    image = np.asarray(image)
    if _channels(image) != config.channels:
        raise ValidationError(
            f"image has {_channels(image)} channel(s), config expects {config.channels}"
        )
    mean = np.asarray(config.mean, dtype=np.float64)
    std = np.asarray(config.std, dtype=np.float64)
    if image.ndim == 2:
        mean, std = mean[0], std[0]
    out = (image.astype(np.float64) / 255.0 - mean) / std
    return out.astype(np.float32)


def preprocess_image(
    image: np.ndarray, config: PreprocessConfig
) -> tuple[np.ndarray, LetterboxTransform]:
    """Letterbox then normalize. Returns the model input and its transform."""
    image = np.asarray(image)
    t = make_transform(image.shape[1], image.shape[0], config)
    canvas = letterbox_image(image, t, config.pad_value)
    return normalize_pixels(canvas, config), t

