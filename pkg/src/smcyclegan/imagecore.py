"""Image and mask value types, mask algebra and raster utilities.

Images are stored channels-last (H, W, C) as float arrays. Batched tensors used
by the networks are channels-first (N, C, H, W); ``mask_batch`` is the tensor
counterpart of :func:`apply_mask`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ConfigError, ShapeError, StorageError

DEFAULT_MASK_THRESHOLD = 0.5


class RangeTag(str, enum.Enum):
    UNIT = "unit"  # [0, 1]
    SYMMETRIC = "symmetric"  # [-1, 1]

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is RangeTag.UNIT else (-1.0, 1.0)


class DomainTag(str, enum.Enum):
    ART = "X"
    REAL = "Y"


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray
    range_tag: RangeTag = RangeTag.SYMMETRIC

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) <= 0 or data.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxWxC with C in (1, 3), got {data.shape}")
        lo, hi = RangeTag(self.range_tag).bounds
        if not np.all((data >= lo) & (data <= hi)):
            raise ValueError(f"image values outside {self.range_tag.value} range [{lo}, {hi}]")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "range_tag", RangeTag(self.range_tag))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_range(self, tag: RangeTag) -> "Image":
        tag = RangeTag(tag)
        if tag is self.range_tag:
            return self
        if tag is RangeTag.UNIT:
            return Image((self.data + 1.0) / 2.0, tag)
        return Image(self.data * 2.0 - 1.0, tag)

    def to_tensor(self) -> torch.Tensor:
        """(C, H, W) float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.data.transpose(2, 0, 1), dtype=np.float32))


@dataclass(frozen=True, eq=False)
class Mask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2 or min(data.shape) <= 0:
            raise ShapeError(f"mask must be HxW, got {data.shape}")
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise ValueError("mask values outside [0, 1]")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __mul__(self, other: "Mask") -> "Mask":
        if self.data.shape != other.data.shape:
            raise ShapeError(f"mask shapes differ: {self.data.shape} vs {other.data.shape}")
        return Mask(self.data * other.data)


def apply_mask(image: Image, mask: Mask) -> Image:
    """Multiply every channel of ``image`` by ``mask``."""
    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError(
            f"mask {mask.data.shape} does not match image {(image.height, image.width)}"
        )
    return Image(image.data * mask.data[:, :, None], image.range_tag)


def mask_batch(images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Batched masking: images (N, C, H, W), masks (N, 1, H, W) or (N, H, W)."""
    if masks.dim() == 3:
        masks = masks.unsqueeze(1)
    if masks.dim() != 4 or masks.shape[1] != 1:
        raise ShapeError(f"masks must be (N, 1, H, W), got {tuple(masks.shape)}")
    if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[2:]:
        raise ShapeError(
            f"mask batch {tuple(masks.shape)} does not match image batch {tuple(images.shape)}"
        )
    return images * masks


def binarize_mask(mask: Mask, threshold: float = DEFAULT_MASK_THRESHOLD) -> Mask:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return Mask((mask.data >= threshold).astype(mask.data.dtype))


def resize_image(image: Image, target_h: int, target_w: int) -> Image:
    """Bilinear resize, clamped back into the image's range."""
    if target_h <= 0 or target_w <= 0:
        raise ConfigError(f"target size must be positive, got {target_h}x{target_w}")
    if (image.height, image.width) == (target_h, target_w):
        return image
    src = torch.from_numpy(np.ascontiguousarray(image.data.transpose(2, 0, 1), dtype=np.float64))
    out = F.interpolate(src[None], size=(target_h, target_w), mode="bilinear", align_corners=False)[0]
    lo, hi = image.range_tag.bounds
    out = out.clamp(lo, hi).numpy().transpose(1, 2, 0).astype(image.data.dtype)
    return Image(out, image.range_tag)


def resize_mask(mask: Mask, target_h: int, target_w: int) -> Mask:
    resized = resize_image(Image(mask.data, RangeTag.UNIT), target_h, target_w)
    return Mask(resized.data[:, :, 0])


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_image(path, range_tag: RangeTag = RangeTag.SYMMETRIC) -> Image:
    try:
        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
    return Image(raw / 255.0, RangeTag.UNIT).to_range(range_tag)


def load_mask(path) -> Mask:
    try:
        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read mask {path}: {exc}") from exc
    return Mask(raw / 255.0)


def save_image(image: Image, path) -> None:
    unit = image.to_range(RangeTag.UNIT).data
    pixels = quantize_unit(unit)
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    _write_png(PILImage.fromarray(pixels), path)


def save_mask(mask: Mask, path) -> None:
    _write_png(PILImage.fromarray(quantize_unit(mask.data)), path)


def _write_png(pil_image, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        pil_image.save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
