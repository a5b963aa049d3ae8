"""Dataset ingestion, unpaired batch sampling and the synthetic toy domains.

On-disk layout::

    <root>/domain_a/*.png   domain X (art)
    <root>/domain_b/*.png   domain Y (real)
    <root>/masks_a/*.png    optional, filename-matched masks
    <root>/masks_b/*.png
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, StorageError
from .imagecore import (DomainTag, Image, Mask, RangeTag, load_image, load_mask, quantize_unit,
                        resize_image, resize_mask, save_image, save_mask)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

DOMAIN_DIRS = {DomainTag.ART: ("domain_a", "masks_a"), DomainTag.REAL: ("domain_b", "masks_b")}


@dataclass
class ImageDataset:
    domain: DomainTag
    entries: list[str]
    images: torch.Tensor  # (N, C, H, W), symmetric range
    masks: torch.Tensor | None = None  # (N, 1, H, W), [0, 1]
    root: Path | None = None
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


def _to_tensor(images: list[Image]) -> torch.Tensor:
    return torch.stack([im.to_tensor() for im in images])


def load_image_folder(folder, target_size: int | None = None):
    """Decode every image file in ``folder`` (lexicographic order).

    Files without an image suffix (configs, logs) are ignored. Returns
    ``(names, images, warnings)``; image files that fail to decode are
    skipped and reported in ``warnings``.
    """
    folder = Path(folder)
    if not folder.is_dir():
        raise StorageError(f"not a readable directory: {folder}")
    names, images, skipped = [], [], []
    for path in sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            im = load_image(path, RangeTag.SYMMETRIC)
        except StorageError as exc:
            msg = f"skipping undecodable file {path.name}: {exc.__cause__ or exc}"
            log.warning(msg)
            skipped.append(msg)
            continue
        if target_size is not None:
            im = resize_image(im, target_size, target_size)
        names.append(path.name)
        images.append(im)
    return names, images, skipped


def load_dataset(root, domain: DomainTag, target_size: int, with_masks: bool = False) -> ImageDataset:
    root = Path(root)
    if not root.is_dir():
        raise StorageError(f"dataset root does not exist: {root}")
    domain = DomainTag(domain)
    image_dir, mask_dir = DOMAIN_DIRS[domain]
    names, images, skipped = load_image_folder(root / image_dir, target_size)
    if not names:
        raise DataError(f"no decodable images in {root / image_dir}")
    masks = None
    if with_masks:
        loaded = []
        for name in names:
            path = root / mask_dir / name
            if not path.is_file():
                raise DataError(f"mask missing for {name} (expected {path})")
            loaded.append(resize_mask(load_mask(path), target_size, target_size))
        masks = torch.stack([torch.from_numpy(np.array(m.data, dtype=np.float32)) for m in loaded])[:, None]
    return ImageDataset(domain, names, _to_tensor(images), masks, root, skipped)


def sample_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise DataError("cannot sample from an empty dataset")
    if n < batch_size:
        warnings.warn(f"dataset of size {n} smaller than batch {batch_size}; sampling with replacement",
                      stacklevel=3)
        return rng.integers(0, n, size=batch_size)
    return rng.choice(n, size=batch_size, replace=False)


def sample_unpaired_batch(ds_x: ImageDataset, ds_y: ImageDataset, batch_size: int,
                          rng: np.random.Generator, return_indices: bool = False):
    """Independently sampled X and Y batches; the two index draws share no pairing."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    ix = sample_indices(len(ds_x), batch_size, rng)
    iy = sample_indices(len(ds_y), batch_size, rng)
    x, y = ds_x.images[torch.from_numpy(ix)], ds_y.images[torch.from_numpy(iy)]
    if return_indices:
        return x, y, ix, iy
    return x, y


# ---------------------------------------------------------------------------
# synthetic toy domains


@dataclass
class DomainStyle:
    subject_mean: tuple = (0.8, 0.2, 0.2)
    subject_std: tuple = (0.05, 0.05, 0.05)
    background_mean: tuple = (0.3, 0.6, 0.3)
    background_std: tuple = (0.05, 0.05, 0.05)
    noise_scale: float = 0.05


def _default_x():
    return DomainStyle((0.8, 0.2, 0.2), (0.05,) * 3, (0.25, 0.55, 0.3), (0.05,) * 3, 0.08)


def _default_y():
    return DomainStyle((0.2, 0.2, 0.8), (0.05,) * 3, (0.75, 0.7, 0.45), (0.05,) * 3, 0.02)


@dataclass
class ToySpec:
    image_size: int = 32
    shape: str = "disk"
    count: int = 200
    seed: int = 7
    radius_range: tuple = (0.2, 0.35)  # fraction of image size
    domain_x: DomainStyle = field(default_factory=_default_x)
    domain_y: DomainStyle = field(default_factory=_default_y)

    def __post_init__(self):
        if isinstance(self.domain_x, dict):
            self.domain_x = DomainStyle(**self.domain_x)
        if isinstance(self.domain_y, dict):
            self.domain_y = DomainStyle(**self.domain_y)
        if self.count < 1:
            raise ConfigError(f"toy count must be >= 1, got {self.count}")
        if self.image_size < 4:
            raise ConfigError(f"toy image_size too small: {self.image_size}")
        if self.shape not in ("disk", "square"):
            raise ConfigError(f"toy shape must be disk or square, got {self.shape!r}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi < 0.5, got {self.radius_range}")
        if asdict(self.domain_x) == asdict(self.domain_y):
            raise ConfigError("toy domains must differ")


def rasterize(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Binary subject mask judged at pixel centres."""
    c = np.arange(size) + 0.5
    px, py = np.meshgrid(c, c)  # px varies along columns
    if shape == "disk":
        inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    else:
        inside = (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    return inside.astype(np.float32)


def _render_domain(spec: ToySpec, style: DomainStyle, rng: np.random.Generator):
    s = spec.image_size
    pixels, masks, geometry = [], [], []
    for _ in range(spec.count):
        r = rng.uniform(*spec.radius_range) * s
        cx, cy = rng.uniform(r, s - r, size=2)
        mask = rasterize(spec.shape, s, cx, cy, r)
        bg = rng.normal(style.background_mean, style.background_std)
        noise = rng.normal(0.0, style.noise_scale, size=(s, s, 3))
        subject = rng.normal(style.subject_mean, style.subject_std)
        img = np.where(mask[:, :, None] > 0, subject[None, None, :], bg[None, None, :] + noise)
        pixels.append(quantize_unit(np.clip(img, 0.0, 1.0)))
        masks.append(mask)
        geometry.append({"cx": float(cx), "cy": float(cy), "r": float(r)})
    return pixels, masks, geometry


@dataclass
class ToyDomains:
    x: ImageDataset
    y: ImageDataset
    geometry: dict


def generate_toy_domains(spec: ToySpec, out_root=None) -> ToyDomains:
    """Render ``spec.count`` images per domain plus exact masks; optionally write them to disk."""
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    result = {}
    geometry = {}
    for domain, style, seq in ((DomainTag.ART, spec.domain_x, seeds[0]),
                               (DomainTag.REAL, spec.domain_y, seeds[1])):
        pixels, masks, geo = _render_domain(spec, style, np.random.default_rng(seq))
        names = [f"{i:05d}.png" for i in range(spec.count)]
        unit = np.stack(pixels).astype(np.float32) / 255.0
        images = torch.from_numpy(unit.transpose(0, 3, 1, 2).copy()) * 2.0 - 1.0
        mask_t = torch.from_numpy(np.stack(masks))[:, None]
        root = None
        if out_root is not None:
            root = Path(out_root)
            image_dir, mask_dir = DOMAIN_DIRS[domain]
            for name, px, m in zip(names, pixels, masks):
                save_image(Image(px.astype(np.float32) / 255.0, RangeTag.UNIT), root / image_dir / name)
                save_mask(Mask(m), root / mask_dir / name)
        result[domain] = ImageDataset(domain, names, images, mask_t, root)
        geometry[domain.value] = geo
    if out_root is not None:
        meta = {"spec": asdict(spec), "geometry": geometry}
        try:
            (Path(out_root) / "toy_meta.json").write_text(json.dumps(meta, indent=1))
        except OSError as exc:
            raise StorageError(f"cannot write toy metadata: {exc}") from exc
    return ToyDomains(result[DomainTag.ART], result[DomainTag.REAL], geometry)
