"""Fréchet distance between Gaussian fits of embedded image sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError, NumericError, ShapeError, StorageError
from .imagecore import Image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureStatistics:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


class FeatureExtractor:
    """Maps a (N, C, H, W) batch in [-1, 1] to (N, d) float64 features."""

    identifier = "base"
    input_size: int | None = None

    def embed(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, images) -> np.ndarray:
        batch = _as_batch(images)
        if self.input_size is not None and batch.shape[-2:] != (self.input_size, self.input_size):
            batch = nn.functional.interpolate(batch.double(), size=(self.input_size,) * 2,
                                              mode="bilinear", align_corners=False).clamp(-1, 1)
        feats = self.embed(batch)
        return np.asarray(feats, dtype=np.float64).reshape(len(batch), -1)


class RawPixelExtractor(FeatureExtractor):
    identifier = "raw"

    def __init__(self, input_size: int | None = None):
        self.input_size = input_size

    def embed(self, images):
        return images.double().reshape(len(images), -1).numpy()


class RandomConvExtractor(FeatureExtractor):
    """Small convolutional embedding with frozen, seeded random weights."""

    def __init__(self, seed: int = 0, input_size: int = 32, width: int = 32, batch: int = 256):
        self.input_size = input_size
        self.identifier = f"randconv-s{seed}-w{width}-{input_size}px"
        self.batch = batch
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            ).double().eval()

    @torch.no_grad()
    def embed(self, images):
        images = images.double()
        return torch.cat([self.net(images[i:i + self.batch]) for i in range(0, len(images), self.batch)]).numpy()


class TorchScriptExtractor(FeatureExtractor):
    """Externally supplied embedding network saved with ``torch.jit.save``."""

    def __init__(self, path, input_size: int = 299):
        self.identifier = f"torchscript:{path}"
        self.input_size = input_size
        try:
            self.net = torch.jit.load(str(path), map_location="cpu").eval()
        except (OSError, RuntimeError, ValueError) as exc:
            raise StorageError(f"cannot load feature extractor {path}: {exc}") from exc

    @torch.no_grad()
    def embed(self, images):
        return self.net(images.float()).double().reshape(len(images), -1).numpy()


def get_extractor(spec: str, input_size: int | None = None) -> FeatureExtractor:
    """``raw``, ``randconv`` (optionally ``randconv:<seed>``) or ``torchscript:<path>``."""
    name, _, arg = spec.partition(":")
    if name == "raw":
        return RawPixelExtractor(input_size)
    if name == "randconv":
        return RandomConvExtractor(seed=int(arg or 0), input_size=input_size or 32)
    if name == "torchscript" and arg:
        return TorchScriptExtractor(arg, input_size or 299)
    raise ConfigError(f"unknown feature extractor {spec!r}")


def _as_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        return images
    images = list(images)
    if images and isinstance(images[0], Image):
        shapes = {im.data.shape for im in images}
        if len(shapes) > 1:
            raise ShapeError(f"images differ in shape: {sorted(shapes)}")
        return torch.stack([im.to_range("symmetric").to_tensor() for im in images])
    return torch.stack([torch.as_tensor(im) for im in images])


def statistics_from_features(features: np.ndarray) -> FeatureStatistics:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DataError(f"need at least 2 samples for feature statistics, got {features.shape[0]}")
    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return FeatureStatistics(mean, (cov + cov.T) / 2.0, features.shape[0])


def feature_statistics(images, extractor: FeatureExtractor) -> FeatureStatistics:
    batch = _as_batch(images)
    if len(batch) < 2:
        raise DataError(f"need at least 2 images for feature statistics, got {len(batch)}")
    return statistics_from_features(extractor(batch))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((matrix + matrix.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStatistics, b: FeatureStatistics) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at 0.

    The trace of (S_a S_b)^(1/2) is taken from the symmetric PSD product
    S_a^(1/2) S_b S_a^(1/2), which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise ShapeError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    for stats in (a, b):
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.covariance))):
            raise NumericError("non-finite feature statistics")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.covariance)
    product = root_a @ b.covariance @ root_a
    eig = np.clip(np.linalg.eigvalsh((product + product.T) / 2.0), 0.0, None)
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.sqrt(eig).sum())
    return max(value, 0.0)


def compare_folders(generated_dir, reference_dir, extractor: FeatureExtractor) -> dict:
    """FID between two image folders plus the counts that went into it."""
    from .data import load_image_folder

    sets = []
    for folder in (generated_dir, reference_dir):
        names, images, _ = load_image_folder(folder, extractor.input_size)
        if len(names) < 2:
            raise DataError(f"{folder} holds {len(names)} readable images; need at least 2")
        sets.append(images)
    stats = [feature_statistics(images, extractor) for images in sets]
    log.info("FID sets: generated=%d reference=%d", stats[0].sample_count, stats[1].sample_count)
    return {
        "generated_count": stats[0].sample_count,
        "reference_count": stats[1].sample_count,
        "extractor": extractor.identifier,
        "fid": frechet_distance(stats[0], stats[1]),
    }


def evaluate_fid(generated_dir, reference_dir, extractor: FeatureExtractor) -> float:
    return compare_folders(generated_dir, reference_dir, extractor)["fid"]
