"""U-Net subject/background segmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import checkpoint
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .imagecore import Image, Mask

log = logging.getLogger(__name__)

KIND = "SEGMENTER"
EPS = 1e-7
SEG_LOSSES = ("bce", "dice", "bce+dice")


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with one skip connection per level and a sigmoid head."""

    def __init__(self, in_channels: int = 3, base_channels: int = 64, depth: int = 4):
        super().__init__()
        if depth < 1 or base_channels < 1:
            raise ConfigError("U-Net depth and base_channels must be positive")
        self.arch = dict(in_channels=in_channels, base_channels=base_channels, depth=depth)
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(_double_conv(widths[i] * 2, widths[i]))
        self.head = nn.Conv2d(base_channels, 1, 1)

    @property
    def depth(self) -> int:
        return self.arch["depth"]

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


def toy_unet(**overrides) -> UNet:
    return UNet(**{"base_channels": 16, "depth": 3, **overrides})


def _check_dims(params: UNet, batch: torch.Tensor):
    f = 2 ** params.depth
    h, w = batch.shape[-2:]
    if batch.dim() != 4 or h % f or w % f:
        raise ShapeError(f"segmenter input {tuple(batch.shape)} must be (N, C, H, W) with H, W divisible by {f}")


@torch.no_grad()
def segment_batch(params: UNet, images: torch.Tensor) -> torch.Tensor:
    """Masks (N, 1, H, W) for a batch in the symmetric range, no gradient."""
    _check_dims(params, images)
    was_training = params.training
    params.eval()
    try:
        return params(images.to(next(params.parameters()).dtype)).to(images.dtype)
    finally:
        params.train(was_training)


def segment(params: UNet, image: Image) -> Mask:
    batch = image.to_range("symmetric").to_tensor()[None]
    out = segment_batch(params, batch)[0, 0].clamp(0.0, 1.0)
    return Mask(out.numpy())


def segmenter_loss(pred, truth):
    """Mean per-pixel binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    p = pred.clamp(EPS, 1.0 - EPS)
    return -(truth * torch.log(p) + (1.0 - truth) * torch.log(1.0 - p)).mean()


def dice_loss(pred, truth, smooth: float = 1.0):
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    inter = (pred * truth).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + truth.sum() + smooth)


@dataclass
class SegTrainConfig:
    epochs: int = 15
    learning_rate: float = 0.05
    batch_size: int = 8
    seed: int = 0
    loss: str = "bce"
    depth: int = 3
    base_channels: int = 16

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError(f"segmenter epochs must be > 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"segmenter batch_size must be > 0, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"segmenter learning_rate must be > 0, got {self.learning_rate}")
        if self.loss not in SEG_LOSSES:
            raise ConfigError(f"segmenter loss must be one of {SEG_LOSSES}")


def _objective(kind, pred, truth):
    if kind == "bce":
        return segmenter_loss(pred, truth)
    if kind == "dice":
        return dice_loss(pred, truth)
    return segmenter_loss(pred, truth) + dice_loss(pred, truth)


def train_segmenter(images: torch.Tensor, masks: torch.Tensor, config: SegTrainConfig,
                    params: UNet | None = None):
    """Fit a U-Net with Adagrad. Returns ``(params, epoch_losses)``.

    ``images`` is (N, 3, H, W) in [-1, 1]; ``masks`` is (N, 1, H, W) in [0, 1].
    """
    if len(images) == 0:
        raise DataError("segmenter dataset is empty")
    if masks.dim() == 3:
        masks = masks.unsqueeze(1)
    if len(images) != len(masks) or images.shape[-2:] != masks.shape[-2:]:
        raise DataError(f"images {tuple(images.shape)} and masks {tuple(masks.shape)} are not aligned")
    gen = torch.Generator().manual_seed(config.seed)
    if params is None:
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            params = UNet(images.shape[1], config.base_channels, config.depth)
    _check_dims(params, images)
    opt = torch.optim.Adagrad(params.parameters(), lr=config.learning_rate)
    params.train()
    history = []
    n = len(images)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs more than one sample
            pred = params(images[idx])
            loss = _objective(config.loss, pred, masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        mean = total / max(seen, 1)
        if not math.isfinite(mean):
            raise NumericError(f"segmenter loss diverged at epoch {epoch}: {mean}")
        history.append(mean)
        log.info("segmenter epoch %d/%d loss %.5f", epoch + 1, config.epochs, mean)
    params.eval()
    return params, history


def iou(pred: torch.Tensor, truth: torch.Tensor, threshold: float = 0.5) -> float:
    p = pred >= threshold
    t = truth >= 0.5
    union = (p | t).sum().item()
    return 1.0 if union == 0 else (p & t).sum().item() / union


def save_segmenter(path, params: UNet, meta: dict | None = None) -> None:
    checkpoint.save(path, checkpoint.Container(KIND, dict(params.arch), dict(meta or {}),
                                               checkpoint.module_tensors(params)))


def load_segmenter(path) -> UNet:
    c = checkpoint.load(path, expected_kind=KIND)
    try:
        net = UNet(**c.arch)
    except TypeError as exc:
        raise CheckpointError(f"bad segmenter architecture record: {exc}") from exc
    checkpoint.load_module_tensors(net, c.tensors)
    return net.eval()

