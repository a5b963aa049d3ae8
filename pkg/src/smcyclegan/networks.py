"""Generators G: X->Y, F: Y->X and patch discriminators D_X, D_Y."""
from __future__ import annotations

import torch
import torch.nn as nn

from . import checkpoint
from .errors import CheckpointError, ShapeError
from .imagecore import Image

GENERATOR_KINDS = ("GEN_G", "GEN_F")
DISCRIMINATOR_KINDS = ("DISC_X", "DISC_Y")


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    """N(0, gain) weights for conv layers, zero biases."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.normal_(m.weight, 1.0, gain)
            nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Encoder (2 stride-2 convs), residual transform, decoder; tanh output."""

    n_downsampling = 2

    def __init__(self, in_channels: int = 3, out_channels: int = 3, base_channels: int = 64,
                 n_res_blocks: int = 9):
        super().__init__()
        self.arch = dict(in_channels=in_channels, out_channels=out_channels,
                         base_channels=base_channels, n_res_blocks=n_res_blocks)
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base_channels, 7),
            nn.InstanceNorm2d(base_channels),
            nn.ReLU(True),
        ]
        ch = base_channels
        for _ in range(self.n_downsampling):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_res_blocks)]
        for _ in range(self.n_downsampling):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    @property
    def size_factor(self) -> int:
        return 2 ** self.n_downsampling

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Patch classifier: ``n_layers`` stride-2 convs, then two stride-1 convs.

    With ``n_layers=3`` every output score sees a 70x70 input patch.
    """

    kernel = 4
    padding = 1

    def __init__(self, in_channels: int = 3, base_channels: int = 64, n_layers: int = 3,
                 sigmoid: bool = True):
        super().__init__()
        self.arch = dict(in_channels=in_channels, base_channels=base_channels,
                         n_layers=n_layers, sigmoid=sigmoid)
        k, p = self.kernel, self.padding
        layers = [nn.Conv2d(in_channels, base_channels, k, 2, p), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(base_channels * prev, base_channels * mult, k, 2, p),
                nn.InstanceNorm2d(base_channels * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [
            nn.Conv2d(base_channels * prev, base_channels * mult, k, 1, p),
            nn.InstanceNorm2d(base_channels * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(base_channels * mult, 1, k, 1, p),
        ]
        if sigmoid:
            layers.append(nn.Sigmoid())
        self.model = nn.Sequential(*layers)
        init_weights(self)

    @property
    def strides(self) -> list[int]:
        return [2] * self.arch["n_layers"] + [1, 1]

    @property
    def receptive_field(self) -> int:
        rf = 1
        for s in reversed(self.strides):
            rf = rf * s + (self.kernel - s)
        return rf

    def output_size(self, size: int) -> int:
        for s in self.strides:
            size = (size + 2 * self.padding - self.kernel) // s + 1
        return size

    def forward(self, x):
        return self.model(x)


def toy_generator(**overrides) -> ResnetGenerator:
    return ResnetGenerator(**{"base_channels": 16, "n_res_blocks": 3, **overrides})


def toy_discriminator(**overrides) -> PatchDiscriminator:
    return PatchDiscriminator(**{"base_channels": 16, "n_layers": 1, **overrides})


def _as_batch(image) -> tuple[torch.Tensor, bool]:
    if isinstance(image, Image):
        return image.to_range("symmetric").to_tensor()[None], True
    if image.dim() == 3:
        return image[None], True
    if image.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got {tuple(image.shape)}")
    return image, False


def generate(params: ResnetGenerator, image):
    """Translate an image or batch; output has the input's shape, values in [-1, 1]."""
    batch, single = _as_batch(image)
    h, w = batch.shape[-2:]
    f = params.size_factor
    if h % f or w % f:
        raise ShapeError(f"image {h}x{w} not divisible by generator factor {f}")
    if batch.shape[1] != params.arch["in_channels"]:
        raise ShapeError(f"generator expects {params.arch['in_channels']} channels, got {batch.shape[1]}")
    out = params(batch)
    if isinstance(image, Image):
        return Image(out[0].detach().clamp(-1, 1).permute(1, 2, 0).cpu().numpy(), "symmetric")
    return out[0] if single else out


def discriminate(params: PatchDiscriminator, image) -> torch.Tensor:
    """Score map (N, 1, h', w'); with the sigmoid head each score is in (0, 1)."""
    batch, single = _as_batch(image)
    h, w = batch.shape[-2:]
    rf = params.receptive_field
    if h < rf or w < rf:
        raise ShapeError(f"image {h}x{w} smaller than discriminator receptive field {rf}")
    out = params(batch)
    return out[0] if single else out


def save_network(path, kind: str, net: nn.Module) -> None:
    checkpoint.save(path, checkpoint.Container(kind, dict(net.arch), {}, checkpoint.module_tensors(net)))


def build_network(kind: str, arch: dict) -> nn.Module:
    if kind in GENERATOR_KINDS:
        return ResnetGenerator(**arch)
    if kind in DISCRIMINATOR_KINDS:
        return PatchDiscriminator(**arch)
    raise CheckpointError(f"unknown network kind {kind}")


def load_network(path, kind: str) -> nn.Module:
    c = checkpoint.load(path, expected_kind=kind)
    try:
        net = build_network(kind, c.arch)
    except TypeError as exc:
        raise CheckpointError(f"bad architecture record: {exc}") from exc
    checkpoint.load_module_tensors(net, c.tensors)
    return net.eval()
