"""Training objectives, all expressed as quantities to minimise.

Score expectations are means over the batch and over every patch of the
discriminator's score map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import NumericError, ShapeError
from .imagecore import mask_batch
from .networks import discriminate

EPS = 1e-7

GAN_MODES = ("bce", "lsgan")
GENERATOR_FORMS = ("non_saturating", "minimax")


def _check_scores(*maps):
    for m in maps:
        if m.numel() == 0:
            raise ShapeError("empty score map")


def _log(x):
    return torch.log(x.clamp(EPS, 1.0 - EPS))


def adversarial_loss_D(real_scores, fake_scores, gan_mode: str = "bce"):
    """Discriminator loss; the two maps may differ in size."""
    _check_scores(real_scores, fake_scores)
    if gan_mode == "lsgan":
        return ((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean()
    return -(_log(real_scores).mean() + _log(1.0 - fake_scores).mean())


def adversarial_loss_G(fake_scores, gan_mode: str = "bce", form: str = "non_saturating"):
    """Generator loss. ``form="minimax"`` minimises mean log(1 - D(fake)), which is negative."""
    _check_scores(fake_scores)
    if gan_mode == "lsgan":
        return ((fake_scores - 1.0) ** 2).mean()
    if form == "minimax":
        return _log(1.0 - fake_scores).mean()
    return -_log(fake_scores).mean()


def masked_adversarial_loss_D(D, real, real_mask, fake, fake_mask, gan_mode: str = "bce"):
    real_scores = discriminate(D, mask_batch(real, real_mask))
    fake_scores = discriminate(D, mask_batch(fake, fake_mask))
    return adversarial_loss_D(real_scores, fake_scores, gan_mode)


def masked_adversarial_loss_G(D, fake, fake_mask, gan_mode: str = "bce", form: str = "non_saturating"):
    return adversarial_loss_G(discriminate(D, mask_batch(fake, fake_mask)), gan_mode, form)


def _l1(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_consistency_loss(x, x_reconstructed, y, y_reconstructed):
    """mean|F(G(x)) - x| + mean|G(F(y)) - y|."""
    return _l1(x_reconstructed, x, "cycle x") + _l1(y_reconstructed, y, "cycle y")


def identity_loss(y, G_of_y, x, F_of_x):
    return _l1(G_of_y, y, "identity y") + _l1(F_of_x, x, "identity x")


@dataclass
class LossBundle:
    adv_G: object
    adv_F: object
    cycle: object
    identity: object
    lam: float
    total: object

    FIELDS = ("adv_G", "adv_F", "cycle", "identity", "total")

    def as_record(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.FIELDS}


def _finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite loss term {name!r}: {v}")


def full_objective(adv_G, adv_F, cycle, identity, lam: float = 10.0) -> LossBundle:
    """Weighted sum adv_G + adv_F + lam*cycle + 0.5*lam*identity."""
    for name, value in (("adv_G", adv_G), ("adv_F", adv_F), ("cycle", cycle), ("identity", identity)):
        _finite(name, value)
    if not math.isfinite(lam) or lam < 0:
        raise NumericError(f"lambda must be finite and non-negative, got {lam}")
    total = adv_G + adv_F + lam * cycle + 0.5 * lam * identity
    return LossBundle(adv_G, adv_F, cycle, identity, lam, total)
