"""SMCycleGAN optimisation loop.

Randomness is split into independent numpy streams (data sampling, the
per-step mask Bernoulli, and one per image pool) so that changing how often
one of them is consulted never perturbs the others.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import ImageDataset, sample_indices
from .errors import CheckpointError, ConfigError, DataError, NumericError, StorageError
from .losses import (GAN_MODES, GENERATOR_FORMS, LossBundle, adversarial_loss_D, adversarial_loss_G,
                     cycle_consistency_loss, full_objective, identity_loss, masked_adversarial_loss_D,
                     masked_adversarial_loss_G)
from .networks import PatchDiscriminator, ResnetGenerator, discriminate
from .segmenter import UNet, segment_batch

log = logging.getLogger(__name__)

STATE_KIND = "TRAIN_STATE"
NETWORK_SLOTS = ("GEN_G", "GEN_F", "DISC_X", "DISC_Y")
MASK_SOURCES = ("segmenter", "ground_truth")
MASK_MODES = ("soft", "binary")


@dataclass
class TrainConfig:
    epochs: int = 100
    lam: float = 10.0
    pool_size: int = 3
    mask_prob_start: float = 0.1
    mask_prob_end: float = 1.0
    mask_source: str = "segmenter"  # where masks of REAL images come from
    mask_mode: str = "soft"
    mask_threshold: float = 0.5
    batch_size: int = 1
    steps_per_epoch: int | None = None  # None: ceil(max(|X|, |Y|) / batch_size)
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start_fraction: float = 0.5
    d_loss_weight: float = 0.5
    gan_mode: str = "bce"
    generator_form: str = "non_saturating"
    seed: int = 0
    checkpoint_every: int = 10
    gen_base_channels: int = 64
    gen_res_blocks: int = 9
    disc_base_channels: int = 64
    disc_layers: int = 3

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be > 0, got {self.epochs}")
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if not (0.0 <= self.mask_prob_start <= self.mask_prob_end <= 1.0):
            raise ConfigError("need 0 <= mask_prob_start <= mask_prob_end <= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if self.gan_mode not in GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {GAN_MODES}")
        if self.generator_form not in GENERATOR_FORMS:
            raise ConfigError(f"generator_form must be one of {GENERATOR_FORMS}")
        if not 0.0 <= self.decay_start_fraction <= 1.0:
            raise ConfigError("decay_start_fraction must lie in [0, 1]")

    @property
    def masking_possible(self) -> bool:
        return self.mask_prob_end > 0.0


def toy_train_config(**overrides) -> TrainConfig:
    """Settings sized for 32x32 toy domains on a CPU."""
    base = dict(epochs=20, batch_size=4, gen_base_channels=16, gen_res_blocks=3,
                disc_base_channels=16, disc_layers=1, checkpoint_every=5)
    base.update(overrides)
    return TrainConfig(**base)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**values)


def mask_probability(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from mask_prob_start at epoch 0 to mask_prob_end at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.mask_prob_start
    frac = epoch / (config.epochs - 1)
    return config.mask_prob_start + (config.mask_prob_end - config.mask_prob_start) * frac


def lr_factor(epoch: int, config: TrainConfig) -> float:
    """Constant for the first part of training, then linear decay towards zero."""
    keep = int(round(config.epochs * config.decay_start_fraction))
    decay = config.epochs - keep
    return 1.0 - max(0, epoch - keep) / float(decay + 1)


class ImagePool:
    """Bounded history of generated images fed to the discriminators.

    While filling, every image is stored and returned. Once full, with
    probability ``swap_prob`` a uniformly chosen stored image is returned and
    replaced by the query; otherwise the query is returned unchanged.
    """

    def __init__(self, capacity: int, rng: np.random.Generator, swap_prob: float = 0.5):
        if capacity < 1:
            raise ConfigError(f"pool capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.swap_prob = swap_prob
        self.buffer: list[torch.Tensor] = []

    def __len__(self):
        return len(self.buffer)

    def query(self, image: torch.Tensor) -> torch.Tensor:
        image = image.detach()
        if len(self.buffer) < self.capacity:
            self.buffer.append(image.clone())
            return image
        if self.rng.random() < self.swap_prob:
            idx = int(self.rng.integers(self.capacity))
            old = self.buffer[idx]
            self.buffer[idx] = image.clone()
            return old
        return image

    def query_batch(self, images: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.query(im) for im in images])


@dataclass
class TrainState:
    G: ResnetGenerator
    F: ResnetGenerator
    D_X: PatchDiscriminator
    D_Y: PatchDiscriminator
    segmenter: UNet | None
    pool_x: ImagePool  # holds fakes F(y) for D_X
    pool_y: ImagePool  # holds fakes G(x) for D_Y
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    data_rng: np.random.Generator
    mask_rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @property
    def networks(self) -> dict[str, torch.nn.Module]:
        return {"GEN_G": self.G, "GEN_F": self.F, "DISC_X": self.D_X, "DISC_Y": self.D_Y}


@dataclass
class StepResult:
    bundle: LossBundle
    loss_D_X: float
    loss_D_Y: float
    mask_used: bool
    mask_prob: float

    def record(self) -> dict:
        rec = self.bundle.as_record()
        rec.update(loss_D_X=self.loss_D_X, loss_D_Y=self.loss_D_Y, mask_used=self.mask_used,
                   mask_prob=self.mask_prob)
        return rec


def _streams(seed: int):
    torch_seq, data, mask, pool_x, pool_y = np.random.SeedSequence(seed).spawn(5)
    return int(torch_seq.generate_state(1)[0]), *(np.random.default_rng(s) for s in (data, mask, pool_x, pool_y))


def _optimizers(config: TrainConfig, G, F, D_X, D_Y):
    betas = (config.beta1, config.beta2)
    opt_G = torch.optim.Adam(list(G.parameters()) + list(F.parameters()), lr=config.lr, betas=betas)
    opt_D = torch.optim.Adam(list(D_X.parameters()) + list(D_Y.parameters()), lr=config.lr, betas=betas)
    return opt_G, opt_D


def build_networks(config: TrainConfig, channels: int = 3):
    return (
        ResnetGenerator(channels, channels, config.gen_base_channels, config.gen_res_blocks),
        ResnetGenerator(channels, channels, config.gen_base_channels, config.gen_res_blocks),
        PatchDiscriminator(channels, config.disc_base_channels, config.disc_layers, config.gan_mode == "bce"),
        PatchDiscriminator(channels, config.disc_base_channels, config.disc_layers, config.gan_mode == "bce"),
    )


def init_state(config: TrainConfig, segmenter: UNet | None = None, channels: int = 3,
               dtype: torch.dtype = torch.float32) -> TrainState:
    torch_seed, data_rng, mask_rng, rng_px, rng_py = _streams(config.seed)
    with torch.random.fork_rng():
        torch.manual_seed(torch_seed)
        G, F, D_X, D_Y = (net.to(dtype) for net in build_networks(config, channels))
    opt_G, opt_D = _optimizers(config, G, F, D_X, D_Y)
    if segmenter is not None:
        segmenter.eval()
        for p in segmenter.parameters():
            p.requires_grad_(False)
    return TrainState(G, F, D_X, D_Y, segmenter, ImagePool(config.pool_size, rng_px),
                      ImagePool(config.pool_size, rng_py), opt_G, opt_D, data_rng, mask_rng)


def set_lr(state: TrainState, config: TrainConfig, epoch: int) -> float:
    lr = config.lr * lr_factor(epoch, config)
    for opt in (state.opt_G, state.opt_D):
        for group in opt.param_groups:
            group["lr"] = lr
    return lr


def _set_requires_grad(nets, flag: bool):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _fake_masks(state: TrainState, images: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    if state.segmenter is None:
        raise ConfigError("masked adversarial loss needs a segmenter for generated images")
    masks = segment_batch(state.segmenter, images.detach())
    if config.mask_mode == "binary":
        masks = (masks >= config.mask_threshold).to(masks.dtype)
    return masks


def _real_masks(state, images, given, config):
    if config.mask_source == "ground_truth":
        if given is None:
            raise DataError("mask_source=ground_truth but the batch carries no masks")
        if config.mask_mode == "binary":
            return (given >= config.mask_threshold).to(images.dtype)
        return given.to(images.dtype)
    return _fake_masks(state, images, config)


def _check(name, value):
    v = float(value.detach())
    if not math.isfinite(v):
        raise NumericError(f"non-finite loss term {name!r}: {v}")
    return v


def training_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, config: TrainConfig,
                  x_masks: torch.Tensor | None = None, y_masks: torch.Tensor | None = None) -> StepResult:
    """One generator update followed by one discriminator update."""
    if len(x) == 0 or len(y) == 0:
        raise DataError("empty training batch")
    p = mask_probability(state.epoch, config)
    use_mask = bool(state.mask_rng.random() < p)
    gan_mode, form = config.gan_mode, config.generator_form

    # generators
    _set_requires_grad((state.D_X, state.D_Y), False)
    fake_y = state.G(x)
    fake_x = state.F(y)
    cycle = cycle_consistency_loss(x, state.F(fake_y), y, state.G(fake_x))
    ident = identity_loss(y, state.G(y), x, state.F(x))
    if use_mask:
        adv_G = masked_adversarial_loss_G(state.D_Y, fake_y, _fake_masks(state, fake_y, config), gan_mode, form)
        adv_F = masked_adversarial_loss_G(state.D_X, fake_x, _fake_masks(state, fake_x, config), gan_mode, form)
    else:
        adv_G = adversarial_loss_G(discriminate(state.D_Y, fake_y), gan_mode, form)
        adv_F = adversarial_loss_G(discriminate(state.D_X, fake_x), gan_mode, form)
    bundle = full_objective(adv_G, adv_F, cycle, ident, config.lam)
    _check("total", bundle.total)
    state.opt_G.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.opt_G.step()

    # discriminators
    _set_requires_grad((state.D_X, state.D_Y), True)
    pooled_y = state.pool_y.query_batch(fake_y.detach())
    pooled_x = state.pool_x.query_batch(fake_x.detach())
    if use_mask:
        loss_D_Y = masked_adversarial_loss_D(state.D_Y, y, _real_masks(state, y, y_masks, config),
                                             pooled_y, _fake_masks(state, pooled_y, config), gan_mode)
        loss_D_X = masked_adversarial_loss_D(state.D_X, x, _real_masks(state, x, x_masks, config),
                                             pooled_x, _fake_masks(state, pooled_x, config), gan_mode)
    else:
        loss_D_Y = adversarial_loss_D(discriminate(state.D_Y, y), discriminate(state.D_Y, pooled_y), gan_mode)
        loss_D_X = adversarial_loss_D(discriminate(state.D_X, x), discriminate(state.D_X, pooled_x), gan_mode)
    d_x, d_y = _check("loss_D_X", loss_D_X), _check("loss_D_Y", loss_D_Y)
    state.opt_D.zero_grad(set_to_none=True)
    (config.d_loss_weight * (loss_D_X + loss_D_Y)).backward()
    state.opt_D.step()

    state.step += 1
    bundle = LossBundle(*(t.detach() if torch.is_tensor(t) else t for t in
                          (bundle.adv_G, bundle.adv_F, bundle.cycle, bundle.identity, bundle.lam, bundle.total)))
    return StepResult(bundle, d_x, d_y, use_mask, p)


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_payload(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, slot in sd["state"].items():
        for key, value in slot.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}/{idx}/{key}"] = value
            else:
                scalars[f"{idx}/{key}"] = value
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(opt, tensors: dict, meta: dict):
    state: dict = {}
    for name, value in tensors.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    for name, value in meta["scalars"].items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    groups = copy.deepcopy(meta["param_groups"])
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def state_container(state: TrainState, config: TrainConfig) -> checkpoint.Container:
    tensors = {}
    arch = {}
    for slot, net in state.networks.items():
        arch[slot] = dict(net.arch)
        tensors.update(checkpoint.module_tensors(net, slot))
    if state.segmenter is not None:
        arch["SEGMENTER"] = dict(state.segmenter.arch)
        tensors.update(checkpoint.module_tensors(state.segmenter, "SEGMENTER"))
    for name, pool in (("pool_x", state.pool_x), ("pool_y", state.pool_y)):
        for i, img in enumerate(pool.buffer):
            tensors[f"{name}/{i}"] = img
    opt_meta = {}
    for name, opt in (("opt_G", state.opt_G), ("opt_D", state.opt_D)):
        t, m = _optimizer_payload(opt, name)
        tensors.update(t)
        opt_meta[name] = m
    meta = {
        "config": config_to_dict(config),
        "epoch": state.epoch,
        "step": state.step,
        "rng": {
            "data": state.data_rng.bit_generator.state,
            "mask": state.mask_rng.bit_generator.state,
            "pool_x": state.pool_x.rng.bit_generator.state,
            "pool_y": state.pool_y.rng.bit_generator.state,
        },
        "optimizers": opt_meta,
    }
    return checkpoint.Container(STATE_KIND, arch, meta, tensors)


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    checkpoint.save(path, state_container(state, config))


def _rng_from(state_dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state_dict
    return rng


def load_state(path, config: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Restore a TRAIN_STATE checkpoint. ``config`` defaults to the stored snapshot."""
    c = checkpoint.load(path, expected_kind=STATE_KIND)
    try:
        saved = config_from_dict(c.meta["config"])
        config = config or saved
        G, F = (ResnetGenerator(**c.arch[k]) for k in ("GEN_G", "GEN_F"))
        D_X, D_Y = (PatchDiscriminator(**c.arch[k]) for k in ("DISC_X", "DISC_Y"))
        for slot, net in zip(NETWORK_SLOTS, (G, F, D_X, D_Y)):
            checkpoint.load_module_tensors(net, c.section(slot))
        segmenter = None
        if "SEGMENTER" in c.arch:
            segmenter = UNet(**c.arch["SEGMENTER"])
            checkpoint.load_module_tensors(segmenter, c.section("SEGMENTER"))
            segmenter.eval()
            for p in segmenter.parameters():
                p.requires_grad_(False)
        opt_G, opt_D = _optimizers(config, G, F, D_X, D_Y)
        _restore_optimizer(opt_G, c.section("opt_G"), c.meta["optimizers"]["opt_G"])
        _restore_optimizer(opt_D, c.section("opt_D"), c.meta["optimizers"]["opt_D"])
        rng = c.meta["rng"]
        pools = []
        for name in ("pool_x", "pool_y"):
            pool = ImagePool(config.pool_size, _rng_from(rng[name]))
            stored = c.section(name)
            pool.buffer = [stored[str(i)] for i in range(len(stored))]
            pools.append(pool)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"incomplete training checkpoint {path}: {exc!r}") from exc
    state = TrainState(G, F, D_X, D_Y, segmenter, pools[0], pools[1], opt_G, opt_D,
                       _rng_from(rng["data"]), _rng_from(rng["mask"]), c.meta["epoch"], c.meta["step"])
    return state, config


def load_generator(path, direction: str = "x2y") -> ResnetGenerator:
    """Pick G (x2y) or F (y2x) out of a TRAIN_STATE bundle or a standalone GEN_* file."""
    slot = {"x2y": "GEN_G", "y2x": "GEN_F"}.get(direction)
    if slot is None:
        raise ConfigError(f"direction must be x2y or y2x, got {direction!r}")
    c = checkpoint.load(path)
    if c.kind == STATE_KIND:
        arch, tensors = c.arch.get(slot), c.section(slot)
    elif c.kind == slot:
        arch, tensors = c.arch, c.tensors
    else:
        raise CheckpointError(f"checkpoint of kind {c.kind} holds no {slot} generator")
    if not arch:
        raise CheckpointError(f"checkpoint lacks {slot} architecture")
    try:
        net = ResnetGenerator(**arch)
    except TypeError as exc:
        raise CheckpointError(f"bad {slot} architecture record: {exc}") from exc
    checkpoint.load_module_tensors(net, tensors)
    return net.eval()


# ---------------------------------------------------------------------------
# full run


def steps_per_epoch(config: TrainConfig, n_x: int, n_y: int) -> int:
    return config.steps_per_epoch or math.ceil(max(n_x, n_y) / config.batch_size)


def _truncate_metrics(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep))


def train(config: TrainConfig, data_x: ImageDataset, data_y: ImageDataset, segmenter: UNet | None,
          out_dir, resume_from=None) -> TrainState:
    """Run the full schedule, writing ``metrics.jsonl`` and checkpoints under ``out_dir``."""
    if len(data_x) == 0:
        raise DataError("domain X dataset is empty")
    if len(data_y) == 0:
        raise DataError("domain Y dataset is empty")
    if config.masking_possible and segmenter is None and resume_from is None:
        raise ConfigError("mask probability > 0 requires a segmenter")
    if config.mask_source == "ground_truth" and config.masking_possible:
        if data_x.masks is None or data_y.masks is None:
            raise DataError("mask_source=ground_truth requires masks for both domains")
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {ckpt_dir}: {exc}") from exc
    metrics_path = out / "metrics.jsonl"

    if resume_from is not None:
        state, _ = load_state(resume_from, config)
        if segmenter is not None:
            state.segmenter = segmenter
        _truncate_metrics(metrics_path, state.step)
        log.info("resumed from %s at epoch %d step %d", resume_from, state.epoch, state.step)
    else:
        state = init_state(config, segmenter, data_x.images.shape[1])
        metrics_path.write_text("")
    n_steps = steps_per_epoch(config, len(data_x), len(data_y))

    with metrics_path.open("a") as metrics:
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            lr = set_lr(state, config, epoch)
            for _ in range(n_steps):
                ix = sample_indices(len(data_x), config.batch_size, state.data_rng)
                iy = sample_indices(len(data_y), config.batch_size, state.data_rng)
                ix_t, iy_t = torch.from_numpy(ix), torch.from_numpy(iy)
                result = training_step(
                    state, data_x.images[ix_t], data_y.images[iy_t], config,
                    None if data_x.masks is None else data_x.masks[ix_t],
                    None if data_y.masks is None else data_y.masks[iy_t],
                )
                rec = {"step": state.step, "epoch": epoch, **result.record(), "lr": lr}
                metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
            state.epoch = epoch + 1
            last = state.epoch == config.epochs
            if state.epoch % config.checkpoint_every == 0 or last:
                save_state(ckpt_dir / f"epoch_{state.epoch:04d}.smcg", state, config)
            log.info("epoch %d/%d done (step %d)", state.epoch, config.epochs, state.step)
    save_state(out / "final.smcg", state, config)
    _write_samples(out / "samples.npz", state, data_x, data_y)
    return state


@torch.no_grad()
def _write_samples(path: Path, state: TrainState, data_x: ImageDataset, data_y: ImageDataset, n: int = 8):
    x, y = data_x.images[:n], data_y.images[:n]
    state.G.eval()
    state.F.eval()
    try:
        np.savez(path, x=x.numpy(), g_x=state.G(x).numpy(), y=y.numpy(), f_y=state.F(y).numpy())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    finally:
        state.G.train()
        state.F.train()


@torch.no_grad()
def translate_batch(generator: ResnetGenerator, images: torch.Tensor, batch: int = 32) -> torch.Tensor:
    generator.eval()
    return torch.cat([generator(images[i:i + batch]) for i in range(0, len(images), batch)])
