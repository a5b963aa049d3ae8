import math

import numpy as np
import pytest
import torch

from conftest import he_init
from oracles import finite_difference_check, loop_bce
from smcyclegan.data import ToySpec, generate_toy_domains
from smcyclegan.errors import CheckpointError, ConfigError, DataError, ShapeError
from smcyclegan.imagecore import Image
from smcyclegan.segmenter import (EPS, SegTrainConfig, UNet, dice_loss, iou, load_segmenter, save_segmenter,
                                  segment, segment_batch, segmenter_loss, toy_unet, train_segmenter)


def test_segment_full_scale_contract():
    torch.manual_seed(0)
    net = UNet(base_channels=4, depth=4)
    img = Image(np.random.default_rng(0).uniform(-1, 1, (256, 256, 3)))
    mask = segment(net, img)
    assert mask.data.shape == (256, 256)
    assert mask.data.min() >= 0 and mask.data.max() <= 1


def test_untrained_segmenter_valid_mask():
    torch.manual_seed(1)
    out = segment_batch(toy_unet(), torch.rand(3, 3, 32, 32) * 2 - 1)
    assert out.shape == (3, 1, 32, 32)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_segment_rejects_incompatible_dims():
    with pytest.raises(ShapeError):
        segment_batch(toy_unet(), torch.zeros(1, 3, 36, 36))


def test_unet_levels_are_symmetric():
    net = UNet(base_channels=4, depth=3)
    assert len(net.down) == len(net.up) == len(net.dec) == 3


def test_loss_perfect_prediction():
    truth = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert segmenter_loss(truth.clamp(EPS, 1 - EPS), truth).item() <= 1e-6
    assert segmenter_loss(truth, truth).item() <= 1e-6


def test_loss_max_uncertainty():
    truth = (torch.rand(5, 5) > 0.5).double()
    assert abs(segmenter_loss(torch.full((5, 5), 0.5, dtype=torch.float64), truth).item() - math.log(2)) < 1e-6


def test_loss_matches_loop_oracle():
    g = torch.Generator().manual_seed(3)
    pred, truth = torch.rand(4, 4, generator=g, dtype=torch.float64), torch.rand(4, 4, generator=g, dtype=torch.float64)
    assert abs(segmenter_loss(pred, truth).item() - loop_bce(pred, truth)) < 1e-9


def test_loss_shape_and_sign():
    with pytest.raises(ShapeError):
        segmenter_loss(torch.zeros(2, 2), torch.zeros(2, 3))
    g = torch.Generator().manual_seed(4)
    for _ in range(20):
        p, t = torch.rand(3, 3, generator=g), (torch.rand(3, 3, generator=g) > 0.5).float()
        assert segmenter_loss(p, t).item() >= 0


def test_dice_loss_bounds():
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-7)
    assert 0 < dice_loss(1 - t, t).item() <= 1


def test_segmenter_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    net = he_init(UNet(base_channels=2, depth=1)).double()
    g = torch.Generator().manual_seed(5)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    t = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).double()
    assert finite_difference_check(lambda: segmenter_loss(net(x), t), net.parameters()) <= 1e-3


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(loss="hinge")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SegTrainConfig(**kwargs)


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        train_segmenter(torch.zeros(0, 3, 8, 8), torch.zeros(0, 1, 8, 8), SegTrainConfig())


@pytest.fixture(scope="module")
def small_toy():
    toy = generate_toy_domains(ToySpec(count=24, seed=11, image_size=16))
    return torch.cat([toy.x.images, toy.y.images]), torch.cat([toy.x.masks, toy.y.masks])


def test_training_records_finite_epoch_losses(small_toy):
    images, masks = small_toy
    params, history = train_segmenter(images, masks, SegTrainConfig(epochs=3, depth=2, base_channels=4))
    assert len(history) == 3 and all(math.isfinite(v) for v in history)
    assert history[-1] < history[0]


def test_training_is_bit_reproducible(small_toy):
    images, masks = small_toy
    cfg = SegTrainConfig(epochs=2, depth=2, base_channels=4, seed=9)
    a, ha = train_segmenter(images, masks, cfg)
    b, hb = train_segmenter(images, masks, cfg)
    assert ha == hb
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)


def test_checkpoint_round_trip(tmp_path, small_toy):
    images, _ = small_toy
    torch.manual_seed(0)
    net = UNet(base_channels=4, depth=2).eval()
    save_segmenter(tmp_path / "s.smcg", net)
    back = load_segmenter(tmp_path / "s.smcg")
    assert torch.equal(segment_batch(net, images[:4]), segment_batch(back, images[:4]))
    (tmp_path / "bad.smcg").write_bytes(b"SMCG" + b"\0" * 30)
    with pytest.raises(CheckpointError):
        load_segmenter(tmp_path / "bad.smcg")


def test_iou():
    t = torch.zeros(4, 4)
    t[:2] = 1
    assert iou(t, t) == 1.0
    p = torch.zeros(4, 4)
    p[:1] = 1
    assert iou(p, t) == 0.5
