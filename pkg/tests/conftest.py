import numpy as np
import pytest
import torch

from smcyclegan.networks import PatchDiscriminator, ResnetGenerator


def he_init(net):
    # He-scaled weights keep a 1e-5 finite-difference step far from ReLU kinks
    for m in net.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d)):
            torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            torch.nn.init.normal_(m.bias, 0.0, 0.1)
    return net


def tiny_generator(seed):
    torch.manual_seed(seed)
    return he_init(ResnetGenerator(base_channels=2, n_res_blocks=1).double())


def tiny_discriminator(seed):
    torch.manual_seed(seed)
    return he_init(PatchDiscriminator(base_channels=4, n_layers=1).double())


def rand_images(gen, n=2, size=16):
    return torch.rand(n, 3, size, size, generator=gen, dtype=torch.float64) * 2 - 1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
