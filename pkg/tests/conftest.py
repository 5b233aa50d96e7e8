import numpy as np
import pytest
import torch

from tablet.autoencoder import Autoencoder2D


class ZeroDecoder(Autoencoder2D):
    """Lossless encoder whose decoder returns zeros: used to knock out one axis."""

    def __init__(self, factor=32):
        super().__init__()
        self.factor = factor
        self.latent_channels = 3 * factor * factor

    def _encode(self, x):
        return torch.nn.functional.pixel_unshuffle(x, self.factor)

    def _decode(self, z):
        return torch.zeros(z.shape[0], 3, z.shape[2] * self.factor, z.shape[3] * self.factor, dtype=z.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def brain_scan():
    from tablet.data import SynthSpec, synthesize_scan

    vol, _ = synthesize_scan(SynthSpec(T_total=4, seed=11, grid=(40, 40, 40), label=1))
    return vol


@pytest.fixture(scope="session")
def toy_ae(brain_scan):
    """TinyConvAutoencoder fitted briefly on slices of one synthetic frame."""
    from tablet.autoencoder import TinyConvAutoencoder, fit_autoencoder

    frame = torch.from_numpy(brain_scan.data[0])
    imgs = torch.cat([frame.movedim(a, 0)[::2] for a in range(3)]).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()
    torch.manual_seed(0)
    ae = TinyConvAutoencoder(32, hidden=32)
    fit_autoencoder(ae, imgs, steps=150, lr=5e-3, batch_size=16, seed=0)
    return ae


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
