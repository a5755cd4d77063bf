import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / 'hrsem_toolkit'))

from core.da_trainer import DATrainConfig, ScheduleConfig  # noqa: E402
from core.losses import LossWeights  # noqa: E402
from core.networks import DiscriminatorConfig, GeneratorConfig  # noqa: E402
from core.raster_io import Tile  # noqa: E402
from core.synth_data import SceneSpec, StyleSpec, generate_dataset  # noqa: E402


@pytest.fixture
def tiny_gen_cfg():
    return GeneratorConfig(encoder_channels=[8, 16, 32], residual_blocks=1, residual_channels=32,
                           decoder_channels=[32, 16, 8])


@pytest.fixture
def tiny_disc_cfg():
    return DiscriminatorConfig(channels=[8, 16, 32, 64, 1])


@pytest.fixture
def tiny_da_cfg(tiny_gen_cfg, tiny_disc_cfg):
    return DATrainConfig(
        generator=tiny_gen_cfg,
        discriminator=tiny_disc_cfg,
        schedule=ScheduleConfig(lr_base=1e-4, iter_max=20, iter_decay_start=10),
        loss_weights=LossWeights(),
        checkpoint_every=10,
        log_every=5,
        device='cpu',
        seed=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_tile(rng):
    def make(bands=4, height=32, width=32, dtype=np.float32, labels=False):
        if dtype == np.uint8:
            pixels = rng.integers(0, 256, size=(bands, height, width), dtype=np.uint8)
        else:
            pixels = rng.uniform(-1, 1, size=(bands, height, width)).astype(np.float32)
        lab = rng.integers(0, 5, size=(height, width), dtype=np.uint8) if labels else None
        return Tile(pixels=pixels, labels=lab)
    return make


@pytest.fixture
def tiny_dataset(tmp_path):
    """Four paired 64x64 scenes per domain with a strong style shift"""
    source = SceneSpec(seed=7, size=(64, 64), style=StyleSpec(noise_std=2.0))
    target = SceneSpec(seed=7, size=(64, 64),
                       style=StyleSpec(gains=(1.3,) * 4, biases=(60.0,) * 4, noise_std=4.0))
    manifest = generate_dataset(4, source, target, tmp_path / 'data', quiet=True)
    return tmp_path / 'data', manifest


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture
def gradient_check():
    """Compare autograd with central differences on a sample of parameters.

    Parameters whose forward and backward one-sided differences disagree sit on a
    ReLU, max-pool or |.| kink inside [-h, h] and are skipped. Returns the number
    of parameters compared and a list of mismatches.
    """
    def check(objective, params, fraction=0.01, seed=6, h=1e-6, rtol=1e-3):
        params = [p for p in params if p.requires_grad]
        for p in params:
            p.grad = None
        base = objective()
        base.backward()
        f0 = base.item()
        # cancellation noise of a difference quotient in float64
        noise = 1e-9 * max(1.0, abs(f0))

        flat = [(p, i) for p in params for i in range(p.numel())]
        picker = torch.Generator().manual_seed(seed)
        sample = torch.randperm(len(flat), generator=picker)[:max(1, int(len(flat) * fraction))]
        checked, mismatches = 0, []
        with torch.no_grad():
            for k in sample.tolist():
                p, i = flat[k]
                view = p.view(-1)
                original = view[i].item()
                view[i] = original + h
                up = objective().item()
                view[i] = original - h
                down = objective().item()
                view[i] = original
                forward, backward = (up - f0) / h, (f0 - down) / h
                if abs(forward - backward) > rtol * max(abs(forward), abs(backward)) + 2 * noise:
                    continue
                numeric = (up - down) / (2 * h)
                analytic = p.grad.view(-1)[i].item()
                checked += 1
                if abs(numeric - analytic) > rtol * max(abs(numeric), abs(analytic)) + noise:
                    mismatches.append((k, analytic, numeric))
        return checked, len(sample), mismatches
    return check
