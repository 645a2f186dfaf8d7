"""Shared fixtures: tiny model configurations sized for CPU test runs."""
import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dgvc.core import CodecConfig
from dgvc.model import CodecModel

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

torch.set_num_threads(1)


def small_config(**overrides) -> CodecConfig:
    """A codec config small enough that encode/decode runs in well under a
    second per frame on one CPU core, while keeping every architectural
    element (pyramid levels, recurrent enhancers, discriminators) live."""
    base = dict(
        gop_size=5,
        lmbda=1024.0,
        channels=8,
        latent_channels=16,
        prior_support=24,
        flow_levels=3,
        disc_channels=(8, 16, 24, 32),
    )
    base.update(overrides)
    return CodecConfig(**base)


@pytest.fixture(scope="session")
def tiny_config() -> CodecConfig:
    return small_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> CodecModel:
    torch.manual_seed(0)
    return CodecModel(tiny_config)


@pytest.fixture(scope="session")
def tiny_tables(tiny_model):
    return tiny_model.coding_tables()


def seeded_frames(n_frames: int, height: int, width: int, seed: int = 0):
    """Deterministic random frames as a list of Frame objects."""
    from dgvc.core import Frame

    g = torch.Generator().manual_seed(seed)
    return [Frame(torch.rand(height, width, 3, generator=g), i)
            for i in range(n_frames)]


def seeded_clip(n_frames: int, height: int, width: int, seed: int = 0):
    """Deterministic random clip tensor (T,3,H,W) in [0,1]."""
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n_frames, 3, height, width, generator=g)


def rng_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    return rng.random((height, width, 3), dtype=np.float64).astype(np.float32)


def fd_vs_autograd(fn, x0: torch.Tensor, probes: int, seed: int = 0,
                   h: float = 1e-6) -> float:
    """Worst relative error between autograd and central finite differences
    over randomly probed coordinates of ``x0`` (expects float64 inputs)."""
    x = x0.detach().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().clone()
    rng = np.random.default_rng(seed)
    flat = x.detach().clone().reshape(-1)
    worst = 0.0
    for _ in range(probes):
        i = int(rng.integers(flat.numel()))
        bump = torch.zeros_like(flat)
        bump[i] = h
        up = fn((flat + bump).reshape(x0.shape)).item()
        down = fn((flat - bump).reshape(x0.shape)).item()
        fd = (up - down) / (2 * h)
        ag = grad.reshape(-1)[i].item()
        scale = max(abs(fd), abs(ag), 1e-8)
        worst = max(worst, abs(fd - ag) / scale)
    return worst
