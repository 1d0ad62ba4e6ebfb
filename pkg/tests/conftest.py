import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from infomae.data import WorldConfig, generate_world
from infomae.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_world_config():
    return WorldConfig(num_sequences=12, sequence_length=10, pair_ratio=0.5, labeled_fraction=0.25)


@pytest.fixture
def small_world(small_world_config):
    return generate_world(small_world_config, seed=3)


@pytest.fixture
def small_model_config():
    return ModelConfig(embed_dim=8, encoder_depth=1, decoder_depth=1, decoder_dim=8, shared_dim=2, private_dim=2)


def double_model(model):
    return model.double()


def assert_gradcheck(fn, inputs, rtol=1e-4):
    """Central differences (h=1e-5, float64) against autograd for a scalar ``fn``."""
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    h = 1e-5
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + h
                up = fn(*inputs).item()
                flat[k] = orig - h
                down = fn(*inputs).item()
                flat[k] = orig
            num.view(-1)[k] = (up - down) / (2 * h)
        err = (g - num).norm() / max(num.norm().item(), g.norm().item(), 1e-8)
        assert err < rtol, f"relative gradient error {err:.2e}"
