import numpy as np
import pytest
import torch

from rdfabric.model import ModelConfig, RDModel
from rdfabric.teacher import BackboneSpec, Teacher


def central_difference(fn, params, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``params`` (float64)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item(), 1e-30)
    return (a - n).norm().item() / denom


@pytest.fixture
def gradcheck():
    def check(fn, params, eps=1e-6):
        for p in params:
            p.grad = None
        fn().backward()
        analytic = [p.grad.detach().clone() for p in params]
        numeric = central_difference(fn, params, eps)
        return relative_error(analytic, numeric)
    return check


@pytest.fixture(scope="session")
def teacher():
    return Teacher(BackboneSpec(weights="random", seed=0))


@pytest.fixture(scope="session")
def small_teacher():
    """Random ResNet-34 teacher for 64 x 64 inputs (taps 16, 16, 8, 4)."""
    return Teacher(BackboneSpec(weights="random", seed=0, input_size=64))


def small_config(**kw):
    return ModelConfig(input_size=64, **kw)


def toy_config(**kw):
    """Tiny channel plan used by gradient checks."""
    base = dict(input_size=64, tap_channels=(4, 4, 6, 8), fusion_width=4, embed_channels=8,
                attention_reduction=2, sspcab_reduction=2)
    base.update(kw)
    return ModelConfig(**base)


def toy_taps(batch=2, seed=0, cfg=None):
    cfg = cfg or toy_config()
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, c, s, s, generator=g, dtype=torch.float64)
            for c, s in zip(cfg.tap_channels, cfg.tap_sizes)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
