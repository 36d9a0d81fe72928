import json

import numpy as np
import pytest

from app import get_settings
from services.tensor_core import make_rng
from services.vit_net import ViTConfig, ViTModel, cross_entropy, forward, parameter_shapes

# 2x2 patch grid plus a class token: five tokens, so k may go up to 2
TINY = ViTConfig(image_size=8, patch_size=4, in_channels=3, embed_dim=8, num_heads=2, depth=2,
                 mlp_ratio=2.0, num_classes=3, use_class_token=True)
TINY_GAP = ViTConfig(image_size=8, patch_size=4, in_channels=2, embed_dim=6, num_heads=3, depth=3,
                     mlp_ratio=1.5, num_classes=4, use_class_token=False)


def random_model(config: ViTConfig, seed: int = 0, scale: float = 0.4) -> ViTModel:
    """Weights large enough that every nonlinearity is exercised"""
    rng = make_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            params[name] = scale * rng.standard_normal(shape)
    return ViTModel(config, params)


def random_image(config: ViTConfig, seed: int = 1):
    return make_rng(seed).uniform(0.1, 0.9, size=config.image_shape)


def central_difference(f, x, indices, h=1e-5):
    """d f / d x at the given flat indices"""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(x)
        flat[i] = orig - h
        minus = f(x)
        flat[i] = orig
        out[n] = (plus - minus) / (2 * h)
    return out


def image_loss(model, label):
    def f(x):
        logits, _ = forward(model, x)
        return cross_entropy(logits, label)[0]
    return f


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return random_model(TINY, seed=0)


@pytest.fixture
def tiny_image():
    return random_image(TINY, seed=1)


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def tiny_zoo_dir(tmp_path, monkeypatch):
    """Config dir whose zoo holds 8x8 architectures, with the accuracy floor disabled"""
    config_dir = tmp_path / "config"
    config_dir.mkdir()
    arch = TINY.to_dict()
    wide = dict(arch, embed_dim=12, num_heads=3, depth=1)
    (config_dir / "zoo.json").write_text(json.dumps({
        "models": [{"name": "tiny", "config": arch}, {"name": "tiny-wide", "config": wide}]
    }))
    monkeypatch.setenv("TGR_CONFIG_DIR", str(config_dir))
    monkeypatch.setenv("TGR_MIN_CLEAN_ACCURACY", "0")
    monkeypatch.delenv("TGR_DATABASE_URL", raising=False)
    get_settings.cache_clear()
    yield config_dir
    get_settings.cache_clear()


@pytest.fixture(autouse=True)
def _fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
