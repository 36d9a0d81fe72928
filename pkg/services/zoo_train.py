"""Datasets, the model zoo registry, and deterministic training of zoo models.

Synthetic images are rendered per class as (shape type x colour palette):
class ``c`` draws shape ``SHAPES[c % len(SHAPES)]`` in palette
``PALETTES[c // len(SHAPES)]``, centred with a random offset in [-0.3, 0.3],
radius in [0.35, 0.6] (both in units of half the image side), then Gaussian
pixel noise (std 0.04) and clipping to [0, 1]. Samples are produced in
rounds of one image per class from a single PCG64 stream.

Update rules (``g`` is the batch-mean gradient, ``wd`` applies to matrices only):

* SGD_MOMENTUM: ``v <- momentum * v + g + wd * p``; ``p <- p - lr * v``
* ADAM_LITE: Adam on ``g + wd * p`` with beta1 0.9, beta2 0.999, eps 1e-8 and
  bias correction.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from app import get_settings
from services.attack_config import merge_pairs, parse_lines, parse_overrides
from services.errors import ConfigError, DatasetValidationError, DimensionError, NumericalError, TrainingError
from services.file_processor import artifact_crc32, decode_dataset, encode_dataset, write_atomic
from services.tensor_core import make_rng
from services.vit_net import (
    ViTConfig,
    ViTModel,
    accuracy,
    backward_batch,
    cross_entropy_batch,
    forward_batch,
)

logger = logging.getLogger(__name__)

SHAPES = ("square", "disk", "triangle", "cross", "ring")
PALETTES = (
    ((0.90, 0.25, 0.20), (0.10, 0.15, 0.35)),
    ((0.20, 0.80, 0.35), (0.35, 0.10, 0.30)),
    ((0.95, 0.85, 0.20), (0.15, 0.30, 0.15)),
    ((0.30, 0.55, 0.95), (0.40, 0.30, 0.10)),
)
NOISE_STD = 0.04


class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Split = Split.TRAIN

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetValidationError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetValidationError(f"{self.labels.size} labels for {self.images.shape[0]} images")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetValidationError(f"labels must lie in 0..{self.num_classes - 1}")
        if len(self) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetValidationError("pixel values must lie in [0, 1]")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.split)


def _shape_mask(shape: str, dx, dy):
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 1.0
    if shape == "disk":
        return dx * dx + dy * dy <= 1.0
    if shape == "triangle":
        return (dy >= -1.0) & (dy <= 1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    if shape == "cross":
        return ((np.abs(dx) <= 0.3) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= 0.3) & (np.abs(dx) <= 1.0))
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 >= 0.45) & (r2 <= 1.0)
    raise ConfigError(f"unknown shape {shape!r}")


def _palette_channels(colour, channels):
    if channels == 3:
        return np.asarray(colour)
    grey = 0.299 * colour[0] + 0.587 * colour[1] + 0.114 * colour[2]
    return np.full(channels, grey)


def generate_synthetic(num_classes: int, per_class: int, image_size: int = 32, seed: int = 0,
                       channels: int = 3, split: Split = Split.TRAIN) -> Dataset:
    max_classes = len(SHAPES) * len(PALETTES)
    if not 2 <= num_classes <= max_classes:
        raise ConfigError(f"must lie in 2..{max_classes}, got {num_classes}", key="classes")
    if per_class < 0 or image_size < 1:
        raise ConfigError("per_class must be >= 0 and image_size >= 1")
    rng = make_rng(seed)
    coords = (2.0 * (np.arange(image_size) + 0.5) / image_size) - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    images = np.empty((num_classes * per_class, channels, image_size, image_size))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    n = 0
    for _ in range(per_class):
        for c in range(num_classes):
            shape = SHAPES[c % len(SHAPES)]
            fg, bg = PALETTES[c // len(SHAPES)]
            cx, cy = rng.uniform(-0.3, 0.3, size=2)
            radius = rng.uniform(0.35, 0.6)
            mask = _shape_mask(shape, (xx - cx) / radius, (yy - cy) / radius).astype(np.float64)
            fg_c = _palette_channels(fg, channels)[:, None, None]
            bg_c = _palette_channels(bg, channels)[:, None, None]
            img = bg_c * (1.0 - mask) + fg_c * mask
            img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
            images[n] = np.clip(img, 0.0, 1.0)
            labels[n] = c
            n += 1
    logger.info(f"Generated {n} synthetic images ({num_classes} classes, {image_size}px, seed {seed})")
    return Dataset(images, labels, num_classes, split)


def generate_splits(num_classes: int, per_class: int, eval_per_class: int, image_size: int = 32, seed: int = 0,
                    channels: int = 3):
    """Train and eval splits drawn from one stream; the train split does not depend on eval_per_class"""
    if eval_per_class < 0:
        raise ConfigError(f"must be >= 0, got {eval_per_class}", key="eval_per_class")
    full = generate_synthetic(num_classes, per_class + eval_per_class, image_size, seed, channels)
    cut = num_classes * per_class
    train_split = Dataset(full.images[:cut], full.labels[:cut], num_classes, Split.TRAIN)
    eval_split = Dataset(full.images[cut:], full.labels[cut:], num_classes, Split.EVAL)
    return train_split, eval_split


def save_dataset(data: Dataset, path) -> int:
    """Write the dataset file; returns its body CRC32"""
    payload = encode_dataset(data.images, data.labels, data.num_classes)
    write_atomic(path, payload)
    logger.info(f"Saved {len(data)} images to {path}")
    return artifact_crc32(payload)


def load_dataset(path, split: Split = Split.EVAL) -> Dataset:
    images, labels, num_classes = decode_dataset(Path(path).read_bytes())
    logger.info(f"Loaded {labels.shape[0]} images from {path}")
    return Dataset(images, labels, num_classes, split)


class Optimizer(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM_LITE = "adam_lite"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: Optimizer = Optimizer.ADAM_LITE
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"must be positive, got {self.epochs}", key="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"must be positive, got {self.batch_size}", key="batch_size")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"must be >= 0, got {self.learning_rate}", key="learning_rate")
        if self.weight_decay < 0:
            raise ConfigError(f"must be >= 0, got {self.weight_decay}", key="weight_decay")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"must lie in [0, 1), got {self.momentum}", key="momentum")
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))


_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "weight_decay": float,
    "optimizer": Optimizer, "momentum": float, "seed": int,
}


def train_config_from_pairs(pairs) -> TrainConfig:
    kwargs = {}
    for key, value in pairs:
        if key not in _TRAIN_KEYS:
            raise ConfigError("unknown training config key", key=key)
        try:
            kwargs[key] = _TRAIN_KEYS[key](value.strip().lower() if key == "optimizer" else value)
        except ValueError:
            raise ConfigError(f"invalid value {value!r}", key=key) from None
    return TrainConfig(**kwargs)


def load_train_config(path=None, overrides=()) -> TrainConfig:
    pairs = parse_lines(Path(path).read_text(encoding="utf-8").splitlines()) if path else []
    return train_config_from_pairs(merge_pairs(pairs, parse_overrides(overrides)))


@dataclass
class ZooEntry:
    name: str
    config: ViTConfig


class ZooRegistry:
    """Named tiny-ViT architectures, read from config/zoo.json"""

    def __init__(self, config_dir=None):
        self.config_dir = config_dir or get_settings().config_dir
        self.entries = self._load_zoo_entries()

    def _load_zoo_entries(self):
        """Load the zoo from configuration file, falling back to the built-in zoo"""
        try:
            config_path = os.path.join(self.config_dir, "zoo.json")
            with open(config_path, "r") as f:
                raw = json.load(f)
            logger.info(f"Loaded zoo from {config_path}")
        except FileNotFoundError:
            logger.warning("Zoo configuration file not found, using default zoo")
            raw = self._get_default_zoo()
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON at line {e.lineno}: {e.msg}", key="zoo.json") from e
        models = raw.get("models", []) if isinstance(raw, dict) else None
        if not isinstance(models, list):
            raise ConfigError("expected an object with a \"models\" list", key="zoo.json")
        entries = [self._parse_entry(n, m) for n, m in enumerate(models)]
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ConfigError(f"zoo model names must be unique, got {names}", key="models")
        return entries

    @staticmethod
    def _parse_entry(index, m) -> ZooEntry:
        if not isinstance(m, dict) or not isinstance(m.get("name"), str) or not isinstance(m.get("config"), dict):
            raise ConfigError(f"model {index} needs a string \"name\" and a \"config\" object", key="models")
        try:
            return ZooEntry(m["name"], ViTConfig.from_dict(m["config"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model {m['name']!r}: {e}", key="models") from e

    def _get_default_zoo(self):
        """Four architecturally distinct desk-scale ViTs"""
        def arch(depth, heads, dim):
            return {"image_size": 32, "patch_size": 4, "in_channels": 3, "embed_dim": dim, "num_heads": heads,
                    "depth": depth, "mlp_ratio": 2.0, "num_classes": 10, "use_class_token": True}

        return {
            "models": [
                {"name": "vit-d4-h2-e64", "config": arch(4, 2, 64)},
                {"name": "vit-d6-h4-e64", "config": arch(6, 4, 64)},
                {"name": "vit-d4-h4-e96", "config": arch(4, 4, 96)},
                {"name": "vit-d8-h2-e96", "config": arch(8, 2, 96)},
            ]
        }

    def names(self):
        return [e.name for e in self.entries]

    def get(self, name) -> ViTConfig:
        for entry in self.entries:
            if entry.name == name:
                return entry.config
        raise ConfigError(f"unknown architecture {name!r}; available: {', '.join(self.names())}", key="arch")


@dataclass
class TrainResult:
    model: ViTModel
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


class _SgdMomentum:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.velocity = {n: np.zeros_like(p) for n, p in params.items()}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name] + self.cfg.weight_decay * p if p.ndim >= 2 else grads[name]
            v = self.velocity[name] = self.cfg.momentum * self.velocity[name] + g
            params[name] = p - self.cfg.learning_rate * v


class _AdamLite:
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] + self.cfg.weight_decay * p if p.ndim >= 2 else grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            params[name] = p - self.cfg.learning_rate * update


def train(model: ViTModel, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None) -> TrainResult:
    """Mini-batch training; the shuffle stream comes from cfg.seed only"""
    vit = model.config
    if data.image_shape != vit.image_shape:
        raise DimensionError(f"dataset images {data.image_shape} do not fit model input {vit.image_shape}")
    if data.num_classes > vit.num_classes:
        raise DimensionError(f"dataset has {data.num_classes} classes, model only {vit.num_classes}")
    if len(data) == 0:
        raise DatasetValidationError("cannot train on an empty dataset")

    rng = make_rng(cfg.seed)
    params = {name: np.array(p) for name, p in model.parameters.items()}
    optimizer = _SgdMomentum(cfg, params) if cfg.optimizer is Optimizer.SGD_MOMENTUM else _AdamLite(cfg, params)
    result = TrainResult(model)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        epoch_loss, correct = 0.0, 0
        for batch, start in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            current = ViTModel(vit, params)
            try:
                logits, cache = forward_batch(current, data.images[idx])
                loss, dlogits = cross_entropy_batch(logits, data.labels[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss}", epoch=epoch, batch=batch)
                grads = backward_batch(current, cache, dlogits).param_grads
            except NumericalError as e:
                raise TrainingError(f"training diverged: {e}", epoch=epoch, batch=batch) from e
            optimizer.step(params, grads)
            bad = [name for name, p in params.items() if not np.all(np.isfinite(p))]
            if bad:
                raise TrainingError(f"non-finite parameters after update: {', '.join(bad)}", epoch=epoch, batch=batch)
            result.step_losses.append(loss)
            epoch_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[idx]))

        result.model = ViTModel(vit, params)
        record = {
            "epoch": epoch,
            "loss": epoch_loss / len(data),
            "train_accuracy": correct / len(data),
        }
        if eval_data is not None and len(eval_data):
            record["eval_accuracy"] = accuracy(result.model, eval_data.images, eval_data.labels)
        result.history.append(record)
        logger.info(f"Epoch {epoch}/{cfg.epochs}: loss {record['loss']:.4f}, "
                    f"train acc {record['train_accuracy']:.3f}"
                    + (f", eval acc {record['eval_accuracy']:.3f}" if "eval_accuracy" in record else ""))
    return result


def with_seed(cfg: TrainConfig, seed) -> TrainConfig:
    return cfg if seed is None else replace(cfg, seed=seed)
