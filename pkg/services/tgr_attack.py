"""Token Gradient Regularization and the momentum iterative attack built on it.

Each attack iteration:

1. forward/backward on the current adversarial image, with the TGR hook
   rewriting the Attention / QKV / MLP gradients when ``cfg.tgr`` is set;
2. multiply the input gradient by a fresh PatchOut pixel mask (optional);
3. momentum update ``m <- mu * m + g / ||g||_1``;
4. ``x_adv <- clip(x_adv + alpha * sign(m))`` into the L-inf ball and [0, 1].

The loss is ascended (untargeted). Pixel values live in [0, 1]; epsilon and
alpha are given on the 0-255 scale and divided by 255 here.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from services.attack_config import AttackConfig, EliminationMode, SelectionMode, TgrConfig
from services.errors import ConfigError, DimensionError, DomainError
from services.tensor_core import Rng, Tensor, as_tensor, derive_seed, make_rng
from services.vit_net import (
    ComponentKind,
    GradientHook,
    ModuleGradient,
    ViTModel,
    backward,
    cross_entropy,
    forward,
    unpatchify,
)

logger = logging.getLogger(__name__)

PIXEL_MIN = 0.0
PIXEL_MAX = 1.0


@dataclass
class AdversarialResult:
    x_adv: Tensor
    per_step_loss: list
    success_on_source: bool
    # post-hook module gradients of the last iteration, when requested
    final_module_grads: list = field(default_factory=list)
    sample_index: int = 0


def _extreme_rows(values: Tensor, k: int, mode: SelectionMode) -> Tensor:
    """(2k, C) row indices: per column the k largest, then the k smallest of the rest.

    Ties go to the lowest index. Picking the bottom k among rows not already
    taken keeps the 2k rows distinct even when values tie.
    """
    S, C = values.shape
    if k == 0:
        return np.empty((0, C), dtype=np.intp)
    if 2 * k >= S:
        raise ConfigError(f"2k = {2 * k} must be below the token count {S}", key="tgr.k")
    keyed = np.abs(values) if mode is SelectionMode.MAGNITUDE else values
    top = np.argsort(-keyed, axis=0, kind="stable")[:k]
    ascending = np.argsort(keyed, axis=0, kind="stable")[:2 * k]
    free = ~(ascending[:, None, :] == top[None, :, :]).any(axis=1)
    pick = free & (np.cumsum(free, axis=0) <= k)
    bottom = ascending.T[pick.T].reshape(C, k).T
    return np.vstack([top, bottom])


def select_extreme_tokens(values: Tensor, k: int, mode: SelectionMode = SelectionMode.SIGNED) -> list:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionError(f"expected a vector of token values, got shape {values.shape}")
    return sorted(int(i) for i in _extreme_rows(values[:, None], k, SelectionMode(mode))[:, 0])


def _check_rankable(cfg: TgrConfig, tokens: int):
    if 2 * cfg.k >= tokens:
        raise ConfigError(f"2k = {2 * cfg.k} must be below the token count {tokens}", key="tgr.k")


def regularize_token_matrix(grad: Tensor, cfg: TgrConfig, s: float, skip_leading: int = 0) -> Tensor:
    """Scale an S x C gradient by s, then zero its extreme-token entries.

    PER_CHANNEL_ENTRY ranks every channel on its own and zeroes 2k entries per
    channel; GLOBAL_TOKEN_ROW ranks tokens by their L1 norm and zeroes whole
    rows. The first ``skip_leading`` rows are never selected.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise DimensionError(f"token gradient must be S x C, got shape {grad.shape}")
    out = grad * s
    if cfg.k == 0:
        return out
    body = grad[skip_leading:]
    _check_rankable(cfg, body.shape[0])
    if cfg.elimination_mode is EliminationMode.PER_CHANNEL_ENTRY:
        rows = _extreme_rows(body, cfg.k, cfg.selection_mode) + skip_leading
        np.put_along_axis(out, rows, 0.0, axis=0)
    else:
        score = np.abs(body).sum(axis=1)
        rows = _extreme_rows(score[:, None], cfg.k, cfg.selection_mode)[:, 0] + skip_leading
        out[rows, :] = 0.0
    return out


def regularize_attention_map(grad: Tensor, cfg: TgrConfig, s: float, skip_leading: int = 0) -> Tensor:
    """Scale an M x S x S attention-map gradient by s, then zero the row and
    column through each of the 2k extreme entries.

    PER_CHANNEL_ENTRY finds the extremes of every head separately and zeroes
    inside that head only; GLOBAL_TOKEN_ROW ranks all heads together and zeroes
    the rows and columns in every head.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 3 or grad.shape[1] != grad.shape[2]:
        raise DimensionError(f"attention gradient must be M x S x S, got shape {grad.shape}")
    out = grad * s
    if cfg.k == 0:
        return out
    M, S, _ = grad.shape
    span = S - skip_leading
    _check_rankable(cfg, span)
    body = grad[:, skip_leading:, skip_leading:]
    if cfg.elimination_mode is EliminationMode.PER_CHANNEL_ENTRY:
        entries = _extreme_rows(body.reshape(M, span * span).T, cfg.k, cfg.selection_mode)
        rows = entries // span + skip_leading
        cols = entries % span + skip_leading
        for h in range(M):
            out[h, rows[:, h], :] = 0.0
            out[h, :, cols[:, h]] = 0.0
    else:
        entries = _extreme_rows(body.reshape(-1, 1), cfg.k, cfg.selection_mode)[:, 0] % (span * span)
        rows = entries // span + skip_leading
        cols = entries % span + skip_leading
        out[:, rows, :] = 0.0
        out[:, :, cols] = 0.0
    return out


def tgr_hook(cfg: TgrConfig) -> GradientHook:
    """Backward hook applying TGR to every enabled component; others pass through untouched"""

    def hook(mg: ModuleGradient) -> Tensor:
        if mg.kind not in cfg.enabled_components:
            return mg.grad
        skip = 0 if cfg.include_class_token else mg.token_offset
        s = cfg.scale_for(mg.kind)
        if mg.kind is ComponentKind.ATTENTION:
            return regularize_attention_map(mg.grad, cfg, s, skip_leading=skip)
        return regularize_token_matrix(mg.grad, cfg, s, skip_leading=skip)

    return hook


def mim_step(momentum: Tensor, grad: Tensor, mu: float) -> Tensor:
    """mu * momentum + grad / ||grad||_1 (a zero gradient adds nothing)"""
    if momentum.shape != grad.shape:
        raise DimensionError(f"momentum {momentum.shape} and gradient {grad.shape} differ")
    l1 = float(np.sum(np.abs(grad)))
    if l1 == 0.0:
        return mu * momentum + np.zeros_like(grad)
    return mu * momentum + grad / l1


def sample_patch_indices(num_tokens: int, num_patches: int, rng: Rng):
    if not 0 < num_patches <= num_tokens:
        raise ConfigError(f"must lie in 1..{num_tokens}, got {num_patches}", key="patchout.num_patches")
    return rng.choice(num_tokens, size=num_patches, replace=False)


def patchout_mask(num_tokens: int, num_patches: int, rng: Rng, patch_size: int, channels: int) -> Tensor:
    """{0,1} C x H x W mask covering the pixels of num_patches random patches"""
    grid = math.isqrt(num_tokens)
    if grid * grid != num_tokens:
        raise DimensionError(f"PatchOut needs a square patch grid, got {num_tokens} patches")
    chosen = sample_patch_indices(num_tokens, num_patches, rng)
    patches = np.zeros((num_tokens, patch_size * patch_size * channels))
    patches[chosen] = 1.0
    side = grid * patch_size
    return unpatchify(patches, patch_size, channels, side, side)


def clip_project(x_adv: Tensor, x: Tensor, epsilon: float, lo: float = PIXEL_MIN, hi: float = PIXEL_MAX) -> Tensor:
    """Clamp into [x - eps, x + eps] and the valid pixel range"""
    if x_adv.shape != x.shape:
        raise DimensionError(f"adversarial {x_adv.shape} and clean {x.shape} shapes differ")
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), lo, hi)


def attack(model: ViTModel, x: Tensor, y: int, cfg: AttackConfig, sample_index: int = 0,
           record_module_grads: bool = False) -> AdversarialResult:
    vit = model.config
    x = as_tensor(x)
    if x.shape != vit.image_shape:
        raise DimensionError(f"image shape {x.shape} does not match model input {vit.image_shape}")
    if np.any(x < PIXEL_MIN) or np.any(x > PIXEL_MAX):
        raise DomainError("clean image pixels must lie in [0, 1]")
    cfg.validate_for(vit)

    eps, alpha = cfg.epsilon_unit, cfg.alpha_unit
    hook = tgr_hook(cfg.tgr) if cfg.tgr is not None else None
    rng = None
    if cfg.patchout is not None:
        num_patches = cfg.patchout.resolve(vit)
        rng = make_rng(derive_seed(cfg.seed ^ cfg.patchout.rng_seed, sample_index))

    x_adv = x.copy()
    momentum = np.zeros_like(x)
    losses = []
    final_grads = []
    for t in range(cfg.steps):
        logits, cache = forward(model, x_adv)
        loss, loss_grad = cross_entropy(logits, y)
        grad, module_grads = backward(model, cache, loss_grad, hook)
        losses.append(loss)
        if rng is not None:
            grad = grad * patchout_mask(vit.num_patches, num_patches, rng, vit.patch_size, vit.in_channels)
        momentum = mim_step(momentum, grad, cfg.mu)
        x_adv = clip_project(x_adv + alpha * np.sign(momentum), x, eps)
        if record_module_grads and t == cfg.steps - 1:
            final_grads = module_grads

    logits, _ = forward(model, x_adv)
    success = int(np.argmax(logits)) != int(y)
    logger.debug(f"{cfg.label} sample {sample_index}: loss {losses[-1] if losses else float('nan'):.4f}, "
                 f"success={success}")
    return AdversarialResult(x_adv, losses, success, final_grads, sample_index)


def run_attacks(model: ViTModel, images, labels, cfg: AttackConfig, indices=None, threads: int = 1,
                record_module_grads: bool = False) -> list:
    """Attack every sample; results come back in input order whatever the thread count.

    ``indices`` are the dataset positions used to derive per-sample seeds.
    """
    indices = list(range(len(labels))) if indices is None else list(indices)
    if len(indices) != len(labels):
        raise DimensionError(f"{len(indices)} sample indices for {len(labels)} samples")
    logger.info(f"Attack {cfg.label}: {len(labels)} samples, {cfg.steps} steps, {threads} thread(s)")

    def one(slot):
        return attack(model, images[slot], int(labels[slot]), cfg, sample_index=indices[slot],
                      record_module_grads=record_module_grads)

    if threads <= 1:
        return [one(slot) for slot in range(len(labels))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(labels))))
