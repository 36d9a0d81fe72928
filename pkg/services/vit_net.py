"""Tiny pre-norm Vision Transformer with hand-written forward and backward passes.

Block layout (pre-norm)::

    x -> LN1 -> fused QKV -> softmax(q k^T / sqrt(D/M)) -> @ v -> proj -> + x
      -> LN2 -> fc1 -> GELU -> fc2 -> + residual

Backward exposes three interception points per block, visited in reverse
block order (MLP, then Attention, then QKV inside each block):

* ``MLP``: gradient w.r.t. the MLP input, i.e. the LN2 output (S x D)
* ``Attention``: gradient w.r.t. the post-softmax attention map (M x S x S)
* ``QKV``: gradient w.r.t. the fused QKV projection input, the LN1 output (S x D)

A hook's return value replaces the gradient before it continues upstream.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from services.errors import ConfigError, DimensionError, DomainError, StaleCacheError
from services.tensor_core import (
    Tensor,
    check_finite,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    make_rng,
    matmul,
    softmax,
    softmax_backward,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class ComponentKind(str, Enum):
    ATTENTION = "attention"
    QKV = "qkv"
    MLP = "mlp"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    num_heads: int = 2
    depth: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    use_class_token: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "num_heads", "depth", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, name)}", key=name)
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}",
                key="patch_size",
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}",
                key="num_heads",
            )
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigError(f"must be positive, got {self.mlp_ratio}", key="mlp_ratio")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.token_offset

    @property
    def token_offset(self) -> int:
        return 1 if self.use_class_token else 0

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def image_shape(self):
        return (self.in_channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys {sorted(unknown)}", key=sorted(unknown)[0])
        kwargs = dict(data)
        if "mlp_ratio" in kwargs:
            kwargs["mlp_ratio"] = float(kwargs["mlp_ratio"])
        if "use_class_token" in kwargs:
            kwargs["use_class_token"] = bool(kwargs["use_class_token"])
        for name in known - {"mlp_ratio", "use_class_token"}:
            if name in kwargs:
                kwargs[name] = int(kwargs[name])
        return cls(**kwargs)


def parameter_shapes(config: ViTConfig) -> dict:
    """Canonical parameter order and shapes; the model file stores parameters in this order"""
    D, H, K = config.embed_dim, config.mlp_hidden, config.num_classes
    shapes = {
        "patch_embed.weight": (config.patch_dim, D),
        "patch_embed.bias": (D,),
    }
    if config.use_class_token:
        shapes["cls_token"] = (D,)
    shapes["pos_embed"] = (config.seq_len, D)
    for i in range(config.depth):
        pre = f"blocks.{i}."
        shapes[pre + "norm1.gamma"] = (D,)
        shapes[pre + "norm1.beta"] = (D,)
        shapes[pre + "attn.qkv.weight"] = (D, 3 * D)
        shapes[pre + "attn.qkv.bias"] = (3 * D,)
        shapes[pre + "attn.proj.weight"] = (D, D)
        shapes[pre + "attn.proj.bias"] = (D,)
        shapes[pre + "norm2.gamma"] = (D,)
        shapes[pre + "norm2.beta"] = (D,)
        shapes[pre + "mlp.fc1.weight"] = (D, H)
        shapes[pre + "mlp.fc1.bias"] = (H,)
        shapes[pre + "mlp.fc2.weight"] = (H, D)
        shapes[pre + "mlp.fc2.bias"] = (D,)
    shapes["norm.gamma"] = (D,)
    shapes["norm.beta"] = (D,)
    shapes["head.weight"] = (D, K)
    shapes["head.bias"] = (K,)
    return shapes


class ViTModel:
    """Immutable parameter set for one ViTConfig"""

    def __init__(self, config: ViTConfig, params: Mapping[str, Tensor]):
        expected = parameter_shapes(config)
        missing = [name for name in expected if name not in params]
        extra = [name for name in params if name not in expected]
        if missing or extra:
            raise DimensionError(f"parameter names do not match config (missing={missing}, unexpected={extra})")
        self.config = config
        self._params = {}
        for name, shape in expected.items():
            value = np.array(params[name], dtype=np.float64, order="C", copy=True)
            if value.shape != shape:
                raise DimensionError(f"parameter {name} has shape {value.shape}, expected {shape}")
            value.flags.writeable = False
            self._params[name] = value

    @classmethod
    def initialize(cls, config: ViTConfig, seed: int) -> "ViTModel":
        """Random init: N(0, 0.02) weights and embeddings, zero biases, unit LayerNorm"""
        rng = make_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                params[name] = np.ones(shape)
            elif name.endswith(".beta") or name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, INIT_STD, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ViTConfig) -> "ViTModel":
        return cls(config, {name: np.zeros(shape) for name, shape in parameter_shapes(config).items()})

    @property
    def parameters(self) -> dict:
        return dict(self._params)

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def with_params(self, params: Mapping[str, Tensor]) -> "ViTModel":
        return ViTModel(self.config, params)

    def __repr__(self):
        c = self.config
        return f"<ViTModel depth={c.depth} heads={c.num_heads} dim={c.embed_dim} tokens={c.seq_len}>"


@dataclass
class ModuleGradient:
    kind: ComponentKind
    block_index: int
    grad: Tensor
    # leading non-patch tokens in the sequence (1 with a class token)
    token_offset: int = 0


GradientHook = Callable[[ModuleGradient], Tensor]


@dataclass
class BlockCache:
    x_in: Tensor
    ln1: tuple
    h1: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    scores: Tensor
    attn: Tensor
    ctx: Tensor
    x_mid: Tensor
    ln2: tuple
    h2: Tensor
    u: Tensor
    a: Tensor


@dataclass
class ForwardCache:
    model: ViTModel
    images: Tensor
    patches: Tensor
    blocks: list = field(default_factory=list)
    final_ln: tuple = ()
    hf: Tensor = None
    pooled: Tensor = None

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]


@dataclass
class BackwardResult:
    input_grad: Tensor
    param_grads: dict


def _patchify(images: Tensor, P: int) -> Tensor:
    B, C, H, W = images.shape
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = images.reshape(B, C, gh, P, gw, P).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(B, gh * gw, P * P * C))


def _unpatchify(patches: Tensor, P: int, C: int, H: int, W: int) -> Tensor:
    B = patches.shape[0]
    gh, gw = H // P, W // P
    x = patches.reshape(B, gh, gw, P, P, C).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(B, C, H, W))


def patchify(image: Tensor, P: int) -> Tensor:
    """Split a C x H x W image into N rows of P*P*C values.

    Patches are numbered row-major over the patch grid; inside a row the
    values run over (pixel row, pixel column, channel), channels fastest.
    """
    if image.ndim != 3:
        raise DimensionError(f"patchify expects a C x H x W image, got shape {image.shape}")
    return _patchify(image[None], P)[0]


def unpatchify(patches: Tensor, P: int, C: int, H: int, W: int) -> Tensor:
    if patches.shape != ((H // P) * (W // P), P * P * C) or H % P or W % P:
        raise DimensionError(f"cannot fold patches of shape {patches.shape} into {C}x{H}x{W} with P={P}")
    return _unpatchify(patches[None], P, C, H, W)[0]


def _block_forward(p, i, x, cfg: ViTConfig):
    pre = f"blocks.{i}."
    B, S, D = x.shape
    M, dh = cfg.num_heads, cfg.head_dim
    h1, ln1 = layer_norm(x, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
    qkv = h1 @ p[pre + "attn.qkv.weight"] + p[pre + "attn.qkv.bias"]
    qkv = qkv.reshape(B, S, 3, M, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    attn = softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    x_mid = x + ctx @ p[pre + "attn.proj.weight"] + p[pre + "attn.proj.bias"]
    h2, ln2 = layer_norm(x_mid, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
    u = h2 @ p[pre + "mlp.fc1.weight"] + p[pre + "mlp.fc1.bias"]
    a = gelu(u)
    x_out = x_mid + a @ p[pre + "mlp.fc2.weight"] + p[pre + "mlp.fc2.bias"]
    return x_out, BlockCache(x, ln1, h1, q, k, v, scores, attn, ctx, x_mid, ln2, h2, u, a)


def forward_batch(model: ViTModel, images: Tensor):
    """Logits (B x num_classes) and the cache backward needs"""
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != cfg.image_shape:
        raise DimensionError(f"expected images of shape (B, {cfg.image_shape}), got {images.shape}")
    p = model.parameters
    B = images.shape[0]
    patches = _patchify(images, cfg.patch_size)
    tokens = patches @ p["patch_embed.weight"] + p["patch_embed.bias"]
    if cfg.use_class_token:
        cls_tok = np.broadcast_to(p["cls_token"], (B, 1, cfg.embed_dim))
        tokens = np.concatenate([cls_tok, tokens], axis=1)
    x = tokens + p["pos_embed"]

    cache = ForwardCache(model=model, images=images, patches=patches)
    for i in range(cfg.depth):
        x, block_cache = _block_forward(p, i, x, cfg)
        cache.blocks.append(block_cache)

    hf, cache.final_ln = layer_norm(x, p["norm.gamma"], p["norm.beta"])
    pooled = hf[:, 0] if cfg.use_class_token else hf.mean(axis=1)
    logits = pooled @ p["head.weight"] + p["head.bias"]
    cache.hf, cache.pooled = hf, pooled
    return check_finite("logits", logits), cache


def forward(model: ViTModel, image: Tensor):
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.config.image_shape:
        raise DimensionError(f"expected image of shape {model.config.image_shape}, got {image.shape}")
    logits, cache = forward_batch(model, image[None])
    return logits[0], cache


def _apply_hook(hook, kind, block_index, grad, token_offset, records):
    if hook is None:
        out = grad
    else:
        out = np.empty_like(grad)
        for b in range(grad.shape[0]):
            mg = ModuleGradient(kind, block_index, grad[b].copy(), token_offset)
            replaced = np.asarray(hook(mg), dtype=np.float64)
            if replaced.shape != grad[b].shape:
                raise DimensionError(
                    f"{kind.value} hook on block {block_index} changed shape {grad[b].shape} -> {replaced.shape}"
                )
            out[b] = replaced
    if records is not None:
        records.append((kind, block_index, out))
    return out


def _accumulate(grads, name, value):
    if grads is not None:
        grads[name] = value


def _block_backward(p, i, bc: BlockCache, dx_out, cfg: ViTConfig, hook, grads, records):
    pre = f"blocks.{i}."
    B, S, D = dx_out.shape
    M, dh, Hd = cfg.num_heads, cfg.head_dim, cfg.mlp_hidden
    offset = cfg.token_offset

    # MLP branch
    _accumulate(grads, pre + "mlp.fc2.weight", bc.a.reshape(-1, Hd).T @ dx_out.reshape(-1, D))
    _accumulate(grads, pre + "mlp.fc2.bias", dx_out.sum(axis=(0, 1)))
    du = gelu_backward(bc.u, dx_out @ p[pre + "mlp.fc2.weight"].T)
    _accumulate(grads, pre + "mlp.fc1.weight", bc.h2.reshape(-1, D).T @ du.reshape(-1, Hd))
    _accumulate(grads, pre + "mlp.fc1.bias", du.sum(axis=(0, 1)))
    dh2 = du @ p[pre + "mlp.fc1.weight"].T
    dh2 = _apply_hook(hook, ComponentKind.MLP, i, dh2, offset, records)
    dmid_ln, dg2, db2 = layer_norm_backward(dh2, bc.ln2)
    _accumulate(grads, pre + "norm2.gamma", dg2)
    _accumulate(grads, pre + "norm2.beta", db2)
    dx_mid = dx_out + dmid_ln

    # attention branch
    _accumulate(grads, pre + "attn.proj.weight", bc.ctx.reshape(-1, D).T @ dx_mid.reshape(-1, D))
    _accumulate(grads, pre + "attn.proj.bias", dx_mid.sum(axis=(0, 1)))
    dctx = (dx_mid @ p[pre + "attn.proj.weight"].T).reshape(B, S, M, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ bc.v.transpose(0, 1, 3, 2)
    dv = bc.attn.transpose(0, 1, 3, 2) @ dctx
    dattn = _apply_hook(hook, ComponentKind.ATTENTION, i, dattn, offset, records)
    dscores = softmax_backward(bc.attn, dattn) / math.sqrt(dh)
    dq = dscores @ bc.k
    dk = dscores.transpose(0, 1, 3, 2) @ bc.q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * D)
    _accumulate(grads, pre + "attn.qkv.weight", bc.h1.reshape(-1, D).T @ dqkv.reshape(-1, 3 * D))
    _accumulate(grads, pre + "attn.qkv.bias", dqkv.sum(axis=(0, 1)))
    dh1 = dqkv @ p[pre + "attn.qkv.weight"].T
    dh1 = _apply_hook(hook, ComponentKind.QKV, i, dh1, offset, records)
    dx_ln, dg1, db1 = layer_norm_backward(dh1, bc.ln1)
    _accumulate(grads, pre + "norm1.gamma", dg1)
    _accumulate(grads, pre + "norm1.beta", db1)
    return dx_mid + dx_ln


def _backward(model: ViTModel, cache: ForwardCache, dlogits: Tensor, hook, want_params: bool, records):
    if cache.model is not model:
        raise StaleCacheError("forward cache was produced by a different model")
    cfg = model.config
    p = model.parameters
    B = cache.batch_size
    if dlogits.shape != (B, cfg.num_classes):
        raise DimensionError(f"loss gradient shape {dlogits.shape} does not match ({B}, {cfg.num_classes})")
    grads = {} if want_params else None

    _accumulate(grads, "head.weight", matmul(cache.pooled.T, dlogits))
    _accumulate(grads, "head.bias", dlogits.sum(axis=0))
    dpooled = matmul(dlogits, p["head.weight"].T)
    dhf = np.zeros_like(cache.hf)
    if cfg.use_class_token:
        dhf[:, 0] = dpooled
    else:
        dhf[:] = dpooled[:, None, :] / cfg.seq_len
    dx, dg, db = layer_norm_backward(dhf, cache.final_ln)
    _accumulate(grads, "norm.gamma", dg)
    _accumulate(grads, "norm.beta", db)

    for i in reversed(range(cfg.depth)):
        dx = _block_backward(p, i, cache.blocks[i], dx, cfg, hook, grads, records)

    _accumulate(grads, "pos_embed", dx.sum(axis=0))
    if cfg.use_class_token:
        _accumulate(grads, "cls_token", dx[:, 0].sum(axis=0))
        dtok = dx[:, 1:]
    else:
        dtok = dx
    D = cfg.embed_dim
    _accumulate(grads, "patch_embed.weight", matmul(cache.patches.reshape(-1, cfg.patch_dim).T, dtok.reshape(-1, D)))
    _accumulate(grads, "patch_embed.bias", dtok.sum(axis=(0, 1)))
    dpatches = dtok @ p["patch_embed.weight"].T
    C, S_img = cfg.in_channels, cfg.image_size
    dimages = _unpatchify(dpatches, cfg.patch_size, C, S_img, S_img)
    return check_finite("input gradient", dimages), grads


def backward(model: ViTModel, cache: ForwardCache, loss_grad: Tensor, hooks: GradientHook | None = None):
    """Input gradient (C x H x W) plus the 3*L module gradients in the order visited.

    Recorded module gradients are the tensors that flowed upstream, i.e. the
    hook outputs when a hook is given.
    """
    if cache.batch_size != 1:
        raise DimensionError(f"backward takes a single-image cache, got batch of {cache.batch_size}")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    records = []
    dimages, _ = _backward(model, cache, loss_grad[None], hooks, False, records)
    module_grads = [
        ModuleGradient(kind, i, tensor[0].copy(), model.config.token_offset) for kind, i, tensor in records
    ]
    return dimages[0], module_grads


def backward_batch(model: ViTModel, cache: ForwardCache, loss_grads: Tensor, hooks: GradientHook | None = None,
                   param_grads: bool = True) -> BackwardResult:
    dimages, grads = _backward(model, cache, np.asarray(loss_grads, dtype=np.float64), hooks, param_grads, None)
    return BackwardResult(dimages, grads or {})


def cross_entropy(logits: Tensor, label: int):
    """Softmax cross-entropy and its gradient softmax(logits) - onehot(label)"""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise DomainError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = math.log(float(np.sum(np.exp(shifted))))
    loss = log_z - float(shifted[int(label)])
    grad = softmax(logits)
    grad[int(label)] -= 1.0
    return loss, grad


def cross_entropy_batch(logits: Tensor, labels):
    """Mean loss over the batch and the matching (B x K) gradient"""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= K):
        raise DomainError(f"labels must be {B} class indices below {K}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(B), labels]))
    grad = softmax(logits)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def predict(model: ViTModel, images: Tensor, batch_size: int = 64):
    images = np.asarray(images, dtype=np.float64)
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = forward_batch(model, images[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
    if not preds:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(preds)


def accuracy(model: ViTModel, images: Tensor, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(model, images) == labels))
