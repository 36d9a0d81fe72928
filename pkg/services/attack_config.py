"""Attack hyperparameters and their flat ``key = value`` file format.

Keys (one per line, ``#`` starts a comment)::

    name                   free text; defaults to MIM / TGR with a -P suffix under PatchOut
    epsilon                L-inf radius on the 0-255 pixel scale (16)
    steps                  iterations T (10)
    alpha                  step size on the 0-255 scale (epsilon / steps)
    mu                     momentum decay (1.0)
    seed                   base seed for per-sample random streams (0)
    patchout.enabled       true/false
    patchout.num_patches   integer or "auto" (ceil(0.66 * N))
    patchout.rng_seed      mixed into the per-sample PatchOut stream (0)
    tgr.enabled            true/false
    tgr.k                  extreme tokens per extremum (1)
    tgr.s_attention        scaling for the attention map gradient (0.25)
    tgr.s_qkv              scaling for the QKV input gradient (0.75)
    tgr.s_mlp              scaling for the MLP input gradient (0.25)
    tgr.components         comma list of attention,qkv,mlp (may be empty)
    tgr.selection_mode     signed | magnitude
    tgr.elimination_mode   per_channel_entry | global_token_row
    tgr.include_class_token  true/false

Any ``patchout.*`` or ``tgr.*`` key switches that section on unless its
``enabled`` key says otherwise.
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from services.errors import ConfigError
from services.vit_net import ComponentKind, ViTConfig

logger = logging.getLogger(__name__)

PIXEL_SCALE = 255.0
PATCHOUT_RATIO = 0.66
ALL_COMPONENTS = frozenset(ComponentKind)


class SelectionMode(str, Enum):
    SIGNED = "signed"
    MAGNITUDE = "magnitude"


class EliminationMode(str, Enum):
    PER_CHANNEL_ENTRY = "per_channel_entry"
    GLOBAL_TOKEN_ROW = "global_token_row"


@dataclass(frozen=True)
class TgrConfig:
    k: int = 1
    s_attention: float = 0.25
    s_qkv: float = 0.75
    s_mlp: float = 0.25
    enabled_components: frozenset = ALL_COMPONENTS
    selection_mode: SelectionMode = SelectionMode.SIGNED
    elimination_mode: EliminationMode = EliminationMode.PER_CHANNEL_ENTRY
    include_class_token: bool = True

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"must be >= 0, got {self.k}", key="tgr.k")
        for name in ("s_attention", "s_qkv", "s_mlp"):
            s = getattr(self, name)
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {s}", key=f"tgr.{name}")
        object.__setattr__(self, "enabled_components", frozenset(ComponentKind(c) for c in self.enabled_components))

    def scale_for(self, kind: ComponentKind) -> float:
        return {
            ComponentKind.ATTENTION: self.s_attention,
            ComponentKind.QKV: self.s_qkv,
            ComponentKind.MLP: self.s_mlp,
        }[kind]

    def validate_for(self, vit: ViTConfig):
        """2k must stay below the number of rankable tokens"""
        rankable = vit.seq_len if self.include_class_token else vit.num_patches
        if 2 * self.k >= rankable:
            raise ConfigError(f"2k = {2 * self.k} must be below the token count {rankable}", key="tgr.k")


@dataclass(frozen=True)
class PatchOutConfig:
    # None means ceil(0.66 * N) for the model being attacked
    num_patches: int | None = None
    rng_seed: int = 0

    def resolve(self, vit: ViTConfig) -> int:
        n = self.num_patches if self.num_patches is not None else math.ceil(PATCHOUT_RATIO * vit.num_patches)
        if not 0 < n <= vit.num_patches:
            raise ConfigError(f"must lie in 1..{vit.num_patches}, got {n}", key="patchout.num_patches")
        return n


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0
    steps: int = 10
    alpha: float | None = None
    mu: float = 1.0
    patchout: PatchOutConfig | None = None
    tgr: TgrConfig | None = None
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"must be >= 0, got {self.epsilon}", key="epsilon")
        if self.steps < 0:
            raise ConfigError(f"must be >= 0, got {self.steps}", key="steps")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"must be >= 0, got {self.alpha}", key="alpha")
        if self.mu < 0:
            raise ConfigError(f"must be >= 0, got {self.mu}", key="mu")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        base = "TGR" if self.tgr is not None else "MIM"
        return base + ("-P" if self.patchout is not None else "")

    @property
    def step_size(self) -> float:
        """Alpha on the 0-255 scale; epsilon / T unless overridden"""
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / self.steps if self.steps else 0.0

    @property
    def epsilon_unit(self) -> float:
        return self.epsilon / PIXEL_SCALE

    @property
    def alpha_unit(self) -> float:
        return self.step_size / PIXEL_SCALE

    def validate_for(self, vit: ViTConfig):
        if self.tgr is not None:
            self.tgr.validate_for(vit)
        if self.patchout is not None:
            self.patchout.resolve(vit)

    def as_baseline(self) -> "AttackConfig":
        """Same optimizer settings with TGR switched off"""
        return replace(self, tgr=None, name=None)

    def with_tgr(self, **changes) -> "AttackConfig":
        return replace(self, tgr=replace(self.tgr or TgrConfig(), **changes))

    def snapshot(self) -> dict:
        return {"name": self.label, **dict(parse_lines(dump_lines(self)))}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _as_bool(key, value):
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"expected true/false, got {value!r}", key=key)


def _as_int(key, value, minimum=None):
    try:
        result = int(value.strip())
    except ValueError:
        raise ConfigError(f"expected an integer, got {value!r}", key=key) from None
    if minimum is not None and result < minimum:
        raise ConfigError(f"must be >= {minimum}, got {result}", key=key)
    return result


def _as_float(key, value):
    try:
        result = float(value.strip())
    except ValueError:
        raise ConfigError(f"expected a number, got {value!r}", key=key) from None
    if not math.isfinite(result):
        raise ConfigError(f"must be finite, got {value!r}", key=key)
    return result


def _as_components(key, value):
    parts = [p.strip().lower() for p in value.split(",") if p.strip()]
    try:
        return frozenset(ComponentKind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"components must be drawn from attention,qkv,mlp, got {value!r}", key=key) from None


def _as_enum(enum_cls, key, value):
    try:
        return enum_cls(value.strip().lower())
    except ValueError:
        choices = "|".join(e.value for e in enum_cls)
        raise ConfigError(f"expected one of {choices}, got {value!r}", key=key) from None


def parse_lines(lines):
    """Yield (key, value) pairs from key = value text"""
    pairs = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno} is not of the form 'key = value': {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno} has an empty key")
        if key in seen:
            raise ConfigError("duplicate key", key=key)
        seen.add(key)
        pairs.append((key, value))
    return pairs


_ATTACK_KEYS = {"name", "epsilon", "steps", "alpha", "mu", "seed"}
_PATCHOUT_KEYS = {"patchout.enabled", "patchout.num_patches", "patchout.rng_seed"}
_TGR_KEYS = {
    "tgr.enabled", "tgr.k", "tgr.s_attention", "tgr.s_qkv", "tgr.s_mlp", "tgr.components",
    "tgr.selection_mode", "tgr.elimination_mode", "tgr.include_class_token",
}


def attack_config_from_pairs(pairs) -> AttackConfig:
    values = dict(pairs)
    unknown = set(values) - _ATTACK_KEYS - _PATCHOUT_KEYS - _TGR_KEYS
    if unknown:
        raise ConfigError("unknown attack config key", key=sorted(unknown)[0])

    kwargs = {}
    if "name" in values:
        kwargs["name"] = values["name"] or None
    if "epsilon" in values:
        kwargs["epsilon"] = _as_float("epsilon", values["epsilon"])
    if "steps" in values:
        kwargs["steps"] = _as_int("steps", values["steps"], minimum=0)
    if "alpha" in values and values["alpha"].lower() not in ("", "auto"):
        kwargs["alpha"] = _as_float("alpha", values["alpha"])
    if "mu" in values:
        kwargs["mu"] = _as_float("mu", values["mu"])
    if "seed" in values:
        kwargs["seed"] = _as_int("seed", values["seed"], minimum=0)

    patchout_keys = _PATCHOUT_KEYS & set(values)
    patchout_on = _as_bool("patchout.enabled", values["patchout.enabled"]) if "patchout.enabled" in values \
        else bool(patchout_keys)
    if patchout_on:
        num = values.get("patchout.num_patches", "auto").strip().lower()
        kwargs["patchout"] = PatchOutConfig(
            num_patches=None if num == "auto" else _as_int("patchout.num_patches", num, minimum=1),
            rng_seed=_as_int("patchout.rng_seed", values.get("patchout.rng_seed", "0"), minimum=0),
        )

    tgr_keys = _TGR_KEYS & set(values)
    tgr_on = _as_bool("tgr.enabled", values["tgr.enabled"]) if "tgr.enabled" in values else bool(tgr_keys)
    if tgr_on:
        tgr_kwargs = {}
        if "tgr.k" in values:
            tgr_kwargs["k"] = _as_int("tgr.k", values["tgr.k"], minimum=0)
        for name in ("s_attention", "s_qkv", "s_mlp"):
            if f"tgr.{name}" in values:
                tgr_kwargs[name] = _as_float(f"tgr.{name}", values[f"tgr.{name}"])
        if "tgr.components" in values:
            tgr_kwargs["enabled_components"] = _as_components("tgr.components", values["tgr.components"])
        if "tgr.selection_mode" in values:
            tgr_kwargs["selection_mode"] = _as_enum(SelectionMode, "tgr.selection_mode", values["tgr.selection_mode"])
        if "tgr.elimination_mode" in values:
            tgr_kwargs["elimination_mode"] = _as_enum(
                EliminationMode, "tgr.elimination_mode", values["tgr.elimination_mode"]
            )
        if "tgr.include_class_token" in values:
            tgr_kwargs["include_class_token"] = _as_bool("tgr.include_class_token", values["tgr.include_class_token"])
        kwargs["tgr"] = TgrConfig(**tgr_kwargs)

    return AttackConfig(**kwargs)


def dump_lines(cfg: AttackConfig) -> list:
    """Canonical key = value lines; parsing them back yields an equal config"""
    lines = [f"name = {cfg.name}"] if cfg.name else []
    lines += [
        f"epsilon = {cfg.epsilon!r}",
        f"steps = {cfg.steps}",
        f"alpha = {'auto' if cfg.alpha is None else repr(cfg.alpha)}",
        f"mu = {cfg.mu!r}",
        f"seed = {cfg.seed}",
        f"patchout.enabled = {'true' if cfg.patchout else 'false'}",
    ]
    if cfg.patchout is not None:
        num = "auto" if cfg.patchout.num_patches is None else str(cfg.patchout.num_patches)
        lines += [f"patchout.num_patches = {num}", f"patchout.rng_seed = {cfg.patchout.rng_seed}"]
    lines.append(f"tgr.enabled = {'true' if cfg.tgr else 'false'}")
    if cfg.tgr is not None:
        t = cfg.tgr
        order = [c for c in ComponentKind if c in t.enabled_components]
        lines += [
            f"tgr.k = {t.k}",
            f"tgr.s_attention = {t.s_attention!r}",
            f"tgr.s_qkv = {t.s_qkv!r}",
            f"tgr.s_mlp = {t.s_mlp!r}",
            f"tgr.components = {','.join(c.value for c in order)}",
            f"tgr.selection_mode = {t.selection_mode.value}",
            f"tgr.elimination_mode = {t.elimination_mode.value}",
            f"tgr.include_class_token = {'true' if t.include_class_token else 'false'}",
        ]
    return lines


def parse_overrides(items) -> list:
    """Turn CLI --set key=value items into pairs"""
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def merge_pairs(base, overrides) -> list:
    merged = dict(base)
    merged.update(dict(overrides))
    return list(merged.items())


def load_attack_config(path, overrides=()) -> AttackConfig:
    """Read an attack config file, applying key=value overrides on top"""
    text = Path(path).read_text(encoding="utf-8")
    pairs = merge_pairs(parse_lines(text.splitlines()), parse_overrides(overrides))
    cfg = attack_config_from_pairs(pairs)
    logger.info(f"Loaded attack config {cfg.label} from {path}")
    return cfg


def save_attack_config(cfg: AttackConfig, path):
    Path(path).write_text("\n".join(dump_lines(cfg)) + "\n", encoding="utf-8")


def default_attacks() -> list:
    """The four named attack rows shipped with the tool"""
    return [
        AttackConfig(name="MIM"),
        AttackConfig(name="TGR", tgr=TgrConfig()),
        AttackConfig(name="MIM-P", patchout=PatchOutConfig()),
        AttackConfig(name="TGR-P", tgr=TgrConfig(), patchout=PatchOutConfig()),
    ]
