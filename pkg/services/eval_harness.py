"""Transfer matrices, gradient-variance profiles, component ablations and the k sweep.

Every experiment attacks only samples the source model classifies correctly,
so an attack that leaves images unchanged scores exactly 0% on the source.
Per-sample seeds derive from dataset positions, and results are collected in
input order, so the thread count never changes a number.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np

from app import get_settings
from services.attack_config import AttackConfig, TgrConfig
from services.errors import ConfigError, DomainError, UntrainedModelError
from services.tensor_core import make_rng, moments
from services.tgr_attack import run_attacks
from services.vit_net import ComponentKind, ViTModel, accuracy, predict
from services.zoo_train import Dataset

logger = logging.getLogger(__name__)

COMPONENT_ORDER = (ComponentKind.ATTENTION, ComponentKind.QKV, ComponentKind.MLP)
COMPONENT_SUBSETS = tuple(
    frozenset(combo) for size in range(4) for combo in combinations(COMPONENT_ORDER, size)
)
LEVELS = ("shallow", "middle", "deep")


@dataclass
class TransferReport:
    source_model: str
    attack_name: str
    per_target: dict
    sample_count: int
    config: dict = field(default_factory=dict)

    @property
    def white_box_asr(self):
        return self.per_target.get(self.source_model)

    @property
    def mean_black_box_asr(self):
        others = [v for name, v in self.per_target.items() if name != self.source_model]
        return float(np.mean(others)) if others else None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["white_box_asr"] = self.white_box_asr
        data["mean_black_box_asr"] = self.mean_black_box_asr
        return data


@dataclass
class VarianceProfile:
    model_name: str
    attack_name: str
    per_block: list
    level_averages: tuple
    sample_count: int

    @property
    def overall_average(self) -> float:
        return float(np.mean(self.per_block)) if self.per_block else 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["level_averages"] = dict(zip(LEVELS, self.level_averages))
        data["overall_average"] = self.overall_average
        return data


@dataclass
class AblationRow:
    components: frozenset
    report: TransferReport

    @property
    def label(self) -> str:
        return component_label(self.components)


@dataclass
class SweepRow:
    k: int
    report: TransferReport


def component_label(components) -> str:
    names = [c.value for c in COMPONENT_ORDER if c in components]
    return "+".join(names) if names else "none"


class TrainedZoo:
    """Named models plus their clean accuracy on a reference dataset"""

    def __init__(self, models: dict, reference: Dataset | None, min_accuracy: float | None = None):
        if not models:
            raise ConfigError("the zoo needs at least one model", key="zoo")
        self.models = dict(models)
        self.min_accuracy = get_settings().min_clean_accuracy if min_accuracy is None else min_accuracy
        self.clean_accuracy = {}
        if reference is not None:
            self.clean_accuracy = {
                name: accuracy(model, reference.images, reference.labels) for name, model in self.models.items()
            }
        for name, acc in self.clean_accuracy.items():
            logger.info(f"Zoo model {name}: clean accuracy {acc:.3f}")

    @property
    def names(self):
        return list(self.models)

    def __getitem__(self, name) -> ViTModel:
        try:
            return self.models[name]
        except KeyError:
            raise ConfigError(f"model {name!r} is not in the zoo ({', '.join(self.models)})", key="source") from None

    def require_trained(self, names=None):
        for name in names or self.names:
            acc = self.clean_accuracy.get(name)
            if acc is None:
                raise UntrainedModelError(f"clean accuracy of {name} was never measured")
            if acc < self.min_accuracy:
                raise UntrainedModelError(
                    f"refusing to use {name}: clean accuracy {acc:.3f} is below {self.min_accuracy:.3f}"
                )


def attack_success_rate(target: ViTModel, adversarials) -> float:
    """Percentage of (x_adv, y) pairs the target misclassifies"""
    pairs = list(adversarials)
    if not pairs:
        raise DomainError("attack success rate of an empty sample set is undefined")
    images = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    labels = np.asarray([int(y) for _, y in pairs])
    return _asr(target, images, labels)


def _asr(target: ViTModel, images, labels) -> float:
    return 100.0 * float(np.mean(predict(target, images) != labels))


def source_correct_indices(model: ViTModel, data: Dataset, limit: int | None = None):
    indices = np.flatnonzero(predict(model, data.images) == data.labels)
    return indices if limit is None else indices[:limit]


def _threads(threads):
    return get_settings().threads if threads is None else max(1, int(threads))


def evaluate_adversarials(zoo: TrainedZoo, source: str, attack_name: str, adv_images, labels,
                          config=None, threads=None) -> TransferReport:
    """ASR of one adversarial batch on every zoo model"""
    if len(labels) == 0:
        raise DomainError("no adversarial samples to evaluate")
    names = zoo.names
    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        rates = list(pool.map(lambda name: _asr(zoo[name], adv_images, labels), names))
    return TransferReport(source, attack_name, dict(zip(names, rates)), int(len(labels)), dict(config or {}))


def transfer_matrix(zoo: TrainedZoo, source: str, attacks, data: Dataset, threads=None,
                    include_baseline: bool = True, limit: int | None = None) -> list:
    """Craft adversarials on the source once per attack and score every zoo model.

    A plain MIM row is prepended unless some attack already runs without TGR
    and without PatchOut.
    """
    zoo.require_trained()
    attacks = list(attacks)
    if include_baseline and not any(a.tgr is None and a.patchout is None for a in attacks):
        base = attacks[0] if attacks else AttackConfig()
        attacks.insert(0, replace(base.as_baseline(), patchout=None))

    model = zoo[source]
    indices = source_correct_indices(model, data, limit)
    if len(indices) == 0:
        raise DomainError(f"source model {source} classifies no evaluation sample correctly")
    images, labels = data.images[indices], data.labels[indices]

    reports = []
    for cfg in attacks:
        cfg.validate_for(model.config)
        results = run_attacks(model, images, labels, cfg, indices=indices, threads=_threads(threads))
        adv = np.stack([r.x_adv for r in results])
        report = evaluate_adversarials(zoo, source, cfg.label, adv, labels, cfg.snapshot(), threads)
        logger.info(f"{cfg.label} from {source}: " + ", ".join(f"{n} {v:.1f}%" for n, v in report.per_target.items()))
        reports.append(report)
    return reports


def level_split(depth: int):
    """Block indices of the shallow, middle and deep thirds (first third gets the extra block)"""
    return [list(map(int, part)) for part in np.array_split(np.arange(depth), 3)]


def _block_variances(module_grads, depth):
    out = np.zeros(depth)
    for b in range(depth):
        pooled = np.concatenate([mg.grad.ravel() for mg in module_grads if mg.block_index == b])
        out[b] = moments(pooled)[1]
    return out


def variance_profile(model: ViTModel, attack: AttackConfig, data: Dataset, sample_count: int = 100,
                     model_name: str = "model", indices=None, threads=None) -> VarianceProfile:
    """Average per-block variance of the post-hook module gradients in the last attack iteration"""
    if attack.steps < 1:
        raise ConfigError("variance profiling needs at least one attack step", key="steps")
    if indices is None:
        if sample_count > len(data):
            raise DomainError(f"asked for {sample_count} samples from a dataset of {len(data)}")
        indices = np.sort(make_rng(attack.seed).choice(len(data), size=sample_count, replace=False))
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise DomainError("variance profiling needs at least one sample")

    depth = model.config.depth
    results = run_attacks(model, data.images[indices], data.labels[indices], attack, indices=indices,
                          threads=_threads(threads), record_module_grads=True)
    per_block = np.zeros(depth)
    for r in results:
        per_block += _block_variances(r.final_module_grads, depth)
    per_block /= len(results)

    levels = tuple(float(np.mean(per_block[part])) if part else 0.0 for part in level_split(depth))
    logger.info(f"Variance profile {attack.label} on {model_name}: "
                + ", ".join(f"{name} {v:.3e}" for name, v in zip(LEVELS, levels)))
    return VarianceProfile(model_name, attack.label, [float(v) for v in per_block], levels, int(len(indices)))


def compare_variance(model: ViTModel, attacks, data: Dataset, sample_count: int = 100,
                     model_name: str = "model", threads=None) -> list:
    """One profile per attack, all on the same sampled images"""
    attacks = list(attacks)
    if not attacks:
        raise ConfigError("no attack configs given")
    if sample_count > len(data):
        raise DomainError(f"asked for {sample_count} samples from a dataset of {len(data)}")
    indices = np.sort(make_rng(attacks[0].seed).choice(len(data), size=sample_count, replace=False))
    return [variance_profile(model, a, data, model_name=model_name, indices=indices, threads=threads)
            for a in attacks]


def ablate_components(source: str, zoo: TrainedZoo, data: Dataset, base: AttackConfig | None = None,
                      threads=None, limit: int | None = None) -> list:
    """One transfer row per subset of {Attention, QKV, MLP}, empty set first"""
    base = base or AttackConfig(tgr=TgrConfig())
    rows = []
    for subset in COMPONENT_SUBSETS:
        cfg = replace(base.with_tgr(enabled_components=subset), name=f"TGR[{component_label(subset)}]")
        report = transfer_matrix(zoo, source, [cfg], data, threads=threads, include_baseline=False, limit=limit)[0]
        rows.append(AblationRow(subset, report))
    return rows


def sweep_k(source: str, zoo: TrainedZoo, data: Dataset, base: AttackConfig | None = None,
            k_values=range(6), threads=None, limit: int | None = None) -> list:
    """Mean ASR per extreme-token count.

    The k = 0 row runs with every scaling factor at 1, which makes it the
    plain momentum attack.
    """
    base = base or AttackConfig(tgr=TgrConfig())
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise ConfigError("no k values given", key="tgr.k")
    base.with_tgr(k=max(k_values)).validate_for(zoo[source].config)

    rows = []
    for k in k_values:
        if k == 0:
            cfg = base.with_tgr(k=0, s_attention=1.0, s_qkv=1.0, s_mlp=1.0)
        else:
            cfg = base.with_tgr(k=k)
        cfg = replace(cfg, name=f"TGR[k={k}]")
        report = transfer_matrix(zoo, source, [cfg], data, threads=threads, include_baseline=False, limit=limit)[0]
        rows.append(SweepRow(k, report))
    return rows
