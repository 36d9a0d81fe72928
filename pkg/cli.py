import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from app import __version__, configure_logging, get_settings
from services.attack_config import (
    AttackConfig,
    TgrConfig,
    attack_config_from_pairs,
    default_attacks,
    load_attack_config,
    parse_overrides,
)
from services.errors import ConfigError, NumericalError, TgrError
from services.eval_harness import (
    TrainedZoo,
    ablate_components,
    compare_variance,
    evaluate_adversarials,
    source_correct_indices,
    sweep_k,
    transfer_matrix,
)
from services.file_processor import file_crc32, load_model, save_model
from services.report_writer import (
    ablation_frame,
    report_payload,
    sweep_frame,
    transfer_frame,
    variance_frame,
    write_report,
)
from services.run_manifest import ManifestRecorder, record_failure
from services.tgr_attack import run_attacks
from services.vit_net import ViTModel
from services.zoo_train import (
    Dataset,
    Split,
    ZooRegistry,
    generate_splits,
    load_dataset,
    load_train_config,
    save_dataset,
    train,
    with_seed,
)

logger = logging.getLogger(__name__)

LINF_TOLERANCE = 1e-12

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
out_path = click.Path(dir_okay=False, path_type=Path)


class TgrGroup(click.Group):
    """Command group that reports every failure as one ``tgr-error[<code>]`` line"""

    def main(self, args=None, prog_name=None, **extra):
        extra.pop("standalone_mode", None)
        argv = sys.argv[1:] if args is None else list(args)
        try:
            rv = super().main(args=argv, prog_name=prog_name, standalone_mode=False, **extra)
        except click.UsageError as e:
            self._fail(argv, "usage", e.format_message(), status=2)
        except click.Abort:
            self._fail(argv, "aborted", "interrupted")
        except TgrError as e:
            logger.debug("Command failed", exc_info=True)
            self._fail(argv, e.code, str(e))
        except OSError as e:
            self._fail(argv, "io", str(e))
        except Exception as e:
            logger.debug("Unexpected failure", exc_info=True)
            self._fail(argv, "internal", f"{type(e).__name__}: {e}")
        sys.exit(rv if isinstance(rv, int) else 0)

    @staticmethod
    def _fail(argv, code, message, status=1):
        click.echo(f"tgr-error[{code}]: {message}", err=True)
        record_failure(argv, code)
        sys.exit(status)


def _echo_crc(path: Path, crc: int | None = None):
    crc = file_crc32(path) if crc is None else crc
    click.echo(f"crc32 {crc:08x}  {path}")


def _named_paths(items, option):
    """NAME=PATH items (a bare path is named after its stem)"""
    named = {}
    for item in items:
        name, sep, raw = item.partition("=")
        if not sep:
            name, raw = Path(item).stem, item
        path = Path(raw)
        if not path.is_file():
            raise click.BadParameter(f"{raw} does not exist", param_hint=option)
        if name in named:
            raise ConfigError(f"model name {name!r} given twice", key=option.lstrip("-"))
        named[name] = path
    return named


def _load_zoo(items, reference: Dataset | None, recorder: ManifestRecorder, option="--zoo") -> TrainedZoo:
    models = {}
    for name, path in _named_paths(items, option).items():
        recorder.input(path)
        models[name] = load_model(path)
    return TrainedZoo(models, reference)


def _load_data(path: Path, recorder: ManifestRecorder, split: Split = Split.EVAL) -> Dataset:
    recorder.input(path)
    return load_dataset(path, split)


def _attack_config(path, overrides, recorder: ManifestRecorder, default: AttackConfig) -> AttackConfig:
    if path is not None:
        recorder.config(path)
        cfg = load_attack_config(path, overrides)
    elif overrides:
        cfg = attack_config_from_pairs(parse_overrides(overrides))
    else:
        cfg = default
    recorder.seed("attack", cfg.seed)
    return cfg


def _write_outputs(recorder, out, payload, frame, title, csv, xlsx):
    for path in write_report(out, payload, frame, title, csv=csv, xlsx=xlsx):
        # workbooks embed timestamps and stay out of the manifest
        if path.suffix != ".xlsx":
            recorder.output(path)
        click.echo(f"wrote {path}")
    recorder.finish(out)


def report_options(f):
    f = click.option("--xlsx", is_flag=True, help="Also write an Excel workbook")(f)
    f = click.option("--csv", is_flag=True, help="Also write a CSV table")(f)
    f = click.option("--out", required=True, type=out_path, help="Report path prefix")(f)
    return f


def attack_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override an attack config key")(f)
    f = click.option("--attack-config", type=existing_file, help="key = value attack config file")(f)
    return f


def zoo_options(f):
    f = click.option("--limit", type=click.IntRange(min=1), help="Attack at most this many source-correct samples")(f)
    f = click.option("--data", required=True, type=existing_file, help="Evaluation dataset file")(f)
    f = click.option("--source", required=True, help="Zoo name of the source model")(f)
    f = click.option("--zoo", "zoo_items", required=True, multiple=True, metavar="NAME=PATH",
                     help="Zoo model file (repeatable)")(f)
    return f


@click.group(cls=TgrGroup)
@click.version_option(__version__, prog_name="tgr")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker cap (defaults to TGR_THREADS)")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, threads, verbose):
    """Token Gradient Regularization attacks on tiny Vision Transformers"""
    configure_logging("DEBUG" if verbose else None)
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads or get_settings().threads


@cli.command("gen-data")
@click.option("--classes", default=10, show_default=True, type=click.IntRange(2, 20))
@click.option("--per-class", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--eval-per-class", default=0, show_default=True, type=click.IntRange(min=0),
              help="Also write an eval split of this size per class")
@click.option("--size", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--channels", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", required=True, type=out_path)
@click.option("--eval-out", type=out_path, help="Eval split path (default: <out>.eval)")
@click.pass_context
def gen_data(ctx, classes, per_class, eval_per_class, size, channels, seed, out, eval_out):
    """Generate a synthetic shapes dataset"""
    recorder = ManifestRecorder("gen-data", ctx.params)
    recorder.seed("data", seed)
    train_split, eval_split = generate_splits(classes, per_class, eval_per_class, size, seed, channels)
    _echo_crc(out, save_dataset(train_split, out))
    recorder.output(out)
    if eval_per_class:
        eval_out = eval_out or out.with_name(out.name + ".eval")
        _echo_crc(eval_out, save_dataset(eval_split, eval_out))
        recorder.output(eval_out)
    recorder.finish(out)


@cli.command("train")
@click.option("--data", required=True, type=existing_file, help="Training dataset file")
@click.option("--eval-data", type=existing_file, help="Dataset for the reported accuracy")
@click.option("--arch", required=True, help="Architecture name from config/zoo.json")
@click.option("--train-config", type=existing_file, help="key = value training config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a training config key")
@click.option("--seed", type=click.IntRange(min=0), help="Seed for initialization and shuffling")
@click.option("--out", required=True, type=out_path)
@click.option("--force", is_flag=True, help="Overwrite an existing model file")
@click.pass_context
def train_cmd(ctx, data, eval_data, arch, train_config, overrides, seed, out, force):
    """Train one zoo architecture"""
    if out.exists() and not force:
        raise ConfigError(f"{out} already exists; pass --force to overwrite", key="out")
    recorder = ManifestRecorder("train", ctx.params)
    vit = ZooRegistry().get(arch)
    cfg = with_seed(load_train_config(train_config, overrides), seed)
    recorder.config(train_config)
    recorder.seed("train", cfg.seed)

    train_data = _load_data(data, recorder, Split.TRAIN)
    held_out = _load_data(eval_data, recorder) if eval_data else None
    if train_data.num_classes != vit.num_classes:
        logger.info(f"Setting {arch} head to {train_data.num_classes} classes to match the dataset")
        vit = replace(vit, num_classes=train_data.num_classes)

    result = train(ViTModel.initialize(vit, cfg.seed), train_data, cfg, held_out)
    _echo_crc(out, save_model(result.model, out))
    recorder.output(out)
    final = result.history[-1]
    click.echo(f"accuracy {final.get('eval_accuracy', final['train_accuracy']):.4f}")
    recorder.finish(out)


@cli.command("attack")
@click.option("--source-model", required=True, type=existing_file)
@click.option("--data", required=True, type=existing_file, help="Evaluation dataset file")
@attack_options
@click.option("--limit", type=click.IntRange(min=1), help="Attack at most this many source-correct samples")
@click.option("--out", required=True, type=out_path, help="Adversarial batch file")
@click.pass_context
def attack_cmd(ctx, source_model, data, attack_config, overrides, limit, out):
    """Craft adversarial examples on one source model"""
    recorder = ManifestRecorder("attack", ctx.params)
    recorder.input(source_model)
    model = load_model(source_model)
    eval_data = _load_data(data, recorder)
    cfg = _attack_config(attack_config, overrides, recorder, AttackConfig(tgr=TgrConfig()))
    cfg.validate_for(model.config)

    indices = source_correct_indices(model, eval_data, limit)
    if len(indices) == 0:
        raise ConfigError("the source model classifies no sample correctly", key="data")
    if len(indices) < len(eval_data):
        logger.warning(f"Skipping {len(eval_data) - len(indices)} samples the source misclassifies or beyond --limit")
    clean, labels = eval_data.images[indices], eval_data.labels[indices]
    results = run_attacks(model, clean, labels, cfg, indices=indices, threads=ctx.obj["threads"])
    adv = np.stack([r.x_adv for r in results])

    worst = float(np.max(np.abs(adv - clean)))
    if worst > cfg.epsilon_unit + LINF_TOLERANCE or adv.min() < 0.0 or adv.max() > 1.0:
        raise NumericalError(f"adversarial batch leaves the L-inf box (max deviation {worst})")

    crc = save_dataset(Dataset(adv, labels, eval_data.num_classes, Split.EVAL), out)
    recorder.output(out)
    click.echo(f"samples {len(results)}")
    click.echo(f"source_asr {100.0 * np.mean([r.success_on_source for r in results]):.1f}")
    _echo_crc(out, crc)
    recorder.finish(out)


@cli.command("eval")
@click.option("--adversarials", required=True, type=existing_file, help="Adversarial batch file")
@click.option("--target", "targets", required=True, multiple=True, metavar="NAME=PATH",
              help="Target model file (repeatable)")
@click.option("--source-name", help="Which target is the source (defaults to the first)")
@click.option("--attack-name", default="adversarials", show_default=True)
@click.option("--data", type=existing_file, help="Clean dataset; enables the clean-accuracy check")
@report_options
@click.pass_context
def eval_cmd(ctx, adversarials, targets, source_name, attack_name, data, out, csv, xlsx):
    """Score a stored adversarial batch on target models"""
    recorder = ManifestRecorder("eval", ctx.params)
    reference = _load_data(data, recorder) if data else None
    zoo = _load_zoo(targets, reference, recorder, option="--target")
    if reference is not None:
        zoo.require_trained()
    source = source_name or zoo.names[0]
    if source not in zoo.names:
        raise ConfigError(f"{source!r} is not one of the targets ({', '.join(zoo.names)})", key="source-name")
    adv = _load_data(adversarials, recorder)

    report = evaluate_adversarials(zoo, source, attack_name, adv.images, adv.labels, threads=ctx.obj["threads"])
    payload = report_payload("transfer", source, [report])
    _write_outputs(recorder, out, payload, transfer_frame([report]), f"Attack success rate (%) from {source}",
                   csv, xlsx)


@cli.command("transfer")
@zoo_options
@click.option("--attack-config", "attack_configs", multiple=True, type=existing_file,
              help="Attack config file (repeatable; defaults to MIM, TGR, MIM-P, TGR-P)")
@report_options
@click.pass_context
def transfer_cmd(ctx, zoo_items, source, data, limit, attack_configs, out, csv, xlsx):
    """Transfer matrix: every attack from one source against the whole zoo"""
    recorder = ManifestRecorder("transfer", ctx.params)
    eval_data = _load_data(data, recorder)
    zoo = _load_zoo(zoo_items, eval_data, recorder)
    attacks = []
    for path in attack_configs:
        recorder.config(path)
        attacks.append(load_attack_config(path))
    attacks = attacks or default_attacks()

    reports = transfer_matrix(zoo, source, attacks, eval_data, threads=ctx.obj["threads"], limit=limit)
    payload = report_payload("transfer", source, reports, clean_accuracy=zoo.clean_accuracy)
    _write_outputs(recorder, out, payload, transfer_frame(reports), f"Attack success rate (%) from {source}",
                   csv, xlsx)


@cli.command("variance")
@click.option("--model", "model_path", required=True, type=existing_file)
@click.option("--model-name", help="Name used in the report (defaults to the file stem)")
@click.option("--data", required=True, type=existing_file)
@click.option("--attack-config", "attack_configs", multiple=True, type=existing_file,
              help="Attack config file (repeatable; defaults to MIM and TGR)")
@click.option("--samples", default=100, show_default=True, type=click.IntRange(min=1))
@report_options
@click.pass_context
def variance_cmd(ctx, model_path, model_name, data, attack_configs, samples, out, csv, xlsx):
    """Per-block gradient variance in the last attack iteration"""
    recorder = ManifestRecorder("variance", ctx.params)
    recorder.input(model_path)
    model = load_model(model_path)
    eval_data = _load_data(data, recorder)
    attacks = []
    for path in attack_configs:
        recorder.config(path)
        attacks.append(load_attack_config(path))
    attacks = attacks or default_attacks()[:2]
    name = model_name or model_path.stem

    profiles = compare_variance(model, attacks, eval_data, samples, model_name=name, threads=ctx.obj["threads"])
    payload = report_payload("variance", name, profiles)
    _write_outputs(recorder, out, payload, variance_frame(profiles), f"Average gradient variance of {name}",
                   csv, xlsx)


@cli.command("ablate")
@zoo_options
@attack_options
@report_options
@click.pass_context
def ablate_cmd(ctx, zoo_items, source, data, limit, attack_config, overrides, out, csv, xlsx):
    """Transfer rows for all 8 subsets of the TGR components"""
    recorder = ManifestRecorder("ablate", ctx.params)
    eval_data = _load_data(data, recorder)
    zoo = _load_zoo(zoo_items, eval_data, recorder)
    base = _attack_config(attack_config, overrides, recorder, AttackConfig(tgr=TgrConfig()))

    rows = ablate_components(source, zoo, eval_data, base, threads=ctx.obj["threads"], limit=limit)
    payload = report_payload("ablation", source, [{"components": r.label, **r.report.to_dict()} for r in rows])
    _write_outputs(recorder, out, payload, ablation_frame(rows), f"Component ablation from {source}", csv, xlsx)


@cli.command("sweep-k")
@zoo_options
@attack_options
@click.option("--k", "k_values", default="0,1,2,3,4,5", show_default=True, help="Comma list of k values")
@report_options
@click.pass_context
def sweep_k_cmd(ctx, zoo_items, source, data, limit, attack_config, overrides, k_values, out, csv, xlsx):
    """Transfer rows for a range of extreme-token counts"""
    try:
        ks = [int(k) for k in k_values.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"expected integers, got {k_values!r}", param_hint="--k") from None
    if any(k < 0 for k in ks):
        raise click.BadParameter("k values must be >= 0", param_hint="--k")
    recorder = ManifestRecorder("sweep-k", ctx.params)
    eval_data = _load_data(data, recorder)
    zoo = _load_zoo(zoo_items, eval_data, recorder)
    base = _attack_config(attack_config, overrides, recorder, AttackConfig(tgr=TgrConfig()))

    rows = sweep_k(source, zoo, eval_data, base, ks, threads=ctx.obj["threads"], limit=limit)
    payload = report_payload("sweep_k", source, [{"k": r.k, **r.report.to_dict()} for r in rows])
    _write_outputs(recorder, out, payload, sweep_frame(rows), f"Extreme-token sweep from {source}", csv, xlsx)


def main():
    cli(prog_name="tgr")
