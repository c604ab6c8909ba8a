"""
commands.py

The omnifuse command line. Every command reads an optional YAML run-config
(`--config`) and lets its flags override the file. Exit codes: 0 success,
1 verification failure, 2 configuration error, 3 I/O or dataset error.
"""

import json
import logging
import os
import sys
from functools import wraps

import click
import numpy as np
import yaml

from config import config_to_dict, dump_default_config, load_run_config
from extensions import configure_logging
from utils.errors import ConfigError, ConfigMismatchError, DatasetFormatError, VerificationFailure
from utils.naming import run_name

logger = logging.getLogger('omnifuse.cli')

ABLATIONS = {
    'no-bypass': {'index_bypass': False},
    'no-date-filter': {'date_filter': False},
    'no-contrastive': {'contrastive': 'off'},
    'naive-contrastive': {'contrastive': 'naive'},
    'no-reconstruction': {'reconstruction': False},
    'spatial-mask': {'mask_strategy': 'spatial'},
    'modality-mask': {'mask_strategy': 'modality'},
    'abs-pos': {'positional': 'absolute'},
}

EXIT_VERIFICATION, EXIT_CONFIG, EXIT_IO = 1, 2, 3


# --- Exit-code guard ---

def exit_codes(f):
    """
    Maps the domain exceptions raised by a command onto the process exit
    code and prints a one-line message instead of a traceback.
    """
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except VerificationFailure as e:
            click.echo(f"Verification failed: {e}", err=True)
            sys.exit(EXIT_VERIFICATION)
        except (ConfigError, ConfigMismatchError) as e:
            click.echo(f"Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except (OSError, DatasetFormatError) as e:
            click.echo(f"I/O error: {e}", err=True)
            sys.exit(EXIT_IO)
    return decorated_function


# --- Flag helpers ---

def parse_ablations(ctx, param, value):
    names = [v.strip() for v in (value or '').split(',') if v.strip()]
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise click.BadParameter(f"unknown ablation(s) {', '.join(unknown)}; known: {', '.join(ABLATIONS)}")
    return names


def parse_modalities(ctx, param, value):
    return [v.strip() for v in value.split(',') if v.strip()] if value else None


def config_option(f):
    return click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                        help='YAML run-config file (sections train, synthetic, split, data, output).')(f)


def training_options(f):
    options = [
        click.option('--data', 'data_dir', type=click.Path(file_okay=False),
                     help='Dataset directory (default: data.path from the config).'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False),
                     help='Run directory (default: output.root from the config joined with the run name).'),
        click.option('--seed', type=int, help='Seed for every stochastic step (overrides train.seed).'),
        click.option('--epochs', type=int, help='Epoch count for this command.'),
        click.option('--batch-tiles', type=int, help='Tiles per batch.'),
        click.option('--modalities', callback=parse_modalities,
                     help='Comma-separated modality subset used by this command.'),
        click.option('--ablate', callback=parse_ablations, default='',
                     help=f"Comma-separated ablations: {', '.join(ABLATIONS)}."),
        config_option,
    ]
    for option in reversed(options):
        f = option(f)
    return f


def train_overrides(seed=None, batch_tiles=None, ablate=(), **extra):
    values = {'seed': seed, 'batch_tiles': batch_tiles}
    for name in ablate:
        values.update(ABLATIONS[name])
    values.update(extra)
    return values


def resolve(config_path, train):
    """Loads the run config with `train` flag overrides applied."""
    return load_run_config(config_path, {'train': train})


def resolve_data_dir(data_dir, sections):
    data_dir = data_dir or sections['data'].get('path')
    if not data_dir:
        raise ConfigError("No dataset given: pass --data or set data.path in the config.")
    return data_dir


def resolve_out_dir(out_dir, sections, name):
    if out_dir:
        return out_dir
    root = sections['output'].get('root')
    if not root:
        raise ConfigError("No output directory given: pass --out or set output.root in the config.")
    return os.path.join(root, name)


def open_dataset(data_dir):
    from services.storage import load_dataset
    manifest, store = load_dataset(data_dir)
    logger.info(f"{data_dir}: {len(manifest.tiles)} tiles, modalities {[s.name for s in manifest.modalities]}.")
    return manifest, store


def echo_record(record):
    click.echo(json.dumps(record.to_dict(), indent=2))


# --- Commands ---

@click.group()
@click.option('--verbose', is_flag=True, help='Log at DEBUG level.')
def cli(verbose):
    """Self-supervised multimodal fusion of image and time-series tiles."""
    if verbose:
        configure_logging('DEBUG')


@cli.command('config')
@config_option
@click.option('--dump-defaults', is_flag=True, help='Print the complete default run-config document.')
@exit_codes
def config_command(config_path, dump_defaults):
    """Print the default or the resolved run configuration."""
    if dump_defaults:
        click.echo(dump_default_config(), nl=False)
        return
    train, synthetic, sections = load_run_config(config_path)
    document = {'train': config_to_dict(train), 'synthetic': config_to_dict(synthetic), **sections}
    click.echo(yaml.safe_dump(document, sort_keys=False, default_flow_style=None), nl=False)


@cli.command('gen-data')
@config_option
@click.option('--seed', type=int, help='Generation and split seed (overrides train.seed).')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False),
              help='Dataset directory (default: data.path from the config).')
@click.option('--tiles', type=int, help='Number of tiles (overrides synthetic.n_tiles).')
@exit_codes
def gen_data(config_path, seed, out_dir, tiles):
    """Generate a synthetic multimodal dataset with stratified splits."""
    from services.splits import stratified_split
    from services.storage import save_dataset
    from services.synthetic import generate_synthetic

    train, synthetic, sections = load_run_config(
        config_path, {'train': {'seed': seed}, 'synthetic': {'n_tiles': tiles}})
    out_dir = resolve_data_dir(out_dir, sections)
    manifest, generated = generate_synthetic(synthetic, train.seed)
    labels = np.stack([tile.labels for tile in generated])
    stratified_split(manifest, sections['split'], train.seed, labels)
    path = save_dataset(manifest, generated, out_dir)
    sizes = ', '.join(f"{name} {len(ids)}" for name, ids in manifest.splits.items())
    click.echo(f"Wrote {len(generated)} tiles to {out_dir} ({sizes}); manifest {path}")


@cli.command('pretrain')
@training_options
@click.option('--resume', type=click.Path(dir_okay=False), help='Continue from a last.omnf checkpoint.')
@exit_codes
def pretrain_command(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate, resume):
    """Self-supervised pretraining on the train split."""
    from services.training import pretrain
    cfg, _, sections = resolve(config_path, train_overrides(
        seed, batch_tiles, ablate, pretrain_epochs=epochs, pretrain_modalities=modalities))
    manifest, store = open_dataset(resolve_data_dir(data_dir, sections))
    out_dir = resolve_out_dir(out_dir, sections, run_name('pretrain', ablate, modalities=modalities))
    best = pretrain(manifest, store, cfg, out_dir, resume=resume)
    click.echo(f"Pretraining finished; best checkpoint {best}")


def _supervised(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate,
                checkpoint, labels_fraction, probe):
    from services.training import finetune
    command = 'probe' if probe else 'finetune'
    cfg, _, sections = resolve(config_path, train_overrides(
        seed, batch_tiles, ablate, finetune_epochs=epochs, modalities=modalities, label_fraction=labels_fraction))
    manifest, store = open_dataset(resolve_data_dir(data_dir, sections))
    name = run_name(command, ablate, cfg.label_fraction, modalities)
    if checkpoint is None and not probe:
        name = f"{name}-scratch"
    out_dir = resolve_out_dir(out_dir, sections, name)
    _, test = finetune(manifest, store, cfg, out_dir, checkpoint=checkpoint, probe=probe)
    if test is not None:
        echo_record(test)
    click.echo(f"{command} finished; run directory {out_dir}")


@cli.command('finetune')
@training_options
@click.option('--from', 'checkpoint', type=click.Path(dir_okay=False),
              help='Pretrained checkpoint; without it the model is trained from scratch.')
@click.option('--labels-fraction', type=float, help='Share of the training tiles whose labels are used.')
@exit_codes
def finetune_command(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate,
                     checkpoint, labels_fraction):
    """Supervised fine-tuning of the whole model with a classification head."""
    _supervised(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate,
                checkpoint, labels_fraction, probe=False)


@cli.command('probe')
@training_options
@click.option('--from', 'checkpoint', type=click.Path(dir_okay=False), required=True,
              help='Pretrained checkpoint whose backbone stays frozen.')
@click.option('--labels-fraction', type=float, help='Share of the training tiles whose labels are used.')
@exit_codes
def probe_command(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate,
                  checkpoint, labels_fraction):
    """Linear probing: train only a head on frozen pooled embeddings."""
    _supervised(config_path, data_dir, out_dir, seed, epochs, batch_tiles, modalities, ablate,
                checkpoint, labels_fraction, probe=True)


@cli.command('eval')
@config_option
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), help='Dataset directory.')
@click.option('--from', 'checkpoint', type=click.Path(dir_okay=False), required=True,
              help='Fine-tuned or probed checkpoint with a classification head.')
@click.option('--split', default='test', show_default=True, help='Split to score.')
@click.option('--modalities', callback=parse_modalities, help='Comma-separated modality subset to evaluate.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Append the record to this run directory.')
@exit_codes
def eval_command(config_path, data_dir, checkpoint, split, modalities, out_dir):
    """Score a checkpoint on one split, optionally with a subset of modalities."""
    from services.training import evaluate_checkpoint
    cfg, _, sections = resolve(config_path, {'modalities': modalities})
    manifest, store = open_dataset(resolve_data_dir(data_dir, sections))
    record = evaluate_checkpoint(manifest, store, cfg, checkpoint, split=split, out_dir=out_dir)
    echo_record(record)


@cli.command('verify')
@click.option('--seeds', type=int, default=100, show_default=True, help='Random instances per oracle check.')
@click.option('--inject-fault', type=click.Choice(['grad', 'match']),
              help='Break one check on purpose to exercise the failure path.')
@exit_codes
def verify_command(seeds, inject_fault):
    """Run oracle, gradient, unpooling and date-selection self-checks."""
    from services.verification import run_verification
    report = run_verification(seeds, inject_fault)
    for line in report.lines():
        click.echo(line)
    if not report.passed:
        raise VerificationFailure(', '.join(report.failing))


@cli.command('report')
@click.argument('run_dirs', nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True,
              help='Directory for report.md, report.html and the plots.')
@exit_codes
def report_command(run_dirs, out_dir):
    """Compare runs: a metrics table plus loss-curve and efficiency plots."""
    from services.report import build_report
    rows = build_report(run_dirs, out_dir)
    click.echo(f"Report with {len(rows)} row(s) written to {out_dir}")
