# config.py

"""
config.py

Configuration for omnifuse. `Config` holds process-level settings read from
the environment (a `.env` file is loaded first). `TrainConfig` and
`SyntheticConfig` hold experiment settings; they can be filled from a YAML
run-config file whose sections are `train`, `synthetic`, `split`, `data` and
`output`, with command-line flags taking precedence.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from models.schema import (
    ContrastiveMode, ImageEncoderKind, MaskStrategy, ModalityKind, ModalitySpec, PositionalMode
)
from utils.errors import ConfigError

load_dotenv()


class Config:
    # Worker parallelism cap for tile generation, serialization and evaluation.
    THREADS = max(1, int(os.environ.get('OMNIFUSE_THREADS', os.cpu_count() or 1)))

    LOG_LEVEL = os.environ.get('OMNIFUSE_LOG_LEVEL', 'INFO').upper()

    # Batches prepared ahead of the training loop.
    PREFETCH_DEPTH = max(1, int(os.environ.get('OMNIFUSE_PREFETCH', '2')))


# --- Experiment Configuration ---

@dataclass
class TrainConfig:
    # Architecture
    d: int = 256
    blocks: int = 6
    heads: int = 8
    ltae_heads: int = 8
    ltae_key_dim: int = 8
    pool_factors: Optional[Tuple[int, ...]] = None  # None: derived from the patch side
    image_encoder: ImageEncoderKind = ImageEncoderKind.CNN
    vit_subpatch: int = 10  # sub-patch side of the vit image encoder, px
    rel_buckets: int = 16
    positional: PositionalMode = PositionalMode.RELATIVE

    # Objectives
    gamma: float = 0.1
    contrastive: ContrastiveMode = ContrastiveMode.FULL
    normalize_embeddings: bool = False
    contrastive_on_masked: bool = False
    reconstruction: bool = True
    mask_ratio: float = 0.5
    mask_strategy: MaskStrategy = MaskStrategy.RANDOM
    index_bypass: bool = True
    fixed_unpool: bool = False
    date_filter: bool = True
    date_filter_fraction: float = 0.25
    date_filter_modalities: Optional[List[str]] = None  # None: every time-series modality

    # Optimization
    pretrain_lr: float = 1e-4
    finetune_lr: float = 2e-5
    probe_lr: float = 1e-3
    scheduler_patience: int = 10
    scheduler_decay: float = 0.1
    batch_tiles: int = 128
    pretrain_epochs: int = 100
    finetune_epochs: int = 50
    early_stop_patience: int = 30

    # Protocol
    label_fraction: float = 1.0
    modalities: Optional[List[str]] = None  # evaluation / fine-tuning subset
    pretrain_modalities: Optional[List[str]] = None
    patch_fraction: float = 1.0
    threshold: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ('pretrain_lr', 'finetune_lr', 'probe_lr', 'gamma'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}.")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}.")
        if not 0 < self.patch_fraction <= 1:
            raise ConfigError(f"patch_fraction must lie in (0, 1], got {self.patch_fraction}.")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}.")
        if not 0 < self.date_filter_fraction <= 1:
            raise ConfigError(f"date_filter_fraction must lie in (0, 1], got {self.date_filter_fraction}.")
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"d must be a positive even number, got {self.d}.")
        if self.d % self.heads or self.d % self.ltae_heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads} and ltae_heads={self.ltae_heads}.")
        if self.vit_subpatch <= 0:
            raise ConfigError(f"vit_subpatch must be positive, got {self.vit_subpatch}.")
        if self.blocks < 0 or self.batch_tiles <= 0:
            raise ConfigError("blocks must be >= 0 and batch_tiles > 0.")
        return self

    def architecture(self):
        """The fields a checkpoint must agree on to be loadable."""
        keys = ('d', 'blocks', 'heads', 'ltae_heads', 'ltae_key_dim', 'pool_factors', 'image_encoder',
                'vit_subpatch', 'rel_buckets', 'positional')
        return {key: to_plain(getattr(self, key)) for key in keys}


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    n_tiles: int = 200
    grid: Tuple[int, int] = (3, 3)
    grid_cell_m: float = 10.0
    cloud_prob: float = 0.3
    latent_seeds: int = 3
    write_latent: bool = False
    image_channels: int = 3
    image_patch_px: int = 8
    optical_channels: int = 4
    optical_length: Tuple[int, int] = (12, 24)
    radar_channels: int = 2
    radar_length: Tuple[int, int] = (16, 30)
    series_sub_cells: int = 1
    image_noise: float = 0.05
    series_noise: float = 0.03
    radar_speckle: float = 0.25
    cloud_brightness: float = 1.5

    def modality_specs(self):
        cell = float(self.grid_cell_m)
        return [
            ModalitySpec("vhr", ModalityKind.IMAGE, self.image_channels, cell / self.image_patch_px,
                         patch_side_px=self.image_patch_px),
            ModalitySpec("optical_ts", ModalityKind.TIME_SERIES, self.optical_channels,
                         cell / self.series_sub_cells, max_length=self.optical_length[1],
                         sub_cells=self.series_sub_cells),
            ModalitySpec("radar_ts", ModalityKind.TIME_SERIES, self.radar_channels,
                         cell / self.series_sub_cells, max_length=self.radar_length[1],
                         sub_cells=self.series_sub_cells),
        ]

    def validate(self):
        if self.n_classes <= 0 or self.n_tiles <= 0 or min(self.grid) <= 0:
            raise ConfigError("n_classes, n_tiles and grid dimensions must be positive.")
        if self.image_patch_px <= 0 or self.image_channels <= 0:
            raise ConfigError("Image patch size and channels must be positive.")
        if self.optical_channels <= 0 or self.radar_channels <= 0 or self.series_sub_cells <= 0:
            raise ConfigError("Time-series channels and sub-cells must be positive.")
        for name in ('optical_length', 'radar_length'):
            low, high = getattr(self, name)
            if not 1 <= low <= high <= 365:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max <= 365, got {(low, high)}.")
        if not 0 <= self.cloud_prob < 1:
            raise ConfigError(f"cloud_prob must lie in [0, 1), got {self.cloud_prob}.")
        if self.latent_seeds <= 0:
            raise ConfigError("latent_seeds must be positive.")
        return self


DEFAULT_SPLIT = {'train': 0.8, 'val': 0.1, 'test': 0.1}

SECTIONS = ('train', 'synthetic', 'split', 'data', 'output')


# --- Conversion helpers ---

def to_plain(value):
    if isinstance(value, enum_types()):
        return value.value
    if isinstance(value, tuple):
        return [to_plain(v) for v in value]
    if isinstance(value, list):
        return [to_plain(v) for v in value]
    return value


def enum_types():
    return (ContrastiveMode, ImageEncoderKind, MaskStrategy, PositionalMode)


def config_to_dict(cfg):
    return {f.name: to_plain(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def config_from_dict(cls, data, section):
    """Builds a dataclass config from a plain mapping, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{section}': {', '.join(unknown)}")
    defaults = cls()
    values = {}
    for name, value in data.items():
        values[name] = coerce(name, getattr(defaults, name), value, section)
    return cls(**values)


def coerce(name, default, value, section):
    try:
        if value is None:
            return None
        for enum_cls in enum_types():
            if isinstance(default, enum_cls):
                return enum_cls(value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true/false")
            return value
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple) or name == 'pool_factors':
            return tuple(int(v) if float(v).is_integer() else float(v) for v in value)
        if isinstance(value, str) and name in ('modalities', 'pretrain_modalities', 'date_filter_modalities'):
            return [v for v in value.split(',') if v]
        return value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for '{section}.{name}': {value!r} ({e})") from e


def load_run_config(path=None, overrides=None):
    """
    Reads a YAML run-config file and applies `overrides`, a mapping of
    section -> {key: value} taken from command-line flags. Returns
    (TrainConfig, SyntheticConfig, sections) where `sections` keeps the
    merged `split`, `data` and `output` sections as plain dicts.
    """
    document = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                document = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"{path} must contain a mapping of sections.")
    unknown = sorted(set(document) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown section(s) in {path}: {', '.join(unknown)}")

    merged = {section: dict(document.get(section) or {}) for section in SECTIONS}
    for section, values in (overrides or {}).items():
        merged[section].update({k: v for k, v in values.items() if v is not None})

    train = config_from_dict(TrainConfig, merged['train'], 'train').validate()
    synthetic = config_from_dict(SyntheticConfig, merged['synthetic'], 'synthetic').validate()
    split = merged['split'] or dict(DEFAULT_SPLIT)
    for key, value in split.items():
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"Split fraction '{key}' must be a positive number.")
    return train, synthetic, {'split': split, 'data': merged['data'], 'output': merged['output']}


def dump_default_config():
    """The complete default run-config document as YAML text."""
    document = {
        'train': config_to_dict(TrainConfig()),
        'synthetic': config_to_dict(SyntheticConfig()),
        'split': dict(DEFAULT_SPLIT),
        'data': {},
        'output': {},
    }
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=None)
