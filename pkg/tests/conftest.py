import os
import sys

import numpy as np
import pytest
import yaml

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import SyntheticConfig, TrainConfig  # noqa: E402
from services.splits import stratified_split  # noqa: E402
from services.storage import save_dataset  # noqa: E402
from services.synthetic import generate_synthetic  # noqa: E402

TINY_SYNTHETIC = dict(
    n_classes=3, n_tiles=16, grid=(2, 2), grid_cell_m=10.0,
    image_channels=2, image_patch_px=4,
    optical_channels=2, optical_length=(3, 5),
    radar_channels=2, radar_length=(3, 5),
)

TINY_TRAIN = dict(
    d=8, blocks=1, heads=2, ltae_heads=2, ltae_key_dim=4, rel_buckets=4,
    batch_tiles=4, pretrain_epochs=2, finetune_epochs=2, scheduler_patience=2,
    early_stop_patience=5, seed=0,
)

TINY_SPLIT = {'train': 0.5, 'val': 0.25, 'test': 0.25}


@pytest.fixture
def synthetic_cfg():
    return SyntheticConfig(**TINY_SYNTHETIC)


@pytest.fixture
def train_cfg():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def generated(synthetic_cfg):
    """(manifest, tiles) of the tiny synthetic dataset, already split."""
    manifest, tiles = generate_synthetic(synthetic_cfg, seed=0)
    labels = np.stack([tile.labels for tile in tiles])
    stratified_split(manifest, TINY_SPLIT, 0, labels)
    return manifest, tiles


@pytest.fixture
def dataset_dir(tmp_path, generated):
    manifest, tiles = generated
    root = tmp_path / 'data'
    save_dataset(manifest, tiles, str(root))
    return str(root)


@pytest.fixture
def run_config(tmp_path):
    """A run-config file with the tiny settings, for command-line tests."""
    path = tmp_path / 'run.yaml'
    document = {
        'train': dict(TINY_TRAIN),
        'synthetic': {k: list(v) if isinstance(v, tuple) else v for k, v in TINY_SYNTHETIC.items()},
        'split': dict(TINY_SPLIT),
    }
    path.write_text(yaml.safe_dump(document), encoding='utf-8')
    return str(path)
