import dataclasses
import os

import numpy as np
import pytest

from services.splits import assign_splits, label_subset, round_table, split_sizes
from services.storage import TileStore, decode_tile, encode_tile, load_dataset, load_latent, save_dataset
from services.synthetic import generate_synthetic
from utils.errors import ConfigError, DatasetFormatError, LabelAccessError, MissingTileError


# --- Synthetic generation ---

def test_generation_is_deterministic(synthetic_cfg):
    first, tiles_a = generate_synthetic(synthetic_cfg, seed=7)
    second, tiles_b = generate_synthetic(synthetic_cfg, seed=7)
    assert first.tile_ids == second.tile_ids
    for a, b in zip(tiles_a, tiles_b):
        assert encode_tile(a, first.modalities) == encode_tile(b, second.modalities)


def test_generated_tiles_match_their_specs(generated):
    manifest, tiles = generated
    assert len(tiles) == 16
    assert [s.name for s in manifest.modalities] == ['vhr', 'optical_ts', 'radar_ts']
    for tile in tiles:
        tile.validate(manifest.modalities)
        assert tile.labels.sum() >= 1
        assert tile.arrays['vhr'].shape == (2, 8, 8)


def test_different_seeds_give_different_tiles(synthetic_cfg):
    _, a = generate_synthetic(synthetic_cfg, seed=1)
    _, b = generate_synthetic(synthetic_cfg, seed=2)
    assert not np.array_equal(a[0].arrays['vhr'], b[0].arrays['vhr'])


# --- Tile files ---

def test_tile_file_keeps_arrays_days_and_labels(generated):
    manifest, tiles = generated
    tile = tiles[0]
    back = decode_tile(encode_tile(tile, manifest.modalities))
    assert back.tile_id == tile.tile_id and back.grid == tile.grid
    np.testing.assert_array_equal(back.arrays['optical_ts'], tile.arrays['optical_ts'])
    np.testing.assert_array_equal(back.timestamps['radar_ts'], tile.timestamps['radar_ts'])
    np.testing.assert_array_equal(back.labels, tile.labels)


def test_bad_magic_is_rejected(generated):
    manifest, tiles = generated
    blob = bytearray(encode_tile(tiles[0], manifest.modalities))
    blob[:4] = b'NOPE'
    with pytest.raises(DatasetFormatError):
        decode_tile(bytes(blob))


def test_saved_dataset_loads_back(dataset_dir, generated):
    manifest, tiles = generated
    loaded, store = load_dataset(dataset_dir)
    assert loaded.tile_ids == manifest.tile_ids
    assert loaded.splits == manifest.splits
    assert store.max_grid() == (2, 2)
    np.testing.assert_array_equal(store.get(tiles[3].tile_id).arrays['vhr'], tiles[3].arrays['vhr'])


def test_saving_twice_gives_identical_bytes(tmp_path, generated):
    manifest, tiles = generated
    for name in ('a', 'b'):
        save_dataset(manifest, tiles, str(tmp_path / name))
    for rel in ['manifest.json'] + [path for _, path in manifest.tiles]:
        assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()


def test_latent_field_is_written_on_request(tmp_path, synthetic_cfg):
    manifest, tiles = generate_synthetic(dataclasses.replace(synthetic_cfg, write_latent=True), seed=3)
    save_dataset(manifest, tiles, str(tmp_path))
    latent = load_latent(str(tmp_path), tiles[0].tile_id)
    np.testing.assert_array_equal(latent, tiles[0].latent)
    assert latent.min() >= 0 and latent.max() < synthetic_cfg.n_classes


def test_missing_tile_names_the_tile(dataset_dir, generated):
    manifest, _ = generated
    victim = manifest.tiles[0]
    os.remove(os.path.join(dataset_dir, victim[1]))
    with pytest.raises(MissingTileError) as excinfo:
        load_dataset(dataset_dir)
    assert victim[0] in str(excinfo.value)


def test_locked_store_hides_labels(dataset_dir):
    manifest, store = load_dataset(dataset_dir)
    locked = store.lock_labels()
    tile = locked.get(manifest.tile_ids[0])
    assert tile.arrays['vhr'].size
    with pytest.raises(LabelAccessError):
        tile.labels
    with pytest.raises(LabelAccessError):
        locked.labels(manifest.tile_ids[:2])
    assert isinstance(store.get(manifest.tile_ids[0]).labels, np.ndarray)


def test_unknown_tile_is_a_key_error(dataset_dir):
    manifest, _ = load_dataset(dataset_dir)
    with pytest.raises(KeyError):
        TileStore(dataset_dir, manifest).get('nope')


# --- Splits ---

def test_split_sizes_use_largest_remainder():
    assert split_sizes(10, {'train': 0.8, 'val': 0.1, 'test': 0.1}) == {'train': 8, 'val': 1, 'test': 1}
    assert split_sizes(7, {'a': 0.5, 'b': 0.5}) == {'a': 4, 'b': 3}


def test_splits_are_disjoint_and_sized():
    ids = [f"t{i}" for i in range(40)]
    rng = np.random.default_rng(0)
    labels = (rng.random((40, 4)) < 0.3).astype(int)
    labels[np.arange(40), rng.integers(0, 4, 40)] = 1
    splits = assign_splits(ids, {'train': 0.6, 'val': 0.2, 'test': 0.2}, seed=3, labels=labels)
    members = [tile for split in splits.values() for tile in split]
    assert len(members) == len(set(members)) == 40
    assert [len(splits[s]) for s in ('train', 'val', 'test')] == [24, 8, 8]
    # every class with enough positives reaches the training split
    train_rows = [ids.index(t) for t in splits['train']]
    assert (labels[train_rows].sum(axis=0) > 0).all()


def class_counts(splits, ids, labels):
    index = {tile: i for i, tile in enumerate(ids)}
    return {name: labels[[index[t] for t in members]].sum(axis=0) for name, members in splits.items()}


@pytest.mark.parametrize('n_tiles,fractions', [
    (100, {'train': 0.8, 'val': 0.1, 'test': 0.1}),
    (50, {'train': 0.6, 'val': 0.2, 'test': 0.2}),
    (60, {'train': 0.5, 'val': 0.25}),
])
def test_single_label_classes_stay_within_one_tile_of_their_share(n_tiles, fractions):
    ids = [f"t{i}" for i in range(n_tiles)]
    for seed in range(30):
        rng = np.random.default_rng(seed)
        labels = np.eye(5, dtype=int)[rng.choice(5, n_tiles, p=[0.4, 0.3, 0.15, 0.1, 0.05])]
        splits = assign_splits(ids, fractions, seed=seed, labels=labels)
        totals = labels.sum(axis=0)
        for name, counts in class_counts(splits, ids, labels).items():
            assert np.all(np.abs(counts - fractions[name] * totals) <= 1 + 1e-9), (seed, name, counts)


def test_sparse_class_gets_its_share_of_a_small_split():
    ids = [f"t{i}" for i in range(100)]
    labels = np.zeros((100, 2), dtype=int)
    labels[:10, 0] = 1
    labels[10:, 1] = 1
    splits = assign_splits(ids, {'train': 0.1, 'rest': 0.9}, seed=4, labels=labels)
    assert class_counts(splits, ids, labels)['train'][0] == 1
    assert len(splits['train']) == 10


def test_multilabel_split_is_closer_to_the_shares_than_a_plain_one():
    ids = [f"t{i}" for i in range(90)]
    fractions = {'train': 0.7, 'val': 0.15, 'test': 0.15}

    def deviation(splits, labels):
        totals = labels.sum(axis=0)
        return sum(np.abs(c - fractions[name] * totals).sum()
                   for name, c in class_counts(splits, ids, labels).items())

    stratified, plain = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        labels = (rng.random((90, 6)) < np.linspace(0.1, 0.5, 6)).astype(int)
        stratified += deviation(assign_splits(ids, fractions, seed=seed, labels=labels), labels)
        plain += deviation(assign_splits(ids, fractions, seed=seed), labels)
    assert stratified < plain


def test_round_table_keeps_cells_rows_and_columns():
    exact = np.outer([0.7, 0.15, 0.15], [3, 10, 5])
    table = round_table(exact, [12, 3, 3])
    assert np.all(np.abs(table - exact) < 1)
    assert table.sum(axis=1).tolist() == [12, 3, 3]
    assert table.sum(axis=0).tolist() == [3, 10, 5]


def test_split_is_seeded():
    ids = [f"t{i}" for i in range(20)]
    assert assign_splits(ids, {'a': 0.5, 'b': 0.5}, 1) == assign_splits(ids, {'a': 0.5, 'b': 0.5}, 1)


def test_partial_fractions_leave_tiles_unassigned():
    ids = [f"t{i}" for i in range(10)]
    splits = assign_splits(ids, {'train': 0.5, 'val': 0.2}, seed=0)
    assert set(splits) == {'train', 'val'}
    assert len(splits['train']) == 5 and len(splits['val']) == 2


@pytest.mark.parametrize('fractions', [{'a': 0.7, 'b': 0.7}, {'a': 0.0}, {}])
def test_bad_fractions_are_config_errors(fractions):
    with pytest.raises(ConfigError):
        assign_splits(['x', 'y', 'z'], fractions, seed=0)


def test_label_subset_size_and_full_fraction():
    ids = [f"t{i}" for i in range(20)]
    assert len(label_subset(ids, 0.1, seed=0)) == 2
    assert label_subset(ids, 1.0, seed=0) == ids
    with pytest.raises(ConfigError):
        label_subset(ids[:5], 0.1, seed=0)
