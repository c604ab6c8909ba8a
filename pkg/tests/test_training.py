import dataclasses
import json
import os

import pytest
import torch

from models.schema import ContrastiveMode
from services.checkpoint import load_checkpoint
from services.storage import load_dataset
from services.training import (
    evaluate_checkpoint, finetune, linear_probe, pretrain, pretrain_losses, read_metrics
)
from services.tokenizer import assemble_batch
from services.verification import tiny_config, tiny_specs, tiny_tile
from main import create_model
from utils.errors import ConfigError, LabelAccessError
from utils.seeding import numpy_rng


def without_wall_time(records):
    return [{k: v for k, v in r.items() if k != 'wall_s'} for r in records]


def test_pretrain_losses_are_finite_and_differentiable():
    cfg = tiny_config()
    batch = assemble_batch([tiny_tile(numpy_rng(0, 'test'))], tiny_specs())
    model = create_model(tiny_specs(), cfg, 1.0, (2, 1))
    losses = pretrain_losses(model, batch, cfg, seed=1)
    assert losses.masked == 3
    assert torch.isfinite(losses.total) and float(losses.con) > 0 and float(losses.mae) > 0
    losses.total.backward()
    assert model.fusion.mask_token.grad is not None


def test_switched_off_objectives_contribute_nothing():
    batch = assemble_batch([tiny_tile(numpy_rng(0, 'test'))], tiny_specs())
    cfg = tiny_config(contrastive=ContrastiveMode.OFF)
    model = create_model(tiny_specs(), cfg, 1.0, (2, 1))
    losses = pretrain_losses(model, batch, cfg, seed=1)
    assert float(losses.con) == 0.0 and float(losses.total) == float(losses.mae)
    cfg = tiny_config(reconstruction=False)
    losses = pretrain_losses(model, batch, cfg, seed=1)
    assert losses.masked == 0 and float(losses.total) == float(losses.con)


def test_pretraining_writes_run_artifacts(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    out = str(tmp_path / 'pre')
    best = pretrain(manifest, store, train_cfg, out)
    assert os.path.exists(best) and os.path.exists(os.path.join(out, 'last.omnf'))
    records = read_metrics(os.path.join(out, 'metrics.jsonl'))
    assert [r['epoch'] for r in records] == [1, 2]
    assert all(r['phase'] == 'pretrain' and r['loss_total'] > 0 for r in records)
    with open(os.path.join(out, 'run.json'), encoding='utf-8') as f:
        info = json.load(f)
    assert info['command'] == 'pretrain' and info['parameters']['total'] > 0
    assert load_checkpoint(best).n_classes == 0


def test_pretraining_is_deterministic(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    for name in ('a', 'b'):
        pretrain(manifest, store, train_cfg, str(tmp_path / name))
    for artifact in ('last.omnf', 'best.omnf'):
        assert (tmp_path / 'a' / artifact).read_bytes() == (tmp_path / 'b' / artifact).read_bytes()
    assert without_wall_time(read_metrics(str(tmp_path / 'a' / 'metrics.jsonl'))) == \
        without_wall_time(read_metrics(str(tmp_path / 'b' / 'metrics.jsonl')))


def test_resume_reproduces_the_uninterrupted_run(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    cfg = dataclasses.replace(train_cfg, pretrain_epochs=3)
    pretrain(manifest, store, cfg, str(tmp_path / 'full'))
    pretrain(manifest, store, dataclasses.replace(cfg, pretrain_epochs=1), str(tmp_path / 'part'))
    pretrain(manifest, store, cfg, str(tmp_path / 'part'), resume=str(tmp_path / 'part' / 'last.omnf'))
    full = load_checkpoint(str(tmp_path / 'full' / 'last.omnf'))
    part = load_checkpoint(str(tmp_path / 'part' / 'last.omnf'))
    assert full.epoch == part.epoch == 3
    for name, value in full.tensors.items():
        assert (value == part.tensors[name]).all(), name
    assert without_wall_time(read_metrics(str(tmp_path / 'full' / 'metrics.jsonl'))) == \
        without_wall_time(read_metrics(str(tmp_path / 'part' / 'metrics.jsonl')))


def test_pretraining_never_reads_labels(tmp_path, dataset_dir, train_cfg, monkeypatch):
    manifest, store = load_dataset(dataset_dir)
    calls = []
    original = store.lock_labels

    def spy():
        locked = original()
        calls.append(locked)
        return locked

    monkeypatch.setattr(store, 'lock_labels', spy)
    pretrain(manifest, store, dataclasses.replace(train_cfg, pretrain_epochs=1), str(tmp_path / 'pre'))
    assert calls and calls[0].labels_locked
    with pytest.raises(LabelAccessError):
        calls[0].get(manifest.tile_ids[0]).labels


def test_contrastive_pretraining_needs_two_modalities(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    cfg = dataclasses.replace(train_cfg, pretrain_modalities=['optical_ts'])
    with pytest.raises(ConfigError):
        pretrain(manifest, store, cfg, str(tmp_path / 'pre'))
    single = dataclasses.replace(cfg, contrastive=ContrastiveMode.OFF, pretrain_epochs=1)
    assert os.path.exists(pretrain(manifest, store, single, str(tmp_path / 'pre')))


def test_finetune_from_pretrained_with_label_fraction(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    best = pretrain(manifest, store, train_cfg, str(tmp_path / 'pre'))
    cfg = dataclasses.replace(train_cfg, label_fraction=0.5)
    model, test = finetune(manifest, store, cfg, str(tmp_path / 'ft'), checkpoint=best)
    records = read_metrics(str(tmp_path / 'ft' / 'metrics.jsonl'))
    assert [r['phase'] for r in records] == ['finetune', 'finetune', 'test']
    assert records[-1]['f1_weighted'] == test.weighted_f1
    assert 0.0 <= test.weighted_f1 <= 1.0 and len(test.per_class_f1) == 3
    assert model.head.out_features == 3


def test_probe_leaves_the_backbone_untouched(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    best = pretrain(manifest, store, train_cfg, str(tmp_path / 'pre'))
    before = load_checkpoint(best).model_tensors()
    model, _ = linear_probe(manifest, store, train_cfg, str(tmp_path / 'probe'), checkpoint=best)
    for name, value in model.state_dict().items():
        if not name.startswith('head.'):
            assert (value.numpy() == before[name]).all(), name


def test_single_modality_evaluation(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    finetune(manifest, store, train_cfg, str(tmp_path / 'ft'))
    cfg = dataclasses.replace(train_cfg, modalities=['optical_ts'])
    record = evaluate_checkpoint(manifest, store, cfg, str(tmp_path / 'ft' / 'last.omnf'),
                                 out_dir=str(tmp_path / 'eval'))
    assert 0.0 <= record.weighted_f1 <= 1.0
    row = read_metrics(str(tmp_path / 'eval' / 'metrics.jsonl'))[-1]
    assert row['phase'] == 'eval' and row['modalities'] == ['optical_ts']


def test_evaluating_a_backbone_without_head_fails(tmp_path, dataset_dir, train_cfg):
    manifest, store = load_dataset(dataset_dir)
    best = pretrain(manifest, store, dataclasses.replace(train_cfg, pretrain_epochs=1), str(tmp_path / 'pre'))
    with pytest.raises(ConfigError):
        evaluate_checkpoint(manifest, store, train_cfg, best)
