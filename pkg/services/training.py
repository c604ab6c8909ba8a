"""
training.py

Experiment protocols: self-supervised pretraining, fine-tuning, linear
probing and evaluation.

Every run directory receives
    metrics.jsonl   one JSON record per epoch (plus a final `test` record)
    best.omnf       checkpoint of the best validation epoch
    last.omnf       checkpoint of the latest epoch (resume point)
    run.json        command, resolved configuration, parameter census and
                    wall time

Stochastic steps draw from streams keyed by (seed, purpose, epoch, batch),
so a resumed run continues exactly where the uninterrupted one would be.
"""

import copy
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from config import config_to_dict
from models.encoders import date_filter_mask
from models.fusion import mask_tokens
from models.omnifuse import parameter_census
from models.schema import ContrastiveMode, MaskSet
from services.checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from services.evaluation import evaluate, iter_batches
from services.objectives import (
    build_match_matrix, contrastive_loss, reconstruction_loss, total_loss
)
from services.optim import PlateauScheduler, adam_step, make_optimizer
from services.prefetch import start_prefetch_worker
from services.splits import label_subset
from services.tokenizer import assemble_batch
from utils.errors import ConfigError
from utils.seeding import derive_seed, numpy_rng

logger = logging.getLogger('omnifuse.training')

IMPROVEMENT = 1e-6


# --- Run artifacts ---

class MetricsLog:
    """Append-only JSON-lines metrics file."""

    FIELDS = ('epoch', 'phase', 'loss_total', 'loss_con', 'loss_mae', 'lr',
              'f1_weighted', 'f1_macro', 'f1_micro', 'wall_s')

    def __init__(self, path, fresh=True):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if fresh:
            open(path, 'w', encoding='utf-8').close()

    def write(self, **record):
        row = {key: record.pop(key, None) for key in self.FIELDS}
        row.update(record)
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(row, sort_keys=False) + '\n')
        return row

    def truncate_after(self, epoch):
        """Drops records past `epoch` (used when resuming)."""
        if not os.path.exists(self.path):
            return
        with open(self.path, 'r', encoding='utf-8') as f:
            rows = [line for line in f if line.strip() and json.loads(line).get('epoch', 0) <= epoch]
        with open(self.path, 'w', encoding='utf-8') as f:
            f.writelines(rows)


def read_metrics(path):
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_run_info(out_dir, command, cfg, model, wall_s, **extra):
    info = {
        'command': command,
        'config': config_to_dict(cfg),
        'modalities': [spec.name for spec in model.specs],
        'parameters': parameter_census(model),
        'wall_s': wall_s,
    }
    info.update(extra)
    with open(os.path.join(out_dir, 'run.json'), 'w', encoding='utf-8') as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write('\n')
    return info


def split_ids(manifest, name, required=True):
    ids = list(manifest.splits.get(name, []))
    if required and not ids:
        raise ConfigError(f"The dataset has no '{name}' split; run gen-data or give split fractions.")
    return ids


def epoch_order(tile_ids, seed, epoch):
    return [tile_ids[i] for i in numpy_rng(seed, 'order', epoch).permutation(len(tile_ids))]


def _model_factory():
    from main import create_model
    return create_model


# --- Pretraining ---

@dataclass
class PretrainLosses:
    total: torch.Tensor
    con: torch.Tensor
    mae: torch.Tensor
    masked: int


def date_filtered(cfg, name):
    if not cfg.date_filter:
        return False
    return cfg.date_filter_modalities is None or name in cfg.date_filter_modalities


def pretrain_losses(model, batch, cfg, seed):
    """Contrastive and reconstruction losses of one batch, as in one pretraining step."""
    encoded = model.encode(batch)
    f = encoded.embeddings
    zero = f.new_zeros(())

    if cfg.reconstruction:
        mask = mask_tokens(batch, cfg.mask_ratio, cfg.mask_strategy, seed)
    else:
        mask = MaskSet(frozenset())

    con = zero
    if cfg.contrastive is not ContrastiveMode.OFF:
        pairs = f
        if cfg.contrastive_on_masked and len(mask):
            flags = mask.as_tensor(len(batch))[:, None]
            pairs = torch.where(flags, model.fusion.mask_token.to(f.dtype), f)
        matrix = build_match_matrix(batch, naive=cfg.contrastive is ContrastiveMode.NAIVE)
        con = contrastive_loss(pairs, matrix, cfg.gamma, cfg.normalize_embeddings)

    mae = zero
    if cfg.reconstruction and len(mask):
        fused = model.fuse(batch, f, mask)
        slot_of = batch.slot_of_tokens()
        decoded, targets, filters = {}, {}, {}
        for spec in batch.specs:
            rows = encoded.rows.get(spec.name)
            if rows is None:
                continue
            local = np.array([n for n, row in enumerate(rows) if row in mask], dtype=np.int64)
            if local.size == 0:
                continue
            masked_rows = rows[local]
            z = fused[torch.from_numpy(slot_of[masked_rows])]
            trace = encoded.traces[spec.name]
            if spec.is_image:
                if trace is not None and not cfg.fixed_unpool:
                    trace = trace.select(local)
                else:
                    trace = None
                decoded[spec.name] = model.decode(spec.name, z, trace=trace)
                targets[spec.name] = batch.stack_images(spec.name, masked_rows, f.dtype)
            else:
                values, days, valid = batch.stack_series(spec.name, masked_rows, f.dtype)
                decoded[spec.name] = model.decode(spec.name, z, days=days)
                targets[spec.name] = values
                if date_filtered(cfg, spec.name):
                    sub = trace.select(local)
                    sub.weights = sub.weights[:, :values.shape[-1]].detach()
                    sub.valid = valid
                    filters[spec.name] = date_filter_mask(sub, cfg.date_filter_fraction)
                else:
                    filters[spec.name] = valid
        mae = reconstruction_loss(decoded, targets, filters)

    total = total_loss(con, mae, cfg.contrastive is not ContrastiveMode.OFF, cfg.reconstruction)
    return PretrainLosses(total, con, mae, len(mask))


def _check_pretrain(cfg, specs):
    if cfg.contrastive is not ContrastiveMode.OFF and len(specs) < 2:
        raise ConfigError(
            f"The contrastive objective needs two or more modalities; got {[s.name for s in specs]}. "
            "Use --ablate no-contrastive for single-modality pretraining."
        )
    if cfg.contrastive is ContrastiveMode.OFF and not cfg.reconstruction:
        raise ConfigError("Pretraining with both objectives disabled has nothing to learn.")


def pretrain(manifest, store, cfg, out_dir, resume=None):
    """
    Self-supervised pretraining on the train split. Labels are locked for
    the whole run. Returns the path of the best checkpoint.
    """
    cfg.validate()
    specs = manifest.select(cfg.pretrain_modalities)
    _check_pretrain(cfg, specs)
    locked = store.lock_labels()
    train_ids, val_ids = split_ids(manifest, 'train'), split_ids(manifest, 'val')
    cell = manifest.grid_cell_m
    os.makedirs(out_dir, exist_ok=True)

    model = _model_factory()(specs, cfg, cell, locked.max_grid())
    optimizer = make_optimizer(model.parameters(), cfg.pretrain_lr)
    scheduler = PlateauScheduler(optimizer, cfg.pretrain_lr, cfg.scheduler_patience, cfg.scheduler_decay,
                                 IMPROVEMENT)
    start, best = 0, float('inf')
    if resume:
        state = load_checkpoint(resume)
        restore_model(model, state)
        restore_optimizer(model, optimizer, state)
        scheduler.load_state_dict(state.scheduler)
        start, best = state.epoch, float(state.extra.get('best', float('inf')))
        logger.info(f"Resuming pretraining from {resume} at epoch {start}.")
    log = MetricsLog(os.path.join(out_dir, 'metrics.jsonl'), fresh=not resume)
    if resume:
        log.truncate_after(start)

    named = list(model.named_parameters())
    began = time.time()
    for epoch in range(start + 1, cfg.pretrain_epochs + 1):
        t0 = time.time()
        model.train()
        chunks = list(iter_batches(epoch_order(train_ids, cfg.seed, epoch), cfg.batch_tiles))

        def load(item, epoch=epoch):
            b, ids = item
            return b, assemble_batch(locked.get_many(ids), specs, cell, cfg.patch_fraction,
                                     seed=derive_seed(cfg.seed, 'patches', epoch, b))

        sums = np.zeros(3)
        lr = scheduler.lr
        for b, batch in start_prefetch_worker(load, enumerate(chunks)):
            losses = pretrain_losses(model, batch, cfg, derive_seed(cfg.seed, 'mask', epoch, b))
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            adam_step(optimizer, named)
            sums += [float(losses.total), float(losses.con), float(losses.mae)]
        sums /= max(1, len(chunks))

        val = validation_losses(model, locked, val_ids, specs, cfg, cell)
        scheduler.step(val)
        improved = val < best - IMPROVEMENT
        if improved:
            best = val

        log.write(epoch=epoch, phase='pretrain', loss_total=sums[0], loss_con=sums[1], loss_mae=sums[2],
                  lr=lr, wall_s=round(time.time() - t0, 3), val_loss=val)
        logger.info(f"Epoch {epoch}: loss {sums[0]:.4f} (con {sums[1]:.4f}, mae {sums[2]:.4f}), "
                    f"val {val:.4f}, lr {lr:.3g}")
        extra = {'best': best, 'phase': 'pretrain'}
        save_checkpoint(os.path.join(out_dir, 'last.omnf'), model, cfg, optimizer, scheduler, epoch, extra)
        if improved:
            save_checkpoint(os.path.join(out_dir, 'best.omnf'), model, cfg, optimizer, scheduler, epoch, extra)

    last_path = os.path.join(out_dir, 'last.omnf')
    if not os.path.exists(last_path):
        save_checkpoint(last_path, model, cfg, optimizer, scheduler, start, {'best': best, 'phase': 'pretrain'})
    write_run_info(out_dir, 'pretrain', cfg, model, round(time.time() - began, 3), best_val_loss=best)
    best_path = os.path.join(out_dir, 'best.omnf')
    return best_path if os.path.exists(best_path) else last_path


@torch.no_grad()
def validation_losses(model, store, tile_ids, specs, cfg, cell):
    """Mean pretraining loss over `tile_ids`, with masks fixed across epochs."""
    model.eval()
    total, count = 0.0, 0
    for b, ids in enumerate(iter_batches(list(tile_ids), cfg.batch_tiles)):
        batch = assemble_batch(store.get_many(ids), specs, cell)
        losses = pretrain_losses(model, batch, cfg, derive_seed(cfg.seed, 'val-mask', b))
        total += float(losses.total)
        count += 1
    model.train()
    return total / max(1, count)


# --- Supervised protocols ---

def _labelled_ids(manifest, store, cfg):
    train_ids = split_ids(manifest, 'train')
    labels = store.labels(train_ids)
    chosen = label_subset(train_ids, cfg.label_fraction, cfg.seed, labels)
    logger.info(f"Using {len(chosen)} of {len(train_ids)} training tiles ({cfg.label_fraction:.0%} labels).")
    return chosen


def require_codecs(model, specs, source):
    missing = [s.name for s in specs if s.name not in model.codecs]
    if missing:
        raise ConfigError(f"{source} has no encoder for {missing}; trained on {sorted(model.codecs)}.")


def _backbone(manifest, store, cfg, checkpoint):
    n_classes = len(manifest.label_vocab)
    create_model = _model_factory()
    if checkpoint:
        state = load_checkpoint(checkpoint)
        model = create_model(state.modalities, cfg, state.grid_cell_m, state.max_grid, n_classes, state=state)
        logger.info(f"Loaded backbone from {checkpoint} (epoch {state.epoch}).")
        return model
    specs = manifest.select(cfg.modalities)
    return create_model(specs, cfg, manifest.grid_cell_m, store.max_grid(), n_classes)


def finetune(manifest, store, cfg, out_dir, checkpoint=None, probe=False):
    """
    Supervised training of a multilabel head on the labelled share of the
    train split, either updating everything (fine-tuning) or only the head
    on a frozen backbone (linear probing). Stops early when the validation
    loss stalls, restores the best weights and scores the test split.
    Returns (model, test MetricsRecord or None).
    """
    cfg.validate()
    phase = 'probe' if probe else 'finetune'
    os.makedirs(out_dir, exist_ok=True)
    labelled = _labelled_ids(manifest, store, cfg)
    val_ids, test_ids = split_ids(manifest, 'val'), split_ids(manifest, 'test', required=False)
    model = _backbone(manifest, store, cfg, checkpoint)
    if model.head is None:
        model.attach_head(len(manifest.label_vocab))
    specs = manifest.select(cfg.modalities)
    require_codecs(model, specs, "The backbone")
    cell = manifest.grid_cell_m

    if probe:
        for p in model.parameters():
            p.requires_grad_(False)
        for p in model.head.parameters():
            p.requires_grad_(True)
        named = list(model.head.named_parameters())
        lr = cfg.probe_lr
    else:
        named = list(model.named_parameters())
        lr = cfg.finetune_lr
    optimizer = make_optimizer([p for _, p in named], lr)
    scheduler = PlateauScheduler(optimizer, lr, cfg.scheduler_patience, cfg.scheduler_decay, IMPROVEMENT)
    log = MetricsLog(os.path.join(out_dir, 'metrics.jsonl'))

    best, bad, best_state = float('inf'), 0, copy.deepcopy(model.state_dict())
    began = time.time()
    for epoch in range(1, cfg.finetune_epochs + 1):
        t0 = time.time()
        model.train()
        lr_now = scheduler.lr
        chunks = list(iter_batches(epoch_order(labelled, cfg.seed, epoch), cfg.batch_tiles))

        def load(ids):
            tiles = store.get_many(ids)
            labels = torch.from_numpy(np.stack([t.labels for t in tiles])).to(model.dtype)
            return assemble_batch(tiles, specs, cell), labels

        running = 0.0
        for batch, labels in start_prefetch_worker(load, chunks):
            logits = probe_logits(model, batch) if probe else model(batch)
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(optimizer, named)
            running += float(loss)
        running /= max(1, len(chunks))

        val = evaluate(model, store, val_ids, specs, cfg.threshold, cfg.batch_tiles, cell)
        scheduler.step(val.loss)
        log.write(epoch=epoch, phase=phase, loss_total=running, loss_con=0.0, loss_mae=0.0, lr=lr_now,
                  f1_weighted=val.weighted_f1, f1_macro=val.macro_f1, f1_micro=val.micro_f1,
                  wall_s=round(time.time() - t0, 3), val_loss=val.loss)
        logger.info(f"Epoch {epoch} ({phase}): loss {running:.4f}, val loss {val.loss:.4f}, "
                    f"val weighted F1 {val.weighted_f1:.4f}")
        if val.loss < best - IMPROVEMENT:
            best, bad = val.loss, 0
            best_state = copy.deepcopy(model.state_dict())
            save_checkpoint(os.path.join(out_dir, 'best.omnf'), model, cfg, epoch=epoch,
                            extra={'best': best, 'phase': phase})
        else:
            bad += 1
            if bad >= cfg.early_stop_patience:
                logger.info(f"Early stop at epoch {epoch}: no improvement for {bad} epochs.")
                break

    model.load_state_dict(best_state)
    save_checkpoint(os.path.join(out_dir, 'last.omnf'), model, cfg, epoch=epoch if cfg.finetune_epochs else 0,
                    extra={'best': best, 'phase': phase})
    test = None
    if test_ids:
        test = evaluate(model, store, test_ids, specs, cfg.threshold, cfg.batch_tiles, cell)
        log.write(phase='test', f1_weighted=test.weighted_f1, f1_macro=test.macro_f1, f1_micro=test.micro_f1,
                  loss_total=test.loss, per_class_f1=test.per_class_f1)
        logger.info(f"Test weighted F1 {test.weighted_f1:.4f} (macro {test.macro_f1:.4f}).")
    write_run_info(out_dir, phase, cfg, model, round(time.time() - began, 3), checkpoint=checkpoint,
                   test=test.to_dict() if test else None)
    return model, test


def probe_logits(model, batch):
    """Head on top of a frozen backbone; no graph is built for the backbone."""
    with torch.no_grad():
        encoded = model.encode(batch)
        pooled = model.tile_embeddings(batch, model.fuse(batch, encoded.embeddings))
    return model.head(pooled)


def linear_probe(manifest, store, cfg, out_dir, checkpoint=None):
    return finetune(manifest, store, cfg, out_dir, checkpoint, probe=True)


def evaluate_checkpoint(manifest, store, cfg, checkpoint, split='test', out_dir=None):
    """Scores a fine-tuned checkpoint on `split` with the modalities in `cfg.modalities`."""
    state = load_checkpoint(checkpoint)
    if not state.n_classes:
        raise ConfigError(f"{checkpoint} has no classification head; fine-tune or probe it first.")
    model = _model_factory()(state.modalities, cfg, state.grid_cell_m, state.max_grid, state.n_classes,
                             state=state)
    specs = manifest.select(cfg.modalities)
    require_codecs(model, specs, checkpoint)
    tile_ids = split_ids(manifest, split)
    record = evaluate(model, store, tile_ids, specs, cfg.threshold, cfg.batch_tiles, manifest.grid_cell_m)
    if out_dir:
        log = MetricsLog(os.path.join(out_dir, 'metrics.jsonl'))
        log.write(phase='eval', split=split, modalities=[s.name for s in specs], f1_weighted=record.weighted_f1,
                  f1_macro=record.macro_f1, f1_micro=record.micro_f1, loss_total=record.loss,
                  per_class_f1=record.per_class_f1)
        write_run_info(out_dir, 'eval', cfg, model, 0.0, checkpoint=checkpoint, test=record.to_dict())
    return record
