"""
evaluation.py

Multilabel F1 scores and model evaluation over a split.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
import torch

from services.tokenizer import assemble_batch

logger = logging.getLogger('omnifuse.training')


@dataclass
class MetricsRecord:
    weighted_f1: float
    macro_f1: float
    micro_f1: float
    per_class_f1: List[float] = field(default_factory=list)
    support: List[int] = field(default_factory=list)
    loss: float = float('nan')

    def to_dict(self):
        return asdict(self)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def f1_scores(y_true, y_pred):
    """
    Per-class F1 = 2PR / (P + R), 0 when P + R = 0. Macro is the plain mean
    over classes, weighted uses the true-positive support as weights (classes
    without support weigh nothing), micro pools every decision.
    """
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ValueError(f"Expected matching (N, K) label arrays, got {y_true.shape} and {y_pred.shape}.")
    if y_true.shape[0] == 0:
        raise ValueError("Cannot score an empty split.")
    tp = (y_true & y_pred).sum(axis=0).astype(np.float64)
    fp = (~y_true & y_pred).sum(axis=0).astype(np.float64)
    fn = (y_true & ~y_pred).sum(axis=0).astype(np.float64)
    per_class = _f1(tp, fp, fn)
    support = y_true.sum(axis=0)
    weighted = float((per_class * support).sum() / support.sum()) if support.sum() else 0.0
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    return MetricsRecord(
        weighted_f1=weighted,
        macro_f1=float(per_class.mean()),
        micro_f1=micro,
        per_class_f1=per_class.tolist(),
        support=support.astype(int).tolist(),
    )


def iter_batches(tile_ids, size):
    for start in range(0, len(tile_ids), size):
        yield tile_ids[start:start + size]


@torch.no_grad()
def predict(model, store, tile_ids, specs, batch_tiles, cell_m):
    """Sigmoid scores (N, K) and labels (N, K) for `tile_ids`, fed only `specs`."""
    was_training = model.training
    model.eval()
    scores, labels = [], []
    for chunk in iter_batches(list(tile_ids), batch_tiles):
        tiles = store.get_many(chunk)
        batch = assemble_batch(tiles, specs, cell_m)
        scores.append(torch.sigmoid(model(batch)).double().numpy())
        labels.append(np.stack([tile.labels for tile in tiles]))
    model.train(was_training)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(model, store, tile_ids, specs, threshold=0.5, batch_tiles=128, cell_m=1.0):
    """MetricsRecord of `model` on `tile_ids`; loss is the mean binary cross-entropy."""
    if not tile_ids:
        raise ValueError("Cannot evaluate an empty split.")
    scores, labels = predict(model, store, tile_ids, specs, batch_tiles, cell_m)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("Model produced non-finite scores.")
    record = f1_scores(labels, scores >= threshold)
    clipped = np.clip(scores, 1e-12, 1 - 1e-12)
    record.loss = float(-(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped)).mean())
    logger.debug(f"Evaluated {len(tile_ids)} tiles on {[s.name for s in specs]}: "
                 f"weighted F1 {record.weighted_f1:.4f}")
    return record
