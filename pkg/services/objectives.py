"""
objectives.py

Training losses.

Contrastive: every token has as positives the other modalities' tokens of
the same patch of the same tile. Tokens of its own modality in its own tile
are ignored (they look alike and make poor negatives); every other token of
the batch is a negative. The loss is the multi-positive InfoNCE

    -1/T sum_i log( sum_pos exp(<f_i, f_j>/gamma) / sum_{pos+neg} exp(<f_i, f_j>/gamma) )

on raw dot products. The naive variant ignores only the self pair.

Reconstruction: mean over masked tokens of the squared error divided by the
token's dimension; for filtered time series both the error and the dimension
only count the selected dates.
"""

import numpy as np
import torch
import torch.nn.functional as F

from models.schema import MatchKind


# --- Match matrix ---

def match_matrix_from_codes(modality_codes, tile_codes, patch_codes, naive=False):
    modality_codes = np.asarray(modality_codes)
    tile_codes = np.asarray(tile_codes)
    patch_codes = np.asarray(patch_codes)
    same_mod = modality_codes[:, None] == modality_codes[None, :]
    same_tile = tile_codes[:, None] == tile_codes[None, :]
    same_patch = patch_codes[:, None] == patch_codes[None, :]

    keys = set(zip(modality_codes.tolist(), tile_codes.tolist(), patch_codes.tolist()))
    if len(keys) != len(modality_codes):
        raise ValueError("The batch holds the same (modality, patch, tile) token twice.")

    matrix = np.full(same_mod.shape, MatchKind.NEGATIVE, dtype=np.uint8)
    matrix[same_tile & same_patch & ~same_mod] = MatchKind.POSITIVE
    if naive:
        np.fill_diagonal(matrix, MatchKind.IGNORED)
    else:
        matrix[same_tile & same_mod] = MatchKind.IGNORED
    return matrix


def build_match_matrix(batch, naive=False):
    """T x T array of MatchKind values for the tokens of `batch`."""
    if len(batch) == 0:
        raise ValueError("Cannot build a match matrix for an empty batch.")
    order = {name: n for n, name in enumerate(batch.modality_names)}
    modality_codes = np.array([order[idx.modality] for idx in batch.indices], dtype=np.int64)
    return match_matrix_from_codes(modality_codes, batch.tile_codes(), batch.patch_codes(), naive)


# --- Contrastive ---

def contrastive_loss(embeddings, matrix, gamma, normalize=False):
    """Multi-positive InfoNCE over a match matrix. Returns a scalar tensor."""
    if gamma <= 0:
        raise ValueError(f"Temperature must be positive, got {gamma}.")
    matrix = torch.as_tensor(np.asarray(matrix))
    positive = matrix == MatchKind.POSITIVE
    counted = positive | (matrix == MatchKind.NEGATIVE)
    if not bool(positive.any(dim=1).all()):
        raise ValueError("Every token needs at least one positive; the batch must hold two or more modalities.")
    f = F.normalize(embeddings, dim=1) if normalize else embeddings
    logits = f @ f.T / gamma
    neg_inf = torch.finfo(logits.dtype).min
    # logsumexp subtracts the row maximum
    log_num = torch.logsumexp(logits.masked_fill(~positive, neg_inf), dim=1)
    log_den = torch.logsumexp(logits.masked_fill(~counted, neg_inf), dim=1)
    return (log_den - log_num).mean()


def naive_contrastive_loss(embeddings, batch, gamma, normalize=False):
    return contrastive_loss(embeddings, build_match_matrix(batch, naive=True), gamma, normalize)


# --- Reconstruction ---

def token_errors(decoded, target, dates=None):
    """
    Per-token normalized squared error. decoded / target are (n, C, ...)
    tensors; `dates` is an optional (n, L) boolean selection over the last
    axis of time-series tokens.
    """
    if decoded.shape != target.shape:
        raise ValueError(f"Decoded shape {tuple(decoded.shape)} differs from target {tuple(target.shape)}.")
    sq = (decoded - target) ** 2
    if dates is None:
        return sq.flatten(1).sum(dim=1) / sq[0].numel()
    dates = torch.as_tensor(dates, dtype=torch.bool)
    if dates.shape != (sq.shape[0], sq.shape[-1]):
        raise ValueError(f"Date selection {tuple(dates.shape)} does not match series {tuple(sq.shape)}.")
    counts = dates.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("Every masked series needs at least one selected date.")
    kept = (sq * dates[:, None, :].to(sq.dtype)).sum(dim=(1, 2))
    return kept / (counts.to(sq.dtype) * sq.shape[1])


def reconstruction_loss(decoded, targets, date_filters=None):
    """
    Mean normalized error over every masked token. `decoded` and `targets`
    map modality name to (n, ...) tensors of that modality's masked tokens;
    `date_filters` maps time-series names to (n, L) date selections.
    """
    date_filters = date_filters or {}
    errors = [token_errors(decoded[name], targets[name], date_filters.get(name))
              for name in decoded if decoded[name].shape[0]]
    if not errors:
        raise ValueError("Reconstruction loss needs at least one masked token.")
    return torch.cat(errors).mean()


def total_loss(con, mae, contrastive=True, reconstruction=True):
    total = 0.0
    if contrastive:
        total = total + con
    if reconstruction:
        total = total + mae
    return total
