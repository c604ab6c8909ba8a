"""
encoders.py

Per-modality patch codecs.

    ImageCodec        conv -> activation -> max-pool stages until the patch is
                      1x1 with d channels; the decoder mirrors it with
                      max-unpool -> conv stages. The pool argmax indices are
                      handed from encoder to decoder (index bypass).
    LinearImageCodec  one linear map each way; no pooling.
    ViTImageCodec     transformer over sub-patches, mean-pooled; no pooling
                      trace.
    TemporalCodec     lightweight temporal attention encoder: per-date
                      projection plus day encoding, one learned master query
                      per head attending over dates, grouped-channel values.
                      The decoder repeats the embedding over the requested
                      dates, adds their day encoding and applies a shared
                      per-date MLP.
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from models.schema import DAYS_IN_YEAR, ImageEncoderKind
from utils.errors import ConfigError, ShapeMismatchError

MIN_PERIOD = 2.0
MAX_PERIOD = 2.0 * DAYS_IN_YEAR

ACTIVATIONS = {
    'gelu': nn.GELU,
    'identity': nn.Identity,
}


# --- Pool schedule ---

def default_pool_factors(side):
    """Prime factors of `side`, largest first: 50 -> (5, 5, 2), 32 -> (2, 2, 2, 2, 2)."""
    if side < 2:
        raise ConfigError(f"Image patches need a side of at least 2 px, got {side}.")
    factors, rest, p = [], side, 2
    while p * p <= rest:
        while rest % p == 0:
            factors.append(p)
            rest //= p
        p += 1
    if rest > 1:
        factors.append(rest)
    return tuple(sorted(factors, reverse=True))


def channel_ramp(channels, d, stages):
    """Geometric ramp of stage widths from `channels` to `d`; the last stage is exactly d."""
    widths = [int(round(channels * (d / channels) ** ((i + 1) / stages))) for i in range(stages)]
    widths[-1] = d
    return tuple(max(1, w) for w in widths)


@dataclass
class PoolTrace:
    """Argmax index maps of every pool stage, in encoder order."""
    indices: List[torch.Tensor]
    sizes: List[Tuple[int, int]]    # pre-pool spatial size per stage
    factors: Tuple[int, ...]

    def __len__(self):
        return len(self.indices[0]) if self.indices else 0

    def select(self, rows):
        rows = torch.as_tensor(rows, dtype=torch.long)
        return PoolTrace([idx[rows] for idx in self.indices], list(self.sizes), self.factors)


def top_left_trace(n, widths, side, factors):
    """The fixed unpooling convention: every pooled value returns to the top-left of its cell."""
    indices, sizes, current = [], [], side
    for width, f in zip(widths, factors):
        out = current // f
        rows = torch.arange(out) * f
        flat = (rows[:, None] * current + rows[None, :]).reshape(1, 1, out, out)
        indices.append(flat.expand(n, width, out, out).clone())
        sizes.append((current, current))
        current = out
    return PoolTrace(indices, sizes, tuple(factors))


# --- Image codecs ---

class ImageCodec(nn.Module):
    def __init__(self, channels, patch_side, d, pool_factors=None, widths=None, activation='gelu',
                 bypass=True):
        super().__init__()
        factors = tuple(pool_factors) if pool_factors else default_pool_factors(patch_side)
        if int(np.prod(factors)) != patch_side:
            raise ConfigError(f"Pool factors {factors} do not collapse a {patch_side} px patch.")
        widths = tuple(widths) if widths else channel_ramp(channels, d, len(factors))
        if len(widths) != len(factors) or widths[-1] != d:
            raise ConfigError(f"Stage widths {widths} must have {len(factors)} entries ending in d={d}.")
        self.channels, self.patch_side, self.d = channels, patch_side, d
        self.factors, self.widths = factors, widths
        self.bypass = bypass

        act = ACTIVATIONS[activation]
        ins = (channels,) + widths[:-1]
        self.enc_convs = nn.ModuleList([nn.Conv2d(i, o, 3, padding=1) for i, o in zip(ins, widths)])
        self.dec_convs = nn.ModuleList([nn.Conv2d(o, i, 3, padding=1) for i, o in zip(ins, widths)])
        self.act = act()

    def encode(self, x):
        """(n, C, W, W) -> embeddings (n, d) and the PoolTrace."""
        if x.shape[1:] != (self.channels, self.patch_side, self.patch_side):
            raise ShapeMismatchError(
                f"Image codec expects (n, {self.channels}, {self.patch_side}, {self.patch_side}), got {tuple(x.shape)}."
            )
        indices, sizes = [], []
        for conv, f in zip(self.enc_convs, self.factors):
            x = self.act(conv(x))
            sizes.append(tuple(x.shape[-2:]))
            x, idx = F.max_pool2d(x, f, return_indices=True)
            indices.append(idx)
        return x.flatten(1), PoolTrace(indices, sizes, self.factors)

    def decode(self, z, trace=None):
        """
        Embeddings (n, d) -> patches (n, C, W, W). Without a trace, or with
        the bypass disabled, unpooling uses the top-left convention.
        """
        if trace is None or not self.bypass:
            trace = top_left_trace(z.shape[0], self.widths, self.patch_side, self.factors)
        if tuple(trace.factors) != self.factors or len(trace.indices) != len(self.factors):
            raise ShapeMismatchError(f"PoolTrace of stages {trace.factors} does not match codec stages {self.factors}.")
        x = z.reshape(z.shape[0], self.d, 1, 1)
        last = len(self.factors) - 1
        for stage in range(last, -1, -1):
            idx, size = trace.indices[stage], trace.sizes[stage]
            if idx.shape[0] != x.shape[0] or idx.shape[1:] != x.shape[1:]:
                raise ShapeMismatchError(
                    f"PoolTrace stage {stage} has shape {tuple(idx.shape)}, decoder holds {tuple(x.shape)}."
                )
            x = F.max_unpool2d(x, idx, self.factors[stage], output_size=size)
            x = self.dec_convs[stage](x)
            if stage:
                x = self.act(x)
        return x

    def forward(self, x):
        z, trace = self.encode(x)
        return self.decode(z, trace)


class LinearImageCodec(nn.Module):
    bypass = False

    def __init__(self, channels, patch_side, d):
        super().__init__()
        self.channels, self.patch_side, self.d = channels, patch_side, d
        size = channels * patch_side * patch_side
        self.encoder = nn.Linear(size, d)
        self.decoder = nn.Linear(d, size)

    def encode(self, x):
        if x.shape[1:] != (self.channels, self.patch_side, self.patch_side):
            raise ShapeMismatchError(f"Linear image codec got {tuple(x.shape)}.")
        return self.encoder(x.flatten(1)), None

    def decode(self, z, trace=None):
        return self.decoder(z).reshape(z.shape[0], self.channels, self.patch_side, self.patch_side)

    def forward(self, x):
        return self.decode(self.encode(x)[0])


class ViTImageCodec(nn.Module):
    """
    Small vision transformer over `subpatch` x `subpatch` pieces of the patch:
    strided-conv embedding, learned piece positions, `blocks` encoder layers
    and a mean over pieces. The decoder adds each piece's position to the
    embedding and maps it back to that piece's pixels.
    """
    bypass = False

    def __init__(self, channels, patch_side, d, subpatch=10, heads=4, blocks=1):
        super().__init__()
        if patch_side % subpatch:
            raise ConfigError(f"vit_subpatch={subpatch} does not divide the {patch_side} px patch.")
        self.channels, self.patch_side, self.d, self.subpatch = channels, patch_side, d, subpatch
        self.pieces = patch_side // subpatch
        n = self.pieces * self.pieces
        self.embed = nn.Conv2d(channels, d, kernel_size=subpatch, stride=subpatch)
        self.positions = nn.Parameter(torch.randn(n, d) * 0.02)
        layer = nn.TransformerEncoderLayer(d, heads, dim_feedforward=2 * d, dropout=0.0,
                                           activation='gelu', batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, blocks, enable_nested_tensor=False)
        self.decoder = nn.Linear(d, channels * subpatch * subpatch)

    def encode(self, x):
        if x.shape[1:] != (self.channels, self.patch_side, self.patch_side):
            raise ShapeMismatchError(f"ViT image codec got {tuple(x.shape)}.")
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.positions
        return self.blocks(tokens).mean(dim=1), None

    def decode(self, z, trace=None):
        n, g, s = z.shape[0], self.pieces, self.subpatch
        pieces = self.decoder(z[:, None, :] + self.positions)
        # (n, Gy*Gx, C*s*s) -> (n, C, Gy*s, Gx*s)
        pieces = pieces.reshape(n, g, g, self.channels, s, s).permute(0, 3, 1, 4, 2, 5)
        return pieces.reshape(n, self.channels, self.patch_side, self.patch_side)

    def forward(self, x):
        return self.decode(self.encode(x)[0])


# --- Temporal codec ---

def day_periods(d):
    half = d // 2
    if half == 1:
        return np.array([MIN_PERIOD])
    return np.geomspace(MIN_PERIOD, MAX_PERIOD, half)


def day_encoding(days, d, dtype=torch.float32):
    """
    Sinusoidal day-of-year encoding, shape days.shape + (d,). The first half
    holds sines, the second cosines; every pair has unit norm so the whole
    vector has norm sqrt(d / 2).
    """
    if d <= 0 or d % 2:
        raise ConfigError(f"Day encoding needs a positive even width, got {d}.")
    days = torch.as_tensor(days)
    if days.numel() and (int(days.min()) < 1 or int(days.max()) > DAYS_IN_YEAR):
        raise ValueError(f"Days must lie in [1, {DAYS_IN_YEAR}].")
    freq = torch.as_tensor(2 * np.pi / day_periods(d), dtype=torch.float64)
    angle = days.to(torch.float64)[..., None] * freq
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1).to(dtype)


@dataclass
class AttentionTrace:
    """Per-date importance (n, L): attention averaged over heads; zero on invalid dates."""
    weights: torch.Tensor
    valid: torch.Tensor

    def select(self, rows):
        rows = torch.as_tensor(rows, dtype=torch.long)
        return AttentionTrace(self.weights[rows], self.valid[rows])


class TemporalCodec(nn.Module):
    def __init__(self, channels, d, heads=8, key_dim=8, hidden=None):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} must be divisible by the {heads} temporal heads.")
        self.channels, self.d, self.heads, self.key_dim = channels, d, heads, key_dim
        self.in_proj = nn.Linear(channels, d)
        self.keys = nn.Linear(d, heads * key_dim)
        self.master_query = nn.Parameter(torch.randn(heads, key_dim) * key_dim ** -0.5)
        self.out_proj = nn.Linear(d, d)
        hidden = hidden or d
        self.decoder = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def encode(self, values, days, valid):
        """
        values (n, C', L), days (n, L), valid (n, L) -> embeddings (n, d) and
        an AttentionTrace. Invalid dates get exactly zero attention.
        """
        n, c, length = values.shape
        if c != self.channels:
            raise ShapeMismatchError(f"Temporal codec expects {self.channels} channels, got {c}.")
        valid = valid.to(torch.bool)
        if not bool(valid.any(dim=1).all()):
            raise ValueError("Every series needs at least one valid date.")
        x = self.in_proj(values.transpose(1, 2)) + day_encoding(days, self.d, values.dtype)
        keys = self.keys(x).reshape(n, length, self.heads, self.key_dim)
        scores = torch.einsum('nlhk,hk->nhl', keys, self.master_query) / math.sqrt(self.key_dim)
        scores = scores.masked_fill(~valid[:, None, :], float('-inf'))
        attn = torch.softmax(scores, dim=-1)
        groups = x.reshape(n, length, self.heads, self.d // self.heads)
        pooled = torch.einsum('nhl,nlhc->nhc', attn, groups).reshape(n, self.d)
        return self.out_proj(pooled), AttentionTrace(attn.mean(dim=1), valid)

    def decode(self, z, days):
        """Embeddings (n, d) and days (n, L) -> series (n, C', L); each date decoded independently."""
        h = z[:, None, :] + day_encoding(days, self.d, z.dtype)
        return self.decoder(h).transpose(1, 2)

    def forward(self, values, days, valid):
        z, _ = self.encode(values, days, valid)
        return self.decode(z, days)


def select_reconstruction_dates(weights, fraction, valid=None):
    """
    Indices of the max(1, ceil(fraction * L_valid)) highest-attention valid
    dates of one trace, ascending. Ties go to the lower index.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"Date fraction must lie in (0, 1], got {fraction}.")
    weights = np.asarray(torch.as_tensor(weights).detach().cpu(), dtype=np.float64)
    valid = np.ones(weights.shape, dtype=bool) if valid is None else np.asarray(torch.as_tensor(valid).cpu(), dtype=bool)
    candidates = np.flatnonzero(valid)
    if candidates.size == 0:
        raise ValueError("Cannot select dates from an empty trace.")
    k = max(1, math.ceil(round(fraction * candidates.size, 9)))
    order = candidates[np.argsort(-weights[candidates], kind='stable')]
    return sorted(order[:k].tolist())


def date_filter_mask(trace, fraction):
    """Batched selection: (n, L) boolean mask of the selected dates of every row of `trace`."""
    mask = torch.zeros_like(trace.valid, dtype=torch.bool)
    for row in range(trace.weights.shape[0]):
        mask[row, select_reconstruction_dates(trace.weights[row], fraction, trace.valid[row])] = True
    return mask


# --- Single-patch operations ---

def encode_image(patch, codec):
    """C x W x W -> (d, PoolTrace)."""
    z, trace = codec.encode(patch[None])
    return z[0], trace


def decode_image(embedding, trace, codec):
    return codec.decode(embedding[None], trace)[0]


def encode_timeseries(values, days, valid, codec):
    """C x L values, L days, L validity flags -> (d, per-date importance)."""
    z, trace = codec.encode(values[None], torch.as_tensor(days)[None], torch.as_tensor(valid)[None])
    return z[0], trace.weights[0]


def decode_timeseries(embedding, days, codec):
    return codec.decode(embedding[None], torch.as_tensor(days)[None])[0]


def build_codec(spec, cfg):
    """Codec for one ModalitySpec under a TrainConfig."""
    if spec.is_image:
        if cfg.image_encoder is ImageEncoderKind.LINEAR:
            return LinearImageCodec(spec.channels, spec.patch_side_px, cfg.d)
        if cfg.image_encoder is ImageEncoderKind.VIT:
            return ViTImageCodec(spec.channels, spec.patch_side_px, cfg.d, subpatch=cfg.vit_subpatch,
                                 heads=cfg.heads)
        return ImageCodec(spec.channels, spec.patch_side_px, cfg.d, pool_factors=cfg.pool_factors,
                          bypass=cfg.index_bypass)
    return TemporalCodec(spec.encoded_channels, cfg.d, heads=cfg.ltae_heads, key_dim=cfg.ltae_key_dim)
