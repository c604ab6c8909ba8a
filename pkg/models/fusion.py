"""
fusion.py

The modality combining network. Token embeddings of one tile attend to each
other through B pre-norm residual blocks, with a learned bias per head that
depends on the bucketed Euclidean distance between token patches. One copy of
a learned combiner token per patch then cross-attends into the result and
yields the fused patch embedding.

Attention never crosses tiles. Tokens are grouped per tile into a padded
(tiles, tokens, d) layout; `relative_bias` gives the equivalent flat T x T
view with -inf between tiles.
"""

import math

import numpy as np
import torch
import torch.nn as nn

from models.schema import MaskSet, MaskStrategy, PositionalMode
from utils.errors import ConfigError, ShapeMismatchError
from utils.seeding import numpy_rng

NEG_INF = float('-inf')


# --- Relative position table ---

class RelPosTable(nn.Module):
    """
    K distance buckets with geometric upper edges from half a grid cell to
    `max_distance`; bucket 0 holds every distance below half a cell, so
    same-patch pairs land there. One learned scalar per bucket and head.
    """

    def __init__(self, heads, buckets=16, cell_m=1.0, max_distance=None):
        super().__init__()
        if buckets < 1:
            raise ConfigError("The relative position table needs at least one bucket.")
        max_distance = max(float(max_distance or 0.0), float(cell_m))
        edges = np.geomspace(cell_m / 2, max_distance, buckets - 1) if buckets > 1 else np.zeros(0)
        self.register_buffer('edges', torch.as_tensor(edges, dtype=torch.float64), persistent=False)
        self.bias = nn.Parameter(torch.zeros(buckets, heads))
        self.heads = heads

    def bucket(self, distance):
        return torch.bucketize(torch.as_tensor(distance, dtype=torch.float64), self.edges, right=True)

    def forward(self, q_pos, k_pos):
        """Positions (..., Tq, 2) and (..., Tk, 2) -> bias (..., H, Tq, Tk)."""
        dist = torch.cdist(q_pos.to(torch.float64), k_pos.to(torch.float64))
        return self.bias[self.bucket(dist)].movedim(-1, -3)


def relative_bias(positions, tile_codes, table):
    """
    Flat per-head T x T bias of one token list: the bucket bias within a
    tile, -inf between tiles.
    """
    positions = torch.as_tensor(np.asarray(positions, dtype=np.float64))
    codes = torch.as_tensor(np.asarray(tile_codes))
    bias = table(positions, positions)
    same = codes[:, None] == codes[None, :]
    return bias.masked_fill(~same, NEG_INF)


# --- Masking ---

def mask_tokens(batch, ratio, strategy, seed):
    """Token rows to replace by the mask embedding. Deterministic under `seed`."""
    strategy = MaskStrategy(strategy)
    if not 0 <= ratio < 1:
        raise ValueError(f"Mask ratio must lie in [0, 1), got {ratio}.")
    rng = numpy_rng(seed, 'mask', strategy.value)
    total = len(batch)
    if strategy is MaskStrategy.RANDOM:
        count = int(math.floor(ratio * total + 1e-9))
        return MaskSet(frozenset(rng.choice(total, size=count, replace=False).tolist()))

    rows = set()
    for tile_id, span in batch.tile_partition.items():
        members = [batch.indices[i] for i in span]
        if strategy is MaskStrategy.SPATIAL:
            patches = sorted({idx.patch for idx in members})
            count = int(math.floor(ratio * len(patches) + 1e-9))
            chosen = set(rng.choice(patches, size=count, replace=False).tolist()) if count else set()
            rows.update(i for i in span if batch.indices[i].patch in chosen)
        else:
            present = [name for name in batch.modality_names if any(idx.modality == name for idx in members)]
            chosen = present[int(rng.integers(len(present)))]
            rows.update(i for i in span if batch.indices[i].modality == chosen)
    return MaskSet(frozenset(rows))


# --- Blocks ---

def pad_by_group(codes):
    """
    Groups rows by code. Returns (index (G, N) of row numbers, valid (G, N),
    group of every row, slot of every row inside its group). Groups follow
    ascending code; rows keep their relative order.
    """
    codes = np.asarray(codes, dtype=np.int64)
    groups, group_of = np.unique(codes, return_inverse=True)
    counts = np.bincount(group_of, minlength=len(groups))
    width = int(counts.max()) if counts.size else 0
    index = np.zeros((len(groups), width), dtype=np.int64)
    valid = np.zeros((len(groups), width), dtype=bool)
    slot_of = np.zeros(len(codes), dtype=np.int64)
    filled = np.zeros(len(groups), dtype=np.int64)
    for row, g in enumerate(group_of):
        index[g, filled[g]] = row
        valid[g, filled[g]] = True
        slot_of[row] = filled[g]
        filled[g] += 1
    return groups, torch.from_numpy(index), torch.from_numpy(valid), torch.from_numpy(group_of), torch.from_numpy(slot_of)


class BiasedAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} must be divisible by heads={heads}.")
        self.heads, self.head_dim = heads, d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def split(self, x):
        g, n, _ = x.shape
        return x.reshape(g, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, queries, keys, bias):
        """queries (G, Tq, d), keys (G, Tk, d), bias (G, H, Tq, Tk)."""
        q, k, v = self.split(self.q(queries)), self.split(self.k(keys)), self.split(self.v(keys))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + bias.to(q.dtype)
        out = torch.softmax(logits, dim=-1) @ v
        g, _, tq, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(g, tq, -1))


def feed_forward(d):
    return nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))


class SelfAttentionBlock(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = BiasedAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = feed_forward(d)

    def forward(self, x, bias):
        h = self.norm1(x)
        x = x + self.attn(h, h, bias)
        return x + self.ffn(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Combiner queries attend into the (already normalized) token states."""

    def __init__(self, d, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.attn = BiasedAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = feed_forward(d)

    def forward(self, queries, tokens, bias):
        y = queries + self.attn(self.norm_q(queries), tokens, bias)
        return y + self.ffn(self.norm2(y))


# --- Combining network ---

class FusionNetwork(nn.Module):
    def __init__(self, d, blocks=6, heads=8, rel_buckets=16, cell_m=1.0, max_grid=(1, 1),
                 positional=PositionalMode.RELATIVE):
        super().__init__()
        self.d = d
        self.cell_m = float(cell_m)
        self.positional = PositionalMode(positional)
        self.max_grid = (int(max_grid[0]), int(max_grid[1]))
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.combiner_token = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList([SelfAttentionBlock(d, heads) for _ in range(blocks)])
        self.final_norm = nn.LayerNorm(d) if blocks else nn.Identity()
        self.cross = CrossAttentionBlock(d, heads)
        self.heads = heads
        if self.positional is PositionalMode.RELATIVE:
            diagonal = self.cell_m * math.hypot(*self.max_grid)
            self.rel_pos = RelPosTable(heads, rel_buckets, self.cell_m, diagonal)
            self.cell_embedding = None
        else:
            self.rel_pos = None
            self.cell_embedding = nn.Embedding(self.max_grid[0] * self.max_grid[1], d)

    def cell_codes(self, positions):
        cols = np.floor(np.asarray(positions)[:, 0] / self.cell_m).astype(np.int64)
        rows = np.floor(np.asarray(positions)[:, 1] / self.cell_m).astype(np.int64)
        gx, gy = self.max_grid
        if cols.size and (cols.max() >= gx or rows.max() >= gy):
            raise ShapeMismatchError(f"Absolute positions only cover a {gx}x{gy} grid.")
        return torch.from_numpy(rows * gx + cols)

    def bias(self, q_pos, q_valid, k_pos, k_valid):
        g, tq, tk = q_pos.shape[0], q_pos.shape[1], k_pos.shape[1]
        if self.rel_pos is not None:
            bias = self.rel_pos(q_pos, k_pos)
        else:
            bias = torch.zeros(g, self.heads, tq, tk, dtype=torch.float64)
        return bias.masked_fill(~k_valid[:, None, None, :], NEG_INF)

    def forward(self, embeddings, mask, positions, tile_codes, slot_positions, slot_tile_codes):
        """
        embeddings (T, d) with per-row `mask` flags, token positions (T, 2) in
        metres and tile codes (T,); one output row per slot (patch of a tile)
        given by `slot_positions` / `slot_tile_codes`, in slot order.
        """
        t = embeddings.shape[0]
        if embeddings.ndim != 2 or embeddings.shape[1] != self.d:
            raise ShapeMismatchError(f"Fusion expects (T, {self.d}) embeddings, got {tuple(embeddings.shape)}.")
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        slot_positions = np.asarray(slot_positions, dtype=np.float64).reshape(-1, 2)
        if len(positions) != t or len(tile_codes) != t or len(mask) != t:
            raise ShapeMismatchError("Embeddings, mask, positions and tile codes must be row-aligned.")
        mask = torch.as_tensor(mask, dtype=torch.bool)

        x = torch.where(mask[:, None], self.mask_token.to(embeddings.dtype), embeddings)
        queries = self.combiner_token.to(embeddings.dtype).expand(len(slot_positions), self.d)
        if self.cell_embedding is not None:
            x = x + self.cell_embedding(self.cell_codes(positions)).to(x.dtype)
            queries = queries + self.cell_embedding(self.cell_codes(slot_positions)).to(x.dtype)

        groups, index, valid, _, _ = pad_by_group(tile_codes)
        s_groups, s_index, s_valid, s_group_of, s_slot_of = pad_by_group(slot_tile_codes)
        if not np.array_equal(groups, s_groups):
            raise ShapeMismatchError("Every tile must contribute both tokens and output patches.")

        pos = torch.from_numpy(positions)[index]
        s_pos = torch.from_numpy(slot_positions)[s_index]
        h = x[index]
        token_bias = self.bias(pos, valid, pos, valid)
        for block in self.blocks:
            h = block(h, token_bias)
        h = self.final_norm(h)

        fused = self.cross(queries[s_index], h, self.bias(s_pos, s_valid, pos, valid))
        return fused[s_group_of, s_slot_of]
