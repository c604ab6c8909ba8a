"""
tokenizer.py

Cuts tiles along their patch grid into (modality, patch) tokens. The grid is
shared by every modality, so token p of one modality covers exactly the
ground footprint of token p of any other.
"""

import numpy as np

from models.schema import TokenBatch, TokenIndex
from utils.errors import ShapeMismatchError
from utils.seeding import numpy_rng


def patch_position(patch, grid, cell_m):
    gx, _ = grid
    row, col = divmod(patch, gx)
    return ((col + 0.5) * cell_m, (row + 0.5) * cell_m)


def _image_tokens(array, spec, grid, tile_id):
    gx, gy = grid
    w = spec.patch_side_px
    c, height, width = array.shape
    if height % gy or width % gx or height // gy != w or width // gx != w:
        raise ShapeMismatchError(
            f"Tile '{tile_id}': image '{spec.name}' of {height}x{width} px does not split into a "
            f"{gx}x{gy} grid of {w} px patches."
        )
    # (C, Gy, W, Gx, W) -> (Gy, Gx, C, W, W)
    blocks = array.reshape(c, gy, w, gx, w).transpose(1, 3, 0, 2, 4)
    return [np.ascontiguousarray(blocks[row, col]) for row in range(gy) for col in range(gx)]


def _series_tokens(array, spec, grid, tile_id):
    gx, gy = grid
    s = spec.sub_cells
    c, length, height, width = array.shape
    if height != gy * s or width != gx * s:
        raise ShapeMismatchError(
            f"Tile '{tile_id}': series '{spec.name}' raster {height}x{width} does not split into a "
            f"{gx}x{gy} grid of {s}x{s} cells."
        )
    # (C, L, Gy, s, Gx, s) -> (Gy, Gx, C, s, s, L) -> per patch (C*s*s, L)
    cells = array.reshape(c, length, gy, s, gx, s).transpose(2, 4, 0, 3, 5, 1)
    return [np.ascontiguousarray(cells[row, col].reshape(c * s * s, length))
            for row in range(gy) for col in range(gx)]


def tokenize(tile, specs, cell_m=1.0, patches=None):
    """
    Tokens of one tile: modalities in `specs` order, patches row-major.
    `patches` restricts the tile to a subset of its patch indices (kept in
    ascending order).
    """
    gx, gy = tile.grid
    keep = list(range(gx * gy)) if patches is None else sorted(int(p) for p in patches)
    indices, raw, days = [], [], []
    for spec in specs:
        if spec.name not in tile.arrays:
            raise ShapeMismatchError(f"Tile '{tile.tile_id}' is missing modality '{spec.name}'.")
        array = tile.arrays[spec.name]
        if spec.is_image:
            tokens = _image_tokens(array, spec, tile.grid, tile.tile_id)
            stamps = None
        else:
            if array.ndim != 4:
                raise ShapeMismatchError(f"Tile '{tile.tile_id}': series '{spec.name}' must be 4-D, got {array.shape}.")
            tokens = _series_tokens(array, spec, tile.grid, tile.tile_id)
            stamps = np.asarray(tile.timestamps[spec.name], dtype=np.int64)
        for p in keep:
            indices.append(TokenIndex(spec.name, p, tile.tile_id, patch_position(p, tile.grid, cell_m)))
            raw.append(tokens[p])
            days.append(stamps)
    slots = [(tile.tile_id, p, patch_position(p, tile.grid, cell_m)) for p in keep]
    return TokenBatch(
        indices=indices,
        raw=raw,
        days=days,
        tile_partition={tile.tile_id: range(0, len(indices))},
        specs=list(specs),
        grids={tile.tile_id: tile.grid},
        slots=slots,
    )


def assemble_batch(tiles, specs, cell_m=1.0, patch_fraction=1.0, seed=0):
    """
    Concatenates per-tile tokenizations. With `patch_fraction` < 1 each tile
    keeps max(1, floor(fraction * P)) patches drawn under `seed`.
    """
    if not tiles:
        raise ValueError("Cannot assemble a batch from zero tiles.")
    names = {spec.name for spec in specs}
    for tile in tiles:
        if not names <= set(tile.arrays):
            missing = sorted(names - set(tile.arrays))
            raise ShapeMismatchError(f"Tile '{tile.tile_id}' lacks modalities {missing} present in the batch.")
    if len({tile.tile_id for tile in tiles}) != len(tiles):
        raise ValueError("A tile appears twice in one batch.")

    indices, raw, days, slots = [], [], [], []
    partition, grids = {}, {}
    for tile in tiles:
        patches = None
        if patch_fraction < 1:
            total = tile.grid[0] * tile.grid[1]
            count = max(1, int(np.floor(patch_fraction * total + 1e-9)))
            rng = numpy_rng(seed, 'patches', tile.tile_id)
            patches = rng.choice(total, size=count, replace=False)
        part = tokenize(tile, specs, cell_m, patches)
        start = len(indices)
        indices.extend(part.indices)
        raw.extend(part.raw)
        days.extend(part.days)
        slots.extend(part.slots)
        partition[tile.tile_id] = range(start, len(indices))
        grids[tile.tile_id] = tile.grid
    return TokenBatch(indices, raw, days, partition, list(specs), grids, slots)
