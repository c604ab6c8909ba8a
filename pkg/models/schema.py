# models/schema.py

"""
schema.py

Data structures shared by every part of omnifuse: modality declarations,
multimodal tiles, dataset manifests, token batches and masks. This is the
single source of truth for what a tile and a token look like; the tokenizer,
the storage layer and the model all speak in these types.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from utils.errors import ConfigError, LabelAccessError, ShapeMismatchError

# --- Enums for Standardized Field Choices ---

class ModalityKind(enum.Enum):
    IMAGE = "image"
    TIME_SERIES = "time_series"


class MaskStrategy(enum.Enum):
    RANDOM = "random"
    SPATIAL = "spatial"
    MODALITY = "modality"


class ContrastiveMode(enum.Enum):
    OFF = "off"
    NAIVE = "naive"
    FULL = "full"


class PositionalMode(enum.Enum):
    RELATIVE = "relative"
    ABSOLUTE = "absolute"


class ImageEncoderKind(enum.Enum):
    CNN = "cnn"
    LINEAR = "linear"
    VIT = "vit"


class MatchKind(enum.IntEnum):
    IGNORED = 0
    POSITIVE = 1
    NEGATIVE = 2


DAYS_IN_YEAR = 365


# --- Modalities ---

@dataclass(frozen=True)
class ModalitySpec:
    """
    Declares one modality's input space. Images are cut into
    `patch_side_px` x `patch_side_px` patches; time series carry one series
    per grid cell, or `sub_cells` x `sub_cells` series per cell when the
    series raster is finer than the grid (they are flattened into channels
    before encoding).
    """
    name: str
    kind: ModalityKind
    channels: int
    ground_resolution_m: float
    patch_side_px: Optional[int] = None
    max_length: Optional[int] = None
    sub_cells: int = 1

    @property
    def is_image(self):
        return self.kind is ModalityKind.IMAGE

    @property
    def encoded_channels(self):
        """Channels seen by the encoder after sub-cell flattening."""
        if self.is_image:
            return self.channels
        return self.channels * self.sub_cells * self.sub_cells

    def raster_side(self, cells):
        """Raster extent along one axis for a grid of `cells` patches."""
        if self.is_image:
            return cells * self.patch_side_px
        return cells * self.sub_cells

    def validate(self, grid_cell_m):
        if self.channels <= 0:
            raise ConfigError(f"Modality '{self.name}': channels must be positive.")
        if self.ground_resolution_m <= 0:
            raise ConfigError(f"Modality '{self.name}': ground resolution must be positive.")
        if self.is_image:
            if not self.patch_side_px or self.patch_side_px <= 0:
                raise ConfigError(f"Modality '{self.name}': image modalities need a positive patch_side_px.")
            footprint = self.patch_side_px * self.ground_resolution_m
        else:
            if not self.max_length or self.max_length <= 0:
                raise ConfigError(f"Modality '{self.name}': time series need a positive max_length.")
            if self.sub_cells <= 0:
                raise ConfigError(f"Modality '{self.name}': sub_cells must be positive.")
            footprint = self.sub_cells * self.ground_resolution_m
        if not math.isclose(footprint, grid_cell_m, rel_tol=1e-9):
            raise ConfigError(
                f"Modality '{self.name}' covers {footprint} m per patch but the grid cell is {grid_cell_m} m."
            )

    def to_dict(self):
        return {
            "name": self.name,
            "kind": self.kind.value,
            "channels": self.channels,
            "ground_resolution_m": self.ground_resolution_m,
            "patch_side_px": self.patch_side_px,
            "max_length": self.max_length,
            "sub_cells": self.sub_cells,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=data["name"],
            kind=ModalityKind(data["kind"]),
            channels=int(data["channels"]),
            ground_resolution_m=float(data["ground_resolution_m"]),
            patch_side_px=data.get("patch_side_px"),
            max_length=data.get("max_length"),
            sub_cells=int(data.get("sub_cells", 1)),
        )


# --- Tiles and Manifest ---

class MultimodalTile:
    """
    One georeferenced sample. `arrays` maps modality name to its raster:
    images are (C, Gy*W, Gx*W); time series are (C, L, Gy*s, Gx*s) with a
    matching `timestamps[name]` vector of L days of year.

    Labels can be locked: a locked tile raises LabelAccessError when its
    labels are read, which is how pretraining guarantees it never sees them.
    """

    def __init__(self, tile_id, grid, arrays, timestamps=None, labels=None, latent=None,
                 labels_locked=False):
        self.tile_id = tile_id
        self.grid = (int(grid[0]), int(grid[1]))
        self.arrays = dict(arrays)
        self.timestamps = dict(timestamps or {})
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.latent = latent
        self.labels_locked = labels_locked

    @property
    def labels(self):
        if self.labels_locked:
            raise LabelAccessError(f"Labels of tile '{self.tile_id}' were read during self-supervised training.")
        return self._labels

    @property
    def has_labels(self):
        return self._labels is not None

    def locked(self):
        """Returns a view of this tile whose labels cannot be read."""
        return MultimodalTile(self.tile_id, self.grid, self.arrays, self.timestamps,
                              self._labels, self.latent, labels_locked=True)

    def validate(self, specs):
        gx, gy = self.grid
        if gx <= 0 or gy <= 0:
            raise ShapeMismatchError(f"Tile '{self.tile_id}': grid {self.grid} must be positive.")
        for spec in specs:
            if spec.name not in self.arrays:
                raise ShapeMismatchError(f"Tile '{self.tile_id}' is missing modality '{spec.name}'.")
            arr = self.arrays[spec.name]
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatchError(f"Tile '{self.tile_id}': modality '{spec.name}' has non-finite values.")
            height, width = spec.raster_side(gy), spec.raster_side(gx)
            if spec.is_image:
                expected = (spec.channels, height, width)
                if arr.shape != expected:
                    raise ShapeMismatchError(
                        f"Tile '{self.tile_id}': '{spec.name}' has shape {arr.shape}, expected {expected}."
                    )
            else:
                days = np.asarray(self.timestamps.get(spec.name, []))
                if arr.ndim != 4 or arr.shape[0] != spec.channels or arr.shape[2:] != (height, width):
                    raise ShapeMismatchError(
                        f"Tile '{self.tile_id}': '{spec.name}' has shape {arr.shape}, "
                        f"expected ({spec.channels}, L, {height}, {width})."
                    )
                validate_days(days, arr.shape[1], spec, self.tile_id)


def validate_days(days, length, spec, tile_id):
    if days.shape != (length,):
        raise ShapeMismatchError(
            f"Tile '{tile_id}': '{spec.name}' has {length} dates but {days.shape[0] if days.ndim else 0} timestamps."
        )
    if length == 0 or length > spec.max_length:
        raise ShapeMismatchError(f"Tile '{tile_id}': '{spec.name}' length {length} outside [1, {spec.max_length}].")
    if days.min() < 1 or days.max() > DAYS_IN_YEAR:
        raise ShapeMismatchError(f"Tile '{tile_id}': '{spec.name}' timestamps must lie in [1, {DAYS_IN_YEAR}].")
    if np.any(np.diff(days) <= 0):
        raise ShapeMismatchError(f"Tile '{tile_id}': '{spec.name}' timestamps must be strictly increasing.")


@dataclass
class DatasetManifest:
    modalities: List[ModalitySpec]
    label_vocab: List[str]
    grid_cell_m: float
    tiles: List[Tuple[str, str]] = field(default_factory=list)
    splits: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def tile_ids(self):
        return [tile_id for tile_id, _ in self.tiles]

    def spec(self, name):
        for spec in self.modalities:
            if spec.name == name:
                return spec
        raise ConfigError(f"Unknown modality '{name}'. Known: {[s.name for s in self.modalities]}")

    def select(self, names=None):
        """Specs for `names` in manifest order; all specs when `names` is empty."""
        if not names:
            return list(self.modalities)
        for name in names:
            self.spec(name)
        return [spec for spec in self.modalities if spec.name in set(names)]

    def validate(self):
        for spec in self.modalities:
            spec.validate(self.grid_cell_m)
        known = set(self.tile_ids)
        if len(known) != len(self.tiles):
            raise ConfigError("Manifest lists a tile id more than once.")
        seen = {}
        for split, members in self.splits.items():
            for tile_id in members:
                if tile_id not in known:
                    raise ConfigError(f"Split '{split}' references unknown tile '{tile_id}'.")
                if tile_id in seen:
                    raise ConfigError(f"Tile '{tile_id}' is in both '{seen[tile_id]}' and '{split}'.")
                seen[tile_id] = split


# --- Tokens ---

@dataclass(frozen=True)
class TokenIndex:
    modality: str
    patch: int
    tile_id: str
    position_m: Tuple[float, float]


@dataclass
class TokenBatch:
    """
    Indexed tokens of one or more tiles. Order: tiles in batch order, then
    modalities in manifest order, then patches row-major. `raw[i]` is the
    raw view of token i (image: C x W x W; series: C' x L) and `days[i]` its
    timestamps (None for images). `tile_partition` maps each tile id to the
    range of token rows it owns, and `slots` lists the (tile id, patch,
    position) of every fused output row.
    """
    indices: List[TokenIndex]
    raw: List[np.ndarray]
    days: List[Optional[np.ndarray]]
    tile_partition: Dict[str, range]
    specs: List[ModalitySpec]
    grids: Dict[str, Tuple[int, int]]
    slots: List[Tuple[str, int, Tuple[float, float]]]

    def __len__(self):
        return len(self.indices)

    @property
    def modality_names(self):
        return [spec.name for spec in self.specs]

    def rows_of(self, name):
        return np.array([i for i, idx in enumerate(self.indices) if idx.modality == name], dtype=np.int64)

    def positions(self):
        return np.array([idx.position_m for idx in self.indices], dtype=np.float64).reshape(-1, 2)

    def tile_codes(self):
        order = {tile_id: n for n, tile_id in enumerate(self.tile_partition)}
        return np.array([order[idx.tile_id] for idx in self.indices], dtype=np.int64)

    def patch_codes(self):
        return np.array([idx.patch for idx in self.indices], dtype=np.int64)

    def slot_of_tokens(self):
        """Fused-row index of every token (same tile, same patch)."""
        lookup = {(tile_id, patch): n for n, (tile_id, patch, _) in enumerate(self.slots)}
        return np.array([lookup[(idx.tile_id, idx.patch)] for idx in self.indices], dtype=np.int64)

    def slot_positions(self):
        return np.array([pos for _, _, pos in self.slots], dtype=np.float64).reshape(-1, 2)

    def slot_tile_codes(self):
        order = {tile_id: n for n, tile_id in enumerate(self.tile_partition)}
        return np.array([order[tile_id] for tile_id, _, _ in self.slots], dtype=np.int64)

    def slot_patch_codes(self):
        return np.array([patch for _, patch, _ in self.slots], dtype=np.int64)

    def stack_images(self, name, rows=None, dtype=torch.float32):
        """(n, C, W, W) tensor of the image tokens of modality `name`."""
        rows = self.rows_of(name) if rows is None else rows
        return torch.from_numpy(np.stack([self.raw[i] for i in rows])).to(dtype)

    def stack_series(self, name, rows=None, dtype=torch.float32):
        """
        Pads the series tokens of modality `name` to the longest length among
        them. Returns values (n, C', L), days (n, L) and valid (n, L); padded
        dates get day 1, zero values and valid=False.
        """
        rows = self.rows_of(name) if rows is None else rows
        length = max(self.raw[i].shape[1] for i in rows)
        channels = self.raw[rows[0]].shape[0]
        values = np.zeros((len(rows), channels, length), dtype=np.float32)
        days = np.ones((len(rows), length), dtype=np.int64)
        valid = np.zeros((len(rows), length), dtype=bool)
        for n, i in enumerate(rows):
            count = self.raw[i].shape[1]
            values[n, :, :count] = self.raw[i]
            days[n, :count] = self.days[i]
            valid[n, :count] = True
        return torch.from_numpy(values).to(dtype), torch.from_numpy(days), torch.from_numpy(valid)


@dataclass(frozen=True)
class MaskSet:
    """Token rows of a TokenBatch selected for masking."""
    rows: frozenset

    def __len__(self):
        return len(self.rows)

    def __contains__(self, row):
        return row in self.rows

    def as_tensor(self, total):
        flags = torch.zeros(total, dtype=torch.bool)
        if self.rows:
            flags[torch.tensor(sorted(self.rows), dtype=torch.long)] = True
        return flags

    def keys(self, batch):
        """The masked tokens as (modality, patch, tile id) triples."""
        return {(batch.indices[i].modality, batch.indices[i].patch, batch.indices[i].tile_id) for i in self.rows}
