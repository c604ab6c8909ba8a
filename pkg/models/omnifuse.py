"""
omnifuse.py

The full model: one codec per modality, the combining network and an
optional multilabel head. Works on TokenBatch objects; every tensor it returns
is row-aligned with the batch's tokens or slots.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from models.encoders import build_codec
from models.fusion import FusionNetwork
from utils.errors import ConfigError


@dataclass
class Encoded:
    """Encoder outputs of one batch."""
    embeddings: torch.Tensor                      # (T, d), token order
    rows: Dict[str, np.ndarray]                   # modality -> token rows
    traces: Dict[str, Optional[object]] = field(default_factory=dict)   # PoolTrace / AttentionTrace / None

class OmniFuse(nn.Module):
    def __init__(self, specs, cfg, grid_cell_m, max_grid, n_classes=None):
        super().__init__()
        if not specs:
            raise ConfigError("The model needs at least one modality.")
        self.specs = list(specs)
        self.cfg = cfg
        self.grid_cell_m = float(grid_cell_m)
        self.codecs = nn.ModuleDict({spec.name: build_codec(spec, cfg) for spec in self.specs})
        self.fusion = FusionNetwork(cfg.d, cfg.blocks, cfg.heads, cfg.rel_buckets, grid_cell_m, max_grid,
                                    cfg.positional)
        self.head = nn.Linear(cfg.d, n_classes) if n_classes else None

    @property
    def dtype(self):
        return self.fusion.combiner_token.dtype

    def spec(self, name):
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise ConfigError(f"Model has no codec for modality '{name}'.")

    def attach_head(self, n_classes):
        self.head = nn.Linear(self.cfg.d, n_classes).to(self.dtype)
        return self.head

    # --- Encoding ---

    def encode(self, batch):
        dtype = self.dtype
        embeddings = torch.zeros(len(batch), self.cfg.d, dtype=dtype)
        rows, traces = {}, {}
        for spec in batch.specs:
            where = batch.rows_of(spec.name)
            if where.size == 0:
                continue
            codec = self.codecs[spec.name]
            if spec.is_image:
                z, trace = codec.encode(batch.stack_images(spec.name, where, dtype))
            else:
                values, days, valid = batch.stack_series(spec.name, where, dtype)
                z, trace = codec.encode(values, days, valid)
            embeddings = embeddings.index_copy(0, torch.from_numpy(where), z)
            rows[spec.name] = where
            traces[spec.name] = trace
        return Encoded(embeddings, rows, traces)

    # --- Fusion ---

    def fuse(self, batch, embeddings, mask=None):
        """Fused patch embeddings (S, d), one row per batch slot."""
        flags = torch.zeros(len(batch), dtype=torch.bool) if mask is None else mask.as_tensor(len(batch))
        return self.fusion(embeddings, flags, batch.positions(), batch.tile_codes(),
                           batch.slot_positions(), batch.slot_tile_codes())

    def tile_embeddings(self, batch, fused):
        """Mean of the fused patch embeddings of each tile, (tiles, d) in batch order."""
        codes = torch.from_numpy(batch.slot_tile_codes())
        n_tiles = len(batch.tile_partition)
        sums = torch.zeros(n_tiles, fused.shape[1], dtype=fused.dtype).index_add(0, codes, fused)
        counts = torch.bincount(codes, minlength=n_tiles).to(fused.dtype)
        return sums / counts[:, None]

    def forward(self, batch):
        """Class logits per tile."""
        if self.head is None:
            raise ConfigError("The model has no classification head; fine-tune or probe first.")
        encoded = self.encode(batch)
        fused = self.fuse(batch, encoded.embeddings)
        return self.head(self.tile_embeddings(batch, fused))

    # --- Decoding ---

    def decode(self, name, fused_rows, trace=None, days=None):
        codec = self.codecs[name]
        if self.spec(name).is_image:
            return codec.decode(fused_rows, trace)
        return codec.decode(fused_rows, days)

def parameter_census(model):
    """Trainable parameter count per component."""
    def count(module):
        return sum(p.numel() for p in module.parameters() if p.requires_grad) if module is not None else 0

    census = {}
    for spec in model.specs:
        codec = model.codecs[spec.name]
        if spec.is_image and hasattr(codec, 'enc_convs'):
            census[f"{spec.name}.encoder"] = count(codec.enc_convs)
            census[f"{spec.name}.decoder"] = count(codec.dec_convs)
        elif spec.is_image:
            census[f"{spec.name}.encoder"] = count(codec.encoder)
            census[f"{spec.name}.decoder"] = count(codec.decoder)
        else:
            census[f"{spec.name}.encoder"] = count(codec) - count(codec.decoder)
            census[f"{spec.name}.decoder"] = count(codec.decoder)
    census['combiner'] = count(model.fusion)
    census['head'] = count(model.head)
    census['total'] = sum(census.values())
    return census
