"""
seeding.py

Deterministic seed derivation. Every stochastic step (tile generation, batch
order, masking, patch subsampling) draws from a stream keyed by the run seed
and a tuple of labels, so work can be split across threads or resumed from a
checkpoint without changing the numbers it produces.
"""

import hashlib

import numpy as np
import torch


def derive_seed(seed, *keys):
    """Returns a 63-bit integer that depends only on `seed` and `keys`."""
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return int(digest[:16], 16) & 0x7FFFFFFFFFFFFFFF


def numpy_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))


def torch_generator(seed, *keys):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *keys))
    return gen
