"""
checkpoint.py

Checkpoint container:

    magic 'OMNF' | u32 version | u32 header length | JSON header | f32 payloads

all little-endian. The header holds the training configuration, the dataset
modalities, the epoch, the scheduler state, free-form training state and a
directory of named tensors (shape, byte offset from the payload start, byte
length). Tensors are model parameters (`model/<name>`) and Adam moments
(`adam/<param>/exp_avg`, `adam/<param>/exp_avg_sq`).
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

from config import TrainConfig, config_from_dict, config_to_dict
from models.schema import ModalitySpec
from utils.errors import ConfigMismatchError, DatasetFormatError

logger = logging.getLogger('omnifuse.training')

MAGIC = b'OMNF'
VERSION = 1
F32 = np.dtype('<f4')


@dataclass
class ModelState:
    config: TrainConfig
    modalities: list
    grid_cell_m: float
    max_grid: tuple
    n_classes: int
    tensors: Dict[str, np.ndarray]
    epoch: int = 0
    scheduler: dict = field(default_factory=dict)
    adam_steps: Dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def model_tensors(self):
        return {k[len('model/'):]: v for k, v in self.tensors.items() if k.startswith('model/')}


def _adam_moments(model, optimizer):
    """Adam moments keyed by parameter name."""
    if optimizer is None:
        return {}, {}
    names = {id(p): name for name, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group['params']:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            tensors[f"adam/{name}/exp_avg"] = state['exp_avg']
            tensors[f"adam/{name}/exp_avg_sq"] = state['exp_avg_sq']
            steps[name] = int(state['step'])
    return tensors, steps


def save_checkpoint(path, model, cfg, optimizer=None, scheduler=None, epoch=0, extra=None):
    tensors = {f"model/{name}": t for name, t in model.state_dict().items()}
    moments, steps = _adam_moments(model, optimizer)
    tensors.update(moments)

    directory, payloads, offset = {}, [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype=F32)
        raw = data.tobytes()
        directory[name] = {'shape': list(data.shape), 'offset': offset, 'length': len(raw)}
        payloads.append(raw)
        offset += len(raw)

    header = {
        'config': config_to_dict(cfg),
        'modalities': [spec.to_dict() for spec in model.specs],
        'grid_cell_m': model.grid_cell_m,
        'max_grid': list(model.fusion.max_grid),
        'n_classes': model.head.out_features if model.head is not None else 0,
        'epoch': int(epoch),
        'scheduler': scheduler.state_dict() if scheduler is not None else {},
        'adam_steps': steps,
        'extra': extra or {},
        'tensors': directory,
    }
    head = json.dumps(header, sort_keys=True).encode('utf-8')
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, 'wb') as f:
        f.write(MAGIC + struct.pack('<II', VERSION, len(head)) + head + b''.join(payloads))
    os.replace(tmp, path)
    logger.debug(f"Checkpoint written to {path} (epoch {epoch}, {len(directory)} tensors).")
    return path


def load_checkpoint(path):
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: not an OMNF checkpoint (bad magic).")
    version, head_len = struct.unpack('<II', blob[4:12])
    if version != VERSION:
        raise DatasetFormatError(f"{path}: checkpoint version {version}, expected {VERSION}.")
    try:
        header = json.loads(blob[12:12 + head_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: corrupt checkpoint header ({e}).") from e
    body = memoryview(blob)[12 + head_len:]
    tensors = {}
    for name, entry in header['tensors'].items():
        start, length = entry['offset'], entry['length']
        if start + length > len(body):
            raise DatasetFormatError(f"{path}: tensor '{name}' is truncated.")
        tensors[name] = np.frombuffer(body[start:start + length], dtype=F32).reshape(entry['shape']).copy()
    return ModelState(
        config=config_from_dict(TrainConfig, header['config'], 'checkpoint'),
        modalities=[ModalitySpec.from_dict(m) for m in header['modalities']],
        grid_cell_m=float(header['grid_cell_m']),
        max_grid=tuple(header['max_grid']),
        n_classes=int(header['n_classes']),
        tensors=tensors,
        epoch=int(header['epoch']),
        scheduler=header['scheduler'],
        adam_steps={k: int(v) for k, v in header['adam_steps'].items()},
        extra=header['extra'],
    )


def check_architecture(expected_cfg, state):
    expected, found = expected_cfg.architecture(), state.config.architecture()
    if expected != found:
        raise ConfigMismatchError(expected, found)


def restore_model(model, state, strict_head=True):
    """Copies checkpoint parameters into `model`; the head is skipped when shapes differ and not strict."""
    check_architecture(model.cfg, state)
    weights = state.model_tensors()
    own = model.state_dict()
    missing = [name for name in own if name not in weights and not name.startswith('head.')]
    if missing:
        raise ConfigMismatchError(sorted(own), sorted(weights))
    loaded = {}
    for name, value in own.items():
        if name not in weights:
            continue
        if tuple(weights[name].shape) != tuple(value.shape):
            if name.startswith('head.') and not strict_head:
                continue
            raise ConfigMismatchError({name: tuple(value.shape)}, {name: tuple(weights[name].shape)})
        loaded[name] = torch.from_numpy(weights[name]).to(value.dtype)
    model.load_state_dict(loaded, strict=False)
    return model


def restore_optimizer(model, optimizer, state):
    """Rebuilds Adam moments and step counts from a checkpoint."""
    params = dict(model.named_parameters())
    for name, step in state.adam_steps.items():
        p = params[name]
        optimizer.state[p] = {
            'step': torch.tensor(float(step)),
            'exp_avg': torch.from_numpy(state.tensors[f"adam/{name}/exp_avg"]).to(p.dtype),
            'exp_avg_sq': torch.from_numpy(state.tensors[f"adam/{name}/exp_avg_sq"]).to(p.dtype),
        }
    return optimizer
