"""
storage.py

On-disk dataset container.

    root/manifest.json         modalities, label vocabulary, grid cell size,
                               tile list and splits (UTF-8 JSON)
    root/tiles/<tile_id>.omt   one tile per file
    root/tiles/<tile_id>.latent.json   latent class field (debug, optional)

A `.omt` file is the 4-byte magic `OMT1`, a little-endian u32 header length,
a UTF-8 JSON header, then raw little-endian float32 payloads. Payload
offsets in the header are counted from the first byte after the header.
"""

import json
import logging
import os
import struct

import numpy as np

from extensions import worker_pool
from models.schema import DatasetManifest, ModalitySpec, MultimodalTile
from utils.errors import DatasetFormatError, MissingTileError, ShapeMismatchError

logger = logging.getLogger('omnifuse.data')

TILE_MAGIC = b'OMT1'
MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.json'
F32 = np.dtype('<f4')


# --- Tile codec ---

def encode_tile(tile, specs):
    header = {'tile_id': tile.tile_id, 'grid': list(tile.grid), 'modalities': [],
              'labels': None if not tile.has_labels else [int(v) for v in tile._labels]}
    payloads = []
    offset = 0
    for spec in specs:
        data = np.ascontiguousarray(tile.arrays[spec.name], dtype=F32)
        if not np.all(np.isfinite(data)):
            raise ShapeMismatchError(f"Tile '{tile.tile_id}': '{spec.name}' has non-finite values.")
        raw = data.tobytes()
        entry = {'name': spec.name, 'kind': spec.kind.value, 'shape': list(data.shape), 'dtype': 'f32',
                 'offset': offset, 'length': len(raw)}
        if not spec.is_image:
            entry['timestamps'] = [int(d) for d in tile.timestamps[spec.name]]
        header['modalities'].append(entry)
        payloads.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return TILE_MAGIC + struct.pack('<I', len(head)) + head + b''.join(payloads)


def decode_tile(blob, source='<bytes>'):
    if len(blob) < 8 or blob[:4] != TILE_MAGIC:
        raise DatasetFormatError(f"{source}: not an OMT1 tile file (bad magic).")
    (head_len,) = struct.unpack('<I', blob[4:8])
    if 8 + head_len > len(blob):
        raise DatasetFormatError(f"{source}: header length {head_len} runs past the end of the file.")
    try:
        header = json.loads(blob[8:8 + head_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{source}: corrupt header ({e}).") from e
    body = memoryview(blob)[8 + head_len:]
    arrays, timestamps = {}, {}
    for entry in header['modalities']:
        if entry.get('dtype') != 'f32':
            raise DatasetFormatError(f"{source}: unsupported dtype {entry.get('dtype')!r}.")
        start, length = entry['offset'], entry['length']
        if start + length > len(body) or length != 4 * int(np.prod(entry['shape'])):
            raise DatasetFormatError(f"{source}: payload of '{entry['name']}' is truncated or mis-sized.")
        arrays[entry['name']] = np.frombuffer(body[start:start + length], dtype=F32).reshape(entry['shape']).copy()
        if 'timestamps' in entry:
            timestamps[entry['name']] = np.asarray(entry['timestamps'], dtype=np.int64)
    return MultimodalTile(header['tile_id'], header['grid'], arrays, timestamps, header.get('labels'))


# --- Manifest ---

def manifest_to_dict(manifest):
    return {
        'format_version': MANIFEST_VERSION,
        'modalities': [spec.to_dict() for spec in manifest.modalities],
        'label_vocab': list(manifest.label_vocab),
        'grid_cell_m': manifest.grid_cell_m,
        'tiles': [{'tile_id': tile_id, 'path': path} for tile_id, path in manifest.tiles],
        'splits': {name: list(members) for name, members in manifest.splits.items()},
    }


def manifest_from_dict(data, source):
    if data.get('format_version') != MANIFEST_VERSION:
        raise DatasetFormatError(
            f"{source}: manifest version {data.get('format_version')!r}, expected {MANIFEST_VERSION}."
        )
    manifest = DatasetManifest(
        modalities=[ModalitySpec.from_dict(m) for m in data['modalities']],
        label_vocab=list(data['label_vocab']),
        grid_cell_m=float(data['grid_cell_m']),
        tiles=[(t['tile_id'], t['path']) for t in data['tiles']],
        splits={name: list(members) for name, members in data.get('splits', {}).items()},
    )
    manifest.validate()
    return manifest


def write_manifest(manifest, root):
    path = os.path.join(root, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest_to_dict(manifest), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


# --- Dataset ---

def save_dataset(manifest, tiles, root):
    """Writes the manifest and every tile under `root`. Returns the manifest path."""
    os.makedirs(os.path.join(root, 'tiles'), exist_ok=True)
    paths = dict(manifest.tiles)

    def write(tile):
        tile.validate(manifest.modalities)
        target = os.path.join(root, paths[tile.tile_id])
        with open(target, 'wb') as f:
            f.write(encode_tile(tile, manifest.modalities))
        if tile.latent is not None:
            with open(os.path.join(root, 'tiles', f"{tile.tile_id}.latent.json"), 'w', encoding='utf-8') as f:
                json.dump({'tile_id': tile.tile_id, 'latent': np.asarray(tile.latent).tolist()}, f)

    with worker_pool() as pool:
        list(pool.map(write, tiles))
    logger.info(f"Saved {len(tiles)} tiles to {root}.")
    return write_manifest(manifest, root)


def load_dataset(root):
    """Returns (DatasetManifest, TileStore) for the dataset under `root`."""
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No dataset manifest at {path}.")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: corrupt manifest ({e}).") from e
    manifest = manifest_from_dict(data, path)
    store = TileStore(root, manifest)
    store.check_files()
    return manifest, store


def load_latent(root, tile_id):
    with open(os.path.join(root, 'tiles', f"{tile_id}.latent.json"), 'r', encoding='utf-8') as f:
        return np.asarray(json.load(f)['latent'], dtype=np.int64)


class TileStore:
    """
    Lazy, read-only tile accessor. Each `get` reads one file, so the store is
    safe to share between threads. `lock_labels()` returns a store whose
    tiles refuse to expose their labels.
    """

    def __init__(self, root, manifest, labels_locked=False):
        self.root = root
        self.manifest = manifest
        self.labels_locked = labels_locked
        self._paths = dict(manifest.tiles)

    def __len__(self):
        return len(self._paths)

    def lock_labels(self):
        return TileStore(self.root, self.manifest, labels_locked=True)

    def get(self, tile_id):
        if tile_id not in self._paths:
            raise KeyError(f"Unknown tile '{tile_id}'.")
        path = os.path.join(self.root, self._paths[tile_id])
        if not os.path.exists(path):
            raise MissingTileError(tile_id, path)
        with open(path, 'rb') as f:
            tile = decode_tile(f.read(), source=path)
        if tile.tile_id != tile_id:
            raise DatasetFormatError(f"{path}: holds tile '{tile.tile_id}', expected '{tile_id}'.")
        tile.validate(self.manifest.modalities)
        return tile.locked() if self.labels_locked else tile

    def grid(self, tile_id):
        """Patch grid of a tile, read from its header only."""
        path = os.path.join(self.root, self._paths[tile_id])
        if not os.path.exists(path):
            raise MissingTileError(tile_id, path)
        with open(path, 'rb') as f:
            head = f.read(8)
            if len(head) < 8 or head[:4] != TILE_MAGIC:
                raise DatasetFormatError(f"{path}: not an OMT1 tile file (bad magic).")
            (head_len,) = struct.unpack('<I', head[4:8])
            header = json.loads(f.read(head_len).decode('utf-8'))
        return tuple(header['grid'])

    def max_grid(self, tile_ids=None):
        grids = [self.grid(tile_id) for tile_id in (tile_ids or self._paths)]
        return (max(g[0] for g in grids), max(g[1] for g in grids))

    def get_many(self, tile_ids):
        return [self.get(tile_id) for tile_id in tile_ids]

    def labels(self, tile_ids):
        """(N, K) label matrix; fails on a locked store."""
        return np.stack([self.get(tile_id).labels for tile_id in tile_ids])

    def check_files(self):
        for tile_id, rel in self._paths.items():
            path = os.path.join(self.root, rel)
            if not os.path.exists(path):
                raise MissingTileError(tile_id, path)
