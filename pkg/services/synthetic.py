"""
synthetic.py

Deterministic synthetic multimodal tiles. Each tile has a latent class per
patch; a VHR-like image, an optical time series with cloudy dates and a radar
time series with speckle are all rendered from that same latent field, so
the modalities agree patch by patch.

Every tile draws from its own random stream keyed by (seed, tile index);
tiles can therefore be generated in parallel and still match a serial run.
"""

import logging
from dataclasses import dataclass

import numpy as np

from extensions import worker_pool
from models.schema import DAYS_IN_YEAR, DatasetManifest, MultimodalTile
from utils.seeding import numpy_rng

logger = logging.getLogger('omnifuse.data')

TEXTURE_AMPLITUDE = 0.15
CLOUD_JITTER = 0.1


@dataclass
class ClassSignatures:
    """Per-class rendering parameters, shared by all tiles of a dataset."""
    colors: np.ndarray          # (K, C_img)
    frequencies: np.ndarray     # (K,)
    orientations: np.ndarray    # (K,)
    optical_base: np.ndarray    # (K, C_opt)
    optical_amp: np.ndarray     # (K, C_opt)
    optical_phase: np.ndarray   # (K,)
    radar_base: np.ndarray      # (K, C_rad)
    radar_amp: np.ndarray       # (K, C_rad)
    radar_phase: np.ndarray     # (K,)


def class_signatures(cfg, seed):
    rng = numpy_rng(seed, 'classes')
    k = cfg.n_classes
    max_freq = max(1, cfg.image_patch_px // 2)
    return ClassSignatures(
        colors=rng.uniform(0.1, 0.9, size=(k, cfg.image_channels)),
        frequencies=1.0 + (rng.permutation(k) % max_freq),
        orientations=rng.uniform(0.0, np.pi, size=k),
        optical_base=rng.uniform(0.1, 0.5, size=(k, cfg.optical_channels)),
        optical_amp=rng.uniform(0.05, 0.3, size=(k, cfg.optical_channels)),
        optical_phase=rng.uniform(0.0, 2 * np.pi, size=k),
        radar_base=rng.uniform(0.2, 0.6, size=(k, cfg.radar_channels)),
        radar_amp=rng.uniform(0.05, 0.2, size=(k, cfg.radar_channels)),
        radar_phase=rng.uniform(0.0, 2 * np.pi, size=k),
    )


# --- Latent field ---

def latent_field(rng, grid, n_classes, n_seeds):
    """
    Class per patch, (Gy, Gx). Random seed points get random classes; each
    patch takes the majority class among its nearest seeds (ties go to the
    class of the closer seed).
    """
    gx, gy = grid
    points = rng.uniform(0.0, 1.0, size=(n_seeds, 2)) * np.array([gx, gy])
    classes = rng.integers(0, n_classes, size=n_seeds)
    neighbours = min(3, n_seeds)
    field = np.empty((gy, gx), dtype=np.int64)
    for row in range(gy):
        for col in range(gx):
            dist = np.hypot(points[:, 0] - (col + 0.5), points[:, 1] - (row + 0.5))
            nearest = np.argsort(dist, kind='stable')[:neighbours]
            votes = np.bincount(classes[nearest], minlength=n_classes)
            winners = set(np.flatnonzero(votes == votes.max()).tolist())
            field[row, col] = next(int(classes[i]) for i in nearest if int(classes[i]) in winners)
    return field


# --- Modality renderers ---

def render_image(rng, field, sig, cfg):
    gy, gx = field.shape
    w = cfg.image_patch_px
    v, u = np.meshgrid(np.arange(w), np.arange(w), indexing='ij')
    image = np.empty((cfg.image_channels, gy * w, gx * w), dtype=np.float64)
    for row in range(gy):
        for col in range(gx):
            k = field[row, col]
            phase = (u * np.cos(sig.orientations[k]) + v * np.sin(sig.orientations[k])) / w
            texture = TEXTURE_AMPLITUDE * np.sin(2 * np.pi * sig.frequencies[k] * phase)
            block = sig.colors[k][:, None, None] + texture[None]
            image[:, row * w:(row + 1) * w, col * w:(col + 1) * w] = block
    image += rng.normal(0.0, cfg.image_noise, size=image.shape)
    return image.astype(np.float32)


def sample_days(rng, length_range):
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    return np.sort(rng.choice(DAYS_IN_YEAR, size=length, replace=False) + 1).astype(np.int64)


def cell_classes(field, sub_cells):
    """Latent class per raster cell of a time-series modality."""
    return np.kron(field, np.ones((sub_cells, sub_cells), dtype=np.int64))


def render_optical(rng, field, sig, cfg):
    days = sample_days(rng, cfg.optical_length)
    cells = cell_classes(field, cfg.series_sub_cells)
    t = 2 * np.pi * days / DAYS_IN_YEAR
    # (C, L, H, W)
    base = np.moveaxis(sig.optical_base[cells], -1, 0)[:, None]
    amp = np.moveaxis(sig.optical_amp[cells], -1, 0)[:, None]
    phase = sig.optical_phase[cells][None, None]
    values = base + amp * np.sin(t[None, :, None, None] + phase)
    values = values + rng.normal(0.0, cfg.series_noise, size=values.shape)
    clouded = rng.random(days.shape[0]) < cfg.cloud_prob
    if clouded.any():
        jitter = rng.uniform(0.0, CLOUD_JITTER, size=(values.shape[0], int(clouded.sum())) + values.shape[2:])
        values[:, clouded] = cfg.cloud_brightness + jitter
    return values.astype(np.float32), days, clouded


def render_radar(rng, field, sig, cfg):
    days = sample_days(rng, cfg.radar_length)
    cells = cell_classes(field, cfg.series_sub_cells)
    t = 4 * np.pi * days / DAYS_IN_YEAR
    base = np.moveaxis(sig.radar_base[cells], -1, 0)[:, None]
    amp = np.moveaxis(sig.radar_amp[cells], -1, 0)[:, None]
    phase = sig.radar_phase[cells][None, None]
    values = base + amp * np.cos(t[None, :, None, None] + phase)
    shape = 1.0 / (cfg.radar_speckle ** 2)
    speckle = rng.gamma(shape, 1.0 / shape, size=values.shape)
    return (values * speckle).astype(np.float32), days


# --- Generation ---

def generate_tile(cfg, seed, index, sig):
    rng = numpy_rng(seed, 'tile', index)
    field = latent_field(rng, cfg.grid, cfg.n_classes, cfg.latent_seeds)
    image = render_image(rng, field, sig, cfg)
    optical, optical_days, _ = render_optical(rng, field, sig, cfg)
    radar, radar_days = render_radar(rng, field, sig, cfg)
    labels = np.zeros(cfg.n_classes, dtype=np.int64)
    labels[np.unique(field)] = 1
    return MultimodalTile(
        tile_id=f"tile_{index:05d}",
        grid=cfg.grid,
        arrays={'vhr': image, 'optical_ts': optical, 'radar_ts': radar},
        timestamps={'optical_ts': optical_days, 'radar_ts': radar_days},
        labels=labels,
        latent=field if cfg.write_latent else None,
    )


def generate_synthetic(cfg, seed):
    """
    Generates `cfg.n_tiles` tiles. Returns (DatasetManifest, tiles); the
    manifest has no splits yet and tile paths under `tiles/`.
    """
    cfg.validate()
    specs = cfg.modality_specs()
    sig = class_signatures(cfg, seed)
    logger.info(f"Generating {cfg.n_tiles} synthetic tiles ({cfg.n_classes} classes, grid {cfg.grid}, seed {seed}).")
    with worker_pool() as pool:
        tiles = list(pool.map(lambda i: generate_tile(cfg, seed, i, sig), range(cfg.n_tiles)))
    manifest = DatasetManifest(
        modalities=specs,
        label_vocab=[f"class_{k}" for k in range(cfg.n_classes)],
        grid_cell_m=float(cfg.grid_cell_m),
        tiles=[(tile.tile_id, f"tiles/{tile.tile_id}.omt") for tile in tiles],
    )
    manifest.validate()
    return manifest, tiles
