import dataclasses
import os
import statistics
import sys
import time

import click
import numpy as np

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import SyntheticConfig, TrainConfig
from extensions import configure_logging
from services.splits import stratified_split
from services.storage import load_dataset, save_dataset
from services.synthetic import generate_synthetic
from services.training import finetune, pretrain

# Desk-scale benchmark: 3 modalities, 8 classes, d=64, two fusion blocks.
BENCHMARK = SyntheticConfig(n_classes=8, n_tiles=2000, grid=(3, 3))
SPLIT = {'train': 0.8, 'val': 0.1, 'test': 0.1}
MIN_PRETRAIN_GAIN = 0.03


def base_config(seed, epochs):
    return TrainConfig(d=64, blocks=2, heads=4, ltae_heads=4, ltae_key_dim=8, batch_tiles=64,
                       pretrain_epochs=epochs, finetune_epochs=50, seed=seed)


def dataset(root, seed, tiles):
    if not os.path.exists(os.path.join(root, 'manifest.json')):
        cfg = dataclasses.replace(BENCHMARK, n_tiles=tiles)
        manifest, generated = generate_synthetic(cfg, seed)
        stratified_split(manifest, SPLIT, seed, np.stack([t.labels for t in generated]))
        save_dataset(manifest, generated, root)
    return load_dataset(root)


def f1_of(result):
    return result[1].weighted_f1


@click.command()
@click.option('--out', default='acceptance', show_default=True, help='Working directory.')
@click.option('--seeds', default=3, show_default=True, help='Seeds; medians are taken over them.')
@click.option('--tiles', default=2000, show_default=True, help='Synthetic tiles per seed.')
@click.option('--epochs', default=60, show_default=True, help='Pretraining epochs.')
def run_acceptance(out, seeds, tiles, epochs):
    configure_logging('WARNING')
    print("Starting acceptance experiments...")
    started = time.time()
    gains, fused_scores, best_single = [], [], []

    for seed in range(seeds):
        root = os.path.join(out, f"seed{seed}")
        manifest, store = dataset(os.path.join(root, 'data'), seed, tiles)
        cfg = base_config(seed, epochs)
        fewer = dataclasses.replace(cfg, label_fraction=0.1)

        print(f"[seed {seed}] pretraining for {epochs} epochs")
        ckpt = pretrain(manifest, store, cfg, os.path.join(root, 'pretrain'))
        pretrained = f1_of(finetune(manifest, store, fewer, os.path.join(root, 'ft-lf-0-1'), checkpoint=ckpt))
        scratch = f1_of(finetune(manifest, store, fewer, os.path.join(root, 'ft-lf-0-1-scratch')))
        gains.append(pretrained - scratch)
        print(f" > 10% labels: pretrained {pretrained:.4f}, scratch {scratch:.4f}")

        fused = f1_of(finetune(manifest, store, cfg, os.path.join(root, 'ft-all')))
        singles = {}
        for spec in manifest.modalities:
            single = dataclasses.replace(cfg, modalities=[spec.name])
            singles[spec.name] = f1_of(finetune(manifest, store, single, os.path.join(root, f"ft-{spec.name}")))
        fused_scores.append(fused)
        best_single.append(max(singles.values()))
        print(f" > all modalities {fused:.4f}; " + ", ".join(f"{k} {v:.4f}" for k, v in singles.items()))

    gain = statistics.median(gains)
    fused, single = statistics.median(fused_scores), statistics.median(best_single)
    print(f"Pretraining gain at 10% labels (median): {gain:+.4f} (needs >= {MIN_PRETRAIN_GAIN:+.2f})")
    print(f"All modalities {fused:.4f} vs best single modality {single:.4f} (median)")
    print(f"Finished in {(time.time() - started) / 60:.1f} min.")

    ok = gain >= MIN_PRETRAIN_GAIN and fused >= single
    print("PASSED" if ok else "FAILED")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    run_acceptance()
