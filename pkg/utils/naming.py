"""
naming.py

Human-readable, filesystem-safe names for runs and report rows.
"""

import os

from slugify import slugify


def run_name(command, ablations=(), label_fraction=None, modalities=None):
    """
    Builds a stable run name such as `finetune-lf-0-1-optical-ts-no-contrastive`.
    The name only depends on its arguments, so re-running a command reuses it.
    """
    parts = [command]
    if label_fraction is not None:
        parts.append(f"lf {label_fraction}")
    if modalities:
        parts.extend(modalities)
    parts.extend(sorted(ablations))
    return slugify(" ".join(parts))


def row_label(run_dir):
    """Report row label for a run directory."""
    return slugify(os.path.basename(os.path.normpath(str(run_dir)))) or "run"
