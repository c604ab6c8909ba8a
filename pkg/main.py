"""
main.py

Factories for omnifuse: `create_model` builds a model (optionally from a
checkpoint), `create_cli` returns the command group. `python main.py --help`
lists the commands.
"""

import torch

from extensions import configure_logging
from models.omnifuse import OmniFuse
from utils.seeding import derive_seed


# --- Model Factory Function ---

def create_model(specs, cfg, grid_cell_m, max_grid, n_classes=None, state=None):
    """
    Builds an OmniFuse model. Initial weights depend only on `cfg.seed`;
    with `state` (a loaded checkpoint) its parameters are copied in after an
    architecture check.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, 'init'))
        model = OmniFuse(specs, cfg, grid_cell_m, max_grid, n_classes)
    if state is not None:
        from services.checkpoint import restore_model
        restore_model(model, state, strict_head=False)
    return model


# --- Command-line Factory Function ---

def create_cli():
    configure_logging()
    from commands import cli
    return cli


if __name__ == '__main__':
    create_cli()()
