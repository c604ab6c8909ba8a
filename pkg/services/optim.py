"""
optim.py

Adam with a finite-gradient guard, and a reduce-on-plateau learning-rate
scheduler driven by validation losses.
"""

import logging

import torch

from utils.errors import NonFiniteGradientError

logger = logging.getLogger('omnifuse.training')

BETAS = (0.9, 0.999)
EPS = 1e-8


def make_optimizer(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=BETAS, eps=EPS)


def adam_step(optimizer, named_params):
    """
    Checks every gradient for NaN/inf, then applies one Adam update. A
    non-finite gradient rejects the whole step and leaves parameters and
    moments untouched.
    """
    bad = [name for name, p in named_params
           if p.grad is not None and not bool(torch.isfinite(p.grad).all())]
    if bad:
        logger.error(f"Rejected optimizer step: non-finite gradient in {', '.join(bad)}")
        raise NonFiniteGradientError(bad)
    optimizer.step()


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group['lr'] = lr


class PlateauScheduler:
    """
    Multiplies the learning rate by `decay` once the validation loss has not
    improved on its best value by more than `threshold` for `patience`
    consecutive epochs. An improvement, or a decay, resets the count.
    """

    def __init__(self, optimizer, lr, patience=10, decay=0.1, threshold=1e-6):
        self.optimizer = optimizer
        self.lr = lr
        self.patience = patience
        self.decay = decay
        self.threshold = threshold
        self.best = float('inf')
        self.bad_epochs = 0
        if optimizer is not None:
            set_lr(optimizer, lr)

    def step(self, loss):
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.decay
            self.bad_epochs = 0
            logger.info(f"Validation loss plateaued at {self.best:.6f}; learning rate now {self.lr:.3g}.")
            if self.optimizer is not None:
                set_lr(self.optimizer, self.lr)
        return self.lr

    def state_dict(self):
        return {'lr': self.lr, 'best': self.best, 'bad_epochs': self.bad_epochs,
                'patience': self.patience, 'decay': self.decay, 'threshold': self.threshold}

    def load_state_dict(self, state):
        self.lr = float(state['lr'])
        self.best = float(state['best'])
        self.bad_epochs = int(state['bad_epochs'])
        if self.optimizer is not None:
            set_lr(self.optimizer, self.lr)


def reduce_on_plateau(history, lr, patience=10, decay=0.1, threshold=1e-6):
    """Learning rate after replaying a whole validation-loss history."""
    scheduler = PlateauScheduler(None, lr, patience, decay, threshold)
    for loss in history:
        scheduler.step(loss)
    return scheduler.lr
