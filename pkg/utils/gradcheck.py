"""
gradcheck.py

Central finite-difference check of autograd gradients. Meant for float64
models; float32 differences at h=1e-5 are mostly noise.
"""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch

from utils.seeding import numpy_rng

FLOOR = 1e-5


@dataclass
class GradientReport:
    tolerance: float
    checked: int = 0
    max_rel_error: float = 0.0
    per_parameter: Dict[str, float] = field(default_factory=dict)
    failing: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return not self.failing

    def summary(self):
        status = "ok" if self.passed else f"FAILED {', '.join(self.failing)}"
        return f"{self.checked} entries, max rel. error {self.max_rel_error:.2e} (tol {self.tolerance:g}): {status}"


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def sample_budget(sizes, max_samples):
    """
    Entries to check per parameter: proportional to size, at least one per
    parameter while the cap allows it, never more than `max_samples` in all.
    Over the cap, the largest quotas give back one entry at a time.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    share = np.floor(max_samples * sizes / max(1, sizes.sum()))
    budget = np.minimum(sizes, np.maximum(1, share)).astype(np.int64)
    for _ in range(max(0, int(budget.sum()) - max_samples)):
        budget[int(np.argmax(budget))] -= 1
    return budget


def gradient_check(named_params, loss_fn, tolerance=1e-3, max_samples=1000, h=1e-5, seed=0,
                   grad_transform=None):
    """
    Compares d loss / d param from autograd with (L(p+h) - L(p-h)) / 2h on
    at most `max_samples` parameter entries, spread over the parameters in
    proportion to their size. `grad_transform(name, grad)` may rewrite the
    analytic gradient before comparison (fault injection).
    """
    named_params = [(name, p) for name, p in named_params if p.requires_grad]
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"Loss is not finite: {float(loss)}")
    grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)

    sizes = np.array([p.numel() for _, p in named_params])
    budget = sample_budget(sizes, max_samples)
    rng = numpy_rng(seed, 'gradcheck')
    report = GradientReport(tolerance)

    for (name, p), grad, quota in zip(named_params, grads, budget):
        if quota == 0:
            continue
        analytic = torch.zeros_like(p) if grad is None else grad.detach().clone()
        if grad_transform is not None:
            analytic = grad_transform(name, analytic)
        if not torch.isfinite(analytic).all():
            raise FloatingPointError(f"Non-finite analytic gradient for '{name}'.")
        flat = p.data.view(-1)
        entries = rng.choice(flat.numel(), size=min(quota, flat.numel()), replace=False)
        worst = 0.0
        for i in entries:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                up = float(loss_fn())
                flat[i] = original - h
                down = float(loss_fn())
                flat[i] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"Non-finite loss while perturbing '{name}'[{i}].")
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic.view(-1)[i].item(), numeric))
        report.checked += len(entries)
        report.per_parameter[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        if worst > tolerance:
            report.failing.append(name)
    return report
