import pytest
import torch

from services.optim import BETAS, EPS, PlateauScheduler, adam_step, make_optimizer, reduce_on_plateau
from utils.errors import NonFiniteGradientError


def test_single_adam_step_closed_form():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    grad = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
    optimizer = make_optimizer([p], lr=0.01)
    p.grad = grad.clone()
    adam_step(optimizer, [('p', p)])
    # bias-corrected moments after one step are g and g^2
    m_hat = (1 - BETAS[0]) * grad / (1 - BETAS[0])
    v_hat = (1 - BETAS[1]) * grad ** 2 / (1 - BETAS[1])
    expected = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64) - 0.01 * m_hat / (v_hat.sqrt() + EPS)
    assert torch.allclose(p.detach(), expected, atol=1e-12)


def test_non_finite_gradient_rejects_the_step():
    p = torch.nn.Parameter(torch.ones(2))
    q = torch.nn.Parameter(torch.ones(2))
    optimizer = make_optimizer([p, q], lr=0.1)
    p.grad = torch.tensor([float('nan'), 0.0])
    q.grad = torch.ones(2)
    with pytest.raises(NonFiniteGradientError) as excinfo:
        adam_step(optimizer, [('p', p), ('q', q)])
    assert excinfo.value.names == ['p']
    assert torch.equal(p.detach(), torch.ones(2)) and torch.equal(q.detach(), torch.ones(2))
    assert not optimizer.state


def test_plateau_decays_exactly_at_patience():
    scheduler = PlateauScheduler(None, 1.0, patience=3, decay=0.1)
    assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == pytest.approx(0.1)


def test_improvement_resets_the_count():
    history = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5]
    assert reduce_on_plateau(history, 1.0, patience=3) == 1.0
    assert reduce_on_plateau(history + [0.5], 1.0, patience=3) == pytest.approx(0.1)


def test_improvements_below_threshold_do_not_count():
    assert reduce_on_plateau([1.0, 1.0 - 1e-9, 1.0 - 2e-9], 1.0, patience=2) == pytest.approx(0.1)


def test_scheduler_sets_the_optimizer_rate_and_round_trips():
    p = torch.nn.Parameter(torch.ones(1))
    optimizer = make_optimizer([p], lr=1.0)
    scheduler = PlateauScheduler(optimizer, 0.5, patience=1, decay=0.5)
    scheduler.step(1.0)
    scheduler.step(1.0)
    assert optimizer.param_groups[0]['lr'] == 0.25
    copy = PlateauScheduler(make_optimizer([p], lr=1.0), 0.5, patience=1, decay=0.5)
    copy.load_state_dict(scheduler.state_dict())
    assert copy.lr == 0.25 and copy.best == 1.0 and copy.bad_epochs == 0
