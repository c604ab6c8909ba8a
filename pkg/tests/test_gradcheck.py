import pytest
import torch

from services.verification import check_gradients, check_unpool_placement, check_date_filter
from utils.gradcheck import gradient_check, relative_error, sample_budget


def small_regression():
    torch.manual_seed(0)
    layer = torch.nn.Linear(3, 2).double()
    x = torch.randn(5, 3, dtype=torch.float64)
    y = torch.randn(5, 2, dtype=torch.float64)
    return layer, lambda: ((torch.tanh(layer(x)) - y) ** 2).sum()


def test_autograd_agrees_with_finite_differences():
    layer, loss = small_regression()
    report = gradient_check(layer.named_parameters(), loss)
    assert report.passed, report.summary()
    assert report.checked == 8 and report.max_rel_error < 1e-6


def test_a_wrong_gradient_is_caught_and_named():
    layer, loss = small_regression()
    report = gradient_check(layer.named_parameters(), loss,
                            grad_transform=lambda name, g: g * 1.5 if name == 'bias' else g)
    assert report.failing == ['bias']
    assert report.per_parameter['weight'] < 1e-6


def test_sampling_caps_the_entries_checked():
    layer = torch.nn.Linear(50, 40).double()
    x = torch.randn(2, 50, dtype=torch.float64)
    report = gradient_check(layer.named_parameters(), lambda: layer(x).pow(2).sum(), max_samples=100)
    assert report.checked <= 100 and report.passed


def test_many_small_tensors_stay_within_the_cap():
    params = [(f"p{i}", torch.randn(2, dtype=torch.float64, requires_grad=True)) for i in range(300)]
    report = gradient_check(params, lambda: sum((p ** 2).sum() for _, p in params), max_samples=100)
    assert report.checked == 100 and report.passed
    assert sample_budget([2] * 300, 100).sum() == 100
    assert sample_budget([5, 1000], 50).tolist() == [1, 49]


def test_parameters_are_restored_after_checking():
    layer, loss = small_regression()
    before = [p.detach().clone() for p in layer.parameters()]
    gradient_check(layer.named_parameters(), loss)
    assert all(torch.equal(a, b) for a, b in zip(before, layer.parameters()))


def test_relative_error_has_a_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_model_gradient_checks_pass():
    results = check_gradients()
    assert [r.name for r in results] == ['grad_contrastive', 'grad_reconstruction', 'grad_image_codec',
                                         'grad_temporal_codec', 'grad_fusion', 'grad_full_model']
    for result in results:
        assert result.passed, f"{result.name}: {result.detail}"


def test_injected_gradient_fault_fails_one_check():
    failing = [r.name for r in check_gradients(fault='grad') if not r.passed]
    assert failing == ['grad_image_codec']


def test_unpool_and_date_checks_pass():
    assert check_unpool_placement().passed
    result = check_date_filter(25)
    assert result.passed and result.cases == 100
