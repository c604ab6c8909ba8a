import pytest

from services.verification import FAULTS, check_closed_forms, run_verification


def test_all_checks_pass():
    report = run_verification(seeds=5)
    assert report.passed, report.failing
    names = [check.name for check in report.checks]
    assert names[:3] == ['match_matrix_oracle', 'contrastive_closed_form', 'loss_oracles']
    assert names[-3:] == ['unpool_placement', 'date_filter', 'fusion_invariants']
    assert report.lines()[-1].startswith(f"{len(names)}/{len(names)} checks passed")


def test_seed_count_sets_the_oracle_cases():
    report = run_verification(seeds=7)
    cases = {check.name: check.cases for check in report.checks}
    assert cases['match_matrix_oracle'] == 7
    assert cases['date_filter'] == 28


def test_match_fault_is_reported():
    report = run_verification(seeds=2, inject_fault='match')
    assert report.failing == ['match_matrix_oracle']
    assert any(line.startswith('FAIL  match_matrix_oracle') for line in report.lines())


def test_unknown_fault_is_rejected():
    assert 'grad' in FAULTS
    with pytest.raises(ValueError):
        run_verification(seeds=1, inject_fault='cosmic-ray')


def test_closed_forms():
    result = check_closed_forms()
    assert result.passed, result.detail
