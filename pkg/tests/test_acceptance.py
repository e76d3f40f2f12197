"""One test per acceptance criterion, at the stated tolerances."""

import pytest

from ccbm import verify


def _run(check, report):
    res = check()
    report(res)
    assert res.passed, res.line()


def test_1_forward_solver(report):
    _run(verify.check_forward, report)


def test_2_shape_gradient(report):
    _run(verify.check_shape_gradient, report)


def test_3_material_derivative(report):
    _run(verify.check_material_derivative, report)


def test_4_equivalence_at_truth(report):
    _run(verify.check_truth_equivalence, report)


@pytest.mark.slow
def test_5_reconstruction(report):
    _run(verify.check_reconstruction, report)


@pytest.mark.slow
def test_6_admm_vs_conventional(report):
    _run(verify.check_admm, report)


def test_7_descent_identity(report):
    _run(verify.check_descent, report)


def test_8_admm_algebra(report):
    _run(verify.check_admm_algebra, report)


@pytest.mark.slow
def test_9_determinism(report):
    _run(verify.check_determinism, report)
