import math

import numpy as np
import pytest

from texsplat.gradcheck import CheckReport, check_all, check_array, finite_diff, make_fixture, reports_csv, reports_text


def test_finite_diff_quadratic():
    assert finite_diff(lambda x: float(x[0] ** 2), np.array([3.0]), 0, 1e-5) == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_sine():
    h = 1e-3
    assert abs(finite_diff(lambda x: math.sin(x[0]), np.array([0.0]), 0, h) - 1.0) <= h * h


def test_finite_diff_does_not_mutate_and_checks_finiteness():
    x = np.array([1.0, 2.0])
    finite_diff(lambda v: float(np.sum(v ** 3)), x, 1, 1e-4)
    assert list(x) == [1.0, 2.0]
    with pytest.raises(FloatingPointError):
        finite_diff(lambda v: float("nan"), x, 0, 1e-4)
    with pytest.raises(ValueError):
        finite_diff(lambda v: 0.0, x, 0, 0.0)


def test_check_array_detects_errors():
    x = np.linspace(-1, 1, 6)
    good = check_array("toy", "x", lambda v: float(np.sum(np.sin(v))), x, np.cos(x))
    assert good.passed and good.failing == [] and good.max_rel < 1e-6
    bad_grad = np.cos(x)
    bad_grad[[1, 4]] *= -1
    bad = check_array("toy", "x", lambda v: float(np.sum(np.sin(v))), x, bad_grad)
    assert not bad.passed and bad.failing == [(1,), (4,)]
    assert bad.max_rel > 0 and bad.max_abs > 0


def test_report_invariants():
    r = CheckReport("op", "g", 0.0, 0.0, [], 1e-4)
    assert r.passed and "PASS" in r.line()
    r = CheckReport("op", "g", 0.5, 0.1, [3], 1e-4)
    assert not r.passed and "FAIL" in r.line()


def test_seeded_fixture_passes_everything():
    reports = check_all(make_fixture(11))
    groups = {(r.op, r.group) for r in reports}
    for g in ("position", "raw_scale", "rotation", "raw_opacity", "color", "raw_ti"):
        assert ("render", g) in groups
    assert {op for op, _ in groups} == {"render", "losses", "encoding", "deformation"}
    for r in reports:
        assert r.passed, r.line()
        assert r.max_rel >= 0 and r.max_abs >= 0


def test_zero_head_fixture_passes():
    fx = make_fixture(11, zero_head=True)
    assert all(r.passed for r in check_all(fx, ops=["deformation"]))


@pytest.mark.parametrize("op", ["render", "losses", "encoding", "deformation"])
def test_corrupted_backward_fails(op):
    reports = check_all(make_fixture(11), ops=[op], corrupt=op)
    failed = [r for r in reports if not r.passed]
    assert failed and all(r.failing for r in failed)


def test_report_rendering():
    reports = check_all(make_fixture(11), ops=["encoding"])
    text = reports_text(reports)
    assert text.count("\n") >= len(reports)
    csv = reports_csv(reports).splitlines()
    assert len(csv) == len(reports) + 1
