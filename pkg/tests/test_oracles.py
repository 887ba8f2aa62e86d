import math

import numpy as np
import pytest

from fedeu import oracles as O
from fedeu.tensor import Tensor, add


@pytest.fixture(scope="module")
def suite():
    return O.run_oracle_suite()


def test_full_suite_passes(suite):
    failed = [r.name for r in suite if not r.passed]
    assert not failed, failed
    names = {r.name for r in suite}
    assert {"bayes_risk_vs_monte_carlo", "kl_vs_quadrature", "kl_uniform_exact_zero"} <= names
    assert {f"grad:{n}" for n in O.GRADIENT_CASES} <= names


def test_report_lists_errors(suite):
    text = O.format_report(suite)
    assert text.splitlines()[-1] == f"{len(suite)}/{len(suite)} oracles passed"
    assert all("max_err=" in line for line in text.splitlines()[:-1])


def test_sign_flipped_kl_fails():
    res = O.kl_oracle(lambda a: -O.closed_kl(a))
    assert not res.passed and res.max_error > 0.1


def test_kl_off_by_constant_fails_zero_check():
    assert not O.kl_zero_oracle(lambda a: O.closed_kl(a) + 1e-12).passed


def test_scaled_bayes_risk_fails():
    res = O.bayes_risk_oracle(lambda a, y: 1.05 * O.closed_bayes_risk(a, y), samples=200_000)
    assert not res.passed


def test_nan_result_is_a_failure():
    assert not O.OracleResult("x", math.nan, 1e-3, 0.0, 1).passed


def test_references_agree_with_closed_forms():
    alpha = np.array([1.7, 1.2, 3.2])
    y = np.array([0.0, 0.0, 1.0])
    mc = O.bayes_risk_monte_carlo(alpha, y, 1_000_000, np.random.default_rng(3))
    assert abs(mc - O.closed_bayes_risk(alpha, y)) < 1e-2
    a2 = np.array([2.0, 5.0])
    assert O.kl_quadrature(a2) == pytest.approx(O.closed_kl(a2), abs=1e-6)


def test_gradient_oracle_detects_a_broken_case(monkeypatch):
    factory, tol = O.GRADIENT_CASES["exp"]

    def broken(rng):
        f, x = factory(rng)
        # a term the tape cannot see: finite differences notice it
        return (lambda t: add(f(t), Tensor(0.1 * float(np.sum(t.data ** 2))))), x
    monkeypatch.setitem(O.GRADIENT_CASES, "exp", (broken, tol))
    assert not O.gradient_oracle("exp").passed
