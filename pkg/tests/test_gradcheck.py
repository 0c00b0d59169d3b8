import time

import pytest

from xdr.gradcheck import SUITES, TOLERANCE, run_all, run_suite


def test_all_suites_pass_quickly():
    t0 = time.perf_counter()
    results = run_all(seed=0)
    assert time.perf_counter() - t0 < 60
    assert {r.suite for r in results} == set(SUITES)
    bad = [(r.suite, r.block, r.max_rel_error) for r in results if not r.passed]
    assert not bad
    assert all(r.tolerance == TOLERANCE for r in results)


@pytest.mark.parametrize("seed", [1, 2])
def test_other_seeds(seed):
    assert all(r.passed for r in run_all(seed=seed))


def test_injected_bug_is_caught():
    results = run_all(seed=0, inject_bug=True)
    assert results and not any(r.passed for r in results)


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown gradient suite"):
        run_suite("lstm")
