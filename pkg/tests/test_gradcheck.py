import numpy as np
import pytest

from bistrain.gradcheck import (GRADCHECK_EPSILON, TERMS, batched_loss, random_problem,
                                run_gradcheck)
from bistrain.loss import LossWeights, total_loss
from bistrain.warp import BiDisplacement


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_matches_loss(seed):
    i1, i2, fields = random_problem(seed)
    for weights in (LossWeights(), LossWeights(lam=1.0, gamma=1.0, epsilon=GRADCHECK_EPSILON)):
        ref = total_loss(i1, i2, BiDisplacement.from_stack(fields), weights)
        got = batched_loss(i1, i2, fields[None], weights)
        for term in TERMS:
            assert got[term][0] == pytest.approx(getattr(ref, term), rel=1e-12)


@pytest.mark.parametrize("seed", [3, 4])
def test_gradcheck_passes(seed):
    report = run_gradcheck(seed)
    assert report.passed(), report.format()


def test_gradcheck_default_epsilon_small_step():
    report = run_gradcheck(5, weights=LossWeights(lam=1.0, gamma=1.0), h=1e-6)
    assert report.passed(), report.format()


def test_gradcheck_larger_frame():
    assert run_gradcheck(6, shape=(20, 14)).passed()


def test_perturbed_gradient_fails():
    report = run_gradcheck(0, perturb=0.01)
    assert not report.passed()
    assert all(err > 1e-3 for err in report.max_rel_error.values())


def test_report_deterministic():
    assert run_gradcheck(7).format() == run_gradcheck(7).format()


def test_problem_avoids_nodes():
    _, _, fields = random_problem(9)
    frac = np.abs(fields - np.round(fields))
    assert frac.min() >= 1e-3
