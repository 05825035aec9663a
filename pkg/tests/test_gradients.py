"""Finite-difference verification of every differentiable primitive."""

import numpy as np
import pytest

from gradcheck import check_gradients
from grad_cases import ALL_CASES

N_CASES = 20


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_primitive_matches_finite_differences(name):
    make_case = ALL_CASES[name]
    for case_index in range(N_CASES):
        rng = np.random.default_rng(1000 * case_index + hash(name) % 1000)
        build, arrays = make_case(rng)
        check_gradients(build, arrays)
