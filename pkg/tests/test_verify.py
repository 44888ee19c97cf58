from __future__ import annotations

import numpy as np
import pytest

from tensql.graph_ir import CATEGORIES
from tensql.verify import CHUNK_SIZES, check_category, conv_grid, generate_instances, output_error


@pytest.mark.parametrize("category", CATEGORIES)
def test_small_suite(category):
    r = check_category(category, count=8, seed=5)
    assert r.passed, r.failures


def test_instances_are_reproducible():
    a = generate_instances("matmul", 5, seed=1)
    b = generate_instances("matmul", 5, seed=1)
    assert [i.tensors for i in a] == [i.tensors for i in b]
    assert all(np.array_equal(x.inputs[k], y.inputs[k]) for x, y in zip(a, b) for k in x.inputs)


def test_generators_use_every_chunk_size():
    seen = {t["chunk_size"] for c in CATEGORIES for i in generate_instances(c, 100) for t in i.tensors}
    assert seen == set(CHUNK_SIZES)


def test_dims_and_values_in_range():
    for c in CATEGORIES:
        for inst in generate_instances(c, 50):
            for v in list(inst.inputs.values()) + list(inst.weights.values()):
                assert np.abs(v).max() <= 2.0


def test_output_error_counts_missing_rows_as_zero():
    got = np.array([[1.0, 2.0], [9.0, 9.0]])
    mask = np.array([[True, True], [False, False]])
    assert output_error(got, mask, np.array([[1.0, 2.0], [0.5, 0.0]])) == 0.5


def test_conv_grid_bounds():
    grid = conv_grid()
    assert {c.kernel for c in grid} == {1, 3, 5, 7}
    assert max(c.channels for c in grid) <= 32 and max(c.size for c in grid) <= 32
