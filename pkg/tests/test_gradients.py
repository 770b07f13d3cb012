"""Finite-difference checks of every differentiable block, 20 seeds each."""

import time

import pytest

from imo.gradsuite import BLOCKS, DEFAULT_SEEDS, PRIMITIVES, TOLERANCE, check_block, check_primitive, run_suite


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    worst = max(check_primitive(name, s) for s in range(DEFAULT_SEEDS))
    assert worst < TOLERANCE


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_gradients(name):
    stats = {}
    worst = max(check_block(name, s, stats) for s in range(DEFAULT_SEEDS))
    assert worst < TOLERANCE
    # redrawn directions are rare; many would mean the check lost its teeth
    assert stats.get("redrawn", 0) <= DEFAULT_SEEDS


def test_suite_fits_the_time_budget():
    t0 = time.perf_counter()
    rows = run_suite()
    assert time.perf_counter() - t0 < 120
    assert len(rows) == len(PRIMITIVES) + len(BLOCKS)
