import itertools
import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpiproc.engine import (
    ExecutionStats,
    MemoryBudget,
    WorkerPolicy,
    default_worker_count,
    execute_map_reduce,
    parse_size,
    plan_tiles,
)
from cpiproc.errors import BudgetTooSmall, TaskFailure

from oracles import best_plan_bruteforce

GiB = 1 << 30


def test_parse_size_binary_suffixes():
    assert parse_size("64M") == 64 << 20
    assert parse_size("1G") == GiB
    assert parse_size("3k") == 3072
    assert parse_size("17") == 17
    assert MemoryBudget.parse("2GiB").bytes == 2 * GiB
    with pytest.raises(ValueError):
        parse_size("lots")


def test_budget_must_be_positive():
    with pytest.raises(BudgetTooSmall):
        MemoryBudget(0)


def test_worker_policy_validation_and_env(monkeypatch):
    with pytest.raises(ValueError):
        WorkerPolicy(0)
    monkeypatch.setenv("CPI_WORKERS", "3")
    assert default_worker_count() == 3
    assert WorkerPolicy.default().worker_count == 3


def test_plan_256_to_the_fourth_in_2_gib():
    plan = plan_tiles([256] * 4, 4, MemoryBudget(2 * GiB))
    assert plan.n_tiles == 8
    assert plan.tile_dims == (32, 256, 256, 256)
    assert plan.max_tile_bytes == 2 * GiB


def test_plan_fits_whole():
    plan = plan_tiles([16] * 4, 8, MemoryBudget(1 << 20))
    assert plan.n_tiles == 1
    assert plan.tiles == [((0, 16),) * 4]


def test_plan_4x4_in_16_bytes():
    plan = plan_tiles([4, 4], 8, MemoryBudget(16))
    assert plan.n_tiles == 8
    assert all(plan.tile_elements(t) == 2 for t in plan.tiles)
    assert plan.n_tiles == best_plan_bruteforce([4, 4], 8, 16)


def test_plan_too_small_budget():
    with pytest.raises(BudgetTooSmall):
        plan_tiles([4, 4], 8, MemoryBudget(7))
    with pytest.raises(BudgetTooSmall):
        plan_tiles([4, 4], 8, MemoryBudget(16), splittable=1)


def test_plan_rejects_bad_dims():
    with pytest.raises(ValueError):
        plan_tiles([0, 3], 1, MemoryBudget(10))
    with pytest.raises(ValueError):
        plan_tiles([3], 0, MemoryBudget(10))


def test_plan_is_deterministic():
    a = plan_tiles([37, 11, 5], 8, MemoryBudget(1000))
    b = plan_tiles([37, 11, 5], 8, MemoryBudget(1000))
    assert a == b


def _covered(plan):
    seen = {}
    for tile in plan.tiles:
        for idx in itertools.product(*(range(s, e) for s, e in tile)):
            seen[idx] = seen.get(idx, 0) + 1
    return seen


dims_st = st.lists(st.integers(1, 9), min_size=1, max_size=3)


@given(dims_st, st.integers(1, 8), st.integers(1, 4000))
def test_plan_covers_exactly_and_fits(dims, eb, budget):
    if eb > budget:
        with pytest.raises(BudgetTooSmall):
            plan_tiles(dims, eb, MemoryBudget(budget))
        return
    plan = plan_tiles(dims, eb, MemoryBudget(budget))
    seen = _covered(plan)
    assert len(seen) == math.prod(dims)
    assert set(seen.values()) == {1}
    assert plan.max_tile_bytes <= budget


@given(dims_st, st.integers(1, 8), st.integers(1, 2000))
def test_plan_is_coarsest(dims, eb, budget):
    if eb > budget:
        return
    plan = plan_tiles(dims, eb, MemoryBudget(budget))
    assert plan.n_tiles == best_plan_bruteforce(dims, eb, budget)


@given(dims_st, st.integers(1, 8), st.integers(1, 2000), st.integers(1, 2000))
def test_plan_monotone_in_budget(dims, eb, b1, b2):
    lo, hi = sorted((b1, b2))
    if eb > lo:
        return
    assert plan_tiles(dims, eb, MemoryBudget(lo)).n_tiles >= plan_tiles(dims, eb, MemoryBudget(hi)).n_tiles


def test_plan_splits_outermost_first():
    plan = plan_tiles([8, 8, 8], 1, MemoryBudget(128))
    assert plan.tile_dims == (2, 8, 8)


def test_splittable_limits_cut_dims():
    plan = plan_tiles([10, 6], 8, MemoryBudget(6 * 8 * 3), splittable=1)
    assert plan.tile_dims == (3, 6)
    assert all(t[1] == (0, 6) for t in plan.tiles)


# -- executor -----------------------------------------------------------------

def _count(tile):
    return math.prod(e - s for s, e in tile)


def test_counting_identity():
    plan = plan_tiles([8, 8], 8, MemoryBudget(64))
    assert plan.n_tiles == 8
    total = execute_map_reduce(plan, WorkerPolicy(3), _count, lambda a, b: a + b, 0)
    assert total == 64


def test_single_worker_equals_sequential_loop():
    plan = plan_tiles([20, 3], 8, MemoryBudget(48))
    seq = []
    for t in plan.tiles:
        seq.append(t)
    out = execute_map_reduce(plan, WorkerPolicy(1), lambda t: t, lambda a, b: a + [b], [])
    assert out == seq


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_results_identical_across_worker_counts(seed, n):
    values = np.random.default_rng(seed).integers(0, 2**40, n)
    plan = plan_tiles([n], 8, MemoryBudget(8))

    def task(tile):
        (s, e), = tile
        return int(values[s:e].sum()) * 7 + s

    outs = {
        w: execute_map_reduce(plan, WorkerPolicy(w), task, lambda a, b: a + b, 0)
        for w in (1, 2, 8)
    }
    assert len(set(outs.values())) == 1


def test_ordered_mode_folds_in_plan_order():
    plan = plan_tiles([12], 1, MemoryBudget(1))

    def task(tile):
        (s, _), = tile
        time.sleep(0.001 * (12 - s))  # later tiles finish first
        return s

    out = execute_map_reduce(plan, WorkerPolicy(4), task, lambda a, b: a + [b], [], ordered=True)
    assert out == list(range(12))


def test_inflight_limited_by_workers_and_budget():
    plan = plan_tiles([16], 100, MemoryBudget(100))
    stats = ExecutionStats()
    gate = threading.Event()

    def task(tile):
        gate.wait(0.01)
        return 1

    execute_map_reduce(plan, WorkerPolicy(8), task, lambda a, b: a + b, 0, stats=stats)
    assert stats.peak_inflight <= 8
    assert stats.tiles_run == 16
    stats = ExecutionStats()
    execute_map_reduce(plan, WorkerPolicy(8), task, lambda a, b: a + b, 0,
                       budget=MemoryBudget(250), stats=stats)
    assert stats.peak_inflight <= 2
    assert stats.peak_inflight_bytes <= 250


@pytest.mark.parametrize("workers", [1, 4])
def test_first_failure_aborts(workers):
    plan = plan_tiles([40], 1, MemoryBudget(1))
    started = []
    lock = threading.Lock()

    def task(tile):
        with lock:
            started.append(tile)
        if tile == ((3, 4),):
            raise RuntimeError("boom")
        time.sleep(0.002)
        return 1

    with pytest.raises(TaskFailure) as info:
        execute_map_reduce(plan, WorkerPolicy(workers), task, lambda a, b: a + b, 0)
    assert info.value.tile == ((3, 4),)
    assert isinstance(info.value.cause, RuntimeError)
    assert len(started) < 40
    assert len(started) <= 4 + workers


def test_every_tile_runs_once():
    plan = plan_tiles([7, 5], 8, MemoryBudget(16))
    seen = []
    lock = threading.Lock()

    def task(tile):
        with lock:
            seen.append(tile)
        return 0

    execute_map_reduce(plan, WorkerPolicy(4), task, lambda a, b: a, 0)
    assert sorted(seen) == sorted(plan.tiles)
