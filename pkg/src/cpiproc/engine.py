"""Memory-budget tile planning and a bounded map/reduce executor.

A "device" is nothing more than a :class:`MemoryBudget` (bytes one tile's
buffers may occupy) and a :class:`WorkerPolicy` (tiles in flight). Tiles are
axis-aligned boxes of a row-major index space; a tile range is a tuple of
``(start, stop)`` pairs, one per dimension.
"""

from __future__ import annotations

import math
import os
import re
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

from .errors import BudgetTooSmall, TaskFailure

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kKmMgGtT]?)(i?[bB])?\s*$")
_SIZE_MULT = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_size(text) -> int:
    """``"64M"`` -> 67108864. Suffixes are binary (k = 1024)."""
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"cannot parse byte size {text!r}")
    return int(m.group(1)) * _SIZE_MULT[m.group(2).lower()]


@dataclass(frozen=True)
class MemoryBudget:
    bytes: int

    def __post_init__(self):
        if self.bytes < 1:
            raise BudgetTooSmall(f"budget must be positive, got {self.bytes}")

    @classmethod
    def parse(cls, text) -> "MemoryBudget":
        return cls(parse_size(text))


def default_worker_count() -> int:
    env = os.environ.get("CPI_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class WorkerPolicy:
    worker_count: int = 1
    pinned: bool = False  # reserved

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    @classmethod
    def default(cls) -> "WorkerPolicy":
        return cls(default_worker_count())


@dataclass
class TilePlan:
    problem_dims: tuple
    tile_dims: tuple
    tiles: list
    element_bytes: int

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @staticmethod
    def tile_elements(tile) -> int:
        return math.prod(stop - start for start, stop in tile)

    def tile_bytes(self, tile) -> int:
        return self.tile_elements(tile) * self.element_bytes

    @property
    def max_tile_bytes(self) -> int:
        return max(self.tile_bytes(t) for t in self.tiles)

    @property
    def total_bytes(self) -> int:
        return math.prod(self.problem_dims) * self.element_bytes


def _split(n: int, k: int) -> list:
    """``k`` contiguous ranges covering ``range(n)``, lengths differing by at most one."""
    base, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


def _candidate_sizes(n: int) -> list:
    """Every tile extent worth trying along an axis of length ``n``, largest first.

    For ``k`` tiles the smallest sufficient extent is ceil(n / k); those values
    are covered by k <= isqrt(n) + 1 plus all extents up to isqrt(n) + 1.
    """
    r = math.isqrt(n)
    sizes = {-(-n // k) for k in range(1, r + 2)} | set(range(1, min(n, r + 1) + 1))
    return sorted(sizes, reverse=True)


def plan_tiles(
    problem_dims: Sequence[int],
    element_bytes: int,
    budget: MemoryBudget,
    splittable: int | None = None,
) -> TilePlan:
    """Fewest-tile grid decomposition whose every tile fits ``budget``.

    Only the leading ``splittable`` dimensions may be cut (default: all).
    Among plans with the minimal tile count, the one that keeps the inner
    dimensions largest wins, i.e. dimensions are split outermost first.
    """
    dims = tuple(int(d) for d in problem_dims)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    if element_bytes < 1:
        raise ValueError("element_bytes must be >= 1")
    if isinstance(budget, int):
        budget = MemoryBudget(budget)
    nsplit = len(dims) if splittable is None else max(0, min(splittable, len(dims)))
    cap = budget.bytes // element_bytes  # elements per tile

    fixed = math.prod(dims[nsplit:])
    min_elems = fixed  # every splittable dim cut to 1
    if min_elems > cap:
        raise BudgetTooSmall(
            f"smallest tile needs {min_elems * element_bytes} bytes, budget is {budget.bytes}"
        )

    if nsplit == 0:
        best_sizes = ()
    else:
        # enumerate tile extents of the inner splittable dims; the outermost one
        # then takes as many rows as fit
        inner_choices = [_candidate_sizes(d) for d in dims[1:nsplit]]
        best_key, best_sizes = None, None
        for inner in product(*inner_choices):
            per_row = math.prod(inner) * fixed
            if per_row > cap:
                continue
            t0 = min(dims[0], cap // per_row)
            sizes = (t0,) + inner
            count = math.prod(-(-d // t) for d, t in zip(dims, sizes))
            # tie-break: prefer large inner extents (lexicographically from the innermost)
            key = (count, tuple(-t for t in reversed(sizes)))
            if best_key is None or key < best_key:
                best_key, best_sizes = key, sizes
        if best_sizes is None:
            raise BudgetTooSmall(f"no tiling of {dims} fits {budget.bytes} bytes")

    counts = [-(-d // t) for d, t in zip(dims, best_sizes)]
    axes = [_split(d, k) for d, k in zip(dims, counts)]
    axes += [[(0, d)] for d in dims[nsplit:]]
    tiles = [tuple(r) for r in product(*axes)]
    tile_dims = tuple(max(b - a for a, b in ax) for ax in axes)
    return TilePlan(dims, tile_dims, tiles, element_bytes)


@dataclass
class ExecutionStats:
    tiles_run: int = 0
    peak_inflight: int = 0
    peak_inflight_bytes: int = 0
    _inflight: int = 0
    _inflight_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def enter(self, nbytes):
        with self._lock:
            self._inflight += 1
            self._inflight_bytes += nbytes
            self.peak_inflight = max(self.peak_inflight, self._inflight)
            self.peak_inflight_bytes = max(self.peak_inflight_bytes, self._inflight_bytes)

    def leave(self, nbytes):
        with self._lock:
            self._inflight -= 1
            self._inflight_bytes -= nbytes
            self.tiles_run += 1


def execute_map_reduce(
    plan: TilePlan,
    policy: WorkerPolicy,
    tile_task: Callable,
    combine: Callable,
    initial,
    ordered: bool = False,
    budget: MemoryBudget | None = None,
    stats: ExecutionStats | None = None,
):
    """Run ``tile_task`` on every tile and fold results with ``combine``.

    At most ``policy.worker_count`` tiles are in flight; when ``budget`` is
    given, also no more than fit in it side by side. ``ordered=True`` folds in
    plan order (needed when ``combine`` is not associative-commutative),
    otherwise in completion order. The first failing tile aborts the run:
    nothing new is submitted and :class:`TaskFailure` is raised.
    """
    stats = stats if stats is not None else ExecutionStats()
    if not plan.tiles:
        return initial
    limit = policy.worker_count
    if budget is not None:
        limit = max(1, min(limit, budget.bytes // max(1, plan.max_tile_bytes)))

    def run(tile):
        nbytes = plan.tile_bytes(tile)
        stats.enter(nbytes)
        try:
            return tile_task(tile)
        finally:
            stats.leave(nbytes)

    acc = initial
    if limit == 1:
        for tile in plan.tiles:
            try:
                result = run(tile)
            except Exception as exc:
                raise TaskFailure(tile, exc) from exc
            acc = combine(acc, result)
        return acc

    pending_results = {}
    next_to_fold = 0
    with ThreadPoolExecutor(max_workers=limit) as pool:
        inflight = {}
        tiles = iter(enumerate(plan.tiles))
        exhausted = False
        failure = None
        while True:
            while not exhausted and failure is None and len(inflight) < limit:
                try:
                    idx, tile = next(tiles)
                except StopIteration:
                    exhausted = True
                    break
                inflight[pool.submit(run, tile)] = (idx, tile)
            if not inflight:
                break
            done, _ = wait(inflight, return_when=FIRST_COMPLETED)
            for fut in done:
                idx, tile = inflight.pop(fut)
                exc = fut.exception()
                if exc is not None:
                    if failure is None:
                        failure = TaskFailure(tile, exc)
                        failure.__cause__ = exc
                    continue
                if failure is not None:
                    continue
                if ordered:
                    pending_results[idx] = fut.result()
                    while next_to_fold in pending_results:
                        acc = combine(acc, pending_results.pop(next_to_fold))
                        next_to_fold += 1
                else:
                    acc = combine(acc, fut.result())
        if failure is not None:
            raise failure
    return acc
