import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpiproc.engine import ExecutionStats, MemoryBudget, WorkerPolicy
from cpiproc.errors import DegenerateAlpha, EmptyAngularGrid
from cpiproc.frame_io import read_pgm
from cpiproc.refocus import (
    CLAMP,
    SKIP,
    Grid,
    RefocusMap,
    RefocusSpec,
    corner_weights,
    interp4,
    read_stack,
    refocus_plane,
    refocus_stack,
    sharpness,
    write_stack,
)

from oracles import default_coefficients, dense_refocus, sharpness_by_hand


def _delta(dims, at):
    g = np.zeros(dims)
    g[at] = 1.0
    return g


# -- map and spec --------------------------------------------------------------

def test_default_map_is_identity_at_one():
    assert RefocusMap().coefficients(1.0) == (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    assert RefocusMap().coefficients(0.5) == default_coefficients(0.5)


def test_map_parse_sets_a_arm():
    m = RefocusMap.parse("0,1,1,-1,0,0")
    assert m == RefocusMap()
    with pytest.raises(ValueError):
        RefocusMap.parse("1,2,3")


def test_alpha_zero_is_degenerate_under_default_map():
    with pytest.raises(DegenerateAlpha):
        RefocusMap().check_alpha(0.0)
    with pytest.raises(DegenerateAlpha):
        refocus_plane(np.zeros((2, 2, 2, 2)), 0.0, RefocusMap(), RefocusSpec([0.0]))


def test_spec_validation():
    with pytest.raises(ValueError):
        RefocusSpec([])
    with pytest.raises(ValueError):
        RefocusSpec([float("nan")])
    with pytest.raises(ValueError):
        RefocusSpec([1.0], boundary_policy="wrap")
    assert RefocusSpec([1.0], boundary_policy="skip").boundary_policy == SKIP


def test_empty_angular_grid():
    spec = RefocusSpec([1.0], angular_grid=Grid(0, 3))
    with pytest.raises(EmptyAngularGrid):
        refocus_plane(np.ones((3, 3, 3, 3)), 1.0, RefocusMap(), spec)
    with pytest.raises(EmptyAngularGrid):
        refocus_stack(np.ones((3, 3, 3, 3)), spec)


# -- interp4 ------------------------------------------------------------------

def test_interp_exact_at_lattice(rng):
    g = rng.random((4, 5, 3, 2))
    assert interp4(g, (2, 3, 1, 0)) == g[2, 3, 1, 0]
    for idx in np.ndindex(g.shape):
        assert interp4(g, idx) == g[idx]


def test_interp_constant_tensor(rng):
    g = np.full((3, 3, 3, 3), 0.7)
    for _ in range(50):
        c = rng.random(4) * 2
        assert interp4(g, c) == pytest.approx(0.7, abs=1e-15)


def test_interp_midpoint():
    g = np.zeros((2, 1, 1, 1))
    g[1, 0, 0, 0] = 1.0
    assert interp4(g, (0.5, 0, 0, 0)) == 0.5


def test_interp_boundary_policies():
    g = np.arange(16.0).reshape(2, 2, 2, 2)
    assert math.isnan(interp4(g, (1.5, 0, 0, 0), SKIP))
    assert interp4(g, (1.5, 0, 0, 0), CLAMP) == g[1, 0, 0, 0]
    assert interp4(g, (-3, 1, 1, 1), CLAMP) == g[0, 1, 1, 1]


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_corner_weights_partition_of_unity(frac):
    w = corner_weights(frac)
    assert w.shape == (16,)
    assert abs(w.sum() - 1.0) <= 1e-15


@given(st.lists(st.floats(0, 2.999), min_size=4, max_size=4), st.integers(0, 2**32 - 1))
def test_interp_is_weighted_corner_sum(coord, seed):
    g = np.random.default_rng(seed).random((4, 4, 4, 4))
    lo = [int(math.floor(c)) for c in coord]
    t = [c - l for c, l in zip(coord, lo)]
    w = corner_weights(t).reshape(2, 2, 2, 2)
    want = 0.0
    for idx in np.ndindex(2, 2, 2, 2):
        want += w[idx] * g[tuple(l + i for l, i in zip(lo, idx))]
    assert interp4(g, coord) == pytest.approx(want, abs=1e-13)


# -- refocus_plane --------------------------------------------------------------

def test_alpha_one_is_angular_mean(rng):
    g = rng.standard_normal((6, 5, 4, 3))
    out = refocus_plane(g, 1.0, RefocusMap(), RefocusSpec([1.0]))
    want = np.empty((4, 6))
    for m in range(4):
        for j in range(6):
            acc = 0.0
            for n in range(3):
                for k in range(5):
                    acc += g[j, k, m, n]
            want[m, j] = acc / 15
    assert np.array_equal(out, want)


def test_delta_at_alpha_one():
    g = _delta((5, 4, 3, 6), (2, 1, 0, 4))
    out = refocus_plane(g, 1.0, RefocusMap(), RefocusSpec([1.0]))
    want = np.zeros((3, 5))
    want[0, 2] = 1 / 24
    assert np.array_equal(out, want)


@pytest.mark.parametrize("alpha", [0.5, 0.8, 1.3])
@pytest.mark.parametrize("policy", [SKIP, CLAMP])
def test_delta_matches_dense_oracle(alpha, policy):
    g = _delta((7, 6, 5, 6), (3, 2, 2, 4))
    out = refocus_plane(g, alpha, RefocusMap(), RefocusSpec([alpha], boundary_policy=policy))
    want = dense_refocus(g, alpha, default_coefficients, clamp=policy == CLAMP)
    np.testing.assert_allclose(out, want, atol=1e-12, rtol=0)


@given(st.floats(0.3, 2.5), st.integers(0, 2**32 - 1))
def test_random_tensor_matches_dense_oracle(alpha, seed):
    g = np.random.default_rng(seed).standard_normal((5, 4, 4, 5))
    out = refocus_plane(g, alpha, RefocusMap(), RefocusSpec([alpha]))
    np.testing.assert_allclose(out, dense_refocus(g, alpha, default_coefficients), atol=1e-12, rtol=0)


def test_custom_map_and_grids_match_dense_oracle(rng):
    g = rng.standard_normal((6, 6, 5, 5))
    rmap = RefocusMap(a=(0.2, 0.9, 0.5, -0.6, 0.3, 0.1))
    spec = RefocusSpec([1.1], output_grid=Grid(4, 3), angular_grid=Grid(3, 2))
    out = refocus_plane(g, 1.1, rmap, spec)
    want = dense_refocus(g, 1.1, rmap.coefficients, out_shape=(4, 3), ang_shape=(3, 2))
    np.testing.assert_allclose(out, want, atol=1e-12, rtol=0)


def test_flat_field_stays_flat_under_skip():
    g = np.full((6, 6, 6, 6), 2.5)
    out = refocus_plane(g, 1.7, RefocusMap(), RefocusSpec([1.7]))
    covered = out != 0.0
    assert np.allclose(out[covered], 2.5, atol=1e-14, rtol=0)


@given(st.floats(0.4, 2.0), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(alpha, a, b, seed):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.standard_normal((2, 4, 4, 4, 4))
    spec = RefocusSpec([alpha])
    m = RefocusMap()
    lhs = refocus_plane(a * g1 + b * g2, alpha, m, spec)
    rhs = a * refocus_plane(g1, alpha, m, spec) + b * refocus_plane(g2, alpha, m, spec)
    scale = max(1.0, float(np.max(np.abs(rhs))))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * scale, rtol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_shift_equivariance_at_alpha_one(dx, dy, seed):
    g = np.random.default_rng(seed).standard_normal((9, 4, 8, 4))
    shifted = np.zeros_like(g)
    shifted[dx:, :, dy:, :] = g[:-dx, :, :-dy, :]
    spec = RefocusSpec([1.0])
    base = refocus_plane(g, 1.0, RefocusMap(), spec)
    moved = refocus_plane(shifted, 1.0, RefocusMap(), spec)
    assert np.array_equal(moved[dy:, dx:], base[:-dy, :-dx])


# -- refocus_stack ---------------------------------------------------------------

def test_single_plane_stack_equals_plane():
    g = _delta((5, 4, 3, 6), (2, 1, 0, 4))
    stack = refocus_stack(g, RefocusSpec([1.0]))
    assert len(stack.planes) == 1
    assert np.array_equal(stack.planes[0], refocus_plane(g, 1.0, RefocusMap(), RefocusSpec([1.0])))


def test_duplicate_alphas_give_identical_planes(rng):
    g = rng.standard_normal((5, 5, 5, 5))
    stack = refocus_stack(g, RefocusSpec([1.3, 0.7, 1.3]))
    assert np.array_equal(stack.planes[0], stack.planes[2])


def test_261_planes_match_sequential(rng):
    g = rng.standard_normal((6, 6, 6, 6))
    spec = RefocusSpec.linspace(0.5, 2.0, 261)
    stack = refocus_stack(g, spec, budget=MemoryBudget(10 * 36 * 8), policy=WorkerPolicy(4))
    assert len(stack.planes) == 261
    for a, plane in zip(spec.alphas, stack.planes):
        assert np.array_equal(plane, refocus_plane(g, a, RefocusMap(), spec))
        assert np.all(np.isfinite(plane))
    assert [m["alpha"] for m in stack.plane_meta] == list(spec.alphas)


@given(st.permutations([0.6, 0.9, 1.0, 1.4, 1.9]), st.integers(0, 2**32 - 1))
def test_plane_independence_under_permutation(order, seed):
    g = np.random.default_rng(seed).standard_normal((4, 4, 4, 4))
    base = refocus_stack(g, RefocusSpec([0.6, 0.9, 1.0, 1.4, 1.9]))
    perm = refocus_stack(g, RefocusSpec(order), budget=MemoryBudget(2 * 16 * 8), policy=WorkerPolicy(3))
    lookup = dict(zip(base.alphas, base.planes))
    for a, plane in zip(perm.alphas, perm.planes):
        assert np.array_equal(plane, lookup[a])


@given(st.integers(1, 30), st.integers(128, 4096), st.sampled_from([1, 2, 8]))
def test_stack_working_memory_within_budget(n, budget, workers):
    g = np.zeros((4, 4, 4, 4))
    plane_bytes = 16 * 8
    budget = max(budget, plane_bytes)
    stats = ExecutionStats()
    spec = RefocusSpec.linspace(0.5, 1.5, n)
    refocus_stack(g, spec, budget=MemoryBudget(budget), policy=WorkerPolicy(workers), stats=stats)
    assert stats.peak_inflight_bytes <= budget


def test_sample_count_metadata():
    g = np.zeros((4, 4, 4, 4))
    stack = refocus_stack(g, RefocusSpec([1.0, 2.0]))
    one, two = stack.plane_meta
    assert one["min_samples"] == one["max_samples"] == 16
    assert two["min_samples"] < 16


# -- sharpness ----------------------------------------------------------------------

def test_sharpness_constant_is_zero():
    assert sharpness(np.full((5, 5), 3.0)) == 0.0


def test_sharpness_single_bright_pixel():
    img = np.zeros((4, 5))
    img[1, 2] = 1.0
    assert sharpness(img) == pytest.approx(sharpness_by_hand(img), rel=1e-14)
    assert sharpness(img) > 0


@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(2, 7))
def test_sharpness_transpose_symmetric(seed, h, w):
    img = np.random.default_rng(seed).random((h, w)) + 0.1
    assert sharpness(img) == pytest.approx(sharpness(img.T), rel=1e-12)
    assert sharpness(img) == pytest.approx(sharpness_by_hand(img), rel=1e-12)


def test_sharpness_zero_mean_fallback():
    img = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert sharpness(img) > 0


# -- stack files ------------------------------------------------------------------

def test_stack_files_round_trip(tmp_path, rng):
    g = rng.standard_normal((4, 4, 3, 3))
    spec = RefocusSpec([0.8, 1.25])
    stack = refocus_stack(g, spec)
    write_stack(tmp_path, stack, RefocusMap(), spec, fmt="pgm")
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "plane_0000_alpha_0.800000.raw" in names
    assert "plane_0001_alpha_1.250000.pgm" in names
    man = json.loads((tmp_path / "stack.json").read_text())
    assert man["alphas"] == [0.8, 1.25]
    assert man["boundary_policy"] == SKIP
    assert man["map"]["a"] == list(RefocusMap().a)
    assert set(man["pgm_scaling"]) == {"min", "max", "maxval"}
    back = read_stack(tmp_path)
    for a, b in zip(back.planes, stack.planes):
        assert np.array_equal(a, b)
    pgm = read_pgm(tmp_path / "plane_0000_alpha_0.800000.pgm")
    assert pgm.shape == (3, 4) and pgm.max() <= 65535
