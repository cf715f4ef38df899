import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpiproc.correlation import correlate_naive, tensor_to_pair_matrix
from cpiproc.errors import RoiMismatch
from cpiproc.frame_io import FrameLayout, Roi, scan_dataset, split_roi
from cpiproc.synth import (
    GroundTruth,
    SceneSpec,
    binarization_level,
    default_layout,
    double_slit,
    frame_angle,
    generate_dataset,
    generate_frames,
    speckle_field,
)


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(np.ones((4, 4)), threshold=1.0)
    with pytest.raises(ValueError):
        SceneSpec(np.ones((4, 4)), frames=0)
    with pytest.raises(ValueError):
        SceneSpec(np.ones((4, 4)), speckle_grain_px=0.5)
    with pytest.raises(ValueError):
        SceneSpec(np.ones(4))


def test_speckle_deterministic():
    a = speckle_field(7, 3, (10, 12), 2.0)
    b = speckle_field(7, 3, (10, 12), 2.0)
    assert np.array_equal(a, b)
    assert a.shape == (10, 12)
    assert np.all(a > 0)


def test_speckle_uses_documented_bit_mapping():
    # grain 1 is the raw noise: Philox4x64 keyed by (seed, frame), top 53 bits
    bg = np.random.Philox(key=np.array([0, 0], dtype=np.uint64))
    words = bg.random_raw(2 + 6)[2:]
    want = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
    f = speckle_field(0, 0, (2, 3), 1.0)
    assert np.array_equal(f.ravel(), want)


def test_grain_one_is_white():
    lags = []
    for i in range(200):
        f = speckle_field(1, i, (32, 32), 1.0)
        f = f - f.mean()
        lags.append(np.mean(f[:, 1:] * f[:, :-1]) / np.mean(f * f))
    assert abs(np.mean(lags)) < 0.01


def test_grain_two_is_correlated_at_lag_one():
    lags = []
    for i in range(100):
        f = speckle_field(1, i, (32, 32), 2.0)
        f = f - f.mean()
        lags.append(np.mean(f[:, 1:] * f[:, :-1]) / np.mean(f * f))
    assert np.mean(lags) > 0.3


def test_frames_uncorrelated():
    a = np.stack([speckle_field(5, i, (16, 16), 1.0).ravel() for i in range(0, 400, 2)])
    b = np.stack([speckle_field(5, i, (16, 16), 1.0).ravel() for i in range(1, 400, 2)])
    r = np.corrcoef(a.ravel(), b.ravel())[0, 1]
    assert abs(r) < 0.01


def test_frame_angle_range():
    for i in range(50):
        ty, tx = frame_angle(2, i, 10.0)
        assert -10 <= ty <= 10 and -10 <= tx <= 10


def test_ones_mask_alpha_one_arms_identical():
    scene = SceneSpec(np.ones((8, 8)), true_alpha=1.0, frames=64, seed=4)
    a, b = generate_frames(scene)
    assert np.array_equal(a, b)


def test_ones_mask_alpha_one_diagonal_counts_equal_marginals():
    scene = SceneSpec(np.ones((6, 6)), true_alpha=1.0, frames=512, seed=4)
    g = correlate_naive(*generate_frames(scene))
    assert np.array_equal(np.diag(g.counts.counts), g.counts.marginal_a)


def test_ones_mask_diagonal_dominates_rows():
    scene = SceneSpec(np.ones((6, 6)), true_alpha=1.0, frames=4096, seed=9)
    g = correlate_naive(*generate_frames(scene))
    pairs = tensor_to_pair_matrix(g.gamma)
    diag = np.diag(pairs)
    off = pairs - np.diag(np.full(diag.size, np.inf))
    assert np.all(diag[:, None] > off)


def test_zero_mask_gives_dark_a_and_zero_gamma():
    scene = SceneSpec(np.zeros((5, 5)), frames=100, seed=1)
    a, b = generate_frames(scene)
    assert not a.any() and b.any()
    assert not correlate_naive(a, b).gamma.any()


@pytest.mark.parametrize("thr", [0.3, 0.5, 0.8])
def test_occupancy_near_one_minus_threshold(thr):
    # arm B is never shadowed; arm A only matches when the mask does not move
    scene = SceneSpec(np.ones((16, 16)), true_alpha=1.3, threshold=thr, frames=10_000, seed=2)
    _, b = generate_frames(scene, 0, 10_000, binarization_level(scene))
    assert abs(b.mean() - (1 - thr)) < 0.02
    scene = SceneSpec(np.ones((16, 16)), true_alpha=1.0, threshold=thr, frames=10_000, seed=3)
    a, _ = generate_frames(scene, 0, 10_000, binarization_level(scene))
    assert abs(a.mean() - (1 - thr)) < 0.02


def test_double_slit_mask():
    m = double_slit((16, 16), slit_width=2, separation=6, length=8)
    assert m.sum() == 2 * 2 * 8
    assert m[8, 5] == 1 and m[8, 11] == 1 and m[8, 8] == 0


@given(st.floats(0.5, 2.0), st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_frames_deterministic_and_chunk_consistent(alpha, seed):
    scene = SceneSpec(double_slit((8, 8), 2, 4), true_alpha=alpha, frames=20, seed=seed)
    a, b = generate_frames(scene)
    a2, b2 = generate_frames(scene, 7, 9)
    assert np.array_equal(a[7:16], a2) and np.array_equal(b[7:16], b2)


def test_dataset_files_valid_and_reproducible(tmp_path):
    scene = SceneSpec(double_slit((8, 8), 2, 4), true_alpha=1.2, frames=1024, seed=11)
    layout, ra, rb = default_layout(scene, frames_per_file=256)
    man, truth = generate_dataset(scene, layout, tmp_path / "one", ra, rb)
    man2, _ = generate_dataset(scene, layout, tmp_path / "two", ra, rb)
    assert man.n_files == 4 and man.n_tot == 1024
    for p, q in zip(man.file_paths, man2.file_paths):
        assert open(p, "rb").read() == open(q, "rb").read()
    scanned = scan_dataset(tmp_path / "one", layout, ra, rb)
    assert scanned.n_tot == 1024
    a, b = generate_frames(scene)
    first = next(scanned.iter_chunks())
    ca, cb = split_roi(first, ra, rb)
    assert np.array_equal(ca.unpack(), a[:256]) and np.array_equal(cb.unpack(), b[:256])
    assert GroundTruth.from_json(tmp_path / "one" / "ground_truth.json") == truth
    assert json.loads((tmp_path / "one" / "manifest.json").read_text())["n_tot"] == 1024


def test_ground_truth_round_trip():
    t = GroundTruth(1.4, double_slit((6, 6), 1, 2), {"seed": 3})
    assert GroundTruth.from_dict(json.loads(t.to_json())) == t


def test_dataset_rejects_mismatched_rois(tmp_path):
    scene = SceneSpec(np.ones((8, 8)), frames=16)
    layout = FrameLayout(16, 8, 16)
    with pytest.raises(RoiMismatch):
        generate_dataset(scene, layout, tmp_path, Roi(0, 0, 4, 8), Roi(8, 0, 8, 8))
    with pytest.raises(RoiMismatch):
        generate_dataset(SceneSpec(np.ones((8, 8)), frames=20), layout, tmp_path)
