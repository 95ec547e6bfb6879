"""
Tests for factor composition, thresholding, the CP oracle and VOXG files
"""
import numpy as np
import pytest

from src.errors import DataIOError, RangeError, ShapeMismatchError
from src.tensor import Tape, check_gradients, sum_
from src.voxels import (FactorSet, binary_iou, compose_factors, cp_fit_oracle, load_voxels, mse_loss, save_voxels,
                        surface_voxels, threshold, voxels_from_bytes, voxels_to_bytes)


def _random_factors(rng, k, side):
    return FactorSet(*(rng.uniform(size=(k, side)) for _ in range(3)))


def _loop_compose(z, y, x):
    k, side = z.shape
    out = np.zeros((side, side, side))
    for i in range(side):
        for j in range(side):
            for m in range(side):
                out[i, j, m] = min(1.0, sum(z[a, i] * y[a, j] * x[a, m] for a in range(k)))
    return out


def test_compose_matches_triple_loop_oracle():
    """100 random factor sets at N=8, k in 1..4: sum-then-clip equals the loop oracle"""
    rng = np.random.default_rng(0)
    for trial in range(100):
        k = 1 + trial % 4
        factors = _random_factors(rng, k, 8)
        composed = compose_factors(factors).numpy()
        assert composed.shape == (8, 8, 8)
        np.testing.assert_allclose(composed, _loop_compose(*factors.numpy()), atol=1e-6)


def test_compose_is_permutation_invariant_and_monotone():
    rng = np.random.default_rng(1)
    for trial in range(100):
        k = 1 + trial % 4
        factors = _random_factors(rng, k, 8)
        composed = compose_factors(factors).numpy()
        shuffled = factors.select(rng.permutation(k))
        np.testing.assert_allclose(compose_factors(shuffled).numpy(), composed, atol=1e-6)
        extra = _random_factors(rng, 1, 8)
        grown = FactorSet(*(np.concatenate([a, b]) for a, b in zip(factors.numpy(), extra.numpy())))
        assert (compose_factors(grown).numpy() >= composed - 1e-6).all()


def test_box_factors_compose_to_box():
    """A rank-1 indicator triplet is exactly an axis-aligned box"""
    z, y, x = np.zeros((1, 8)), np.zeros((1, 8)), np.zeros((1, 8))
    z[0, 1:4], y[0, 0:2], x[0, 5:8] = 1, 1, 1
    expected = np.zeros((8, 8, 8))
    expected[1:4, 0:2, 5:8] = 1
    np.testing.assert_array_equal(compose_factors(FactorSet(z, y, x)).numpy(), expected)


def test_overlapping_boxes_clip_to_one():
    full = np.ones((2, 4))
    assert compose_factors(FactorSet(full, full, full)).numpy().max() == 1.0


def test_batched_factors_compose_per_sample():
    rng = np.random.default_rng(2)
    batched = FactorSet(*(rng.uniform(size=(3, 2, 5)) for _ in range(3)))
    composed = compose_factors(batched).numpy()
    assert composed.shape == (3, 5, 5, 5)
    single = FactorSet(*(a[1] for a in batched.numpy()))
    np.testing.assert_allclose(composed[1], compose_factors(single).numpy(), atol=1e-6)


def test_factor_range_is_checked():
    bad = np.full((1, 4), 0.5)
    bad[0, 2] = 1.2
    with pytest.raises(RangeError):
        compose_factors(FactorSet(bad, np.ones((1, 4)), np.ones((1, 4))))


def test_factor_shapes_must_agree():
    with pytest.raises(ShapeMismatchError):
        FactorSet(np.ones((2, 4)), np.ones((2, 5)), np.ones((2, 4)))


def test_composition_gradient():
    """Gradients flow through the clip wherever the sum stays below 1"""
    rng = np.random.default_rng(3)
    inputs = [rng.uniform(0.1, 0.6, size=(2, 4)) for _ in range(3)]
    weights = rng.normal(size=(4, 4, 4))
    result = check_gradients(lambda z, y, x: sum_(compose_factors(FactorSet(z, y, x)) * weights), inputs, step=1e-3)
    assert result.passed, result


def test_mse_loss_values():
    p = np.full((2, 2, 2), 0.5)
    g = np.zeros((2, 2, 2))
    g[0] = 1
    assert mse_loss(p, g).item() == pytest.approx(0.25)
    assert mse_loss(g, g).item() == 0.0


def test_mse_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        mse_loss(np.zeros((4, 4, 4)), np.zeros((5, 5, 5)))


def test_mse_gradient_is_scaled_difference():
    tape = Tape()
    p = tape.leaf(np.array([[[0.2, 0.8]]]))
    tape.backward(mse_loss(p, np.array([[[0.0, 1.0]]])))
    np.testing.assert_allclose(tape.grad(p), [[[0.2, -0.2]]], atol=1e-6)


def test_threshold_is_inclusive():
    out = threshold(np.array([0.29, 0.3, 0.9]), 0.3)
    assert out.dtype == np.uint8
    assert out.tolist() == [0, 1, 1]


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(tau):
    with pytest.raises(RangeError):
        threshold(np.zeros(3), tau)


def test_binary_iou_of_empty_grids_is_one():
    empty = np.zeros((4, 4, 4), dtype=np.uint8)
    assert binary_iou(empty, empty) == 1.0


def test_surface_voxels_excludes_interior():
    full = np.ones((5, 5, 5), dtype=np.uint8)
    surface = surface_voxels(full)
    assert surface.sum() == 5 ** 3 - 3 ** 3
    assert not surface[1:4, 1:4, 1:4].any()


def _box_grid(side, origin, extent):
    grid = np.zeros((side,) * 3, dtype=np.uint8)
    grid[tuple(slice(o, o + e) for o, e in zip(origin, extent))] = 1
    return grid


def test_oracle_fits_single_box_with_one_factor():
    grid = _box_grid(16, (2, 0, 5), (6, 3, 9))
    factors = cp_fit_oracle(grid, k=1, seed=0)
    assert factors.k == 1
    assert binary_iou(threshold(compose_factors(factors)), grid) == 1.0


def test_oracle_fits_lshape_with_two_factors():
    grid = _box_grid(16, (3, 0, 2), (8, 2, 12)) | _box_grid(16, (3, 2, 2), (8, 9, 3))
    factors = cp_fit_oracle(grid, k=2, seed=0)
    assert binary_iou(threshold(compose_factors(factors)), grid) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_oracle_fits_three_random_boxes(seed):
    rng = np.random.default_rng(seed)
    grid = np.zeros((8, 8, 8), dtype=np.uint8)
    for _ in range(3):
        extent = rng.integers(2, 5, size=3)
        origin = [int(rng.integers(0, 8 - e + 1)) for e in extent]
        grid |= _box_grid(8, origin, extent)
    factors = cp_fit_oracle(grid, k=3, seed=seed)
    assert binary_iou(threshold(compose_factors(factors)), grid) >= 0.95


def test_oracle_is_deterministic():
    grid = _box_grid(8, (1, 1, 1), (3, 4, 2)) | _box_grid(8, (4, 0, 4), (3, 2, 3))
    first = cp_fit_oracle(grid, k=2, seed=5, iterations=200)
    second = cp_fit_oracle(grid, k=2, seed=5, iterations=200)
    for a, b in zip(first.numpy(), second.numpy()):
        np.testing.assert_array_equal(a, b)


def test_oracle_rejects_zero_rank():
    with pytest.raises(RangeError):
        cp_fit_oracle(np.ones((4, 4, 4)), k=0)


def test_voxel_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    binary = (rng.uniform(size=(6, 6, 6)) > 0.5).astype(np.uint8)
    real = rng.uniform(size=(6, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(load_voxels(save_voxels(tmp_path / "b.voxg", binary)), binary)
    np.testing.assert_array_equal(load_voxels(save_voxels(tmp_path / "r.voxg", real)), real)


def test_voxel_file_layout():
    grid = np.zeros((2, 2, 2), dtype=np.uint8)
    grid[0, 0, 1] = 1
    blob = voxels_to_bytes(grid)
    assert blob[:4] == b"VOXG"
    assert blob[4:8] == (2).to_bytes(4, "little")
    assert blob[8] == 0
    assert blob[9:] == bytes([0, 1, 0, 0, 0, 0, 0, 0])


def test_voxel_file_errors(tmp_path):
    with pytest.raises(DataIOError):
        voxels_from_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataIOError):
        voxels_from_bytes(voxels_to_bytes(np.ones((3, 3, 3), dtype=np.uint8))[:-1])
    with pytest.raises(DataIOError) as info:
        load_voxels(tmp_path / "missing.voxg")
    assert "missing.voxg" in str(info.value)
