import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtpnet import geometry as G
from vtpnet.nn import Tensor


# -- independent oracles ------------------------------------------------------------

def fps_oracle(coords, M, seed):
    """Greedy FPS by exhaustive search over all candidates at every step."""
    picked = [seed]
    while len(picked) < M:
        best, best_d = None, -1.0
        for i in range(len(coords)):
            d = min(float(np.linalg.norm(coords[i] - coords[j])) for j in picked)
            if d > best_d:  # strict: ties keep the lowest index
                best, best_d = i, d
        picked.append(best)
    return picked


def ball_oracle(coords, key, r, K):
    inside = [j for j in range(len(coords))
              if j != key and np.linalg.norm(coords[j] - coords[key]) <= r]
    row = [key] + inside[: K - 1]
    return row + [key] * (K - len(row)), K - len(row)


# -- farthest point sampling ---------------------------------------------------

class TestFarthestPointSample:
    def test_single_pick(self, rng):
        assert G.farthest_point_sample(rng.normal(size=(10, 3)), 1, 4).tolist() == [4]

    def test_full_pick_is_permutation(self, rng):
        idx = G.farthest_point_sample(rng.normal(size=(12, 3)), 12, 0)
        assert sorted(idx.tolist()) == list(range(12))

    def test_collinear(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [9, 0, 0], [10, 0, 0]], float)
        assert G.farthest_point_sample(x, 3, 0).tolist() == [0, 4, 2]

    def test_tie_breaks_to_lowest_index(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], float)
        assert G.farthest_point_sample(x, 2, 0).tolist() == [0, 1]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            n = int(rng.integers(2, 65))
            x = rng.uniform(-1, 1, size=(n, 3))
            m = int(rng.integers(1, n + 1))
            s = int(rng.integers(0, n))
            assert G.farthest_point_sample(x, m, s).tolist() == fps_oracle(x, m, s)

    @pytest.mark.parametrize("M", [0, 6])
    def test_bad_counts(self, M, rng):
        with pytest.raises(ValueError):
            G.farthest_point_sample(rng.normal(size=(5, 3)), M, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(3, 40))
    def test_spread_property(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        m = int(rng.integers(2, n))
        idx = G.farthest_point_sample(x, m, 0)
        sel = x[idx]
        pair = min(np.linalg.norm(a - b) for a, b in itertools.combinations(sel, 2))
        rest = np.setdiff1d(np.arange(n), idx)
        cover = max(np.min(np.linalg.norm(sel - x[j], axis=1)) for j in rest)
        assert pair >= cover - 1e-12


# -- ball query ------------------------------------------------------------------

class TestBallQuery:
    def test_isolated_keypoints(self, rng):
        x = np.arange(5)[:, None] * np.ones((1, 3))
        res = G.ball_query(x, np.array([0, 3]), 0.5, 4)
        assert res.neighbor_indices.tolist() == [[0] * 4, [3] * 4]
        assert res.pad_counts.tolist() == [3, 3]

    def test_all_inclusive(self, rng):
        x = rng.uniform(-1, 1, size=(7, 3))
        res = G.ball_query(x, np.array([2, 5]), 10.0, 7)
        for key, row in zip((2, 5), res.neighbor_indices):
            assert row[0] == key and sorted(row.tolist()) == list(range(7))
        assert res.pad_counts.tolist() == [0, 0]

    def test_unit_square(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
        res = G.ball_query(x, np.array([0]), 1.05, 3)
        assert res.neighbor_indices.tolist() == [[0, 1, 2]]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 50))
            x = rng.uniform(-1, 1, size=(n, 3))
            keys = rng.choice(n, size=min(n, 5), replace=False)
            r = float(rng.uniform(0.05, 1.5))
            K = int(rng.integers(1, 12))
            res = G.ball_query(x, keys, r, K)
            for row, pad, key in zip(res.neighbor_indices, res.pad_counts, keys):
                want, want_pad = ball_oracle(x, key, r, K)
                assert row.tolist() == want and pad == want_pad
                assert 0 <= pad <= K - 1
                assert np.all(np.linalg.norm(x[row] - x[key], axis=1) <= r + 1e-9)

    def test_bad_arguments(self, rng):
        with pytest.raises(ValueError):
            G.ball_query(rng.normal(size=(4, 3)), np.array([0]), 0.0, 2)


# -- voxelization ---------------------------------------------------------------------

class TestVoxelize:
    def test_single_point(self):
        grid = G.voxelize(np.zeros((1, 3)), np.array([[2.0, -1.0]]), 4)
        occupied = np.flatnonzero(np.any(grid.features.data[0] != 0, axis=1))
        assert len(occupied) == 1
        assert grid.features.data[0, occupied[0]].tolist() == [2.0, -1.0]

    def test_identical_points_average(self):
        coords = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [-1, -1, -1.0]])
        feats = np.array([[1.0], [3.0], [7.0]])
        grid = G.voxelize(coords, feats, 4)
        counts = grid.counts[0]
        cell = np.flatnonzero(counts == 2)
        assert len(cell) == 1 and grid.features.data[0, cell[0], 0] == 2.0

    def test_mass_conservation(self, rng):
        coords = rng.uniform(-1, 1, size=(2, 100, 3))
        feats = rng.normal(size=(2, 100, 5))
        grid = G.voxelize(coords, feats, 6)
        total = (grid.features.data * grid.counts[..., None]).sum(axis=1)
        assert np.allclose(total, feats.sum(axis=1), atol=1e-5)
        assert np.all(grid.features.data[grid.counts == 0] == 0)

    def test_norm_coords_in_range(self, rng):
        grid = G.voxelize(rng.normal(size=(50, 3)) * 10, np.ones((50, 1)), 5)
        assert grid.norm_coords.min() >= 0 and grid.norm_coords.max() <= 4
        # the longest axis spans the whole grid
        span = grid.norm_coords[0].max(axis=0) - grid.norm_coords[0].min(axis=0)
        assert np.isclose(span.max(), 4)

    def test_degenerate_cloud_goes_to_origin_voxel(self):
        grid = G.voxelize(np.ones((3, 3)), np.ones((3, 2)), 4)
        assert grid.counts[0, 0] == 3

    def test_translation_and_scale_invariant(self, rng):
        # dyadic coordinates and offsets keep the affine map exact
        coords = rng.integers(-64, 64, size=(40, 3)) / 64.0
        a = G.voxelize(coords, np.ones((40, 1)), 8)
        b = G.voxelize(coords * 4 + 0.5, np.ones((40, 1)), 8)
        assert np.array_equal(a.norm_coords, b.norm_coords)

    def test_resolution_check(self):
        with pytest.raises(ValueError):
            G.voxelize(np.zeros((2, 3)), np.zeros((2, 1)), 1)


class TestDevoxelize:
    def test_weights_partition_unity(self, rng):
        u = rng.uniform(0, 5, size=(1, 30, 3))
        _, w = G.trilinear_weights(u, 6)
        assert np.all(np.abs(w.sum(-1) - 1) < 1e-7) and np.all(w >= 0)

    def test_integer_coordinates_pick_voxel(self, rng):
        coords = np.array([[0, 0, 0], [3, 3, 3], [1, 2, 3]], float)
        grid = G.voxelize(coords, np.zeros((3, 1)), 4)
        assert np.array_equal(grid.norm_coords[0], coords)  # bbox already maps onto the grid
        vox = rng.normal(size=(1, 64, 2))
        out = G.devoxelize_trilinear(grid, vox).data[0]
        flat = (coords[:, 0] * 4 + coords[:, 1]) * 4 + coords[:, 2]
        assert np.array_equal(out, vox[0, flat.astype(int)])

    def test_constant_field(self, rng):
        grid = G.voxelize(rng.normal(size=(20, 3)), np.zeros((20, 1)), 5)
        out = G.devoxelize_trilinear(grid, np.full((1, 125, 3), 2.5)).data
        assert np.allclose(out, 2.5, atol=1e-12)

    def test_constant_round_trip(self, rng):
        grid = G.voxelize(rng.normal(size=(60, 3)), np.full((60, 2), -0.75), 6)
        vox = grid.features.data.copy()
        vox[grid.counts == 0] = -0.75  # empty voxels hold no value to recover
        assert np.allclose(G.devoxelize_trilinear(grid, vox).data, -0.75, atol=1e-6)


# -- 3-NN interpolation ---------------------------------------------------------------

class TestThreeNN:
    def test_eq_weights_one_two_three(self):
        src = np.array([[1, 0, 0], [0, 2, 0], [0, 0, 3.0]])
        idx, w = G.three_nn_weights(src, np.zeros((1, 3)))
        assert idx.tolist() == [[0, 1, 2]]
        assert np.allclose(w, [[6 / 11, 3 / 11, 2 / 11]], atol=1e-15)

    def test_coincident_target(self, rng):
        src = rng.normal(size=(5, 3))
        feats = rng.normal(size=(5, 2))
        out = G.interpolate_3nn(src, feats, src[[3]]).data
        assert np.array_equal(out, feats[[3]])

    def test_two_zero_distances_copy_lowest_index(self):
        src = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0.0]])
        idx, w = G.three_nn_weights(src, np.zeros((1, 3)))
        assert idx[0, 0] == 0 and w.tolist() == [[1.0, 0.0, 0.0]]

    def test_fewer_than_three_sources(self):
        src = np.array([[0, 0, 0], [3, 0, 0.0]])
        idx, w = G.three_nn_weights(src, np.array([[1.0, 0, 0]]))
        assert idx.shape == (1, 2) and np.allclose(w, [[2 / 3, 1 / 3]])

    def test_constant_field(self, rng):
        out = G.interpolate_3nn(rng.normal(size=(6, 3)), np.full((6, 4), 3.25), rng.normal(size=(20, 3)))
        assert np.allclose(out.data, 3.25, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(3, 20), st.integers(1, 30))
    def test_weights_and_convex_hull(self, seed, m, n):
        rng = np.random.default_rng(seed)
        src, tgt = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        feats = rng.normal(size=(m, 3))
        idx, w = G.three_nn_weights(src, tgt)
        assert np.all(w >= 0) and np.all(np.abs(w.sum(-1) - 1) <= 1e-9)
        d = np.linalg.norm(tgt[:, None] - src[None], axis=-1)
        assert np.allclose(np.take_along_axis(d, idx, 1), np.sort(d, axis=1)[:, :3])
        out = G.interpolate_3nn(src, feats, tgt).data
        sel = feats[idx]
        assert np.all(out >= sel.min(axis=1) - 1e-12) and np.all(out <= sel.max(axis=1) + 1e-12)

    def test_batched_matches_single(self, rng):
        src, tgt = rng.normal(size=(2, 7, 3)), rng.normal(size=(2, 9, 3))
        feats = rng.normal(size=(2, 7, 4))
        both = G.interpolate_3nn(src, Tensor(feats), tgt).data
        for b in range(2):
            assert np.array_equal(both[b], G.interpolate_3nn(src[b], feats[b], tgt[b]).data)
