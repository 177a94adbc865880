import numpy as np
import pytest

from headsplat.atlas import (
    CH_COLOR,
    CH_OPACITY,
    CH_ROTATION,
    NUM_CHANNELS,
    STATE_ACTIVATED,
    STATE_RAW,
    AttributeAtlas,
    PositionMap,
    Rect,
)
from headsplat.sampler import (
    PrimitiveBatch,
    expected_triangle_count,
    load_batch,
    resample_positions_only,
    sample_avatar,
    sample_uv_grid,
    save_batch,
)


def constant_atlas(h, w, color=(0.2, 0.4, 0.6), opacity=0.8, scale=0.05):
    data = np.zeros((h, w, NUM_CHANNELS), dtype=np.float64)
    data[..., CH_COLOR] = color
    data[..., CH_OPACITY] = opacity
    data[..., CH_ROTATION] = [1.0, 0.0, 0.0, 0.0]
    data[..., 8:11] = scale
    return AttributeAtlas(
        data=data, validity=np.ones((h, w), dtype=bool), state=STATE_ACTIVATED
    )


def grid_positions(h, w, z=3.0):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    data = np.stack([xs / w, ys / h, np.full((h, w), z)], axis=-1)
    return PositionMap(data=data, validity=np.ones((h, w), dtype=bool))


def counting_oracle(valid, step):
    """Explicit loop over the grid index set, counting complete triangles."""
    h, w = valid.shape
    count = 0
    for i in range(0, h, step):
        for j in range(0, w, step):
            if i + step >= h or j + step >= w:
                continue
            if valid[i, j] and valid[i + step, j] and valid[i, j + step]:
                count += 1
            if valid[i + step, j] and valid[i, j + step] and valid[i + step, j + step]:
                count += 1
    return count


class TestSampleUvGrid:
    def test_constant_atlas_counts_and_attributes(self):
        h = w = 129
        atlas = constant_atlas(h, w)
        batch = sample_uv_grid(atlas, grid_positions(h, w), step=8, opacity_floor=0.0)
        assert len(batch) == counting_oracle(atlas.validity, 8) == expected_triangle_count(h, w, 8)
        np.testing.assert_allclose(batch.colors, np.broadcast_to([0.2, 0.4, 0.6], (len(batch), 3)))
        np.testing.assert_allclose(batch.opacities, 0.8)
        np.testing.assert_allclose(batch.rotations[:, 0], 1.0)

    def test_full_resolution_1024_count(self):
        atlas = constant_atlas(1024, 1024)
        positions = grid_positions(1024, 1024)
        batch = sample_uv_grid(atlas, positions, step=8, opacity_floor=0.0)
        assert len(batch) == 2 * 127 * 127 == 32258

    def test_invalid_corner_drops_triangle(self):
        h = w = 9
        atlas = constant_atlas(h, w)
        atlas.validity[0, 0] = False  # corner of tri 1 in cell (0, 0) only
        batch = sample_uv_grid(atlas, grid_positions(h, w), step=4, opacity_floor=0.0)
        assert len(batch) == counting_oracle(atlas.validity, 4)
        cells = {(int(i), int(j), int(k)) for i, j, k in batch.cells}
        assert (0, 0, 1) not in cells
        assert (0, 0, 2) in cells

    def test_corner_color_average(self):
        h = w = 3
        atlas = constant_atlas(h, w)
        atlas.data[0, 0, CH_COLOR] = [1.0, 0.0, 0.0]
        atlas.data[2, 0, CH_COLOR] = [0.0, 1.0, 0.0]
        atlas.data[0, 2, CH_COLOR] = [0.0, 0.0, 1.0]
        batch = sample_uv_grid(atlas, grid_positions(h, w), step=2, opacity_floor=0.0)
        tri1 = batch.cells[:, 2] == 1
        np.testing.assert_allclose(batch.colors[tri1][0], [1 / 3, 1 / 3, 1 / 3])

    def test_positions_average_three_corners(self):
        h = w = 5
        positions = grid_positions(h, w)
        batch = sample_uv_grid(constant_atlas(h, w), positions, step=2, opacity_floor=0.0)
        for n in range(len(batch)):
            rows, cols = batch.corner_rows[n], batch.corner_cols[n]
            np.testing.assert_allclose(
                batch.positions[n], positions.data[rows, cols].mean(axis=0), atol=1e-12
            )

    def test_opacity_floor_drops_primitives(self):
        h = w = 9
        atlas = constant_atlas(h, w, opacity=0.004)
        batch = sample_uv_grid(atlas, grid_positions(h, w), step=4)
        assert len(batch) == 0
        kept = sample_uv_grid(atlas, grid_positions(h, w), step=4, opacity_floor=0.001)
        assert len(kept) == counting_oracle(atlas.validity, 4)

    def test_quaternion_sign_alignment(self):
        h = w = 3
        atlas = constant_atlas(h, w)
        atlas.data[0, 0, CH_ROTATION] = [1.0, 0, 0, 0]
        atlas.data[2, 0, CH_ROTATION] = [-1.0, 0, 0, 0]  # antipodal duplicate
        atlas.data[0, 2, CH_ROTATION] = [1.0, 0, 0, 0]
        batch = sample_uv_grid(atlas, grid_positions(h, w), step=2, opacity_floor=0.0)
        tri1 = batch.cells[:, 2] == 1
        np.testing.assert_allclose(np.abs(batch.rotations[tri1][0]), [1, 0, 0, 0], atol=1e-12)

    def test_permutation_invariance_of_average(self):
        rng = np.random.default_rng(0)
        corners = rng.uniform(0.1, 0.9, size=(3, NUM_CHANNELS))
        h = w = 3
        base = None
        for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            atlas = constant_atlas(h, w)
            atlas.data[0, 0] = corners[perm[0]]
            atlas.data[2, 0] = corners[perm[1]]
            atlas.data[0, 2] = corners[perm[2]]
            batch = sample_uv_grid(atlas, grid_positions(h, w), step=2, opacity_floor=0.0)
            tri1 = int(np.flatnonzero(batch.cells[:, 2] == 1)[0])
            color = batch.colors[tri1]
            if base is None:
                base = color
            else:
                np.testing.assert_allclose(color, base, atol=1e-12)

    def test_count_upper_bound_random_validity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h, w = rng.integers(8, 40, size=2)
            step = int(rng.integers(1, 6))
            if step >= min(h, w):
                continue
            atlas = constant_atlas(h, w)
            atlas.validity = rng.uniform(size=(h, w)) > 0.3
            positions = grid_positions(h, w)
            positions.validity = atlas.validity.copy()
            batch = sample_uv_grid(atlas, positions, step=step, opacity_floor=0.0)
            bound = 2 * int(np.ceil(w / step)) * int(np.ceil(h / step))
            assert len(batch) <= bound
            assert len(batch) == counting_oracle(atlas.validity, step)

    def test_halving_step_quadruples_count(self):
        atlas = constant_atlas(257, 257)
        positions = grid_positions(257, 257)
        coarse = sample_uv_grid(atlas, positions, step=8, opacity_floor=0.0)
        fine = sample_uv_grid(atlas, positions, step=4, opacity_floor=0.0)
        assert len(coarse) == expected_triangle_count(257, 257, 8)
        assert len(fine) == expected_triangle_count(257, 257, 4)
        assert len(fine) == 4 * len(coarse)

    def test_cell_center_spacing_uniformity(self):
        # Triangle centroids form two interleaved lattices; nearest-neighbor
        # spacing must be essentially constant across the raster.
        atlas = constant_atlas(129, 129)
        batch = sample_uv_grid(atlas, grid_positions(129, 129), step=8, opacity_floor=0.0)
        centers = np.stack(
            [batch.corner_rows.mean(axis=1), batch.corner_cols.mean(axis=1)], axis=1
        )
        from scipy.spatial import cKDTree

        dist, _ = cKDTree(centers).query(centers, k=2)
        nearest = dist[:, 1]
        cv = nearest.std() / nearest.mean()
        assert cv < 0.05

    def test_raw_atlas_rejected(self):
        atlas = constant_atlas(8, 8)
        atlas.state = STATE_RAW
        with pytest.raises(ValueError):
            sample_uv_grid(atlas, grid_positions(8, 8), step=2)

    def test_oversized_step_rejected(self):
        atlas = constant_atlas(8, 8)
        with pytest.raises(ValueError):
            sample_uv_grid(atlas, grid_positions(8, 8), step=8)
        with pytest.raises(ValueError):
            sample_uv_grid(atlas, grid_positions(8, 8), step=0)


class TestResamplePositions:
    def make_batch(self, h=17, w=17, step=4):
        atlas = constant_atlas(h, w)
        positions = grid_positions(h, w)
        return atlas, positions, sample_uv_grid(atlas, positions, step, opacity_floor=0.0)

    def test_unchanged_map_is_identity(self):
        _, positions, batch = self.make_batch()
        out = resample_positions_only(batch, positions)
        np.testing.assert_array_equal(out.positions, batch.positions)
        np.testing.assert_array_equal(out.colors, batch.colors)

    def test_translation_shifts_all(self):
        _, positions, batch = self.make_batch()
        t = np.array([0.5, -1.0, 2.0])
        moved = PositionMap(positions.data + t, positions.validity)
        out = resample_positions_only(batch, moved)
        np.testing.assert_allclose(out.positions, batch.positions + t, atol=1e-12)

    def test_matches_fresh_sampling(self):
        atlas, positions, batch = self.make_batch()
        rng = np.random.default_rng(8)
        new_positions = PositionMap(
            rng.normal(size=positions.data.shape), positions.validity
        )
        fast = resample_positions_only(batch, new_positions)
        fresh = sample_uv_grid(atlas, new_positions, batch.step, opacity_floor=0.0)
        np.testing.assert_array_equal(fast.positions, fresh.positions)

    def test_resolution_mismatch_rejected(self):
        _, _, batch = self.make_batch()
        with pytest.raises(ValueError):
            resample_positions_only(batch, grid_positions(9, 9))


class TestTwoZoneSampling:
    def test_roi_sampled_finer(self):
        h = w = 33
        atlas = constant_atlas(h, w)
        positions = grid_positions(h, w)
        roi = Rect(8, 8, 16, 16)
        batch = sample_avatar(atlas, positions, roi, step=8, face_step=2, opacity_floor=0.0)
        inside = (
            (batch.corner_rows >= roi.y)
            & (batch.corner_rows < roi.y + roi.h)
            & (batch.corner_cols >= roi.x)
            & (batch.corner_cols < roi.x + roi.w)
        ).all(axis=1)
        # fine primitives exist and their corner spacing is the fine step
        fine = batch.corner_rows[inside]
        assert inside.sum() == expected_triangle_count(roi.h, roi.w, 2)
        assert (np.ptp(fine, axis=1) <= 2).all()

    def test_equal_steps_single_zone(self):
        h = w = 17
        atlas = constant_atlas(h, w)
        positions = grid_positions(h, w)
        roi = Rect(4, 4, 8, 8)
        merged = sample_avatar(atlas, positions, roi, step=4, face_step=4, opacity_floor=0.0)
        plain = sample_uv_grid(atlas, positions, 4, opacity_floor=0.0)
        assert len(merged) == len(plain)


class TestBatchIO:
    def test_gspb_round_trip(self, tmp_path):
        h = w = 9
        batch = sample_uv_grid(constant_atlas(h, w), grid_positions(h, w), 2, opacity_floor=0.0)
        path = tmp_path / "batch.gspb"
        save_batch(path, batch)
        loaded = load_batch(path)
        assert loaded["positions"].shape == (len(batch), 3)
        np.testing.assert_allclose(loaded["positions"], batch.positions, atol=1e-6)
        np.testing.assert_allclose(loaded["opacities"], batch.opacities, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        from headsplat.errors import ParseError

        path = tmp_path / "bad.gspb"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(ParseError):
            load_batch(path)
