import numpy as np
import pytest

from headsplat.atlas import (
    CH_COLOR,
    CH_OPACITY,
    CH_ROTATION,
    CH_SCALE,
    NUM_CHANNELS,
    STATE_ACTIVATED,
    STATE_RAW,
    AttributeAtlas,
    BlendMasks,
    PositionMap,
    Rect,
    activate_atlas,
    embed_patch,
    extract_patch,
    load_atlas,
    load_mask,
    load_position_map,
    make_transition_mask,
    read_uvam,
    save_atlas,
    save_mask,
    save_position_map,
    write_uvam,
)
from headsplat.errors import ParseError


def raw_atlas(h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(h, w, NUM_CHANNELS)).astype(np.float32)
    data[..., CH_ROTATION] += np.array([2.0, 0, 0, 0], dtype=np.float32)
    validity = rng.uniform(size=(h, w)) > 0.2
    return AttributeAtlas(data=data, validity=validity, origin="static", state=STATE_RAW)


class TestActivation:
    def test_sigmoid_at_zero(self):
        atlas = raw_atlas()
        atlas.data[..., CH_OPACITY] = 0.0
        act = activate_atlas(atlas)
        np.testing.assert_allclose(act.opacity, 0.5)

    def test_sigmoid_at_two(self):
        atlas = raw_atlas()
        atlas.data[..., CH_OPACITY] = 2.0
        act = activate_atlas(atlas)
        # sigmoid(2) evaluated independently
        np.testing.assert_allclose(act.opacity, 0.8807970779778823, rtol=1e-6)

    def test_rotation_normalized(self):
        atlas = raw_atlas()
        atlas.data[..., CH_ROTATION] = np.array([2.0, 0, 0, 0], dtype=np.float32)
        act = activate_atlas(atlas)
        np.testing.assert_allclose(act.rotation[..., 0], 1.0)
        np.testing.assert_allclose(act.rotation[..., 1:], 0.0)

    def test_activated_invariants(self):
        act = activate_atlas(raw_atlas(seed=3))
        assert act.state == STATE_ACTIVATED
        assert np.all(act.opacity >= 0) and np.all(act.opacity <= 1)
        norms = np.linalg.norm(act.rotation, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
        assert np.all(act.scale > 0)
        assert np.all(act.color >= 0) and np.all(act.color <= 1)

    def test_double_activation_rejected(self):
        act = activate_atlas(raw_atlas())
        with pytest.raises(ValueError):
            activate_atlas(act)

    def test_preserves_shape_and_validity(self):
        atlas = raw_atlas(h=6, w=10, seed=5)
        act = activate_atlas(atlas)
        assert act.data.shape == atlas.data.shape
        np.testing.assert_array_equal(act.validity, atlas.validity)


class TestTransitionMask:
    def test_zero_band_equals_hard_mask(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 4:12] = True
        np.testing.assert_array_equal(make_transition_mask(mask, 0), mask.astype(np.float32))

    def test_square_region_band_two(self):
        # Brute-force oracle: per inside texel, min Euclidean distance to any
        # outside texel, clipped by the band width.
        mask = np.zeros((14, 14), dtype=bool)
        mask[2:12, 2:12] = True
        band = 2
        got = make_transition_mask(mask, band)
        inside_y, inside_x = np.nonzero(mask)
        outside_y, outside_x = np.nonzero(~mask)
        for y, x in zip(inside_y, inside_x):
            d = np.sqrt((outside_y - y) ** 2 + (outside_x - x) ** 2).min()
            assert got[y, x] == pytest.approx(min(d / band, 1.0), abs=1e-6)
        # Interior 6x6 block saturates; the boundary ring sits halfway.
        np.testing.assert_allclose(got[4:10, 4:10], 1.0)
        assert got[2, 5] == pytest.approx(0.5)
        assert got[3, 5] == pytest.approx(1.0)

    def test_outside_region_is_zero(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 3:7] = True
        got = make_transition_mask(mask, 5)
        assert np.all(got[~mask] == 0.0)

    def test_empty_region_rejected(self):
        with pytest.raises(ValueError):
            make_transition_mask(np.zeros((4, 4), dtype=bool), 2)

    def test_monotone_along_inward_ray(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[4:28, 4:28] = True
        got = make_transition_mask(mask, 6)
        row = got[16, :]
        rising = row[4:16]
        assert np.all(np.diff(rising) >= 0)

    def test_soft_never_exceeds_hard(self):
        rng = np.random.default_rng(2)
        mask = rng.uniform(size=(24, 24)) > 0.5
        if not mask.any():
            mask[0, 0] = True
        got = make_transition_mask(mask, 3)
        assert np.all(got <= mask.astype(np.float32) + 1e-7)


class TestEmbed:
    def test_full_roi_returns_patch(self):
        full = np.ones((8, 8, 3), dtype=np.float32)
        patch = np.arange(8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3)
        out = embed_patch(full, patch, Rect(0, 0, 8, 8))
        np.testing.assert_array_equal(out, patch)

    def test_zero_patch_into_ones(self):
        full = np.ones((32, 32), dtype=np.float32)
        out = embed_patch(full, np.zeros((8, 8), dtype=np.float32), Rect(10, 10, 8, 8))
        assert out[10:18, 10:18].sum() == 0
        assert out.sum() == 32 * 32 - 64

    def test_checkerboard_round_trip(self):
        rng = np.random.default_rng(9)
        full = rng.normal(size=(20, 20, 5)).astype(np.float32)
        checker = np.indices((6, 6)).sum(axis=0) % 2
        patch = np.repeat(checker[:, :, None], 5, axis=2).astype(np.float32)
        roi = Rect(7, 3, 6, 6)
        out = embed_patch(full, patch, roi)
        np.testing.assert_array_equal(extract_patch(out, roi), patch)
        # untouched texels are bit-identical
        mask = np.ones((20, 20), dtype=bool)
        mask[roi.slices] = False
        np.testing.assert_array_equal(out[mask], full[mask])

    def test_out_of_bounds_rejected(self):
        full = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            embed_patch(full, np.zeros((4, 4, 3), dtype=np.float32), Rect(6, 6, 4, 4))
        with pytest.raises(ValueError):
            embed_patch(full, np.zeros((3, 3, 3), dtype=np.float32), Rect(0, 0, 4, 4))


class TestBlendMasks:
    def test_rectangular_layout(self):
        masks = BlendMasks.rectangular(32, 32, Rect(8, 8, 16, 16), band_width=4)
        assert masks.face_mask.sum() == 16 * 16
        assert masks.soft_mask.max() == 1.0
        assert np.all(masks.soft_mask <= masks.face_mask)


class TestUvamIO:
    def test_atlas_round_trip(self, tmp_path):
        atlas = raw_atlas(h=12, w=8, seed=21)
        path = tmp_path / "a.uvam"
        save_atlas(path, atlas)
        loaded = load_atlas(path, origin="static")
        np.testing.assert_array_equal(loaded.data, atlas.data)
        np.testing.assert_array_equal(loaded.validity, atlas.validity)
        assert loaded.state == STATE_RAW

    def test_position_map_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        pos = PositionMap(
            data=rng.normal(size=(16, 16, 3)).astype(np.float32),
            validity=rng.uniform(size=(16, 16)) > 0.5,
        )
        path = tmp_path / "pos.uvam"
        save_position_map(path, pos)
        loaded = load_position_map(path)
        np.testing.assert_array_equal(loaded.data, pos.data)
        np.testing.assert_array_equal(loaded.validity, pos.validity)

    def test_mask_round_trip(self, tmp_path):
        mask = (np.indices((10, 10)).sum(axis=0) % 3 == 0).astype(np.float32)
        path = tmp_path / "mask.uvam"
        save_mask(path, mask)
        np.testing.assert_array_equal(load_mask(path), mask)

    def test_state_flag_round_trip(self, tmp_path):
        act = activate_atlas(raw_atlas(seed=8))
        path = tmp_path / "act.uvam"
        save_atlas(path, act)
        assert load_atlas(path).state == STATE_ACTIVATED

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.uvam"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ParseError):
            read_uvam(path)

    def test_truncated_rejected(self, tmp_path):
        atlas = raw_atlas()
        path = tmp_path / "trunc.uvam"
        save_atlas(path, atlas)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ParseError):
            read_uvam(path)

    def test_non_multiple_of_eight_bitmask(self, tmp_path):
        # 5x5 raster: validity bitmask pads to whole bytes.
        data = np.arange(25, dtype=np.float32).reshape(5, 5, 1)
        validity = np.eye(5, dtype=bool)
        path = tmp_path / "odd.uvam"
        write_uvam(path, data, validity)
        loaded, valid, _ = read_uvam(path)
        np.testing.assert_array_equal(loaded, data)
        np.testing.assert_array_equal(valid, validity)
