import numpy as np
import pytest

from headsplat.atlas import Rect
from headsplat.errors import ParseError
from headsplat.headmodel import (
    Blendshape,
    apply_displacement,
    bake_normal_map,
    bake_position_map,
    default_blendshapes,
    generate_head,
    load_obj,
    sample_position_bilinear,
    save_obj,
)


class TestGenerateHead:
    def test_base_icosahedron_counts(self):
        mesh = generate_head(subdivision=0, radius=1.0, neck_length=0.0)
        assert mesh.num_vertices == 12
        assert mesh.num_faces == 20

    @pytest.mark.parametrize("level", [0, 1, 2, 3])
    def test_subdivision_face_count(self, level):
        mesh = generate_head(subdivision=level, radius=1.0, neck_length=0.0)
        assert mesh.num_faces == 20 * 4**level
        assert mesh.num_vertices == 10 * 4**level + 2

    def test_uvs_inside_unit_square(self):
        mesh = generate_head(subdivision=3, radius=1.0, neck_length=0.3)
        assert np.all(mesh.uvs >= 0.0) and np.all(mesh.uvs <= 1.0)

    def test_deterministic(self):
        a = generate_head(subdivision=2, radius=1.3, neck_length=0.2)
        b = generate_head(subdivision=2, radius=1.3, neck_length=0.2)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.faces, b.faces)
        np.testing.assert_array_equal(a.uvs, b.uvs)

    def test_closed_manifold(self):
        mesh = generate_head(subdivision=2, radius=1.0, neck_length=0.3)
        pairs, boundary = mesh.edge_face_pairs()
        assert boundary == 0
        assert pairs.shape[0] == mesh.num_faces * 3 // 2

    def test_outward_normals(self):
        mesh = generate_head(subdivision=1, radius=1.0, neck_length=0.0)
        normals, area2 = mesh.face_normals()
        centroids = mesh.vertices[mesh.faces].mean(axis=1)
        assert np.all((normals * centroids).sum(axis=1) > 0)
        assert np.all(area2 > 1e-12)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            generate_head(subdivision=-1)
        with pytest.raises(ValueError):
            generate_head(subdivision=9)
        with pytest.raises(ValueError):
            generate_head(radius=0.0)

    def test_neck_extends_downward(self):
        bare = generate_head(subdivision=2, radius=1.0, neck_length=0.0)
        necked = generate_head(subdivision=2, radius=1.0, neck_length=0.4)
        assert necked.vertices[:, 1].min() < bare.vertices[:, 1].min() - 0.3


class TestBakePositionMap:
    def test_texel_at_uv_vertex_hits_vertex(self):
        # Vertex UVs sit on texel centers of the snap lattice, so baking at
        # that resolution reproduces vertex positions exactly.
        mesh = generate_head(subdivision=1, radius=1.0, neck_length=0.2)
        baked = bake_position_map(mesh, 1024)
        tf = mesh.uv_faces[5]
        vf = mesh.faces[5]
        for ti, vi in zip(tf, vf):
            u, v = mesh.uvs[ti]
            ix, iy = int(u * 1024 - 0.5), int(v * 1024 - 0.5)
            assert baked.validity[iy, ix]
            np.testing.assert_allclose(baked.data[iy, ix], mesh.vertices[vi], atol=1e-9)

    def test_centroid_texel_is_corner_mean(self):
        # Flat single-triangle mesh whose UV centroid lands on a texel center.
        res = 64
        uvs = np.array(
            [
                [0.5 / res, 0.5 / res],
                [(0.5 + 48) / res, 0.5 / res],
                [0.5 / res, (0.5 + 48) / res],
            ]
        )
        mesh = generate_head(0, 1.0, 0.0)
        from headsplat.headmodel import HeadMesh

        tri = HeadMesh(
            vertices=np.array([[0.0, 0, 0], [3, 0, 0], [0, 3, 1.5]]),
            faces=np.array([[0, 1, 2]], dtype=np.int32),
            uvs=uvs,
            uv_faces=np.array([[0, 1, 2]], dtype=np.int32),
        )
        baked = bake_position_map(tri, res)
        cy, cx = 16, 16  # (0.5 + 48/3) texels in each axis
        expected = tri.vertices.mean(axis=0)
        np.testing.assert_allclose(baked.data[cy, cx], expected, atol=1e-9)

    def test_round_trip_every_vertex_uv(self):
        mesh = generate_head(subdivision=3, radius=1.0, neck_length=0.3)
        baked = bake_position_map(mesh, 1024)
        errs = []
        for face, uv_face in zip(mesh.faces, mesh.uv_faces):
            got = sample_position_bilinear(baked, mesh.uvs[uv_face])
            errs.append(np.linalg.norm(got - mesh.vertices[face], axis=1).max())
        assert max(errs) < 1e-5

    def test_linear_in_vertices(self):
        # bake(aV + bW) == a bake(V) + b bake(W) on shared topology.
        mesh = generate_head(subdivision=1, radius=1.0, neck_length=0.0)
        rng = np.random.default_rng(3)
        alt = mesh.with_vertices(mesh.vertices + rng.normal(scale=0.05, size=mesh.vertices.shape))
        a, b = 0.3, 0.7
        combo = mesh.with_vertices(a * mesh.vertices + b * alt.vertices)
        baked_combo = bake_position_map(combo, 128)
        baked_a = bake_position_map(mesh, 128)
        baked_b = bake_position_map(alt, 128)
        valid = baked_combo.validity
        np.testing.assert_allclose(
            baked_combo.data[valid],
            a * baked_a.data[valid] + b * baked_b.data[valid],
            atol=1e-6,
        )


class TestBakeNormalMap:
    def test_sphere_normals_point_radially(self):
        mesh = generate_head(subdivision=3, radius=1.0, neck_length=0.0)
        normals = bake_normal_map(mesh, 256)
        positions = bake_position_map(mesh, 256)
        valid = normals.validity & positions.validity
        radial = positions.data[valid]
        radial = radial / np.linalg.norm(radial, axis=1, keepdims=True)
        err = np.linalg.norm(normals.data[valid] - radial, axis=1)
        assert err.max() < 2e-2

    def test_unit_norm(self):
        mesh = generate_head(subdivision=2, radius=2.0, neck_length=0.3)
        normals = bake_normal_map(mesh, 128)
        lengths = np.linalg.norm(normals.data[normals.validity], axis=1)
        np.testing.assert_allclose(lengths, 1.0, atol=1e-4)

    def test_winding_flip_negates_normals(self):
        mesh = generate_head(subdivision=1, radius=1.0, neck_length=0.0)
        from headsplat.headmodel import HeadMesh

        flipped = HeadMesh(
            vertices=mesh.vertices,
            faces=mesh.faces[:, ::-1].copy(),
            uvs=mesh.uvs,
            uv_faces=mesh.uv_faces[:, ::-1].copy(),
        )
        a = bake_normal_map(mesh, 64)
        b = bake_normal_map(flipped, 64)
        valid = a.validity & b.validity
        np.testing.assert_allclose(a.data[valid], -b.data[valid], atol=1e-6)


class TestDisplacement:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.roi = Rect(4, 4, 8, 8)
        self.pos = bake_position_map(generate_head(1, 1.0, 0.0), 24)
        self.shape_a = Blendshape("a", rng.normal(scale=0.02, size=(8, 8, 3)))
        self.shape_b = Blendshape("b", rng.normal(scale=0.02, size=(8, 8, 3)))

    def test_zero_weights_identity(self):
        out = apply_displacement(self.pos, [(self.shape_a, 0.0), (self.shape_b, 0.0)], self.roi)
        np.testing.assert_array_equal(out.data, self.pos.data)
        np.testing.assert_array_equal(out.validity, self.pos.validity)

    def test_constant_displacement_shifts_roi(self):
        delta = 0.125
        shape = Blendshape("dz", np.full((8, 8, 3), 0.0) + np.array([0, 0, delta]))
        out = apply_displacement(self.pos, [(shape, 1.0)], self.roi)
        np.testing.assert_allclose(
            out.data[self.roi.slices][..., 2], self.pos.data[self.roi.slices][..., 2] + delta
        )
        outside = np.ones(self.pos.data.shape[:2], dtype=bool)
        outside[self.roi.slices] = False
        np.testing.assert_array_equal(out.data[outside], self.pos.data[outside])

    def test_weight_linearity(self):
        # Halved weights average the two full-weight displacement fields.
        full_a = apply_displacement(self.pos, [(self.shape_a, 1.0)], self.roi)
        full_b = apply_displacement(self.pos, [(self.shape_b, 1.0)], self.roi)
        half = apply_displacement(self.pos, [(self.shape_a, 0.5), (self.shape_b, 0.5)], self.roi)
        expected = 0.5 * (full_a.data - self.pos.data) + 0.5 * (full_b.data - self.pos.data)
        np.testing.assert_allclose(half.data - self.pos.data, expected, atol=1e-7)

    def test_order_independent(self):
        ab = apply_displacement(self.pos, [(self.shape_a, 0.7), (self.shape_b, 0.3)], self.roi)
        ba = apply_displacement(self.pos, [(self.shape_b, 0.3), (self.shape_a, 0.7)], self.roi)
        np.testing.assert_allclose(ab.data, ba.data, atol=1e-7)

    def test_invalid_weight_rejected(self):
        with pytest.raises(ValueError):
            apply_displacement(self.pos, [(self.shape_a, 1.5)], self.roi)

    def test_size_mismatch_rejected(self):
        bad = Blendshape("bad", np.zeros((4, 4, 3)))
        with pytest.raises(ValueError):
            apply_displacement(self.pos, [(bad, 1.0)], self.roi)


class TestDefaultBlendshapes:
    def test_three_shapes_masked_by_validity(self):
        validity = np.zeros((32, 32), dtype=bool)
        validity[4:28, 4:28] = True
        shapes = default_blendshapes(validity)
        assert sorted(s.name for s in shapes) == ["brow-raise", "jaw-open", "smile"]
        for shape in shapes:
            assert np.all(shape.displacement[~validity] == 0.0)
            assert np.all(np.isfinite(shape.displacement))

    def test_jaw_open_pulls_down(self):
        validity = np.ones((32, 32), dtype=bool)
        jaw = next(s for s in default_blendshapes(validity) if s.name == "jaw-open")
        lower = jaw.displacement[24:, :, 1]
        assert lower.min() < -0.01
        assert np.all(jaw.displacement[..., 1] <= 1e-12)


class TestObjIO:
    def test_round_trip(self, tmp_path):
        mesh = generate_head(subdivision=1, radius=1.1, neck_length=0.25)
        path = tmp_path / "head.obj"
        save_obj(path, mesh)
        loaded = load_obj(path)
        np.testing.assert_allclose(loaded.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_allclose(loaded.uvs, mesh.uvs, atol=1e-7)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)
        np.testing.assert_array_equal(loaded.uv_faces, mesh.uv_faces)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nvt 0 0\nf 1/x 1/1 1/1\n")
        with pytest.raises(ParseError):
            load_obj(path)
