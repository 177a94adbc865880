"""Synthetic parametric head: a UV-mapped icosphere with a neck, position/normal
map baking, and procedural expression displacement maps.

The head is a deterministic stand-in for a tracked template mesh: it provides
everything the runtime needs (a UV-parameterized surface, baked position and
normal maps, displacement-map inputs) without any learned components.

UV layout: the classic icosahedron net on an 11-column grid.  Pole vertices
are duplicated in UV (one copy per cap triangle) and the wrap column appears
at both u~0 and u~1, so island borders are real seams while the 3D mesh stays
closed.  All UV coordinates are snapped to texel centers of a 1024-texel
lattice, which makes baking at resolution 1024 exact at the vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import PositionMap, Rect
from .errors import ParseError

# Vertex UVs snap to (i + 0.5) / UV_SNAP_RES so they coincide with texel
# centers when baking at this resolution.
UV_SNAP_RES = 1024
MAX_SUBDIVISION = 5


@dataclass
class HeadMesh:
    """Triangle mesh with an independent UV topology (OBJ ``f v/vt`` style).

    Attributes:
        vertices: (V, 3) float64 positions, world units.
        faces: (F, 3) int32 indices into ``vertices``.
        uvs: (M, 2) float64 coordinates in [0, 1]^2; seams duplicate entries.
        uv_faces: (F, 3) int32 indices into ``uvs``, aligned with ``faces``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    uv_faces: np.ndarray
    _neighbors: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.faces.shape != self.uv_faces.shape:
            raise ValueError("faces and uv_faces must align")
        if np.any(self.uvs < 0) or np.any(self.uvs > 1):
            raise ValueError("UV coordinates must lie inside the unit square")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def face_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit face normals plus twice-area weights; degenerate faces get a
        zero normal and are reported via the returned area array."""
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area2 = np.linalg.norm(cross, axis=1)
        safe = np.where(area2 > 1e-12, area2, 1.0)
        normals = cross / safe[:, None]
        normals[area2 <= 1e-12] = 0.0
        return normals, area2

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unit length)."""
        normals, area2 = self.face_normals()
        acc = np.zeros_like(self.vertices)
        np.add.at(acc, self.faces.reshape(-1), np.repeat(normals * area2[:, None], 3, axis=0))
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(norms > 1e-12, norms, 1.0)

    def vertex_neighbors(self) -> list:
        """Per-vertex sorted neighbor index arrays (1-ring over edges)."""
        if self._neighbors is None:
            sets: list[set[int]] = [set() for _ in range(self.num_vertices)]
            for a, b, c in self.faces:
                sets[a].update((b, c))
                sets[b].update((a, c))
                sets[c].update((a, b))
            self._neighbors = [np.array(sorted(s), dtype=np.int32) for s in sets]
        return self._neighbors

    def edge_face_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior edges as (E, 2) face-index pairs plus (B,) boundary edge count.

        Raises:
            ValueError: if any edge is shared by more than two faces.
        """
        edges: dict[tuple[int, int], list[int]] = {}
        for fi, (a, b, c) in enumerate(self.faces):
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                edges.setdefault(key, []).append(fi)
        pairs = []
        boundary = 0
        for key, fs in edges.items():
            if len(fs) > 2:
                raise ValueError(f"non-manifold edge {key} shared by {len(fs)} faces")
            if len(fs) == 2:
                pairs.append(fs)
            else:
                boundary += 1
        return np.array(sorted(pairs), dtype=np.int32).reshape(-1, 2), np.int32(boundary)

    def boundary_vertices(self) -> np.ndarray:
        """Indices of vertices incident to an edge with fewer than two faces."""
        edges: dict[tuple[int, int], int] = {}
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                edges[key] = edges.get(key, 0) + 1
        on_boundary = sorted({v for (a, b), n in edges.items() if n == 1 for v in (a, b)})
        return np.array(on_boundary, dtype=np.int32)

    def with_vertices(self, vertices: np.ndarray) -> "HeadMesh":
        """Same topology with replaced vertex positions."""
        return HeadMesh(
            vertices=np.asarray(vertices, dtype=np.float64),
            faces=self.faces,
            uvs=self.uvs,
            uv_faces=self.uv_faces,
        )

    def position_at_uv(self, uv: np.ndarray) -> np.ndarray:
        """Exact piecewise-linear surface position at one UV coordinate.

        Locates the UV triangle containing the point and interpolates its 3D
        corners barycentrically.  Raises ValueError outside every island.
        """
        bary, face = self._locate(np.asarray(uv, dtype=np.float64))
        corners = self.vertices[self.faces[face]]
        return bary @ corners

    def _locate(self, uv: np.ndarray) -> tuple[np.ndarray, int]:
        t = self.uvs[self.uv_faces]
        v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
        d = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])
        safe = np.where(np.abs(d) > 1e-18, d, 1.0)
        du, dv = uv[0] - v0[:, 0], uv[1] - v0[:, 1]
        b1 = (du * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * dv) / safe
        b2 = ((v1[:, 0] - v0[:, 0]) * dv - du * (v1[:, 1] - v0[:, 1])) / safe
        b0 = 1.0 - b1 - b2
        eps = 1e-9
        inside = (np.abs(d) > 1e-18) & (b0 >= -eps) & (b1 >= -eps) & (b2 >= -eps)
        hits = np.flatnonzero(inside)
        if hits.size == 0:
            raise ValueError(f"uv {uv} lies outside every UV island")
        face = int(hits[0])
        return np.array([b0[face], b1[face], b2[face]]), face


@dataclass
class NormalMap:
    """(H, W, 3) unit surface normals over UV space with island validity."""

    data: np.ndarray
    validity: np.ndarray
    degenerate_faces: int = 0


@dataclass
class Blendshape:
    """Named expression displacement raster covering the dynamic face ROI."""

    name: str
    displacement: np.ndarray  # (roi.h, roi.w, 3) world-unit offsets

    def __post_init__(self):
        if not np.all(np.isfinite(self.displacement)):
            raise ValueError(f"blendshape {self.name!r} contains non-finite values")


def _snap_uv(uv: np.ndarray) -> np.ndarray:
    idx = np.clip(np.round(uv * UV_SNAP_RES - 0.5), 0, UV_SNAP_RES - 1)
    return (idx + 0.5) / UV_SNAP_RES


def _base_icosphere() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unit icosahedron with the 11-column net UV layout."""
    lat = np.arctan(0.5)
    ring_y, ring_r = np.sin(lat), np.cos(lat)
    verts = [(0.0, 1.0, 0.0)]
    for i in range(5):  # upper ring
        phi = 2.0 * np.pi * i / 5.0
        verts.append((ring_r * np.cos(phi), ring_y, ring_r * np.sin(phi)))
    for i in range(5):  # lower ring, offset half a step
        phi = 2.0 * np.pi * (i + 0.5) / 5.0
        verts.append((ring_r * np.cos(phi), -ring_y, -0.0 + ring_r * np.sin(phi)))
    verts.append((0.0, -1.0, 0.0))
    vertices = np.array(verts, dtype=np.float64)

    # UV net rows: poles at v=0 / v=1, rings at v=1/3 and v=2/3.
    uvs = []
    top = [((2 * i + 1) / 11.0, 0.0) for i in range(5)]
    upper = [(2 * i / 11.0, 1.0 / 3.0) for i in range(6)]
    lower = [((2 * i + 1) / 11.0, 2.0 / 3.0) for i in range(6)]
    bottom = [((2 * i + 2) / 11.0, 1.0) for i in range(5)]
    uvs = np.array(top + upper + lower + bottom, dtype=np.float64)
    i_top, i_up, i_lo, i_bot = 0, 5, 11, 17

    north, south = 0, 11
    up = lambda i: 1 + (i % 5)
    lo = lambda i: 6 + (i % 5)

    faces, uv_faces = [], []
    for i in range(5):
        # cap around the north pole
        faces.append((north, up(i + 1), up(i)))
        uv_faces.append((i_top + i, i_up + i + 1, i_up + i))
        # middle strip
        faces.append((up(i), up(i + 1), lo(i)))
        uv_faces.append((i_up + i, i_up + i + 1, i_lo + i))
        faces.append((up(i + 1), lo(i + 1), lo(i)))
        uv_faces.append((i_up + i + 1, i_lo + i + 1, i_lo + i))
        # cap around the south pole
        faces.append((lo(i), lo(i + 1), south))
        uv_faces.append((i_lo + i, i_lo + i + 1, i_bot + i))
    return (
        vertices,
        np.array(faces, dtype=np.int32),
        _snap_uv(uvs),
        np.array(uv_faces, dtype=np.int32),
    )


def _subdivide(vertices, faces, uvs, uv_faces):
    """One 4-way subdivision step; 3D midpoints are re-projected to the sphere."""
    verts = list(map(tuple, vertices))
    uv_list = list(map(tuple, uvs))
    mid_v: dict[tuple[int, int], int] = {}
    mid_uv: dict[tuple[int, int], int] = {}

    def midpoint_vertex(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in mid_v:
            p = 0.5 * (vertices[a] + vertices[b])
            p = p / np.linalg.norm(p)
            mid_v[key] = len(verts)
            verts.append(tuple(p))
        return mid_v[key]

    def midpoint_uv(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in mid_uv:
            q = _snap_uv(0.5 * (uvs[a] + uvs[b]))
            mid_uv[key] = len(uv_list)
            uv_list.append(tuple(q))
        return mid_uv[key]

    new_faces, new_uv_faces = [], []
    for (a, b, c), (ta, tb, tc) in zip(faces, uv_faces):
        ab, bc, ca = midpoint_vertex(a, b), midpoint_vertex(b, c), midpoint_vertex(c, a)
        tab, tbc, tca = midpoint_uv(ta, tb), midpoint_uv(tb, tc), midpoint_uv(tc, ta)
        new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        new_uv_faces += [(ta, tab, tca), (tab, tb, tbc), (tca, tbc, tc), (tab, tbc, tca)]
    return (
        np.array(verts, dtype=np.float64),
        np.array(new_faces, dtype=np.int32),
        np.array(uv_list, dtype=np.float64),
        np.array(new_uv_faces, dtype=np.int32),
    )


def generate_head(subdivision: int = 3, radius: float = 1.0, neck_length: float = 0.3) -> HeadMesh:
    """Deterministic UV-sphere head with a smooth neck extrusion.

    Same parameters always produce a bit-identical mesh.  Subdivision level n
    yields 20 * 4^n faces.

    Raises:
        ValueError: subdivision outside [0, 5], or non-positive radius.
    """
    if subdivision < 0 or subdivision > MAX_SUBDIVISION:
        raise ValueError(f"subdivision must be in [0, {MAX_SUBDIVISION}], got {subdivision}")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if neck_length < 0:
        raise ValueError("neck_length must be non-negative")
    vertices, faces, uvs, uv_faces = _base_icosphere()
    for _ in range(subdivision):
        vertices, faces, uvs, uv_faces = _subdivide(vertices, faces, uvs, uv_faces)
    vertices = vertices * radius
    if neck_length > 0:
        # Pull everything below 55% of the radius smoothly downward (C1 ramp).
        t = np.clip((-vertices[:, 1] / radius - 0.55) / 0.45, 0.0, 1.0)
        vertices = vertices.copy()
        vertices[:, 1] -= neck_length * t * t
    return HeadMesh(vertices=vertices, faces=faces, uvs=uvs, uv_faces=uv_faces)


def _rasterize_uv(mesh: HeadMesh, values: np.ndarray, resolution: int):
    """Rasterize per-vertex values over the UV islands at texel centers.

    Returns (raster (R, R, C), validity, degenerate_face_count).  A one-texel
    pull-dilation pads island borders so grid sampling near seams never reads
    an uninitialized texel.
    """
    res = int(resolution)
    channels = values.shape[1]
    raster = np.zeros((res, res, channels), dtype=np.float64)
    valid = np.zeros((res, res), dtype=bool)
    degenerate = 0

    tri_uv = mesh.uvs[mesh.uv_faces] * res - 0.5  # texel-center coordinates
    for f in range(mesh.num_faces):
        (u0, v0), (u1, v1), (u2, v2) = tri_uv[f]
        det = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(det) < 1e-12:
            degenerate += 1
            continue
        x_lo = max(int(np.ceil(min(u0, u1, u2))), 0)
        x_hi = min(int(np.floor(max(u0, u1, u2))), res - 1)
        y_lo = max(int(np.ceil(min(v0, v1, v2))), 0)
        y_hi = min(int(np.floor(max(v0, v1, v2))), res - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1, dtype=np.float64)
        ys = np.arange(y_lo, y_hi + 1, dtype=np.float64)
        gu, gv = np.meshgrid(xs, ys)
        du, dv = gu - u0, gv - v0
        b1 = (du * (v2 - v0) - (u2 - u0) * dv) / det
        b2 = ((u1 - u0) * dv - du * (v1 - v0)) / det
        b0 = 1.0 - b1 - b2
        eps = 1e-9
        inside = (b0 >= -eps) & (b1 >= -eps) & (b2 >= -eps)
        if not inside.any():
            continue
        vals = mesh.faces[f] if values.shape[0] == mesh.num_vertices else mesh.uv_faces[f]
        c0, c1, c2 = values[vals[0]], values[vals[1]], values[vals[2]]
        iy, ix = np.nonzero(inside)
        interp = (
            b0[inside][:, None] * c0[None, :]
            + b1[inside][:, None] * c1[None, :]
            + b2[inside][:, None] * c2[None, :]
        )
        raster[iy + y_lo, ix + x_lo] = interp
        valid[iy + y_lo, ix + x_lo] = True

    # 1-texel pull dilation: average the valid 8-neighborhood into border texels.
    shifted_sum = np.zeros_like(raster)
    shifted_cnt = np.zeros((res, res), dtype=np.float64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            src_y = slice(max(0, -dy), res - max(0, dy))
            src_x = slice(max(0, -dx), res - max(0, dx))
            dst_y = slice(max(0, dy), res - max(0, -dy))
            dst_x = slice(max(0, dx), res - max(0, -dx))
            w = valid[src_y, src_x].astype(np.float64)
            shifted_sum[dst_y, dst_x] += raster[src_y, src_x] * w[..., None]
            shifted_cnt[dst_y, dst_x] += w
    pad = (~valid) & (shifted_cnt > 0)
    raster[pad] = shifted_sum[pad] / shifted_cnt[pad][:, None]
    valid = valid | pad
    return raster, valid, degenerate


def bake_position_map(mesh: HeadMesh, resolution: int) -> PositionMap:
    """Rasterize surface positions over the UV islands at texel centers."""
    raster, valid, _ = _rasterize_uv(mesh, mesh.vertices, resolution)
    return PositionMap(data=raster, validity=valid)


def bake_normal_map(mesh: HeadMesh, resolution: int) -> NormalMap:
    """Rasterize area-weighted vertex normals; texels are re-normalized."""
    raster, valid, degenerate = _rasterize_uv(mesh, mesh.vertex_normals(), resolution)
    norms = np.linalg.norm(raster, axis=-1, keepdims=True)
    raster = raster / np.where(norms > 1e-12, norms, 1.0)
    return NormalMap(data=raster, validity=valid, degenerate_faces=degenerate)


def sample_position_bilinear(pos: PositionMap, uvs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a position map at (N, 2) UV coordinates.

    At vertex UVs (which sit exactly on texel centers of the snap lattice)
    this degenerates to an exact texel read when the map resolution matches
    the snap resolution.
    """
    uvs = np.atleast_2d(np.asarray(uvs, dtype=np.float64))
    h, w = pos.data.shape[:2]
    fx = np.clip(uvs[:, 0] * w - 0.5, 0.0, w - 1.0)
    fy = np.clip(uvs[:, 1] * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (fx - x0)[:, None]
    ty = (fy - y0)[:, None]
    d = pos.data
    top = d[y0, x0] * (1 - tx) + d[y0, x1] * tx
    bot = d[y1, x0] * (1 - tx) + d[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def apply_displacement(
    pos: PositionMap,
    blendshapes: list[tuple[Blendshape, float]],
    roi: Rect,
) -> PositionMap:
    """Add weighted expression displacements to the ROI window of a position map.

    Raises:
        ValueError: weight outside [0, 1] or displacement size != ROI size.
    """
    out = pos.copy()
    window = out.data[roi.slices]
    for shape, weight in blendshapes:
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"weight for {shape.name!r} must be in [0, 1], got {weight}")
        if shape.displacement.shape[:2] != (roi.h, roi.w):
            raise ValueError(
                f"blendshape {shape.name!r} is {shape.displacement.shape[:2]}, roi wants {(roi.h, roi.w)}"
            )
        window += weight * shape.displacement
    return out


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def default_blendshapes(roi_validity: np.ndarray, amplitude: float = 0.12) -> list[Blendshape]:
    """Three procedural expression shapes over the ROI, masked by validity.

    jaw-open:   downward bump over the lower half, centered horizontally:
                dy = -A * smoothstep((t - 0.5)/0.5) * exp(-((s-0.5)/0.25)^2)
    smile:      two lateral lobes at (0.3, 0.65) and (0.7, 0.65) pushing the
                mouth corners outward and slightly up.
    brow-raise: upward band over the top third.

    (s, t) are ROI-normalized coordinates, s along x and t along y.
    """
    h, w = roi_validity.shape
    t = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    s = (np.arange(w, dtype=np.float64)[None, :] + 0.5) / w
    mask = roi_validity.astype(np.float64)

    shapes = []

    jaw = _smoothstep((t - 0.5) / 0.5) * np.exp(-(((s - 0.5) / 0.25) ** 2))
    disp = np.zeros((h, w, 3))
    disp[..., 1] = -amplitude * jaw
    shapes.append(Blendshape("jaw-open", disp * mask[..., None]))

    lobe_l = np.exp(-(((s - 0.3) / 0.12) ** 2) - (((t - 0.65) / 0.12) ** 2))
    lobe_r = np.exp(-(((s - 0.7) / 0.12) ** 2) - (((t - 0.65) / 0.12) ** 2))
    disp = np.zeros((h, w, 3))
    disp[..., 0] = 0.5 * amplitude * (lobe_r - lobe_l)
    disp[..., 1] = 0.25 * amplitude * (lobe_r + lobe_l)
    shapes.append(Blendshape("smile", disp * mask[..., None]))

    brow = _smoothstep((0.3 - t) / 0.3) * np.exp(-(((s - 0.5) / 0.35) ** 2))
    disp = np.zeros((h, w, 3))
    disp[..., 1] = 0.4 * amplitude * brow
    shapes.append(Blendshape("brow-raise", disp * mask[..., None]))
    return shapes


# ---------------------------------------------------------------------------
# OBJ serialization (ASCII, `v`/`vt`/`f v/vt` records)
# ---------------------------------------------------------------------------


def save_obj(path, mesh: HeadMesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.uvs:
        lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
    for f, tf in zip(mesh.faces, mesh.uv_faces):
        lines.append(f"f {f[0]+1}/{tf[0]+1} {f[1]+1}/{tf[1]+1} {f[2]+1}/{tf[2]+1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> HeadMesh:
    vertices, uvs, faces, uv_faces = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = [], []
                for token in parts[1:4]:
                    a, b = token.split("/")[:2]
                    vi.append(int(a) - 1)
                    ti.append(int(b) - 1)
                faces.append(vi)
                uv_faces.append(ti)
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: malformed OBJ record at line {lineno}: {line!r}") from exc
    return HeadMesh(
        vertices=np.array(vertices, dtype=np.float64),
        faces=np.array(faces, dtype=np.int32),
        uvs=np.array(uvs, dtype=np.float64),
        uv_faces=np.array(uv_faces, dtype=np.int32),
    )
