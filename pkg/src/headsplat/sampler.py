"""Regular-grid sampling of fused UV rasters into Gaussian primitives.

The UV raster is partitioned into square cells of ``step`` texels; each cell
with fully valid corners emits two triangles:

    tri 1: (i, j), (i+s, j), (i, j+s)
    tri 2: (i+s, j), (i, j+s), (i+s, j+s)

with attributes (and positions) averaged over the three corner texels.  The
corner topology is cached in the batch so per-frame position updates can skip
the attribute work entirely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .atlas import (
    CH_COLOR,
    CH_OPACITY,
    CH_ROTATION,
    CH_SCALE,
    STATE_ACTIVATED,
    AttributeAtlas,
    PositionMap,
    Rect,
)

DEFAULT_OPACITY_FLOOR = 0.005

_GSPB_MAGIC = b"GSPB"


@dataclass
class PrimitiveBatch:
    """Structure-of-arrays Gaussian primitive storage.

    Attributes:
        positions: (N, 3) world centers.
        rotations: (N, 4) unit quaternions.
        scales: (N, 3) positive world extents.
        opacities: (N,) in [0, 1].
        colors: (N, 3) rgb in [0, 1].
        cells: (N, 3) source (row i, col j, triangle k in {1, 2}).
        corner_rows / corner_cols: (N, 3) texel indices of the three corners,
            kept for fast per-frame position refresh.
        step: sampling step in texels.
        source_shape: (H, W) of the rasters the batch came from.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    cells: np.ndarray
    corner_rows: np.ndarray
    corner_cols: np.ndarray
    step: int
    source_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        """Cheap invariant check: ranges, unit quaternions, positive scales."""
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("batch rotations are not unit quaternions")
        if np.any(self.scales <= 0):
            raise ValueError("batch scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("batch opacities out of [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise ValueError("batch colors out of [0, 1]")

    def concat(self, other: "PrimitiveBatch") -> "PrimitiveBatch":
        if other.source_shape != self.source_shape:
            raise ValueError("cannot concatenate batches from different rasters")
        return PrimitiveBatch(
            positions=np.concatenate([self.positions, other.positions]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            scales=np.concatenate([self.scales, other.scales]),
            opacities=np.concatenate([self.opacities, other.opacities]),
            colors=np.concatenate([self.colors, other.colors]),
            cells=np.concatenate([self.cells, other.cells]),
            corner_rows=np.concatenate([self.corner_rows, other.corner_rows]),
            corner_cols=np.concatenate([self.corner_cols, other.corner_cols]),
            step=self.step,
            source_shape=self.source_shape,
        )


def _cell_corners(height: int, width: int, step: int, origin=(0, 0)):
    """Corner index grids for both triangles of every complete cell.

    Cells where ``i + step`` would leave the raster are skipped, so the grid
    index set is {0, s, 2s, ...} clipped to i + s <= H - 1 (same for j).
    """
    oy, ox = origin
    rows = np.arange(oy, height - step, step, dtype=np.int64)
    cols = np.arange(ox, width - step, step, dtype=np.int64)
    if rows.size == 0 or cols.size == 0:
        empty = np.zeros((0, 3), dtype=np.int64)
        return empty, empty, np.zeros((0, 2), dtype=np.int64)
    gi, gj = np.meshgrid(rows, cols, indexing="ij")
    gi, gj = gi.reshape(-1), gj.reshape(-1)
    # tri 1: (i, j), (i+s, j), (i, j+s); tri 2: (i+s, j), (i, j+s), (i+s, j+s)
    r1 = np.stack([gi, gi + step, gi], axis=1)
    c1 = np.stack([gj, gj, gj + step], axis=1)
    r2 = np.stack([gi + step, gi, gi + step], axis=1)
    c2 = np.stack([gj, gj + step, gj + step], axis=1)
    return (
        np.concatenate([r1, r2]),
        np.concatenate([c1, c2]),
        np.concatenate([np.stack([gi, gj], axis=1)] * 2),
    )


def sample_uv_grid(
    attrs: AttributeAtlas,
    positions: PositionMap,
    step: int,
    opacity_floor: float = DEFAULT_OPACITY_FLOOR,
    roi_exclude: Rect | None = None,
) -> PrimitiveBatch:
    """Extract two triangle primitives per complete grid cell.

    A triangle is emitted only when all three corner texels are valid in both
    the atlas and the position map; primitives whose averaged opacity falls
    below ``opacity_floor`` are dropped.  ``roi_exclude`` skips triangles
    whose corners all lie inside the given rectangle (used for two-zone
    sampling where the face ROI is resampled at a finer step).

    Raises:
        ValueError: raw atlas, step < 1, or step >= min(H, W).
    """
    if attrs.state != STATE_ACTIVATED:
        raise ValueError("sampling requires an activated atlas")
    height, width = attrs.data.shape[:2]
    if positions.data.shape[:2] != (height, width):
        raise ValueError("position map resolution does not match atlas")
    if step < 1:
        raise ValueError("step must be at least 1 texel")
    if step >= min(height, width):
        raise ValueError(f"step {step} too large for raster {(height, width)}")

    rows, cols, cell_ij = _cell_corners(height, width, step)
    tri_k = np.concatenate(
        [np.ones(len(rows) // 2, dtype=np.int64), np.full(len(rows) // 2, 2, dtype=np.int64)]
    )

    valid = attrs.validity & positions.validity
    keep = valid[rows, cols].all(axis=1)
    if roi_exclude is not None:
        rr = roi_exclude
        inside = (
            (rows >= rr.y) & (rows < rr.y + rr.h) & (cols >= rr.x) & (cols < rr.x + rr.w)
        ).all(axis=1)
        keep &= ~inside
    rows, cols, cell_ij, tri_k = rows[keep], cols[keep], cell_ij[keep], tri_k[keep]

    corner_attrs = attrs.data[rows, cols]  # (N, 3, C)
    mean_attrs = corner_attrs.mean(axis=1)

    # Sign-align corner quaternions to the first corner before averaging so
    # antipodal representations of the same rotation cannot cancel.
    quats = corner_attrs[:, :, CH_ROTATION]
    ref = quats[:, :1]
    sign = np.where((quats * ref).sum(axis=2, keepdims=True) < 0, -1.0, 1.0)
    quat_mean = (quats * sign).mean(axis=1)
    norms = np.linalg.norm(quat_mean, axis=1, keepdims=True)
    quat_mean = quat_mean / np.where(norms > 1e-12, norms, 1.0)

    opacities = mean_attrs[:, CH_OPACITY]
    visible = opacities >= opacity_floor

    pos_mean = positions.data[rows, cols].mean(axis=1)

    batch = PrimitiveBatch(
        positions=pos_mean[visible],
        rotations=quat_mean[visible],
        scales=mean_attrs[:, CH_SCALE][visible],
        opacities=opacities[visible],
        colors=np.clip(mean_attrs[:, CH_COLOR][visible], 0.0, 1.0),
        cells=np.concatenate([cell_ij[visible], tri_k[visible][:, None]], axis=1),
        corner_rows=rows[visible],
        corner_cols=cols[visible],
        step=step,
        source_shape=(height, width),
    )
    return batch


def sample_avatar(
    attrs: AttributeAtlas,
    positions: PositionMap,
    face_roi: Rect,
    step: int = 4,
    face_step: int = 2,
    opacity_floor: float = DEFAULT_OPACITY_FLOOR,
) -> PrimitiveBatch:
    """Two-zone sampling: coarse grid everywhere, finer grid inside the face ROI."""
    if face_step == step:
        return sample_uv_grid(attrs, positions, step, opacity_floor)
    base = sample_uv_grid(attrs, positions, step, opacity_floor, roi_exclude=face_roi)
    # Restrict the fine pass to the ROI window by clipping the corner grid.
    fine = sample_uv_grid(
        _crop_view(attrs, face_roi),
        _crop_pos_view(positions, face_roi),
        face_step,
        opacity_floor,
    )
    fine = PrimitiveBatch(
        positions=fine.positions,
        rotations=fine.rotations,
        scales=fine.scales,
        opacities=fine.opacities,
        colors=fine.colors,
        cells=fine.cells + np.array([face_roi.y, face_roi.x, 0], dtype=np.int64),
        corner_rows=fine.corner_rows + face_roi.y,
        corner_cols=fine.corner_cols + face_roi.x,
        step=step,
        source_shape=base.source_shape,
    )
    return base.concat(fine)


def _crop_view(attrs: AttributeAtlas, roi: Rect) -> AttributeAtlas:
    return AttributeAtlas(
        data=attrs.data[roi.slices],
        validity=attrs.validity[roi.slices],
        origin=attrs.origin,
        state=attrs.state,
    )


def _crop_pos_view(pos: PositionMap, roi: Rect) -> PositionMap:
    return PositionMap(data=pos.data[roi.slices], validity=pos.validity[roi.slices])


def resample_positions_only(batch: PrimitiveBatch, positions: PositionMap) -> PrimitiveBatch:
    """Refresh primitive centers from a new position map, reusing cached topology.

    Equivalent to a full resample restricted to the position channel; all
    other attributes are carried over untouched.

    Raises:
        ValueError: position map resolution differs from the batch source.
    """
    if positions.data.shape[:2] != batch.source_shape:
        raise ValueError(
            f"position map {positions.data.shape[:2]} does not match batch source {batch.source_shape}"
        )
    new_pos = positions.data[batch.corner_rows, batch.corner_cols].mean(axis=1)
    return PrimitiveBatch(
        positions=new_pos,
        rotations=batch.rotations,
        scales=batch.scales,
        opacities=batch.opacities,
        colors=batch.colors,
        cells=batch.cells,
        corner_rows=batch.corner_rows,
        corner_cols=batch.corner_cols,
        step=batch.step,
        source_shape=batch.source_shape,
    )


def expected_triangle_count(height: int, width: int, step: int) -> int:
    """Counting oracle companion: triangles emitted at full validity."""
    rows = max((height - 1) // step, 0)
    cols = max((width - 1) // step, 0)
    return 2 * rows * cols


# ---------------------------------------------------------------------------
# GSPB binary export: magic "GSPB" | u32 count | f32 SoA arrays
# (positions x3, quaternions x4, scales x3, opacity x1, rgb x3).
# ---------------------------------------------------------------------------


def save_batch(path, batch: PrimitiveBatch) -> None:
    with open(path, "wb") as fh:
        fh.write(_GSPB_MAGIC)
        fh.write(struct.pack("<I", len(batch)))
        for arr in (batch.positions, batch.rotations, batch.scales, batch.opacities, batch.colors):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_batch(path) -> dict[str, np.ndarray]:
    """Read a GSPB file into plain arrays (topology metadata is not stored)."""
    from .errors import ParseError

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _GSPB_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r} (offset 0)")
    (count,) = struct.unpack_from("<I", blob, 4)
    sizes = {"positions": 3, "rotations": 4, "scales": 3, "opacities": 1, "colors": 3}
    expected = 8 + 4 * count * sum(sizes.values())
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)} (offset 8)")
    out = {}
    offset = 8
    for name, dim in sizes.items():
        arr = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
        out[name] = arr.reshape(count, dim) if dim > 1 else arr.copy()
        offset += count * dim * 4
    return out
