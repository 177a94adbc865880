"""Static/dynamic fusion: per-frame combination of the precomputed head layer
with the expression-dependent face layer.

Position fusion uses the hard face mask:

    fused = face * (static + disp) + (1 - face) * (static + offset)

Attribute fusion selects opacity/rotation/scale with the hard mask and blends
color with the soft transition mask, so the face border shows no color seam
while geometry attributes switch cleanly.  ``AvatarFrameBuilder`` caches every
expression-invariant intermediate once and touches only the ROI window per
frame; its output is bitwise identical to the uncached full-raster path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .atlas import (
    CH_COLOR,
    CH_OFFSET,
    STATE_ACTIVATED,
    AttributeAtlas,
    BlendMasks,
    PositionMap,
    Rect,
    embed_patch,
)
from .headmodel import Blendshape

STAGE_DYNAMIC = "dynamic_generation"
STAGE_COLOR_FUSION = "color_fusion"
STAGE_POSITION_SAMPLING = "position_sampling"
STAGE_RENDERING = "rendering"
FRAME_STAGES = (STAGE_DYNAMIC, STAGE_COLOR_FUSION, STAGE_POSITION_SAMPLING, STAGE_RENDERING)


@dataclass
class FrameTiming:
    """Per-stage durations for one frame, microseconds."""

    stages: dict = field(default_factory=lambda: {name: 0.0 for name in FRAME_STAGES})
    total_us: float = 0.0

    def record(self, stage: str, seconds: float) -> None:
        if stage not in self.stages:
            raise ValueError(f"unknown stage {stage!r}; allowed: {FRAME_STAGES}")
        self.stages[stage] = seconds * 1e6


@dataclass
class FusedFrame:
    """One frame's fused rasters plus its timing record.

    The rasters may alias the builder's cache buffers; they stay valid until
    the next ``build_frame`` call on the same builder.
    """

    positions: PositionMap
    attributes: AttributeAtlas
    timing: FrameTiming


def _check_resolution(name: str, arr: np.ndarray, want: tuple[int, int]) -> None:
    if arr.shape[:2] != want:
        raise ValueError(f"{name} has resolution {arr.shape[:2]}, expected {want}")


def fuse_positions(
    static_pos: PositionMap,
    offset: np.ndarray,
    disp: np.ndarray,
    masks: BlendMasks,
) -> PositionMap:
    """Hard-mask position fusion; ``disp`` covers only the face ROI.

    The displacement contributes exactly where face_mask is 1, the offset
    exactly where it is 0; the validity mask passes through from the static
    map.
    """
    shape = static_pos.data.shape[:2]
    _check_resolution("offset map", offset, shape)
    _check_resolution("face mask", masks.face_mask, shape)
    roi = masks.face_roi
    if disp.shape[:2] != (roi.h, roi.w):
        raise ValueError(f"displacement is {disp.shape[:2]}, roi wants {(roi.h, roi.w)}")
    disp_full = embed_patch(np.zeros_like(static_pos.data), disp, roi)
    face = masks.face_mask[..., None]
    fused = face * (static_pos.data + disp_full) + (1.0 - face) * (static_pos.data + offset)
    return PositionMap(data=fused, validity=static_pos.validity.copy())


def fuse_attributes(
    static_atlas: AttributeAtlas,
    dynamic_atlas: AttributeAtlas,
    masks: BlendMasks,
    soft_opacity: bool = False,
) -> AttributeAtlas:
    """Blend two activated atlases into the per-frame attribute set.

    Opacity, rotation, and scale take the hard mask (each texel comes from
    exactly one source, so quaternions need no re-normalization); color takes
    the soft mask.  Offset channels pass through from the static atlas (they
    belong to the static position pathway).  ``soft_opacity`` switches opacity
    to the soft mask for seam experiments.

    Raises:
        ValueError: raw input atlas, or resolution mismatch.
    """
    if static_atlas.state != STATE_ACTIVATED or dynamic_atlas.state != STATE_ACTIVATED:
        raise ValueError("fuse_attributes requires activated atlases")
    shape = static_atlas.data.shape[:2]
    _check_resolution("dynamic atlas", dynamic_atlas.data, shape)
    _check_resolution("face mask", masks.face_mask, shape)

    hard = masks.face_mask[..., None]
    soft = masks.soft_mask[..., None]
    fused = hard * dynamic_atlas.data + (1.0 - hard) * static_atlas.data
    fused[..., CH_COLOR] = (
        soft * dynamic_atlas.data[..., CH_COLOR] + (1.0 - soft) * static_atlas.data[..., CH_COLOR]
    )
    if soft_opacity:
        fused[..., 3] = (
            masks.soft_mask * dynamic_atlas.opacity + (1.0 - masks.soft_mask) * static_atlas.opacity
        )
    fused[..., CH_OFFSET] = static_atlas.data[..., CH_OFFSET]
    return AttributeAtlas(
        data=fused, validity=static_atlas.validity.copy(), origin="fused", state=STATE_ACTIVATED
    )


def combine_displacements(
    blendshapes: list[tuple[Blendshape, float]], roi: Rect, dtype=np.float64
) -> np.ndarray:
    """Weighted sum of expression displacement rasters over the ROI."""
    disp = np.zeros((roi.h, roi.w, 3), dtype=dtype)
    for shape, weight in blendshapes:
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"weight for {shape.name!r} must be in [0, 1], got {weight}")
        if shape.displacement.shape[:2] != (roi.h, roi.w):
            raise ValueError(f"blendshape {shape.name!r} does not match roi {roi}")
        disp += weight * shape.displacement.astype(dtype, copy=False)
    return disp


@dataclass
class StaticAssets:
    """Identity-specific inputs shared by every frame."""

    static_atlas: AttributeAtlas  # activated
    static_positions: PositionMap
    offset_map: np.ndarray  # (H, W, 3)
    dynamic_atlas: AttributeAtlas  # activated, embedded at full resolution
    masks: BlendMasks
    blendshapes: dict[str, Blendshape]


class AvatarFrameBuilder:
    """Per-frame fusion with a one-time static cache.

    On construction all expression-invariant work happens once: the hard/soft
    attribute fusion over the full raster and the static side of the position
    fusion.  ``build_frame`` then rewrites only the ROI windows, which is what
    keeps the per-frame cost proportional to the face region rather than the
    full atlas.  One builder serves one avatar; concurrent ``build_frame``
    calls on the same instance require external synchronization.
    """

    def __init__(self, assets: StaticAssets):
        if assets.static_atlas.state != STATE_ACTIVATED:
            raise ValueError("static atlas must be activated before caching")
        if assets.dynamic_atlas.state != STATE_ACTIVATED:
            raise ValueError("dynamic atlas must be activated before caching")
        roi = assets.masks.face_roi
        outside = assets.masks.face_mask.copy()
        outside[roi.slices] = 0.0
        if np.any(outside != 0.0):
            raise ValueError("face mask must be zero outside the face ROI")
        self.assets = assets
        self.roi = roi
        # Full-raster fusion once; per-frame work only rewrites the ROI window.
        self._fused_attrs = fuse_attributes(
            assets.static_atlas, assets.dynamic_atlas, assets.masks
        )
        zero_disp = np.zeros((roi.h, roi.w, 3), dtype=assets.static_positions.data.dtype)
        self._fused_pos = fuse_positions(
            assets.static_positions, assets.offset_map, zero_disp, assets.masks
        )
        sl = roi.slices
        self._face_window = assets.masks.face_mask[sl][..., None]
        self._soft_window = assets.masks.soft_mask[sl][..., None]
        self._static_pos_window = assets.static_positions.data[sl]
        self._offset_window = assets.offset_map[sl]
        self._static_attr_window = assets.static_atlas.data[sl]
        self._dynamic_attr_window = assets.dynamic_atlas.data[sl]

    def resolve_weights(self, weights: dict[str, float]) -> list[tuple[Blendshape, float]]:
        pairs = []
        for name, weight in weights.items():
            if name not in self.assets.blendshapes:
                raise KeyError(f"unknown blendshape {name!r}")
            pairs.append((self.assets.blendshapes[name], float(weight)))
        return pairs

    def build_frame(self, weights: dict[str, float]) -> FusedFrame:
        """Fuse one frame for the given expression weights.

        Returns rasters that alias the internal cache (valid until the next
        call); callers needing persistence must copy.
        """
        timing = FrameTiming()
        t0 = time.perf_counter()
        disp = combine_displacements(
            self.resolve_weights(weights), self.roi, dtype=self._fused_pos.data.dtype
        )
        pos_window = self._face_window * (self._static_pos_window + disp) + (
            1.0 - self._face_window
        ) * (self._static_pos_window + self._offset_window)
        self._fused_pos.data[self.roi.slices] = pos_window
        timing.record(STAGE_DYNAMIC, time.perf_counter() - t0)

        # The dynamic side only ever differs inside the ROI, so per-frame
        # attribute fusion rewrites just that window (identical arithmetic to
        # the full-raster path).
        t0 = time.perf_counter()
        attr_window = self._face_window * self._dynamic_attr_window + (
            1.0 - self._face_window
        ) * self._static_attr_window
        attr_window[..., CH_COLOR] = (
            self._soft_window * self._dynamic_attr_window[..., CH_COLOR]
            + (1.0 - self._soft_window) * self._static_attr_window[..., CH_COLOR]
        )
        attr_window[..., CH_OFFSET] = self._static_attr_window[..., CH_OFFSET]
        self._fused_attrs.data[self.roi.slices] = attr_window
        timing.record(STAGE_COLOR_FUSION, time.perf_counter() - t0)
        return FusedFrame(positions=self._fused_pos, attributes=self._fused_attrs, timing=timing)


def build_frame_uncached(assets: StaticAssets, weights: dict[str, float]) -> FusedFrame:
    """Full-raster reference path recomputing everything from the raw assets.

    Exists to pin the cached builder: both paths must produce bit-identical
    rasters for any weight set.
    """
    timing = FrameTiming()
    t0 = time.perf_counter()
    pairs = [(assets.blendshapes[name], float(w)) for name, w in weights.items()]
    disp = combine_displacements(pairs, assets.masks.face_roi, dtype=assets.static_positions.data.dtype)
    positions = fuse_positions(assets.static_positions, assets.offset_map, disp, assets.masks)
    timing.record(STAGE_DYNAMIC, time.perf_counter() - t0)

    t0 = time.perf_counter()
    attrs = fuse_attributes(assets.static_atlas, assets.dynamic_atlas, assets.masks)
    timing.record(STAGE_COLOR_FUSION, time.perf_counter() - t0)
    return FusedFrame(positions=positions, attributes=attrs, timing=timing)
