"""Per-frame avatar runtime: wires the static cache, the per-frame fusion
window, cached sampling topology, and the tiled renderer into a render loop
with the four-stage timing record."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .blending import (
    STAGE_POSITION_SAMPLING,
    STAGE_RENDERING,
    AvatarFrameBuilder,
    FrameTiming,
)
from .bundle import AvatarBundle
from .geom import Camera, orbit_camera
from .render import RenderConfig, composite_tiled, project_batch
from .sampler import resample_positions_only, sample_avatar

DEFAULT_STEP = 4
DEFAULT_FACE_STEP = 2


@dataclass
class FrameResult:
    image: np.ndarray  # (H, W, 3) linear floats in [0, 1]
    timing: FrameTiming
    splat_count: int


class AvatarRuntime:
    """Drives one avatar identity.

    The constructor performs every identity-level computation (activation,
    full-raster fusion, grid sampling of the attribute set); ``render_frame``
    then touches only the dynamic path: ROI-window fusion, position-only
    resampling against the cached cell topology, projection, compositing.
    """

    def __init__(
        self,
        bundle: AvatarBundle,
        step: int = DEFAULT_STEP,
        face_step: int = DEFAULT_FACE_STEP,
        config: RenderConfig = RenderConfig(),
        background=(0.0, 0.0, 0.0),
    ):
        self.bundle = bundle
        self.config = config
        self.background = tuple(background)
        self.builder = AvatarFrameBuilder(bundle.to_static_assets())
        base = self.builder.build_frame({})
        self.base_batch = sample_avatar(
            base.attributes,
            base.positions,
            bundle.face_roi,
            step=step,
            face_step=face_step,
            opacity_floor=config.opacity_floor,
        )
        self.base_batch.validate()
        center = bundle.static_positions.data[bundle.static_positions.validity].mean(axis=0)
        self.orbit_center = center
        self.orbit_forward = self._face_direction(center)

    def _face_direction(self, center: np.ndarray) -> np.ndarray:
        """Horizontal direction from the head center toward the face region."""
        roi = self.bundle.face_roi
        window = self.bundle.static_positions.data[roi.slices]
        wvalid = self.bundle.static_positions.validity[roi.slices]
        if not wvalid.any():
            return np.array([0.0, 0.0, 1.0])
        direction = window[wvalid].mean(axis=0) - center
        direction[1] = 0.0
        norm = np.linalg.norm(direction)
        return direction / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])

    @property
    def blendshape_names(self) -> list[str]:
        return sorted(self.bundle.blendshapes)

    def orbit_view(self, yaw_deg: float, pitch_deg: float, distance: float, width: int, height: int) -> Camera:
        return orbit_camera(
            yaw_deg,
            pitch_deg,
            distance,
            target=self.orbit_center,
            forward_dir=self.orbit_forward,
            fx=1.1 * width,
            fy=1.1 * width,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )

    def render_frame(self, weights: dict[str, float], camera: Camera) -> FrameResult:
        t_frame = time.perf_counter()
        frame = self.builder.build_frame(weights)
        timing = frame.timing

        t0 = time.perf_counter()
        batch = resample_positions_only(self.base_batch, frame.positions)
        timing.record(STAGE_POSITION_SAMPLING, time.perf_counter() - t0)

        t0 = time.perf_counter()
        splats = project_batch(batch, camera, self.config)
        target = composite_tiled(splats, camera, self.background, self.config)
        timing.record(STAGE_RENDERING, time.perf_counter() - t0)

        timing.total_us = (time.perf_counter() - t_frame) * 1e6
        return FrameResult(image=target.image, timing=timing, splat_count=len(splats))
