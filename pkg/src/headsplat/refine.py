"""Person-specific refinement: gradient descent on atlas color and opacity
against target renders.

Only the photometric MSE term drives the loop.  Geometry, rotation, and
scale stay frozen, so the splat layout is constant across iterations and the
objective is smooth in the optimized maps (linear in color, sigmoid-smooth in
the opacity logits).  Updates use plain gradient descent with heavy-ball
momentum; color maps are clipped back into [0, 1] after every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atlas import (
    CH_COLOR,
    CH_OPACITY,
    STATE_RAW,
    AttributeAtlas,
    activate_atlas,
)
from .blending import combine_displacements, fuse_attributes, fuse_positions
from .bundle import AvatarBundle
from .errors import DivergenceError
from .geom import Camera
from .render import (
    RenderConfig,
    backprop_to_atlas,
    backward_color_opacity,
    composite_tiled,
    project_batch,
)
from .sampler import sample_avatar

VALID_MAPS = ("static_color", "static_opacity_logit", "dynamic_color", "dynamic_opacity_logit")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 200
    step_size: float = 0.5
    momentum: float = 0.9
    maps: tuple[str, ...] = ("static_color", "dynamic_color")
    lambda_l2: float = 1000.0
    sample_step: int = 4
    face_step: int = 2
    weights: dict = field(default_factory=dict)
    divergence_factor: float = 10.0
    background: tuple = (0.0, 0.0, 0.0)
    render: RenderConfig = RenderConfig(opacity_floor=0.0)

    def __post_init__(self):
        bad = set(self.maps) - set(VALID_MAPS)
        if bad:
            raise ValueError(f"unknown refinement maps {sorted(bad)}; valid: {VALID_MAPS}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class RefineResult:
    static_atlas_raw: AttributeAtlas
    dynamic_atlas_raw: AttributeAtlas
    trace: list[dict]

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iteration", "total", "l2"])
            writer.writeheader()
            writer.writerows(self.trace)


class _Pipeline:
    """Forward/backward through activate -> fuse -> sample -> render."""

    def __init__(self, bundle: AvatarBundle, config: RefineConfig):
        self.config = config
        self.roi = bundle.face_roi
        self.masks = bundle.masks()
        self.static_raw = bundle.static_atlas_raw.data.astype(np.float64)
        self.dynamic_raw = bundle.dynamic_atlas_raw.data.astype(np.float64)
        self.static_validity = bundle.static_atlas_raw.validity.copy()
        self.dynamic_validity = bundle.dynamic_atlas_raw.validity.copy()
        self.static_origin = bundle.static_atlas_raw.origin

        disp = combine_displacements(
            [(bundle.blendshapes[k], w) for k, w in config.weights.items()], self.roi
        )
        positions = bundle.static_positions
        pos64 = replace(positions, data=positions.data.astype(np.float64))
        self.positions = fuse_positions(pos64, bundle.offset_map.astype(np.float64), disp, self.masks)
        self.positions.validity = positions.validity.copy()
        self.positions.validity[self.roi.slices] &= self.dynamic_validity

        self._soft = self.masks.soft_mask.astype(np.float64)[..., None]
        self._hard = self.masks.face_mask.astype(np.float64)

    def forward(self):
        static_act = activate_atlas(
            AttributeAtlas(self.static_raw.copy(), self.static_validity.copy(), state=STATE_RAW)
        )
        dynamic_act = activate_atlas(
            AttributeAtlas(self.dynamic_raw.copy(), self.dynamic_validity.copy(), state=STATE_RAW)
        )
        full = static_act.data.copy()
        full[self.roi.slices] = dynamic_act.data
        dynamic_full = AttributeAtlas(
            full, self.positions.validity.copy(), origin="dynamic", state=dynamic_act.state
        )
        static_act.validity &= self.positions.validity
        fused = fuse_attributes(static_act, dynamic_full, self.masks)
        batch = sample_avatar(
            fused,
            self.positions,
            self.roi,
            step=self.config.sample_step,
            face_step=self.config.face_step,
            opacity_floor=self.config.render.opacity_floor,
        )
        return static_act, dynamic_act, batch

    def render_views(self, batch, cameras: list[Camera]):
        images, splat_lists = [], []
        for cam in cameras:
            splats = project_batch(batch, cam, self.config.render)
            images.append(
                composite_tiled(splats, cam, self.config.background, self.config.render).image
            )
            splat_lists.append(splats)
        return images, splat_lists

    def atlas_gradients(self, batch, splat_lists, cameras, grad_images):
        """Accumulate fused-atlas gradients and route them through the
        fusion/embedding adjoints back to the raw static/dynamic maps."""
        h, w = self.static_raw.shape[:2]
        g_color = np.zeros((h, w, 3))
        g_opacity = np.zeros((h, w))
        for cam, splats, grad_img in zip(cameras, splat_lists, grad_images):
            gc, go = backward_color_opacity(
                splats, cam, grad_img, self.config.background, self.config.render
            )
            ac, ao = backprop_to_atlas(gc, go, batch)
            g_color += ac
            g_opacity += ao
        grads = {}
        sl = self.roi.slices
        grads["static_color"] = (1.0 - self._soft) * g_color
        grads["dynamic_color"] = (self._soft[sl] * g_color[sl]).copy()
        static_op_act = _sigmoid(self.static_raw[..., CH_OPACITY])
        dyn_op_act = _sigmoid(self.dynamic_raw[..., CH_OPACITY])
        grads["static_opacity_logit"] = (
            (1.0 - self._hard) * g_opacity * static_op_act * (1.0 - static_op_act)
        )
        grads["dynamic_opacity_logit"] = (
            self._hard[sl] * g_opacity[sl] * dyn_op_act * (1.0 - dyn_op_act)
        ).copy()
        return grads

    def apply_step(self, name: str, delta: np.ndarray) -> None:
        if name == "static_color":
            self.static_raw[..., CH_COLOR] = np.clip(
                self.static_raw[..., CH_COLOR] + delta, 0.0, 1.0
            )
        elif name == "dynamic_color":
            self.dynamic_raw[..., CH_COLOR] = np.clip(
                self.dynamic_raw[..., CH_COLOR] + delta, 0.0, 1.0
            )
        elif name == "static_opacity_logit":
            self.static_raw[..., CH_OPACITY] += delta
        elif name == "dynamic_opacity_logit":
            self.dynamic_raw[..., CH_OPACITY] += delta
        else:
            raise ValueError(f"unknown map {name!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def refine_avatar(
    bundle: AvatarBundle,
    targets: list[tuple[np.ndarray, Camera]],
    config: RefineConfig = RefineConfig(),
) -> RefineResult:
    """Optimize the selected atlas maps so renders match the target images.

    The objective is ``lambda_l2 * mean over views of MSE``.  The loss trace
    holds one entry per iteration (entry 0 is the starting loss); the final
    loss never exceeds the initial one on convergent runs.

    Raises:
        DivergenceError: loss exceeded ``divergence_factor`` times the initial
            value; the partial trace rides on the exception.
    """
    if not targets:
        raise ValueError("refinement needs at least one (target image, camera) pair")
    pipe = _Pipeline(bundle, config)
    cameras = [cam for _, cam in targets]
    target_images = [np.asarray(img, dtype=np.float64) for img, _ in targets]
    for img, cam in zip(target_images, cameras):
        if img.shape != (cam.height, cam.width, 3):
            raise ValueError("target image resolution does not match its camera")

    velocity = {name: 0.0 for name in config.maps}
    trace: list[dict] = []
    n_views = len(targets)

    for it in range(config.iterations + 1):
        _, _, batch = pipe.forward()
        images, splat_lists = pipe.render_views(batch, cameras)
        l2 = float(
            np.mean([np.mean((img - tgt) ** 2) for img, tgt in zip(images, target_images)])
        )
        total = config.lambda_l2 * l2
        trace.append({"iteration": it, "total": total, "l2": l2})
        if it > 0 and total > config.divergence_factor * max(trace[0]["total"], 1e-12):
            raise DivergenceError(
                f"refinement diverged at iteration {it}: {total:.3e} vs initial {trace[0]['total']:.3e}",
                trace=trace,
            )
        if it == config.iterations:
            break

        grad_images = [
            config.lambda_l2 * 2.0 * (img - tgt) / (img.size * n_views)
            for img, tgt in zip(images, target_images)
        ]
        grads = pipe.atlas_gradients(batch, splat_lists, cameras, grad_images)
        for name in config.maps:
            velocity[name] = config.momentum * velocity[name] - config.step_size * grads[name]
            pipe.apply_step(name, velocity[name])

    return RefineResult(
        static_atlas_raw=AttributeAtlas(
            pipe.static_raw.astype(np.float32),
            pipe.static_validity,
            origin="static",
            state=STATE_RAW,
        ),
        dynamic_atlas_raw=AttributeAtlas(
            pipe.dynamic_raw.astype(np.float32),
            pipe.dynamic_validity,
            origin="dynamic",
            state=STATE_RAW,
        ),
        trace=trace,
    )
