"""headsplat: CPU runtime for drivable Gaussian head avatars stored as
static/dynamic UV attribute atlases."""

from .atlas import AttributeAtlas, BlendMasks, PositionMap, Rect, activate_atlas
from .blending import AvatarFrameBuilder, FusedFrame, fuse_attributes, fuse_positions
from .bundle import AvatarBundle, BakeParams, bake_bundle
from .geom import Camera, covariance_from_rs, normalize_quaternion, project_ewa
from .headmodel import HeadMesh, bake_normal_map, bake_position_map, generate_head
from .metrics import metric_psnr, metric_ssim
from .refine import RefineConfig, refine_avatar
from .render import (
    RenderConfig,
    RenderTarget,
    SplatList,
    composite_oracle,
    composite_tiled,
    project_batch,
)
from .runtime import AvatarRuntime
from .sampler import PrimitiveBatch, resample_positions_only, sample_uv_grid
from .vq import Codebook, quantization_error, quantize

__version__ = "0.1.0"

__all__ = [
    "AttributeAtlas",
    "AvatarBundle",
    "AvatarFrameBuilder",
    "AvatarRuntime",
    "BakeParams",
    "BlendMasks",
    "Camera",
    "Codebook",
    "FusedFrame",
    "HeadMesh",
    "PositionMap",
    "PrimitiveBatch",
    "Rect",
    "RefineConfig",
    "RenderConfig",
    "RenderTarget",
    "SplatList",
    "activate_atlas",
    "bake_bundle",
    "bake_normal_map",
    "bake_position_map",
    "composite_oracle",
    "composite_tiled",
    "covariance_from_rs",
    "fuse_attributes",
    "fuse_positions",
    "generate_head",
    "metric_psnr",
    "metric_ssim",
    "normalize_quaternion",
    "project_batch",
    "project_ewa",
    "quantization_error",
    "quantize",
    "refine_avatar",
    "resample_positions_only",
    "sample_uv_grid",
]
