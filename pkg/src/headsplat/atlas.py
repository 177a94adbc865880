"""UV-space attribute rasters: channel layout, activation, blend masks, the
transition-band generator, and the UVAM binary container.

An attribute atlas is a (H, W, 14) float raster over the head's UV
parameterization.  Channel layout (fixed by this package):

    0..2   color rgb
    3      opacity
    4..7   rotation quaternion (w, x, y, z)
    8..10  scale
    11..13 position offset

Atlases start in the ``raw`` state (decoder/logit domain) and are activated
exactly once: sigmoid opacity, normalized rotation rows, exponential scale,
clamped color.  Activated atlases are treated as immutable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ParseError

CH_COLOR = slice(0, 3)
CH_OPACITY = 3
CH_ROTATION = slice(4, 8)
CH_SCALE = slice(8, 11)
CH_OFFSET = slice(11, 14)
NUM_CHANNELS = 14

STATE_RAW = "raw"
STATE_ACTIVATED = "activated"

_UVAM_MAGIC = b"UVAM"
_UVAM_VERSION = 1


@dataclass(frozen=True)
class Rect:
    """Axis-aligned texel rectangle; x is the column of its left edge."""

    x: int
    y: int
    w: int
    h: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def contains(self, height: int, width: int) -> bool:
        return 0 <= self.x and 0 <= self.y and self.x + self.w <= width and self.y + self.h <= height

    def to_json_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Rect":
        return cls(int(doc["x"]), int(doc["y"]), int(doc["w"]), int(doc["h"]))


@dataclass
class AttributeAtlas:
    """Per-texel Gaussian attributes over UV space.

    Attributes:
        data: (H, W, 14) float raster, see module channel constants.
        validity: (H, W) bool, True where the texel lies inside a UV island.
        origin: "static", "dynamic", or "fused".
        state: "raw" or "activated".
    """

    data: np.ndarray
    validity: np.ndarray
    origin: str = "static"
    state: str = STATE_RAW

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != NUM_CHANNELS:
            raise ValueError(f"atlas data must be (H, W, {NUM_CHANNELS}), got {self.data.shape}")
        if self.validity.shape != self.data.shape[:2]:
            raise ValueError("validity mask shape does not match atlas data")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def color(self) -> np.ndarray:
        return self.data[..., CH_COLOR]

    @property
    def opacity(self) -> np.ndarray:
        return self.data[..., CH_OPACITY]

    @property
    def rotation(self) -> np.ndarray:
        return self.data[..., CH_ROTATION]

    @property
    def scale(self) -> np.ndarray:
        return self.data[..., CH_SCALE]

    @property
    def offset(self) -> np.ndarray:
        return self.data[..., CH_OFFSET]

    def copy(self) -> "AttributeAtlas":
        return replace(self, data=self.data.copy(), validity=self.validity.copy())


@dataclass
class PositionMap:
    """(H, W, 3) raster of 3D surface positions plus an island validity mask."""

    data: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"position map must be (H, W, 3), got {self.data.shape}")
        if self.validity.shape != self.data.shape[:2]:
            raise ValueError("validity mask shape does not match position data")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "PositionMap":
        return PositionMap(self.data.copy(), self.validity.copy())


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so large magnitudes never overflow exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_atlas(raw: AttributeAtlas) -> AttributeAtlas:
    """Map a raw (logit-domain) atlas into renderable attribute ranges.

    opacity -> sigmoid, rotation rows -> unit norm, scale -> exp,
    color -> clamped to [0, 1].  Offsets pass through unchanged.

    Raises:
        ValueError: when the input is already activated (activation is not
            idempotent; exp/sigmoid applied twice silently corrupts scales).
    """
    if raw.state != STATE_RAW:
        raise ValueError("atlas is already activated")
    data = raw.data.copy()
    data[..., CH_COLOR] = np.clip(data[..., CH_COLOR], 0.0, 1.0)
    data[..., CH_OPACITY] = sigmoid(data[..., CH_OPACITY])
    rot = data[..., CH_ROTATION]
    norms = np.linalg.norm(rot, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("atlas contains zero rotation quaternions")
    data[..., CH_ROTATION] = rot / norms
    data[..., CH_SCALE] = np.exp(data[..., CH_SCALE])
    return AttributeAtlas(
        data=data, validity=raw.validity.copy(), origin=raw.origin, state=STATE_ACTIVATED
    )


def make_transition_mask(face_mask: np.ndarray, band_width: int) -> np.ndarray:
    """Soft blend weights ramping linearly across a band inside the face region.

    Each inside texel gets ``min(1, d / band_width)`` where d is the exact
    Euclidean distance to the nearest outside texel; outside texels get 0.
    ``band_width == 0`` reproduces the binary mask.

    Raises:
        ValueError: empty face region or negative band width.
    """
    mask = np.asarray(face_mask).astype(bool)
    if band_width < 0:
        raise ValueError("band_width must be non-negative")
    if not mask.any():
        raise ValueError("face region is empty")
    if band_width == 0:
        return mask.astype(np.float32)
    dist = ndimage.distance_transform_edt(mask)
    return np.minimum(dist / float(band_width), 1.0).astype(np.float32)


@dataclass
class BlendMasks:
    """Hard face mask, its soft transition counterpart, and the dynamic ROI."""

    face_mask: np.ndarray
    soft_mask: np.ndarray
    band_width: int
    face_roi: Rect

    @classmethod
    def build(cls, face_mask: np.ndarray, band_width: int, face_roi: Rect) -> "BlendMasks":
        hard = np.asarray(face_mask).astype(np.float32)
        soft = make_transition_mask(face_mask, band_width)
        return cls(face_mask=hard, soft_mask=soft, band_width=band_width, face_roi=face_roi)

    @classmethod
    def rectangular(cls, height: int, width: int, face_roi: Rect, band_width: int) -> "BlendMasks":
        """Masks for the default layout: face region equals the ROI rectangle."""
        hard = np.zeros((height, width), dtype=np.float32)
        hard[face_roi.slices] = 1.0
        return cls.build(hard, band_width, face_roi)


def embed_patch(full: np.ndarray, patch: np.ndarray, roi: Rect) -> np.ndarray:
    """Return a copy of ``full`` with the ROI window replaced by ``patch``.

    Works for any raster whose leading two axes are (H, W); texels outside
    the ROI are bit-identical to the input.
    """
    if not roi.contains(full.shape[0], full.shape[1]):
        raise ValueError(f"roi {roi} exceeds raster bounds {full.shape[:2]}")
    if patch.shape[:2] != (roi.h, roi.w):
        raise ValueError(f"patch shape {patch.shape[:2]} does not match roi {roi}")
    if full.ndim != patch.ndim or full.shape[2:] != patch.shape[2:]:
        raise ValueError("patch channel layout does not match raster")
    out = full.copy()
    out[roi.slices] = patch
    return out


def extract_patch(full: np.ndarray, roi: Rect) -> np.ndarray:
    if not roi.contains(full.shape[0], full.shape[1]):
        raise ValueError(f"roi {roi} exceeds raster bounds {full.shape[:2]}")
    return full[roi.slices].copy()


# ---------------------------------------------------------------------------
# UVAM binary container
#
# Little-endian layout:
#   magic "UVAM" | u32 version | u32 width | u32 height | u32 channels
#   u8 dtype tag (0 = f32) | u8 state flag (0 = raw, 1 = activated)
#   2 reserved bytes | row-major f32 payload | validity bitmask,
#   ceil(width*height/8) bytes, row-major, MSB-first.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIBBxx")


def write_uvam(path, data: np.ndarray, validity: np.ndarray, state: str = STATE_RAW) -> None:
    """Write a float32 raster plus validity bitmask as a UVAM file."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    height, width, channels = arr.shape
    valid = np.asarray(validity).astype(bool)
    if valid.shape != (height, width):
        raise ValueError("validity shape does not match raster")
    state_flag = {STATE_RAW: 0, STATE_ACTIVATED: 1}[state]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_UVAM_MAGIC, _UVAM_VERSION, width, height, channels, 0, state_flag))
        fh.write(arr.tobytes())
        fh.write(np.packbits(valid.reshape(-1)).tobytes())


def read_uvam(path) -> tuple[np.ndarray, np.ndarray, str]:
    """Read a UVAM file; returns (data (H, W, C) f32, validity (H, W) bool, state)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ParseError(f"{path}: truncated UVAM header (offset 0)")
    magic, version, width, height, channels, dtype_tag, state_flag = _HEADER.unpack_from(blob)
    if magic != _UVAM_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} (offset 0)")
    if version != _UVAM_VERSION:
        raise ParseError(f"{path}: unsupported UVAM version {version} (offset 4)")
    if dtype_tag != 0:
        raise ParseError(f"{path}: unsupported dtype tag {dtype_tag} (offset 20)")
    payload_len = width * height * channels * 4
    mask_len = (width * height + 7) // 8
    expected = _HEADER.size + payload_len + mask_len
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)} (offset {_HEADER.size})")
    data = np.frombuffer(blob, dtype="<f4", count=width * height * channels, offset=_HEADER.size)
    data = data.reshape(height, width, channels).copy()
    bits = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size + payload_len)
    validity = np.unpackbits(bits, count=width * height).reshape(height, width).astype(bool)
    state = STATE_ACTIVATED if state_flag == 1 else STATE_RAW
    return data, validity, state


def save_atlas(path, atlas: AttributeAtlas) -> None:
    write_uvam(path, atlas.data, atlas.validity, state=atlas.state)


def load_atlas(path, origin: str = "static") -> AttributeAtlas:
    data, validity, state = read_uvam(path)
    if data.shape[2] != NUM_CHANNELS:
        raise ParseError(f"{path}: expected {NUM_CHANNELS} channels, found {data.shape[2]}")
    return AttributeAtlas(data=data, validity=validity, origin=origin, state=state)


def save_position_map(path, pos: PositionMap) -> None:
    write_uvam(path, pos.data, pos.validity, state=STATE_ACTIVATED)


def load_position_map(path) -> PositionMap:
    data, validity, _ = read_uvam(path)
    if data.shape[2] != 3:
        raise ParseError(f"{path}: expected 3 channels for a position map, found {data.shape[2]}")
    return PositionMap(data=data, validity=validity)


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.float32)
    write_uvam(path, mask[..., None], np.ones(mask.shape, dtype=bool), state=STATE_ACTIVATED)


def load_mask(path) -> np.ndarray:
    data, _, _ = read_uvam(path)
    if data.shape[2] != 1:
        raise ParseError(f"{path}: expected a single-channel mask, found {data.shape[2]} channels")
    return data[..., 0]
