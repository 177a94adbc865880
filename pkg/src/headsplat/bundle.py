"""Avatar bundle: the on-disk collection of everything one identity needs.

A bundle directory holds a ``manifest.json`` plus UVAM rasters (static atlas,
position map, offset map, dynamic atlas, face mask), a blendshape manifest
with one UVAM per shape, a camera JSON, and optionally a codebook.  The
``bake`` path generates a fully synthetic but deterministic bundle from the
procedural head, which is what tests and demos run against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from .atlas import (
    CH_COLOR,
    CH_OFFSET,
    CH_OPACITY,
    CH_ROTATION,
    CH_SCALE,
    NUM_CHANNELS,
    STATE_RAW,
    AttributeAtlas,
    BlendMasks,
    PositionMap,
    Rect,
)
from .blending import StaticAssets
from .errors import ParseError
from .geom import Camera, look_at
from .headmodel import (
    Blendshape,
    HeadMesh,
    bake_position_map,
    default_blendshapes,
    generate_head,
    save_obj,
)
from .vq import Codebook, load_codebook, save_codebook, synthetic_codebook

SCHEMA_VERSION = 1


@dataclass
class AvatarBundle:
    """In-memory avatar identity: raw atlases, geometry rasters, masks, camera."""

    static_atlas_raw: AttributeAtlas
    static_positions: PositionMap
    offset_map: np.ndarray
    dynamic_atlas_raw: AttributeAtlas  # ROI-sized, raw state
    face_roi: Rect
    face_mask: np.ndarray
    band_width: int
    blendshapes: dict[str, Blendshape]
    camera: Camera
    codebook: Codebook | None = None
    mesh: HeadMesh | None = None

    @property
    def resolution(self) -> tuple[int, int]:
        return self.static_atlas_raw.data.shape[:2]

    def masks(self) -> BlendMasks:
        return BlendMasks.build(self.face_mask, self.band_width, self.face_roi)

    def to_static_assets(self) -> StaticAssets:
        """Activate both layers and embed the dynamic atlas at full resolution."""
        static_act = atlas_mod.activate_atlas(self.static_atlas_raw)
        dynamic_act = atlas_mod.activate_atlas(self.dynamic_atlas_raw)
        roi = self.face_roi
        full = static_act.data.copy()
        full[roi.slices] = dynamic_act.data
        validity = static_act.validity.copy()
        validity[roi.slices] &= dynamic_act.validity
        dynamic_full = AttributeAtlas(
            data=full, validity=validity, origin="dynamic", state=dynamic_act.state
        )
        static_act.validity &= validity
        positions = self.static_positions.copy()
        positions.validity &= validity
        return StaticAssets(
            static_atlas=static_act,
            static_positions=positions,
            offset_map=self.offset_map,
            dynamic_atlas=dynamic_full,
            masks=self.masks(),
            blendshapes=dict(self.blendshapes),
        )

    # -- persistence --------------------------------------------------------

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        atlas_mod.save_atlas(out / "static_atlas.uvam", self.static_atlas_raw)
        atlas_mod.save_position_map(out / "static_positions.uvam", self.static_positions)
        atlas_mod.write_uvam(
            out / "offset_map.uvam",
            self.offset_map,
            self.static_positions.validity,
            state=atlas_mod.STATE_ACTIVATED,
        )
        atlas_mod.save_atlas(out / "dynamic_atlas.uvam", self.dynamic_atlas_raw)
        atlas_mod.save_mask(out / "face_mask.uvam", self.face_mask)
        self.camera.save(out / "camera.json")

        shapes = []
        for name, shape in sorted(self.blendshapes.items()):
            fname = f"blendshape_{name.replace(' ', '_')}.uvam"
            atlas_mod.write_uvam(
                out / fname,
                shape.displacement,
                np.ones(shape.displacement.shape[:2], dtype=bool),
                state=atlas_mod.STATE_ACTIVATED,
            )
            shapes.append({"name": name, "file": fname, "roi": self.face_roi.to_json_dict()})
        (out / "blendshapes.json").write_text(
            json.dumps({"schema_version": SCHEMA_VERSION, "blendshapes": shapes}, indent=2) + "\n"
        )

        manifest = {
            "schema_version": SCHEMA_VERSION,
            "static_atlas": "static_atlas.uvam",
            "static_position_map": "static_positions.uvam",
            "offset_map": "offset_map.uvam",
            "dynamic_atlas": "dynamic_atlas.uvam",
            "face_mask": "face_mask.uvam",
            "face_roi": self.face_roi.to_json_dict(),
            "band_width": self.band_width,
            "blendshapes": "blendshapes.json",
            "camera": "camera.json",
        }
        if self.codebook is not None:
            save_codebook(out / "codebook.cbok", self.codebook)
            manifest["codebook"] = "codebook.cbok"
        if self.mesh is not None:
            save_obj(out / "head.obj", self.mesh)
            manifest["mesh"] = "head.obj"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return out / "manifest.json"

    @classmethod
    def load(cls, path) -> "AvatarBundle":
        """Load from a manifest path or a bundle directory.

        Raises:
            ParseError: missing files, schema mismatch, inconsistent sizes.
        """
        manifest_path = Path(path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "manifest.json"
        if not manifest_path.exists():
            raise ParseError(f"{manifest_path}: manifest not found")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{manifest_path}: invalid JSON: {exc}") from exc
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ParseError(
                f"{manifest_path}: schema_version {manifest.get('schema_version')} != {SCHEMA_VERSION}"
            )
        base = manifest_path.parent

        def resolve(key: str, optional: bool = False) -> Path | None:
            name = manifest.get(key)
            if name is None:
                if optional:
                    return None
                raise ParseError(f"{manifest_path}: missing manifest key {key!r}")
            p = base / name
            if not p.exists():
                raise ParseError(f"{manifest_path}: referenced file {p} does not exist")
            return p

        static_atlas = atlas_mod.load_atlas(resolve("static_atlas"), origin="static")
        positions = atlas_mod.load_position_map(resolve("static_position_map"))
        offset, _, _ = atlas_mod.read_uvam(resolve("offset_map"))
        dynamic = atlas_mod.load_atlas(resolve("dynamic_atlas"), origin="dynamic")
        face_mask = atlas_mod.load_mask(resolve("face_mask"))
        face_roi = Rect.from_json_dict(manifest["face_roi"])
        camera = Camera.load(resolve("camera"))

        bs_doc = json.loads(resolve("blendshapes").read_text())
        blendshapes = {}
        for entry in bs_doc.get("blendshapes", []):
            data, _, _ = atlas_mod.read_uvam(base / entry["file"])
            blendshapes[entry["name"]] = Blendshape(entry["name"], data)

        codebook_path = resolve("codebook", optional=True)
        codebook = load_codebook(codebook_path) if codebook_path else None

        mesh = None
        if manifest.get("mesh"):
            from .headmodel import load_obj

            mesh = load_obj(base / manifest["mesh"])

        bundle = cls(
            static_atlas_raw=static_atlas,
            static_positions=positions,
            offset_map=offset,
            dynamic_atlas_raw=dynamic,
            face_roi=face_roi,
            face_mask=face_mask,
            band_width=int(manifest["band_width"]),
            blendshapes=blendshapes,
            camera=camera,
            codebook=codebook,
            mesh=mesh,
        )
        bundle._check_consistency(manifest_path)
        return bundle

    def _check_consistency(self, origin) -> None:
        h, w = self.resolution
        if self.static_positions.data.shape[:2] != (h, w):
            raise ParseError(f"{origin}: position map resolution differs from atlas")
        if self.offset_map.shape[:2] != (h, w):
            raise ParseError(f"{origin}: offset map resolution differs from atlas")
        if self.face_mask.shape != (h, w):
            raise ParseError(f"{origin}: face mask resolution differs from atlas")
        roi = self.face_roi
        if not roi.contains(h, w):
            raise ParseError(f"{origin}: face_roi {roi} exceeds atlas bounds")
        if self.dynamic_atlas_raw.data.shape[:2] != (roi.h, roi.w):
            raise ParseError(f"{origin}: dynamic atlas does not match face_roi size")
        for name, shape in self.blendshapes.items():
            if shape.displacement.shape[:2] != (roi.h, roi.w):
                raise ParseError(f"{origin}: blendshape {name!r} does not match face_roi size")


# ---------------------------------------------------------------------------
# Synthetic bundle baking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BakeParams:
    """Knobs for the procedural identity generator (all deterministic)."""

    resolution: int = 1024
    face_size: int = 400
    subdivision: int = 3
    radius: float = 1.0
    neck_length: float = 0.3
    band_width: int = 16
    seed: int = 7
    render_size: int = 512
    camera_distance: float = 3.2
    codebook_entries: int = 64
    codebook_dim: int = 8

    @property
    def face_roi(self) -> Rect:
        off = (self.resolution - self.face_size) // 2
        return Rect(off, off, self.face_size, self.face_size)


def _smooth_field(rng: np.random.Generator, h: int, w: int, octaves: int = 4) -> np.ndarray:
    """Band-limited random field in roughly [-1, 1] built from a few cosines."""
    v = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    u = (np.arange(w, dtype=np.float64)[None, :] + 0.5) / w
    out = np.zeros((h, w), dtype=np.float64)
    for _ in range(octaves):
        fu, fv = rng.uniform(0.5, 6.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.cos(2.0 * np.pi * (fu * u + fv * v) + phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _raw_attribute_data(
    rng: np.random.Generator, h: int, w: int, base_scale: float, hue_shift: float
) -> np.ndarray:
    data = np.zeros((h, w, NUM_CHANNELS), dtype=np.float32)
    base = np.array([0.72 + hue_shift, 0.55, 0.45 - hue_shift])
    for ch in range(3):
        data[..., ch] = np.clip(base[ch] + 0.22 * _smooth_field(rng, h, w), 0.02, 0.98)
    data[..., CH_OPACITY] = 2.0 + 0.5 * _smooth_field(rng, h, w)
    rot = np.zeros((h, w, 4))
    rot[..., 0] = 1.0
    for ch in range(4):
        rot[..., ch] += 0.1 * _smooth_field(rng, h, w)
    data[..., CH_ROTATION] = rot
    log_scale = np.log(base_scale) + 0.25 * _smooth_field(rng, h, w)
    for ch in range(3):
        data[..., CH_SCALE.start + ch] = log_scale + 0.1 * _smooth_field(rng, h, w)
    return data


def bake_bundle(params: BakeParams = BakeParams()) -> AvatarBundle:
    """Generate a deterministic synthetic avatar bundle.

    The head mesh, bakes, textures, masks, blendshapes, codebook, and the
    default frontal camera are all derived from ``params.seed``; identical
    params always produce an identical bundle.
    """
    rng = np.random.default_rng(params.seed)
    res = params.resolution
    roi = params.face_roi

    mesh = generate_head(params.subdivision, params.radius, params.neck_length)
    positions = bake_position_map(mesh, res)
    # Bundles live in UVAM files (f32); bake in the storage dtype so a
    # save/load round trip is bit-identical.
    positions = PositionMap(positions.data.astype(np.float32), positions.validity)
    validity = positions.validity

    # Splat extent tracks the world-space footprint of one sampling cell.
    step_world = 5.5 * params.radius / res
    static_data = _raw_attribute_data(rng, res, res, base_scale=4.0 * step_world, hue_shift=0.0)
    offset = np.zeros((res, res, 3), dtype=np.float32)
    for ch in range(3):
        offset[..., ch] = 0.01 * params.radius * _smooth_field(rng, res, res)
    offset *= validity[..., None]
    static_data[..., CH_OFFSET] = offset
    static_atlas = AttributeAtlas(
        data=static_data, validity=validity.copy(), origin="static", state=STATE_RAW
    )

    dyn_rng = np.random.default_rng(params.seed + 1)
    dynamic_data = _raw_attribute_data(
        dyn_rng, roi.h, roi.w, base_scale=2.0 * step_world, hue_shift=0.06
    )
    dynamic_validity = validity[roi.slices].copy()
    dynamic_atlas = AttributeAtlas(
        data=dynamic_data, validity=dynamic_validity, origin="dynamic", state=STATE_RAW
    )

    face_mask = np.zeros((res, res), dtype=np.float32)
    face_mask[roi.slices] = 1.0

    blendshapes = {
        b.name: Blendshape(b.name, b.displacement.astype(np.float32))
        for b in default_blendshapes(dynamic_validity, amplitude=0.12 * params.radius)
    }

    # Frontal camera: aim at the head center from the direction the UV-center
    # of the face region points to.
    center = positions.data[validity].mean(axis=0)
    face_dir = mesh.position_at_uv(np.array([0.5, 0.5])) - center
    face_dir[1] = 0.0  # keep the orbit horizontal
    face_dir /= np.linalg.norm(face_dir)
    eye = center + params.camera_distance * params.radius * face_dir
    camera = look_at(
        eye,
        center,
        fx=1.1 * params.render_size,
        fy=1.1 * params.render_size,
        cx=params.render_size / 2.0,
        cy=params.render_size / 2.0,
        width=params.render_size,
        height=params.render_size,
    )

    codebook = synthetic_codebook(params.codebook_entries, params.codebook_dim, seed=params.seed)

    return AvatarBundle(
        static_atlas_raw=static_atlas,
        static_positions=positions,
        offset_map=offset.astype(np.float32),
        dynamic_atlas_raw=dynamic_atlas,
        face_roi=roi,
        face_mask=face_mask,
        band_width=params.band_width,
        blendshapes=blendshapes,
        camera=camera,
        codebook=codebook,
        mesh=mesh,
    )
