"""Quaternion/covariance math, the pinhole camera model, and the elliptical
(EWA) projection of 3D Gaussians to screen space.

Conventions used throughout the package:

- Quaternions are ``(w, x, y, z)`` arrays.
- The camera looks along its local +z axis; image x is right, image y is
  down.  Pixel ``(ix, iy)`` has its center at ``(ix + 0.5, iy + 0.5)``.
- World-to-camera transforms are a 3x3 rotation plus a 3-vector translation
  (``x_cam = R @ x_world + t``).

All functions here are pure and operate on immutable value inputs, so they
are safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Blur added to both diagonal entries of every projected 2D covariance, in
# pixels^2.  Keeps near-degenerate splats invertible and band-limited.
DEFAULT_LOWPASS = 0.3

# Points closer than this (camera-space z, world units) are culled.
DEFAULT_NEAR = 0.01

_QUAT_EPS = 1e-12


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return the unit quaternion with the same direction as ``q``.

    Raises:
        ValueError: if the norm of ``q`` is below 1e-12 (a zero quaternion
            carries no orientation and must never be silently produced).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if norm <= _QUAT_EPS:
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quaternions_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Vectorized quaternion-to-rotation conversion, (N, 4) -> (N, 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def covariance_from_rs(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Build a 3D covariance from a unit rotation quaternion and a scale vector.

    Sigma = R S S^T R^T with S = diag(scale): eigenvalues are the squared
    scales, eigenvectors the rotated axes.

    Raises:
        ValueError: non-positive scale component or zero quaternion.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,):
        raise ValueError(f"scale must have shape (3,), got {scale.shape}")
    if np.any(scale <= 0):
        raise ValueError(f"scale components must be positive, got {scale}")
    rot = quaternion_to_matrix(normalize_quaternion(rotation))
    return (rot * scale**2) @ rot.T


def covariances_from_rs(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Vectorized covariance construction, (N, 4) + (N, 3) -> (N, 3, 3)."""
    rots = quaternions_to_matrices(quats)
    scales = np.asarray(scales, dtype=np.float64)
    rs = rots * (scales**2)[:, None, :]
    return rs @ np.swapaxes(rots, 1, 2)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics.

    Attributes:
        rotation: 3x3 world-to-camera rotation (orthonormal).
        translation: 3-vector, camera = rotation @ world + translation.
        fx, fy: focal lengths in pixels (positive).
        cx, cy: principal point in pixels.
        width, height: image size in pixels.
        near: near-plane distance in world units (positive).
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1 pixel")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) world points into camera space."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_json_dict(self) -> dict:
        w2c = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "world_to_cam": [float(v) for v in w2c.reshape(-1)],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Camera":
        w2c = np.asarray(doc["world_to_cam"], dtype=np.float64)
        if w2c.size != 12:
            raise ValueError("world_to_cam must contain 12 floats (row-major 3x4)")
        w2c = w2c.reshape(3, 4)
        return cls(
            rotation=w2c[:, :3],
            translation=w2c[:, 3],
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            near=float(doc.get("near", DEFAULT_NEAR)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Camera":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0), **intrinsics) -> Camera:
    """Camera at ``eye`` looking at ``target`` (+z forward, y down, x right)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        # View direction parallel to up: fall back to a perpendicular axis.
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        rnorm = np.linalg.norm(right)
    right /= rnorm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    return Camera(rotation=rot, translation=-rot @ eye, **intrinsics)


def orbit_camera(
    yaw_deg: float,
    pitch_deg: float,
    distance: float,
    target=(0.0, 0.0, 0.0),
    forward_dir=(0.0, 0.0, 1.0),
    **intrinsics,
) -> Camera:
    """Camera on a Y-axis orbit around ``target``.

    yaw 0 places the eye along ``forward_dir`` (the frontal view); positive
    yaw rotates counter-clockwise around the world Y axis, positive pitch
    raises the camera above the horizon.
    """
    if distance <= 0:
        raise ValueError("orbit distance must be positive")
    yaw = np.deg2rad(yaw_deg)
    pitch = np.deg2rad(pitch_deg)
    fwd = np.asarray(forward_dir, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    horiz = rot_y @ fwd
    eye = np.asarray(target, dtype=np.float64) + distance * (
        horiz * np.cos(pitch) + np.array([0.0, 1.0, 0.0]) * np.sin(pitch)
    )
    return look_at(eye, target, **intrinsics)


def projection_jacobian(cam_point: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Local affine Jacobian of the pinhole projection at a camera-space point.

    J = [[fx/z, 0, -fx*x/z^2], [0, fy/z, -fy*y/z^2]]
    """
    x, y, z = (float(v) for v in cam_point)
    return np.array(
        [[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]],
        dtype=np.float64,
    )


def project_ewa(
    sigma: np.ndarray,
    mean: np.ndarray,
    cam: Camera,
    lowpass: float = DEFAULT_LOWPASS,
):
    """Project one 3D Gaussian to screen space.

    Returns ``(mean2d, cov2d, depth)`` where cov2d = J W Sigma W^T J^T plus
    ``lowpass`` on its diagonal, or ``None`` when the mean lies closer than
    the camera's near plane (the caller treats that as a cull, not an error).
    """
    mean = np.asarray(mean, dtype=np.float64)
    cam_pt = cam.world_to_cam(mean)
    z = float(cam_pt[2])
    if z < cam.near:
        return None
    jac = projection_jacobian(cam_pt, cam.fx, cam.fy)
    jw = jac @ cam.rotation
    cov2d = jw @ np.asarray(sigma, dtype=np.float64) @ jw.T
    cov2d = cov2d + lowpass * np.eye(2)
    mean2d = np.array(
        [cam.fx * cam_pt[0] / z + cam.cx, cam.fy * cam_pt[1] / z + cam.cy],
        dtype=np.float64,
    )
    return mean2d, cov2d, z


def project_ewa_batch(
    sigmas: np.ndarray,
    means: np.ndarray,
    cam: Camera,
    lowpass: float = DEFAULT_LOWPASS,
):
    """Vectorized EWA projection.

    Args:
        sigmas: (N, 3, 3) world-space covariances.
        means: (N, 3) world-space centers.

    Returns:
        (means2d (N, 2), cov2d (N, 2, 2), depths (N,), in_front (N,) bool).
        Entries with ``in_front`` False hold unspecified values and must be
        discarded by the caller.
    """
    means = np.asarray(means, dtype=np.float64)
    cam_pts = cam.world_to_cam(means)
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    z = cam_pts[:, 2]
    in_front = z >= cam.near
    safe_z = np.where(in_front, z, 1.0)

    inv_z = 1.0 / safe_z
    inv_z2 = inv_z * inv_z
    n = means.shape[0]
    jac = np.zeros((n, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z2
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z2

    jw = jac @ cam.rotation
    cov2d = jw @ np.asarray(sigmas, dtype=np.float64) @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass

    means2d = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)
    return means2d, cov2d, z, in_front
