"""Loss terms for geometry regularization and photometric refinement.

Norm conventions (deliberately matched to how each term is consumed):

- ``loss_l2_image`` averages squared differences over every pixel AND
  channel, i.e. plain MSE.
- ``loss_normal`` averages the squared 3-vector difference per valid texel
  (opposite unit normals score 4.0).
- Mesh terms average per vertex / per interior edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .headmodel import HeadMesh, NormalMap


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights for the full training objective.

    lambda5 is carried for config compatibility but no implemented term uses
    it.
    """

    lambda1: float = 1.0  # normal map
    lambda2: float = 1.0  # laplacian smoothness
    lambda3: float = 0.1  # normal consistency
    lambda4: float = 20.0  # latent KL
    lambda5: float = 0.01  # reserved
    lambda6: float = 1000.0  # photometric L2
    lambda7: float = 1000.0  # perceptual (not implemented here)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6", "lambda7"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LatentSample:
    """Diagonal-Gaussian posterior sample: mean and log-variance vectors."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        # Clamp so exp(log_var) can never overflow downstream.
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64), -20.0, 20.0)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log-variance must have the same shape")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_var))):
            raise ValueError("latent sample must be finite")

    @property
    def dim(self) -> int:
        return self.mean.size


def loss_l2_image(render: np.ndarray, target: np.ndarray) -> float:
    """Mean squared per-channel difference between two images."""
    if render.shape != target.shape:
        raise ValueError(f"image shapes differ: {render.shape} vs {target.shape}")
    diff = np.asarray(render, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff))


def loss_normal(pred: NormalMap, gt: NormalMap) -> float:
    """Mean squared normal difference over texels valid in both maps.

    Raises:
        ValueError: validity masks differ.
    """
    if pred.data.shape != gt.data.shape:
        raise ValueError("normal map shapes differ")
    if not np.array_equal(pred.validity, gt.validity):
        raise ValueError("normal map validity masks differ")
    diff = pred.data[pred.validity] - gt.data[gt.validity]
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def laplacian_residuals(mesh: HeadMesh) -> np.ndarray:
    """Per-vertex uniform Laplacian: v - mean(neighbors), (V, 3).

    Raises:
        ValueError: isolated vertex (no neighbors).
    """
    res = np.empty_like(mesh.vertices)
    for vi, nbrs in enumerate(mesh.vertex_neighbors()):
        if nbrs.size == 0:
            raise ValueError(f"vertex {vi} is isolated")
        res[vi] = mesh.vertices[vi] - mesh.vertices[nbrs].mean(axis=0)
    return res


def loss_laplacian(mesh: HeadMesh) -> float:
    """Mean squared uniform-Laplacian magnitude over non-boundary vertices.

    Boundary vertices have one-sided rings and would report curvature on
    perfectly flat sheets, so they are excluded; closed meshes use every
    vertex.
    """
    res = laplacian_residuals(mesh)
    boundary = mesh.boundary_vertices()
    if boundary.size:
        keep = np.ones(mesh.num_vertices, dtype=bool)
        keep[boundary] = False
        if not keep.any():
            raise ValueError("mesh has no interior vertices")
        res = res[keep]
    return float(np.mean(np.sum(res * res, axis=-1)))


def loss_normal_consistency(mesh: HeadMesh) -> float:
    """Mean of (1 - cos angle) between face normals across interior edges.

    Raises:
        ValueError: non-manifold edge (more than two incident faces).
    """
    pairs, _ = mesh.edge_face_pairs()
    if pairs.shape[0] == 0:
        return 0.0
    normals, area2 = mesh.face_normals()
    if np.any(area2[pairs.reshape(-1)] <= 1e-12):
        raise ValueError("degenerate face adjacent to an interior edge")
    cos = np.sum(normals[pairs[:, 0]] * normals[pairs[:, 1]], axis=1)
    return float(np.mean(1.0 - cos))


def loss_kl(z: LatentSample) -> float:
    """KL divergence of a diagonal Gaussian from the standard normal.

    0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1); zero exactly at the standard
    normal.
    """
    var = np.exp(z.log_var)
    return float(0.5 * np.sum(z.mean**2 + var - z.log_var - 1.0))
