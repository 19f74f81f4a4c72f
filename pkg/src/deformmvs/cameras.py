"""Pinhole camera algebra: intrinsics/extrinsics, the 4x4 inter-view
homography, frustum grid construction, and differentiable grid projection.

Convention: integer pixel coordinates address pixel centers, with (0,0) at
the top-left pixel center. Extrinsics map world to camera; depth is the
camera-frame z of a point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """Intrinsic 3x3, rigid world-to-camera 4x4, and depth-range metadata."""

    K: np.ndarray
    T: np.ndarray
    depth_min: float
    depth_interval: float
    num_planes: int = 48

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        T = np.asarray(self.T, dtype=np.float64)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ValueError(f"camera needs K 3x3 and T 4x4, got {K.shape}, {T.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError(f"focal lengths must be positive, got {K[0, 0]}, {K[1, 1]}")
        if abs(K[2, 2] - 1.0) > 1e-12 or np.abs(K[[1, 2, 2], [0, 0, 1]]).max() > 1e-12:
            raise ValueError("intrinsic matrix must be upper-triangular with K[2][2] = 1")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation block must be orthonormal with det +1")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("extrinsic last row must be [0,0,0,1]")
        if self.depth_min <= 0 or self.depth_interval <= 0:
            raise ValueError(
                f"depth metadata must be positive, got min={self.depth_min}, "
                f"interval={self.depth_interval}")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.T[:3, :3].T @ self.T[:3, 3]


@dataclass(frozen=True)
class FrustumGrid:
    """Reference-frame sample lattice: coords[d, h, w] = (x px, y px, z m)."""

    coords: Tensor

    def __post_init__(self):
        if self.coords.ndim != 4 or self.coords.shape[-1] != 3:
            raise ValueError(f"frustum grid must be [D,H,W,3], got {self.coords.shape}")
        if self.coords.data[..., 2].min() <= 0:
            raise ValueError("frustum grid depths must be strictly positive")

    @property
    def num_planes(self) -> int:
        return self.coords.shape[0]


def scale_intrinsics(cam: CameraModel, factor: float) -> CameraModel:
    """Scale focal lengths and principal point; extrinsics unchanged."""
    if factor <= 0:
        raise ValueError(f"intrinsic scale factor must be positive, got {factor}")
    K = cam.K.copy()
    K[0] *= factor
    K[1] *= factor
    return replace(cam, K=K)


def _embed_k(K: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = K
    return out


def homography_matrix(ref: CameraModel, src: CameraModel) -> np.ndarray:
    """4x4 transform from reference frustum coordinates to source pixels.

    Composes K_src . T_src . T_ref^-1 . K_ref^-1 with each K embedded
    block-diagonally into 4x4.
    """
    for cam in (ref, src):
        if cam.K[0, 0] == 0 or cam.K[1, 1] == 0:
            raise ValueError("singular intrinsic matrix")
    return _embed_k(src.K) @ src.T @ np.linalg.inv(ref.T) @ np.linalg.inv(_embed_k(ref.K))


def build_frustum_grid(planes: Tensor, height: int, width: int) -> FrustumGrid:
    """Lattice over hypothesized depths: coords[i,h,w] = (w, h, planes[i,h,w])."""
    planes = ad.as_tensor(planes)
    if planes.shape != (planes.shape[0], height, width):
        raise ValueError(f"planes {planes.shape} do not match grid {height}x{width}")
    if planes.data.min() <= 0:
        raise ValueError("hypothesized depths must be strictly positive")
    d = planes.shape[0]
    xg = Tensor(np.broadcast_to(np.arange(width, dtype=np.float64), (d, height, width)))
    yg = Tensor(np.broadcast_to(np.arange(height, dtype=np.float64)[:, None], (d, height, width)))
    return FrustumGrid(ad.stack([xg, yg, planes], axis=-1))


def project_grid(H: np.ndarray, grid: FrustumGrid) -> tuple[Tensor, np.ndarray]:
    """Map frustum samples through a 4x4 homography to source pixels.

    Each (x, y, z) becomes the homogeneous point (x*z, y*z, z, 1), is
    transformed by H and de-homogenized by its third component. Returns
    pixel coordinates [D,Hh,Ww,2] plus a validity mask that is False where
    the transformed depth falls below a small epsilon (points at or behind
    the source camera). Differentiable in the grid coordinates.
    """
    H = np.asarray(H, dtype=np.float64)
    c = grid.coords
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    xz = ad.mul(x, z)
    yz = ad.mul(y, z)

    def row(i):
        return ad.add(ad.add(ad.mul(xz, H[i, 0]), ad.mul(yz, H[i, 1])),
                      ad.add(ad.mul(z, H[i, 2]), H[i, 3]))

    X, Y, Z = row(0), row(1), row(2)
    valid = Z.data > DEPTH_EPS
    z_safe = ad.maximum(Z, DEPTH_EPS)
    return ad.stack([ad.div(X, z_safe), ad.div(Y, z_safe)], axis=-1), valid


def project_points(cam: CameraModel, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points [N,3] to pixels [N,2]; also returns camera depth [N]."""
    pts = np.asarray(points_world, dtype=np.float64)
    cam_pts = pts @ cam.T[:3, :3].T + cam.T[:3, 3]
    pix = cam_pts @ cam.K.T
    z = pix[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pix[:, :2] / z[:, None]
    return uv, z


def lift_pixels(cam: CameraModel, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Back-project pixels [N,2] at camera depth [N] to world points [N,3]."""
    uv = np.asarray(uv, dtype=np.float64)
    ones = np.ones((uv.shape[0], 1))
    rays = np.concatenate([uv, ones], axis=1) @ np.linalg.inv(cam.K).T
    cam_pts = rays * np.asarray(depth, dtype=np.float64)[:, None]
    R = cam.T[:3, :3]
    return (cam_pts - cam.T[:3, 3]) @ R
