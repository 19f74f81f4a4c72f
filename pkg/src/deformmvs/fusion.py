"""Depth-map fusion: back-project per-view depths to world points, keep
points that several views agree on under reprojection, deduplicate on a
voxel grid, and write ASCII PLY."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraModel, lift_pixels, project_points


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3] float64, world meters
    colors: np.ndarray  # [N, 3] uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError(f"{len(self.points)} points vs {len(self.colors)} colors")
        if len(self.points) and not np.isfinite(self.points).all():
            raise ValueError("point cloud coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


def backproject(depth: np.ndarray, cam: CameraModel, image: np.ndarray) -> PointCloud:
    """Lift every finite positive depth pixel to a colored world point."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} does not match depth {depth.shape}")
    if cam.K[0, 0] == 0 or cam.K[1, 1] == 0:
        raise ValueError("singular intrinsic matrix")
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    keep = np.isfinite(depth) & (depth > 0)
    uv = np.stack([gx[keep], gy[keep]], axis=1)
    pts = lift_pixels(cam, uv, depth[keep])
    return PointCloud(pts, image[keep])


def consistency_filter(depths: list[np.ndarray], cams: list[CameraModel],
                       images: list[np.ndarray], reproj_px_tol: float = 1.0,
                       depth_rel_tol: float = 0.01, min_views: int = 2,
                       dedup: bool = True) -> PointCloud:
    """Merge per-view depth maps, keeping geometrically consistent points.

    A pixel of view v survives if at least min_views-1 other views see it
    consistently: projecting its world point into view j, the depth stored
    there agrees within depth_rel_tol (relative) and lifting that stored
    depth back lands within reproj_px_tol pixels of the original pixel.
    The merged cloud is deduplicated on a voxel grid of half the ground
    sampling distance unless dedup is disabled.
    """
    n = len(depths)
    if n < 2:
        raise ValueError("consistency filtering needs at least 2 views")
    if not (len(cams) == len(images) == n):
        raise ValueError("depths, cams, and images must align")
    all_pts, all_cols = [], []
    for v in range(n):
        depth = np.asarray(depths[v], dtype=np.float64)
        h, w = depth.shape
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        valid = np.isfinite(depth) & (depth > 0)
        uv = np.stack([gx[valid], gy[valid]], axis=1)
        world = lift_pixels(cams[v], uv, depth[valid])
        agree = np.zeros(len(world), dtype=int)
        for j in range(n):
            if j == v:
                continue
            uv_j, z_j = project_points(cams[j], world)
            hj, wj = depths[j].shape
            px = np.round(uv_j[:, 0]).astype(int)
            py = np.round(uv_j[:, 1]).astype(int)
            inb = (z_j > 0) & (px >= 0) & (px < wj) & (py >= 0) & (py < hj)
            d_j = np.where(inb, np.asarray(depths[j])[py.clip(0, hj - 1),
                                                      px.clip(0, wj - 1)], np.nan)
            depth_ok = inb & np.isfinite(d_j) & (np.abs(z_j - d_j) <= depth_rel_tol * d_j)
            # lift the stored sample back and check the pixel round trip
            back = lift_pixels(cams[j], np.stack([px, py], axis=1).astype(np.float64),
                               np.where(np.isfinite(d_j), d_j, 1.0))
            uv_back, z_back = project_points(cams[v], back)
            px_ok = (z_back > 0) & (np.linalg.norm(uv_back - uv, axis=1) <= reproj_px_tol)
            agree += (depth_ok & px_ok).astype(int)
        keep = agree >= (min_views - 1)
        all_pts.append(world[keep])
        all_cols.append(np.asarray(images[v])[valid][keep])
    pts = np.concatenate(all_pts, axis=0)
    cols = np.concatenate(all_cols, axis=0)
    if dedup and len(pts):
        fx = cams[0].K[0, 0]
        gsd = float(np.median(np.concatenate([d[np.isfinite(d) & (d > 0)].reshape(-1)
                                              for d in depths]))) / fx
        voxel = 0.5 * gsd
        keys = np.floor(pts / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        order = np.sort(first)
        pts, cols = pts[order], cols[order]
    return PointCloud(pts, cols)


def write_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with float x,y,z and uchar red,green,blue."""
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(cloud.points, cloud.colors):
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                    f"{c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> PointCloud:
    """Parse the subset of PLY written by write_ply."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if lines[:2] != ["ply", "format ascii 1.0"]:
        raise ValueError(f"{path}: not an ascii PLY file")
    try:
        header_end = lines.index("end_header")
    except ValueError:
        raise ValueError(f"{path}: missing end_header") from None
    count = None
    for ln in lines[:header_end]:
        if ln.startswith("element vertex "):
            count = int(ln.split()[-1])
    if count is None:
        raise ValueError(f"{path}: missing vertex element")
    rows = lines[header_end + 1:header_end + 1 + count]
    if len(rows) != count:
        raise ValueError(f"{path}: expected {count} vertex rows, found {len(rows)}")
    pts = np.zeros((count, 3))
    cols = np.zeros((count, 3), dtype=np.uint8)
    for i, row in enumerate(rows):
        parts = row.split()
        pts[i] = [float(x) for x in parts[:3]]
        cols[i] = [int(x) for x in parts[3:6]]
    return PointCloud(pts, cols)
