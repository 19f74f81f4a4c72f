"""Deformable cross-view feature sampling.

Per source view and stage: learn a 3-channel frustum offset (dx, dy in
pixels, dz in meters) from the concatenated reference/source features,
shift the reference grid, project it into the source view, then learn a
set of 2-d image-space offsets plus per-point weights around the projected
anchor, gather source features bilinearly at the offset points, and blend
the per-view aggregates with learned softmax view weights into an updated
reference feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import CameraModel, FrustumGrid, homography_matrix, project_grid

MIN_SAMPLE_DEPTH = 1e-3


@dataclass(frozen=True)
class OffsetField3D:
    """Per-pixel frustum offsets [3, H, W]: (dx px, dy px, dz m)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValueError(f"3-d offset field must be [3,H,W], got {self.values.shape}")
        if not np.isfinite(self.values.data).all():
            raise ValueError("3-d offset field must be finite")


@dataclass(frozen=True)
class OffsetField2D:
    """Learned image-space offsets [P, 2, H, W] for P sample points."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1] != 2:
            raise ValueError(f"2-d offset field must be [P,2,H,W], got {self.values.shape}")
        if not np.isfinite(self.values.data).all():
            raise ValueError("2-d offset field must be finite")


@dataclass(frozen=True)
class SampleWeights:
    """Convex weights over sample points and over source views."""

    point_weights: Tensor  # [P, H, W]
    view_weights: Tensor   # [N-1, H, W]


@dataclass
class SamplerParams:
    """Conv weights and settings for one stage of deformable sampling."""

    off3_w: Tensor
    off3_b: Tensor
    off2_w: Tensor
    off2_b: Tensor
    view_w: Tensor
    view_b: Tensor
    num_points: int = 9
    clamp_px: float = 4.0
    clamp_z: float = 1.0
    offsets_3d: bool = True
    offsets_2d: bool = True
    anchors: list[np.ndarray] = field(default_factory=list)  # per source view, [P,2]


def anchor_pattern(scheme: str, num_points: int, scale: float, seed: int,
                   stage: int, view: int) -> np.ndarray:
    """Initial sample positions around the projected anchor point.

    `random` draws from a per-(stage, view) seeded uniform [-1,1]^2;
    `kernel` is the 3x3 stencil {-1,0,1}^2 and requires 9 points. A single
    point always sits exactly on the anchor.
    """
    if num_points == 1:
        return np.zeros((1, 2))
    if scheme == "kernel":
        if num_points != 9:
            raise ValueError(f"kernel anchor scheme needs 9 points, got {num_points}")
        g = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)
        return g * scale
    if scheme == "random":
        rng = np.random.default_rng((seed * 1_000_003 + stage * 101 + view) % 2**63)
        return rng.uniform(-1.0, 1.0, (num_points, 2)) * scale
    raise ValueError(f"unknown anchor scheme {scheme!r}; expected 'random' or 'kernel'")


def bilinear_sample(feat: Tensor, coords: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Gather feat[C,H,W] at fractional pixel coords [...,2] -> [C, ...].

    Each output is the 4-neighbor weighted sum with weights
    max(0, 1-|dx|) * max(0, 1-|dy|); neighbors outside the image contribute
    zero, and positions where valid_mask is False return zero. Differentiable
    in both the features and the coordinates.
    """
    feat = ad.as_tensor(feat)
    coords = ad.as_tensor(coords)
    if feat.ndim != 3:
        raise ValueError(f"features must be [C,H,W], got {feat.shape}")
    if coords.shape[-1] != 2:
        raise ValueError(f"coords must end in (x,y) pairs, got {coords.shape}")
    c, h, w = feat.shape
    sshape = coords.shape[:-1]
    x = coords.data[..., 0].reshape(-1)
    y = coords.data[..., 1].reshape(-1)
    if valid_mask is not None:
        vm = np.asarray(valid_mask, bool).reshape(-1).astype(np.float64)
    else:
        vm = np.ones_like(x)

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    dx = x - x0
    dy = y - y0

    corners = []
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + ox, y0 + oy
        inb = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(np.float64)
        wx = dx if ox else 1.0 - dx
        wy = dy if oy else 1.0 - dy
        corners.append((np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1), inb, wx, wy, ox, oy))

    fdat = feat.data
    out = np.zeros((c, x.size))
    for xi, yi, inb, wx, wy, _, _ in corners:
        out += (vm * inb * wx * wy) * fdat[:, yi, xi]
    out = out.reshape((c,) + sshape)

    cidx = np.arange(c)[:, None]

    def grad_feat(g):
        g2 = g.reshape(c, -1)
        gf = np.zeros((c, h, w))
        for xi, yi, inb, wx, wy, _, _ in corners:
            np.add.at(gf, (cidx, yi[None, :], xi[None, :]), g2 * (vm * inb * wx * wy))
        return gf

    def grad_coords(g):
        g2 = g.reshape(c, -1)
        gx = np.zeros(x.size)
        gy = np.zeros(x.size)
        for xi, yi, inb, wx, wy, ox, oy in corners:
            f = fdat[:, yi, xi]
            gsum = (g2 * f).sum(axis=0) * vm * inb
            gx += gsum * (1.0 if ox else -1.0) * wy
            gy += gsum * (1.0 if oy else -1.0) * wx
        return np.stack([gx, gy], axis=-1).reshape(coords.shape)

    return Tensor._from_op(out, (feat, coords), (grad_feat, grad_coords))


def _head(ref_feat: Tensor, src_feat: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if ref_feat.shape != src_feat.shape:
        raise ValueError(f"feature shape mismatch: {ref_feat.shape} vs {src_feat.shape}")
    x = ad.concat([ref_feat, src_feat], axis=0)
    y = ad.conv2d(x, w, stride=1, padding=1)
    return ad.add(y, b.reshape((-1, 1, 1)))


def predict_offsets_3d(ref_feat: Tensor, src_feat: Tensor, params: SamplerParams) -> OffsetField3D:
    """Frustum-space offsets from concatenated features: conv -> tanh -> clamp scale."""
    raw = ad.tanh(_head(ref_feat, src_feat, params.off3_w, params.off3_b))
    scale = Tensor(np.array([params.clamp_px, params.clamp_px, params.clamp_z]).reshape(3, 1, 1))
    return OffsetField3D(ad.mul(raw, scale))


def predict_offsets_2d(ref_feat: Tensor, src_feat: Tensor,
                       params: SamplerParams) -> tuple[OffsetField2D, Tensor]:
    """Image-space offsets and softmax point weights for P sample points."""
    p = params.num_points
    out = _head(ref_feat, src_feat, params.off2_w, params.off2_b)  # [3P, H, W]
    h, w = out.shape[1], out.shape[2]
    off = ad.mul(ad.tanh(out[:2 * p]), params.clamp_px).reshape(p, 2, h, w)
    weights = ad.softmax(out[2 * p:], axis=0)
    return OffsetField2D(off), weights


def pss_aggregate(ref_feat: Tensor, src_feats: list[Tensor], ref_cam: CameraModel,
                  src_cams: list[CameraModel], center_depth: Tensor,
                  params: SamplerParams, return_info: bool = False):
    """Updated reference feature from deformable sampling of all source views.

    center_depth [H,W] is the per-pixel depth at which the single projected
    anchor is placed (middle hypothesis plane at stage 1, previous-stage
    expected depth afterwards). Per view: 3-d offsets shift the frustum
    point, projection yields the anchor p0, 2-d offsets spread P samples
    around it, bilinear gathers are blended by softmax point weights, and
    the per-view aggregates by softmax view weights. Source order is fixed,
    so the reduction is bit-reproducible.
    """
    if len(src_feats) < 1:
        raise ValueError("deformable aggregation needs at least 2 views (1 source)")
    if len(src_feats) != len(src_cams):
        raise ValueError(f"{len(src_feats)} source features vs {len(src_cams)} cameras")
    c, h, w = ref_feat.shape
    xg = Tensor(np.broadcast_to(np.arange(w, dtype=np.float64), (h, w)))
    yg = Tensor(np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w)))

    per_view = []
    logits = []
    info = {"anchor": [], "points": []}
    for i, (feat_i, cam_i) in enumerate(zip(src_feats, src_cams)):
        if params.offsets_3d:
            off3 = predict_offsets_3d(ref_feat, feat_i, params).values
            gx = ad.add(xg, off3[0])
            gy = ad.add(yg, off3[1])
            gz = ad.maximum(ad.add(center_depth, off3[2]), MIN_SAMPLE_DEPTH)
        else:
            gx, gy = xg, yg
            gz = ad.maximum(center_depth, MIN_SAMPLE_DEPTH)
        grid = FrustumGrid(ad.stack([gx, gy, gz], axis=-1).reshape(1, h, w, 3))
        hmat = homography_matrix(ref_cam, cam_i)
        p0, valid = project_grid(hmat, grid)
        p0 = p0.reshape(h, w, 2)
        valid = valid.reshape(h, w)

        if params.offsets_2d:
            off2, pw = predict_offsets_2d(ref_feat, feat_i, params)
            anchors = params.anchors[i]
            p = params.num_points
        else:
            off2, pw = None, None
            anchors = np.zeros((1, 2))
            p = 1

        coords = []
        for n in range(p):
            cx = ad.add(p0[..., 0], float(anchors[n, 0]))
            cy = ad.add(p0[..., 1], float(anchors[n, 1]))
            if off2 is not None:
                cx = ad.add(cx, off2.values[n, 0])
                cy = ad.add(cy, off2.values[n, 1])
            coords.append(ad.stack([cx, cy], axis=-1))
        coords = ad.stack(coords, axis=0)  # [P, H, W, 2]
        samples = bilinear_sample(feat_i, coords,
                                  np.broadcast_to(valid, (p, h, w)))  # [C, P, H, W]
        if pw is None:
            y_i = samples.reshape(c, h, w)
        else:
            y_i = ad.mul(samples, pw.reshape(1, p, h, w)).sum(axis=1)
        per_view.append(y_i)
        logits.append(_head(ref_feat, feat_i, params.view_w, params.view_b))
        if return_info:
            info["anchor"].append(p0.data)
            info["points"].append(coords.data)

    view_w = ad.softmax(ad.concat(logits, axis=0), axis=0)  # [N-1, H, W]
    out = ad.mul(per_view[0], view_w[0:1].reshape(1, h, w))
    for i in range(1, len(per_view)):
        out = ad.add(out, ad.mul(per_view[i], view_w[i:i + 1].reshape(1, h, w)))
    if return_info:
        info["view_weights"] = view_w.data
        return out, info
    return out
