"""Plane-sweep cost volumes: warp source features over hypothesis planes,
score cross-view variance, and regularize into a per-pixel probability
distribution over planes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import CameraModel, build_frustum_grid, homography_matrix, project_grid
from .planes import DepthHypothesis, ProbabilityVolume
from .sampling import bilinear_sample

DEFAULT_NO_VIEW_COST = 10.0


@dataclass(frozen=True)
class FeatureVolume:
    """Source feature warped to every hypothesis plane; masked entries are zero."""

    values: Tensor        # [C, d, H, W]
    mask: np.ndarray      # [d, H, W] bool

    def __post_init__(self):
        c, d, h, w = self.values.shape
        if self.mask.shape != (d, h, w):
            raise ValueError(f"mask {self.mask.shape} does not match volume {self.values.shape}")


@dataclass(frozen=True)
class CostVolume:
    """Pre-regularization matching cost, non-negative per element."""

    values: Tensor  # [C, d, H, W]


@dataclass
class RegularizerParams:
    """Three-layer 3-d conv stack C -> mid -> mid -> 1, kernel 3^3."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor


def warp_to_volume(src_feat: Tensor, ref_cam: CameraModel, src_cam: CameraModel,
                   hyp: DepthHypothesis) -> FeatureVolume:
    """Sample the source feature at every hypothesis plane of the reference."""
    c, h, w = src_feat.shape
    if hyp.planes.shape[1:] != (h, w):
        raise ValueError(
            f"hypothesis resolution {hyp.planes.shape[1:]} does not match features {(h, w)}")
    hmat = homography_matrix(ref_cam, src_cam)
    grid = build_frustum_grid(hyp.planes, h, w)
    coords, valid = project_grid(hmat, grid)  # [d,H,W,2], [d,H,W]
    x, y = coords.data[..., 0], coords.data[..., 1]
    valid = valid & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    values = bilinear_sample(src_feat, coords, valid)  # [C, d, H, W]
    return FeatureVolume(values, valid)


def variance_cost(ref_feat: Tensor, volumes: list[FeatureVolume],
                  no_view_cost: float = DEFAULT_NO_VIEW_COST) -> CostVolume:
    """Per-element population variance across the reference and valid warps.

    The reference feature contributes at every plane; each source volume
    contributes where its mask is valid. Positions with fewer than two
    contributors get a large constant cost. Accumulation sorts contributor
    values first, so the result is bit-identical under any source-view
    permutation.
    """
    if not volumes:
        raise ValueError("variance cost needs at least one source volume")
    c, h, w = ref_feat.shape
    d = volumes[0].values.shape[1]
    for v in volumes:
        if v.values.shape != (c, d, h, w):
            raise ValueError(f"volume shape {v.values.shape} does not match {(c, d, h, w)}")

    masks = [v.mask.astype(np.float64) for v in volumes]
    m_count = 1.0 + sum(masks)                      # [d,H,W]
    ref_b = np.broadcast_to(ref_feat.data[:, None], (c, d, h, w))
    stackv = np.stack([ref_b] + [v.values.data * mk[None] for v, mk in zip(volumes, masks)])
    stackv = np.sort(stackv, axis=0)
    s1 = stackv.sum(axis=0)
    s2 = np.sort(stackv * stackv, axis=0).sum(axis=0)
    mean = s1 / m_count[None]
    var = s2 / m_count[None] - mean * mean
    enough = m_count >= 2.0
    gate = enough[None] & (var > 0.0)
    out = np.where(enough[None], np.maximum(var, 0.0), no_view_cost)

    inv_m = 2.0 / m_count[None]

    def grad_ref(g):
        contrib = np.where(gate, g * inv_m * (ref_b - mean), 0.0)
        return contrib.sum(axis=1)

    def make_grad(vol, mk):
        def grad_vol(g):
            return np.where(gate, g * inv_m * (vol.values.data - mean), 0.0) * mk[None]
        return grad_vol

    parents = [ref_feat] + [v.values for v in volumes]
    fns = [grad_ref] + [make_grad(v, mk) for v, mk in zip(volumes, masks)]
    return CostVolume(Tensor._from_op(out, parents, fns))


def regularize(cost: CostVolume, params: RegularizerParams | None,
               bypass: bool = False, bypass_temperature: float = 1.0) -> ProbabilityVolume:
    """Turn matching cost into a per-pixel plane distribution.

    Normal path: 3-layer 3-d conv stack to one logit channel, negated (low
    cost means likely), softmax over planes. Bypass path (oracle/testing):
    logits are the channel-mean cost scaled by 1/temperature, so argmax
    probability equals argmin cost regardless of temperature.
    """
    x = cost.values
    if bypass:
        logits = ad.mul(x.mean(axis=0), 1.0 / bypass_temperature)
    else:
        if params is None:
            raise ValueError("regularizer parameters required unless bypassed")
        y = ad.relu(_conv3d_layer(x, params.w1, params.b1))
        y = ad.relu(_conv3d_layer(y, params.w2, params.b2))
        y = _conv3d_layer(y, params.w3, params.b3)
        logits = y.reshape(y.shape[1:])
    return ProbabilityVolume(ad.softmax(ad.neg(logits), axis=0))


def _conv3d_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.conv3d(x, w, padding=1), b.reshape((-1, 1, 1, 1)))
