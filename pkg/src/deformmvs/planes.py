"""Depth hypothesis construction and refinement.

A stage regresses depth as the expectation of its probability volume over
hypothesis planes, measures the spread of that distribution, shrinks the
next stage's search range to expectation +/- eta * std, and re-discretizes
the range with one of three interval schemes: uniform, log-uniform, or
centered with linearly increasing gaps away from the expected depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import CameraModel

SCHEMES = ("uniform", "loguniform", "centered")


@dataclass(frozen=True)
class DepthHypothesis:
    """Per-pixel hypothesized depths, strictly increasing along the plane axis."""

    planes: Tensor  # [d, H, W], meters
    stage: int

    def __post_init__(self):
        if self.planes.ndim != 3:
            raise ValueError(f"hypothesis planes must be [d,H,W], got {self.planes.shape}")
        data = self.planes.data
        if data.min() <= 0:
            raise ValueError("hypothesized depths must be strictly positive")
        if data.shape[0] > 1 and np.diff(data, axis=0).min() <= 0:
            raise ValueError("hypothesis planes must be strictly increasing per pixel")

    @property
    def num_planes(self) -> int:
        return self.planes.shape[0]

    def mean_interval(self) -> float:
        """Mean plane spacing (plain float; used for clamp/floor scales)."""
        if self.num_planes < 2:
            return 0.0
        return float(np.diff(self.planes.data, axis=0).mean())


@dataclass(frozen=True)
class ProbabilityVolume:
    """Per-pixel distribution over hypothesis planes."""

    probs: Tensor  # [d, H, W]

    def __post_init__(self):
        p = self.probs.data
        if p.min() < 0:
            raise ValueError("probabilities must be non-negative")
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("probabilities must sum to 1 per pixel")


@dataclass(frozen=True)
class DepthEstimate:
    depth: Tensor  # [H, W], meters
    sigma: Tensor  # [H, W], meters


def regress_depth(hyp: DepthHypothesis, prob: ProbabilityVolume) -> Tensor:
    """Expected depth per pixel: sum over planes of depth * probability."""
    if hyp.planes.shape != prob.probs.shape:
        raise ValueError(f"shape mismatch: planes {hyp.planes.shape} vs probs {prob.probs.shape}")
    return ad.mul(hyp.planes, prob.probs).sum(axis=0)


def hypothesis_variance(hyp: DepthHypothesis, prob: ProbabilityVolume, depth: Tensor) -> Tensor:
    """Std of the hypothesis distribution about the regressed depth.

    Uses the squared deviation (a signed first moment about the mean is
    identically zero and carries no spread information).
    """
    diff = ad.sub(hyp.planes, depth.reshape((1,) + depth.shape))
    s = ad.mul(prob.probs, ad.mul(diff, diff)).sum(axis=0)
    return ad.sqrt(s)


def deform_range(depth: Tensor, sigma: Tensor, eta: float, sigma_min: float = 0.0,
                 depth_floor: float = 0.01,
                 half_width_cap: float | None = None) -> tuple[Tensor, Tensor]:
    """Per-pixel search range centered on depth with half-width eta * sigma.

    The half-width is floored at eta * sigma_min so a near-one-hot
    probability volume cannot collapse the range, and optionally ceilinged
    at half_width_cap: a diffuse volume has a large spread, and without the
    cap a cascade whose volumes have not sharpened yet would widen its
    search range stage over stage instead of compressing it. The lower bound
    is floored at depth_floor to stay in front of the camera.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    half = ad.mul(ad.maximum(sigma, sigma_min), eta)
    if half_width_cap is not None:
        half = ad.minimum(half, half_width_cap)
    lower = ad.maximum(ad.sub(depth, half), depth_floor)
    upper = ad.add(depth, half)
    return lower, upper


def uniform_planes(lower: Tensor, upper: Tensor, count: int) -> Tensor:
    """count equally spaced planes on [lower, upper], endpoints included."""
    if count < 2:
        raise ValueError("uniform discretization needs at least 2 planes")
    ts = np.linspace(0.0, 1.0, count)
    return ad.stack([ad.add(ad.mul(lower, 1.0 - t), ad.mul(upper, t)) for t in ts], axis=0)


def loguniform_planes(lower: Tensor, upper: Tensor, count: int) -> Tensor:
    """count planes at equal steps in log depth between lower and upper."""
    if count < 2:
        raise ValueError("log-uniform discretization needs at least 2 planes")
    if lower.data.min() <= 0:
        raise ValueError("log-uniform discretization needs positive lower bound")
    ll, lu = ad.ln(lower), ad.ln(upper)
    ts = np.linspace(0.0, 1.0, count)
    return ad.stack([ad.exp(ad.add(ad.mul(ll, 1.0 - t), ad.mul(lu, t))) for t in ts], axis=0)


def centered_planes(lower: Tensor, upper: Tensor, center: Tensor, count: int) -> Tensor:
    """Planes spreading from the center with linearly increasing gaps.

    count/2 planes each side; the i-th offset from the center is
    half_width * i*(i+1) / (h*(h+1)) with h = count/2, so consecutive gaps
    grow linearly and the outermost planes land exactly on the bounds. The
    center itself is not a plane.
    """
    if count % 2 != 0:
        raise ValueError(f"centered discretization needs an even plane count, got {count}")
    half = count // 2
    denom = half * (half + 1)
    up_w = ad.sub(upper, center)
    down_w = ad.sub(center, lower)
    coeffs = [i * (i + 1) / denom for i in range(1, half + 1)]
    down = [ad.sub(center, ad.mul(down_w, c)) for c in reversed(coeffs)]
    up = [ad.add(center, ad.mul(up_w, c)) for c in coeffs]
    return ad.stack(down + up, axis=0)


def discretize(lower: Tensor, upper: Tensor, depth: Tensor, count: int, scheme: str,
               stage: int) -> DepthHypothesis:
    """Discretize [lower, upper] into a stage hypothesis with the given scheme."""
    if (lower.data >= upper.data).any():
        raise ValueError("range lower bound must be strictly below upper bound")
    if scheme == "uniform":
        planes = uniform_planes(lower, upper, count)
    elif scheme == "loguniform":
        planes = loguniform_planes(lower, upper, count)
    elif scheme == "centered":
        planes = centered_planes(lower, upper, depth, count)
    else:
        raise ValueError(f"unknown interval scheme {scheme!r}; expected one of {SCHEMES}")
    return DepthHypothesis(planes, stage)


def initial_hypothesis(cam: CameraModel, height: int, width: int, count: int) -> DepthHypothesis:
    """Stage-1 planes: uniform over the camera's full depth range, shared by
    all pixels, resampled to `count` planes with endpoints preserved."""
    if cam.num_planes < 2:
        raise ValueError("camera depth metadata needs at least 2 planes")
    depth_max = cam.depth_min + cam.depth_interval * (cam.num_planes - 1)
    vals = np.linspace(cam.depth_min, depth_max, count)
    planes = np.broadcast_to(vals[:, None, None], (count, height, width)).copy()
    return DepthHypothesis(Tensor(planes), 1)
