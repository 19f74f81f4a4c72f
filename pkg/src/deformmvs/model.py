"""Three-stage cascade depth estimator.

Stage k runs at 1/16, 1/4, then full resolution: build hypothesis planes
(full-range uniform at stage 1, refined from the previous stage's
expectation and spread afterwards), optionally update the reference feature
by deformable view sampling, warp sources over the planes, score variance,
regularize to a probability volume, and regress depth + spread for the next
stage. Parameters live in a flat name->Tensor map serialized to a versioned
binary checkpoint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import CameraModel, scale_intrinsics
from .config import STAGE_SCALES, PipelineConfig, parse_config_text
from .costvolume import RegularizerParams, regularize, variance_cost, warp_to_volume
from .planes import (DepthHypothesis, ProbabilityVolume, deform_range, discretize,
                     hypothesis_variance, initial_hypothesis, regress_depth)
from .sampling import SamplerParams, anchor_pattern, bilinear_sample, pss_aggregate

CHECKPOINT_MAGIC = b"SDLM"
CHECKPOINT_VERSION = 1

View = tuple[Tensor, CameraModel]


@dataclass(frozen=True)
class StageOutput:
    depth: Tensor   # [H_k, W_k]
    sigma: Tensor   # [H_k, W_k]
    prob: ProbabilityVolume
    hyp: DepthHypothesis

    def __post_init__(self):
        lo = self.hyp.planes.data[0] - 1e-9
        hi = self.hyp.planes.data[-1] + 1e-9
        d = self.depth.data
        if (d < lo).any() or (d > hi).any():
            raise ValueError("stage depth left its hypothesis bounds")


@dataclass
class Model:
    config: PipelineConfig
    params: dict[str, Tensor]

    def tensor(self, name: str) -> Tensor:
        return self.params[name]

    def replace_param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def sampler_params(self, k: int, hyp: DepthHypothesis, n_src: int) -> SamplerParams:
        cfg = self.config
        interval = max(hyp.mean_interval(), 1e-9)
        anchors = [anchor_pattern(cfg.point_scheme, cfg.sample_points, cfg.anchor_scale,
                                  cfg.seed, stage=k + 1, view=i + 1)
                   for i in range(n_src)]
        return SamplerParams(
            off3_w=self.tensor(f"samp.s{k}.off3.w"), off3_b=self.tensor(f"samp.s{k}.off3.b"),
            off2_w=self.tensor(f"samp.s{k}.off2.w"), off2_b=self.tensor(f"samp.s{k}.off2.b"),
            view_w=self.tensor(f"samp.s{k}.view.w"), view_b=self.tensor(f"samp.s{k}.view.b"),
            num_points=cfg.sample_points, clamp_px=cfg.clamp_px,
            clamp_z=cfg.clamp_z_intervals * interval,
            offsets_3d=cfg.sampling_3d, offsets_2d=cfg.sampling_2d, anchors=anchors)

    def reg_params(self, k: int) -> RegularizerParams:
        return RegularizerParams(
            w1=self.tensor(f"reg.s{k}.c1.w"), b1=self.tensor(f"reg.s{k}.c1.b"),
            w2=self.tensor(f"reg.s{k}.c2.w"), b2=self.tensor(f"reg.s{k}.c2.b"),
            w3=self.tensor(f"reg.s{k}.c3.w"), b3=self.tensor(f"reg.s{k}.c3.b"))


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_model(config: PipelineConfig) -> Model:
    """Fresh parameters: Kaiming-uniform conv stacks, zero offset heads and
    zero final regularizer layer (sampling starts as identity, probability
    starts uniform)."""
    rng = np.random.default_rng(config.seed)
    c1, c2, c3 = config.stage_channels  # coarse, mid, fine
    r = config.reg_channels
    p = config.sample_points
    spec: list[tuple[str, tuple[int, ...], bool]] = [
        ("feat.stem.w", (c3, 3, 3, 3), False), ("feat.stem.b", (c3,), True),
        ("feat.head3.w", (c3, c3, 3, 3), False), ("feat.head3.b", (c3,), True),
        ("feat.down4.w", (c2, c3, 3, 3), False), ("feat.down4.b", (c2,), True),
        ("feat.head2.w", (c2, c2, 3, 3), False), ("feat.head2.b", (c2,), True),
        ("feat.down16.w", (c1, c2, 3, 3), False), ("feat.down16.b", (c1,), True),
        ("feat.head1.w", (c1, c1, 3, 3), False), ("feat.head1.b", (c1,), True),
    ]
    for k, ck in enumerate((c1, c2, c3)):
        spec += [
            (f"samp.s{k}.off3.w", (3, 2 * ck, 3, 3), True),
            (f"samp.s{k}.off3.b", (3,), True),
            (f"samp.s{k}.off2.w", (3 * p, 2 * ck, 3, 3), True),
            (f"samp.s{k}.off2.b", (3 * p,), True),
            (f"samp.s{k}.view.w", (1, 2 * ck, 3, 3), True),
            (f"samp.s{k}.view.b", (1,), True),
            (f"reg.s{k}.c1.w", (r, ck, 3, 3, 3), False), (f"reg.s{k}.c1.b", (r,), True),
            (f"reg.s{k}.c2.w", (r, r, 3, 3, 3), False), (f"reg.s{k}.c2.b", (r,), True),
            (f"reg.s{k}.c3.w", (1, r, 3, 3, 3), True), (f"reg.s{k}.c3.b", (1,), True),
        ]
    params: dict[str, Tensor] = {}
    for name, shape, zero in spec:
        data = np.zeros(shape) if zero else _kaiming(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def _layer2d(model: Model, x: Tensor, name: str) -> Tensor:
    w, b = model.tensor(f"{name}.w"), model.tensor(f"{name}.b")
    return ad.add(ad.conv2d(x, w, stride=1, padding=1), b.reshape((-1, 1, 1)))


def extract_features(image: Tensor, model: Model) -> list[Tensor]:
    """Feature pyramid at 1/16, 1/4, and full resolution (coarse to fine)."""
    c, h, w = image.shape
    if h % 16 or w % 16:
        raise ValueError(f"image sides must be divisible by 16, got {h}x{w}")
    stem = ad.relu(_layer2d(model, image, "feat.stem"))
    f3 = _layer2d(model, stem, "feat.head3")
    d4 = ad.relu(_layer2d(model, ad.avgpool2(ad.avgpool2(stem)), "feat.down4"))
    f2 = _layer2d(model, d4, "feat.head2")
    d16 = ad.relu(_layer2d(model, ad.avgpool2(ad.avgpool2(d4)), "feat.down16"))
    f1 = _layer2d(model, d16, "feat.head1")
    return [f1, f2, f3]


def _upsample_coords(out_h: int, out_w: int, in_h: int, in_w: int) -> np.ndarray:
    sy, sx = in_h / out_h, in_w / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0, in_w - 1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsample of a [H,W] map (pixel-center aligned)."""
    h, w = x.shape
    coords = _upsample_coords(out_h, out_w, h, w)
    return bilinear_sample(x.reshape(1, h, w), Tensor(coords)).reshape(out_h, out_w)


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest upsample; spread statistics must not blur across edges."""
    h, w = x.shape
    coords = np.round(_upsample_coords(out_h, out_w, h, w))
    return bilinear_sample(x.reshape(1, h, w), Tensor(coords)).reshape(out_h, out_w)


def forward(views: list[View], model: Model, bypass_regularizer: bool = False,
            bypass_temperature: float = 1.0) -> list[StageOutput]:
    """Run the full cascade for the reference view (views[0])."""
    if len(views) < 2:
        raise ValueError(f"need at least 2 views, got {len(views)}")
    images = [v[0] for v in views]
    cams = [v[1] for v in views]
    if any(img.shape != images[0].shape for img in images):
        raise ValueError("all view images must share one resolution")
    cfg = model.config
    pyramids = [extract_features(img, model) for img in images]
    init_width = cams[0].depth_interval * (cams[0].num_planes - 1)

    outputs: list[StageOutput] = []
    prev: StageOutput | None = None
    for k in range(3):
        d_k = cfg.stage_planes[k]
        feats = [pyr[k] for pyr in pyramids]
        h, w = feats[0].shape[1], feats[0].shape[2]
        cams_k = [scale_intrinsics(c, STAGE_SCALES[k]) for c in cams]

        if prev is None:
            hyp = initial_hypothesis(cams_k[0], h, w, d_k)
            center = hyp.planes[d_k // 2]
        else:
            center = upsample_bilinear(prev.depth, h, w)
            if cfg.adaptive_range:
                sigma_up = upsample_nearest(prev.sigma, h, w)
                sigma_min = cfg.sigma_floor_scale * prev.hyp.mean_interval()
                # uncertainty shrinks the range below the fixed schedule,
                # never widens it past it (cascade must contract)
                cap = 0.5 * cfg.fixed_range_fractions[k] * init_width
                lower, upper = deform_range(center, sigma_up, cfg.eta, sigma_min,
                                            cfg.depth_floor, half_width_cap=cap)
            else:
                half = 0.5 * cfg.fixed_range_fractions[k] * init_width
                lower = ad.maximum(ad.sub(center, half), cfg.depth_floor)
                upper = ad.add(center, half)
            scheme = cfg.interval_scheme if cfg.adaptive_interval else "uniform"
            hyp = discretize(lower, upper, center, d_k, scheme, stage=k + 1)

        if cfg.sampling_enabled:
            sp = model.sampler_params(k, hyp, len(views) - 1)
            ref_hat = pss_aggregate(feats[0], feats[1:], cams_k[0], cams_k[1:], center, sp)
        else:
            ref_hat = feats[0]

        volumes = [warp_to_volume(f, cams_k[0], c, hyp)
                   for f, c in zip(feats[1:], cams_k[1:])]
        cost = variance_cost(ref_hat, volumes, cfg.no_view_cost)
        prob = regularize(cost, None if bypass_regularizer else model.reg_params(k),
                          bypass=bypass_regularizer, bypass_temperature=bypass_temperature)
        depth = regress_depth(hyp, prob)
        sigma = hypothesis_variance(hyp, prob, depth)
        prev = StageOutput(depth, sigma, prob, hyp)
        outputs.append(prev)
    return outputs


def bundle_views(bundle, reference: int = 0) -> list[View]:
    """Model inputs from a scene bundle, with the chosen view first."""
    n = len(bundle.images)
    if not 0 <= reference < n:
        raise ValueError(f"reference index {reference} out of range for {n} views")
    order = [reference] + [i for i in range(n) if i != reference]
    return [(Tensor(bundle.images[i].astype(np.float64).transpose(2, 0, 1) / 255.0),
             bundle.cameras[i]) for i in order]


def photometric_probability(views: list[View], num_planes: int = 48,
                            temperature: float = 2e-4,
                            no_view_cost: float = 10.0):
    """Full-resolution plane sweep with raw image channels as features and
    the regularizer bypassed: an oracle needing no trained parameters.

    The default temperature is sharp enough that on clean scenes the
    expected depth tracks the argmin-cost plane. Returns (hypothesis,
    probability volume, expected depth).
    """
    images = [v[0] for v in views]
    cams = [v[1] for v in views]
    h, w = images[0].shape[1], images[0].shape[2]
    with ad.no_grad():
        hyp = initial_hypothesis(cams[0], h, w, num_planes)
        volumes = [warp_to_volume(img, cams[0], cam, hyp)
                   for img, cam in zip(images[1:], cams[1:])]
        cost = variance_cost(images[0], volumes, no_view_cost)
        prob = regularize(cost, None, bypass=True, bypass_temperature=temperature)
        depth = regress_depth(hyp, prob)
    return hyp, prob, depth


# -- checkpoint format -----------------------------------------------------------
#
# magic "SDLM", u32 version, u32 config-length + canonical key-sorted config
# text, u32 array count, then per array (sorted by name): u32 name length,
# name bytes, u32 ndim, u32 dims, float32 little-endian row-major values.


def save_checkpoint(path, config: PipelineConfig, arrays: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = config.to_text().encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    names = sorted(arrays)
    buf += struct.pack("<I", len(names))
    for name in names:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    with open(path, "wb") as f:
        f.write(buf)


def load_checkpoint(path) -> tuple[PipelineConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    config = parse_config_text(data[off:off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        arrays[name] = arr.copy()
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after last array")
    return config, arrays


def save_model(path, model: Model, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: t.data for name, t in model.params.items()}
    if extra:
        overlap = set(arrays) & set(extra)
        if overlap:
            raise ValueError(f"extra arrays collide with parameters: {sorted(overlap)}")
        arrays.update(extra)
    save_checkpoint(path, model.config, arrays)


def load_model(path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; non-parameter arrays are returned
    separately (optimizer state etc.)."""
    config, arrays = load_checkpoint(path)
    model = init_model(config)
    extra: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name in model.params:
            expected = model.params[name].shape
            if tuple(arr.shape) != expected:
                raise ValueError(f"{path}: array {name} has shape {arr.shape}, "
                                 f"expected {expected}")
            model.replace_param(name, arr.astype(np.float64))
        else:
            extra[name] = arr
    return model, extra
