"""Flat key=value pipeline configuration shared by the model, trainer, and CLI.

Every field round-trips through text: `to_text` emits canonical key-sorted
lines and `from_text` parses them back, rejecting unknown keys. Tuples are
comma-joined, booleans are true/false.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .planes import SCHEMES

POINT_SCHEMES = ("random", "kernel")
STAGE_SCALES = (1 / 16, 1 / 4, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    # model
    seed: int = 0
    views: int = 3
    stage_planes: tuple[int, ...] = (48, 32, 8)
    stage_channels: tuple[int, ...] = (32, 16, 8)
    reg_channels: int = 8
    sampling_enabled: bool = True      # deformable view sampling on/off
    sampling_3d: bool = True           # frustum-space offsets
    sampling_2d: bool = True           # image-space offsets
    sample_points: int = 9
    point_scheme: str = "random"
    anchor_scale: float = 1.0
    clamp_px: float = 4.0
    clamp_z_intervals: float = 2.0     # dz clamp, in units of current plane spacing
    adaptive_range: bool = True        # expectation +/- eta*sigma search range
    adaptive_interval: bool = True     # non-uniform interval scheme
    interval_scheme: str = "centered"
    eta: float = 3.0
    sigma_floor_scale: float = 0.5     # sigma floor, in units of previous mean spacing
    depth_floor: float = 0.01
    fixed_range_fractions: tuple[float, ...] = (1.0, 0.25, 0.0625)
    no_view_cost: float = 10.0
    # training
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 24
    max_steps: int = 0                 # 0 = no step cap
    stage_weights: tuple[float, ...] = (0.5, 1.0, 2.0)
    holdout_fraction: float = 0.2
    threads: int = 1

    def __post_init__(self):
        if len(self.stage_planes) != 3 or len(self.stage_channels) != 3:
            raise ValueError("stage_planes and stage_channels must list exactly 3 stages")
        if len(self.fixed_range_fractions) != 3 or len(self.stage_weights) != 3:
            raise ValueError("fixed_range_fractions and stage_weights must list 3 stages")
        if self.interval_scheme not in SCHEMES:
            raise ValueError(f"interval_scheme must be one of {SCHEMES}")
        if self.point_scheme not in POINT_SCHEMES:
            raise ValueError(f"point_scheme must be one of {POINT_SCHEMES}")
        if self.eta <= 0 or self.lr <= 0:
            raise ValueError("eta and lr must be positive")
        if any(w <= 0 for w in self.stage_weights):
            raise ValueError("stage loss weights must be positive")
        if self.sample_points < 1:
            raise ValueError("sample_points must be at least 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                s = ",".join(_fmt_scalar(x) for x in v)
            else:
                s = _fmt_scalar(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, template):
    if isinstance(template, bool):
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys are rejected."""
    base = base or PipelineConfig()
    by_name = {f.name: getattr(base, f.name) for f in fields(base)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in by_name:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        template = by_name[key]
        try:
            if isinstance(template, tuple):
                parts = [p for p in val.split(",") if p.strip() != ""]
                overrides[key] = tuple(_parse_scalar(p.strip(), template[0]) for p in parts)
            else:
                overrides[key] = _parse_scalar(val, template)
        except ValueError as e:
            raise ValueError(f"config line {lineno}: bad value for {key!r}: {e}") from None
    return base.with_overrides(**overrides)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)
