"""Depth-map evaluation: mean absolute error with a 100-interval outlier
cutoff, fixed 0.6 m and 3-interval accuracy fractions, and completeness."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

CSV_HEADER = "scene,mae,acc06,acc3i,comp"


@dataclass(frozen=True)
class EvalReport:
    mae: float
    acc_06m: float
    acc_3interval: float
    completeness: float
    n_valid: int

    def __post_init__(self):
        for name in ("acc_06m", "acc_3interval", "completeness"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a fraction, got {v}")
        if self.mae < 0:
            raise ValueError(f"mae must be non-negative, got {self.mae}")


def evaluate(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray,
             depth_interval: float) -> EvalReport:
    """Score a predicted depth map against ground truth on valid pixels.

    MAE averages |pred - gt| over valid pixels, excluding errors of 100
    depth intervals or more (extreme outliers); the accuracy fractions use
    strict < thresholds over all valid pixels. Completeness is the fraction
    of valid pixels carrying a finite prediction.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
                         f"mask {valid.shape}")
    if depth_interval <= 0:
        raise ValueError(f"depth interval must be positive, got {depth_interval}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels to evaluate")

    finite = np.isfinite(pred)
    err = np.where(finite, np.abs(pred - gt), np.inf)[valid]
    in_mae = err < 100.0 * depth_interval
    mae = float(err[in_mae].mean()) if in_mae.any() else 0.0
    acc06 = float((err < 0.6).mean())
    acc3i = float((err < 3.0 * depth_interval).mean())
    comp = float(finite[valid].mean())
    return EvalReport(mae, acc06, acc3i, comp, n_valid)


def mean_report(reports: list[EvalReport]) -> EvalReport:
    """Unweighted mean over scenes."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return EvalReport(float(np.mean([r.mae for r in reports])),
                      float(np.mean([r.acc_06m for r in reports])),
                      float(np.mean([r.acc_3interval for r in reports])),
                      float(np.mean([r.completeness for r in reports])),
                      n_valid=int(sum(r.n_valid for r in reports)))


def report_table(reports: list[EvalReport], names: list[str] | None = None,
                 include_mean: bool = True) -> str:
    """CSV with one row per report, plus a mean row when aggregating many."""
    if not reports:
        raise ValueError("no reports to tabulate")
    if names is None:
        names = [f"scene_{i}" for i in range(len(reports))]
    if len(names) != len(reports):
        raise ValueError(f"{len(names)} names for {len(reports)} reports")
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for name, r in zip(names, reports):
        out.write(f"{name},{r.mae!r},{r.acc_06m!r},{r.acc_3interval!r},{r.completeness!r}\n")
    if include_mean and len(reports) > 1:
        m = mean_report(reports)
        out.write(f"mean,{m.mae!r},{m.acc_06m!r},{m.acc_3interval!r},{m.completeness!r}\n")
    return out.getvalue()


def parse_report_table(text: str) -> tuple[list[str], list[EvalReport]]:
    """Inverse of report_table (mean row, when present, is parsed too)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad report header: {lines[:1]}")
    names, reports = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise ValueError(f"bad report row: {ln!r}")
        names.append(parts[0])
        reports.append(EvalReport(float(parts[1]), float(parts[2]), float(parts[3]),
                                  float(parts[4]), n_valid=0))
    return names, reports
