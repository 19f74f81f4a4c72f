"""Training loop: stage-weighted L1 depth loss, Adam, seeded scene order,
per-epoch holdout evaluation, and a line-oriented metrics log."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .config import PipelineConfig
from .metrics import evaluate
from .model import Model, StageOutput, bundle_views, forward, save_model
from .scenes import SceneBundle

STAGE_STRIDES = (16, 4, 1)


class TrainingAbort(RuntimeError):
    """Non-finite loss; carries the context needed to reproduce it."""


def downsample_gt(gt: np.ndarray, stride: int) -> np.ndarray:
    """Pick the sample nearest each coarse pixel center (no depth mixing)."""
    if stride == 1:
        return gt
    return gt[stride // 2::stride, stride // 2::stride]


def gt_pyramid(gt: np.ndarray) -> list[np.ndarray]:
    return [downsample_gt(gt, s) for s in STAGE_STRIDES]


def valid_masks(pyramid: list[np.ndarray]) -> list[np.ndarray]:
    return [np.isfinite(g) & (g > 0) for g in pyramid]


def multistage_l1_loss(outputs: list[StageOutput], gt_pyr: list[np.ndarray],
                       masks: list[np.ndarray], stage_weights) -> Tensor:
    """Weighted sum over stages of the mean absolute depth error on valid
    pixels (mean, not sum, so the stage weights keep their meaning across
    resolutions)."""
    total = None
    for out, gt, mask, lam in zip(outputs, gt_pyr, masks, stage_weights):
        n = float(mask.sum())
        if n == 0:
            raise ValueError("empty valid mask at one stage")
        gt_safe = np.where(mask, gt, 0.0)
        diff = ad.sub(out.depth, Tensor(gt_safe))
        term = ad.mul(ad.mul(ad.absval(diff), Tensor(mask.astype(np.float64))), lam / n).sum()
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    epoch: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              cfg: PipelineConfig, eps: float = 1e-8) -> None:
    """Standard Adam with bias correction; updates params and state in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] = Tensor(p.data - step, requires_grad=True)


def split_dataset(n: int, cfg: PipelineConfig) -> tuple[list[int], list[int]]:
    """Seeded train/holdout split; at least one scene stays in training."""
    order = list(np.random.default_rng([cfg.seed, 0xD5]).permutation(n))
    n_hold = min(int(round(n * cfg.holdout_fraction)), n - 1)
    return [int(i) for i in order[n_hold:]], [int(i) for i in order[:n_hold]]


def evaluate_model(model: Model, bundles: list[SceneBundle]) -> dict[str, float]:
    """Mean stage-3 metrics over bundles (reference view of each)."""
    maes, a06, a3i = [], [], []
    for b in bundles:
        with ad.no_grad():
            outs = forward(bundle_views(b), model)
        gt = b.gt_depth[0]
        mask = np.isfinite(gt) & (gt > 0)
        rep = evaluate(outs[2].depth.data, gt, mask, b.cameras[0].depth_interval)
        maes.append(rep.mae)
        a06.append(rep.acc_06m)
        a3i.append(rep.acc_3interval)
    return {"mae": float(np.mean(maes)), "acc06": float(np.mean(a06)),
            "acc3i": float(np.mean(a3i))}


def train(dataset: list[SceneBundle], cfg: PipelineConfig, model: Model,
          out_ckpt, log_path=None, state: AdamState | None = None) -> list[dict]:
    """Epochs x scenes loop (batch of one scene); writes the checkpoint and
    one metrics-log line per epoch. Returns the per-epoch history."""
    if not dataset:
        raise ValueError("training needs at least one scene")
    state = state or AdamState()
    train_idx, hold_idx = split_dataset(len(dataset), cfg)
    eval_bundles = [dataset[i] for i in (hold_idx or train_idx)]
    history: list[dict] = []
    log_lines: list[str] = []
    stop = False
    for epoch in range(state.epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1 + epoch]).permutation(len(train_idx))
        losses = []
        for j in order:
            bundle = dataset[train_idx[int(j)]]
            outs = forward(bundle_views(bundle), model)
            pyr = gt_pyramid(bundle.gt_depth[0])
            loss = multistage_l1_loss(outs, pyr, valid_masks(pyr), cfg.stage_weights)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingAbort(
                    f"non-finite loss {val} at epoch {epoch} step {state.t} "
                    f"(scene seed {bundle.manifest.get('seed')}); aborting")
            tape = backward(loss)
            grads = {name: tape.grad(t) for name, t in model.params.items()}
            adam_step(model.params, grads, state, cfg)
            losses.append(val)
            if cfg.max_steps and state.t >= cfg.max_steps:
                stop = True
                break
        state.epoch = epoch + 1
        stats = evaluate_model(model, eval_bundles)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), **stats}
        history.append(row)
        log_lines.append("epoch={epoch} loss={loss!r} mae={mae!r} acc06={acc06!r} "
                         "acc3i={acc3i!r}".format(**row))
        if stop:
            break
    _write_outputs(out_ckpt, log_path, model, state, log_lines)
    return history


def _write_outputs(out_ckpt, log_path, model: Model, state: AdamState,
                   log_lines: list[str]) -> None:
    extra = {f"opt.m.{k}": v for k, v in state.m.items()}
    extra.update({f"opt.v.{k}": v for k, v in state.v.items()})
    extra["opt.t"] = np.array([state.t], dtype=np.float64)
    extra["opt.epoch"] = np.array([state.epoch], dtype=np.float64)
    save_model(out_ckpt, model, extra=extra)
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + ("\n" if log_lines else ""),
                                  encoding="utf-8")


def state_from_extra(extra: dict[str, np.ndarray]) -> AdamState:
    """Rebuild optimizer state from checkpoint arrays (opt.* names)."""
    state = AdamState()
    for name, arr in extra.items():
        if name.startswith("opt.m."):
            state.m[name[6:]] = arr.astype(np.float64)
        elif name.startswith("opt.v."):
            state.v[name[6:]] = arr.astype(np.float64)
        elif name == "opt.t":
            state.t = int(arr.reshape(-1)[0])
        elif name == "opt.epoch":
            state.epoch = int(arr.reshape(-1)[0])
    return state
