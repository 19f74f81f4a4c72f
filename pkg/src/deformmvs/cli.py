"""Command-line surface: scene generation, training, prediction, evaluation,
fusion, and ablation sweeps.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import PipelineConfig, load_config, parse_config_text
from .fusion import consistency_filter, write_ply
from .metrics import evaluate, mean_report, report_table
from .model import (bundle_views, forward, init_model, load_model, save_model)
from .scenes import PRESETS, make_suite, render
from .sceneio import DataFormatError, list_bundles, read_bundle, read_pfm, write_bundle, write_pfm
from .train import TrainingAbort, evaluate_model, split_dataset, state_from_extra, train


class UsageError(ValueError):
    pass


ABLATION_AXES = ("pss", "dhd-range", "dhd-interval", "modules", "points", "spaces", "scheme")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformmvs",
                                description="Deformable multi-view stereo pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="render synthetic scene bundles")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1)
    g.add_argument("--preset", choices=PRESETS, default="clean")
    g.add_argument("--views", type=int, choices=(3, 5), default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=80)
    g.add_argument("--threads", type=int, default=1)

    t = sub.add_parser("train", help="train a model on scene bundles")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="metrics log path (default: <out>.log)")
    t.add_argument("--no-figures", action="store_true")

    pr = sub.add_parser("predict", help="write per-view depth + confidence maps")
    pr.add_argument("--data", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--no-figures", action="store_true")

    f = sub.add_parser("fuse", help="fuse predicted depths into point clouds")
    f.add_argument("--data", required=True)
    f.add_argument("--pred", required=True)
    f.add_argument("--out", required=True, help="output directory for PLY files")
    f.add_argument("--reproj-px-tol", type=float, default=1.0)
    f.add_argument("--depth-rel-tol", type=float, default=0.01)
    f.add_argument("--min-views", type=int, default=2)

    a = sub.add_parser("ablate", help="train and compare configured variants")
    _add_config_flags(a)
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--no-figures", action="store_true")
    return p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="cap on optimizer steps")
    p.add_argument("--threads", type=int)
    p.add_argument("--print-config", action="store_true",
                   help="print the merged configuration and exit")


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise DataFormatError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
    if args.set:
        try:
            cfg = parse_config_text("\n".join(args.set), cfg)
        except ValueError as e:
            raise UsageError(str(e)) from None
    shortcuts = {}
    if args.seed is not None:
        shortcuts["seed"] = args.seed
    if args.epochs is not None:
        shortcuts["epochs"] = args.epochs
    if args.steps is not None:
        shortcuts["max_steps"] = args.steps
    if args.threads is not None:
        shortcuts["threads"] = args.threads
    if shortcuts:
        cfg = cfg.with_overrides(**shortcuts)
    return cfg


def _load_dataset(data_dir):
    paths = list_bundles(data_dir)
    if not paths:
        raise DataFormatError(f"{data_dir}: no scene bundles found")
    return [read_bundle(p) for p in paths], [p.name for p in paths]


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = make_suite(args.n, args.preset, args.seed, n_views=args.views,
                       height=args.height, width=args.width)

    def job(i_spec):
        i, spec = i_spec
        write_bundle(render(spec), out / f"scene_{i:04d}")

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as ex:
            list(ex.map(job, enumerate(specs)))
    else:
        for item in enumerate(specs):
            job(item)
    print(f"wrote {len(specs)} {args.preset} bundle(s) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    dataset, _ = _load_dataset(args.data)
    if args.resume:
        model, extra = load_model(args.resume)
        state = state_from_extra(extra)
        cfg = model.config.with_overrides(
            epochs=cfg.epochs, max_steps=cfg.max_steps, threads=cfg.threads)
        model.config = cfg
    else:
        model = init_model(cfg)
        state = None
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log")
    history = train(dataset, cfg, model, args.out, log_path, state=state)
    if history:
        print(f"trained {len(history)} epoch(s); final loss {history[-1]['loss']:.6g} "
              f"mae {history[-1]['mae']:.6g}")
    else:
        print("no training epochs ran; checkpoint holds the initial state")
    if not args.no_figures:
        from .report import save_training_curves
        save_training_curves(history, Path(args.out).with_suffix(".png"))
    return 0


def _predict_bundle(model, bundle, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for v in range(len(bundle.images)):
        with ad.no_grad():
            outs = forward(bundle_views(bundle, reference=v), model)
        depth = outs[-1].depth.data
        conf = outs[-1].prob.probs.data.max(axis=0)
        write_pfm(out_dir / f"depth_{v}.pfm", depth)
        write_pfm(out_dir / f"conf_{v}.pfm", conf)


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataFormatError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_model(args.checkpoint)
    dataset, names = _load_dataset(args.data)
    out = Path(args.out)

    def job(pair):
        bundle, name = pair
        _predict_bundle(model, bundle, out / name)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as ex:
            list(ex.map(job, zip(dataset, names)))
    else:
        for pair in zip(dataset, names):
            job(pair)
    print(f"wrote depth/confidence maps for {len(dataset)} scene(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    dataset, names = _load_dataset(args.data)
    pred_root = Path(args.pred)
    rows, row_names = [], []
    panels = []
    for bundle, name in zip(dataset, names):
        for v in range(len(bundle.images)):
            pfm = pred_root / name / f"depth_{v}.pfm"
            if not pfm.is_file():
                raise DataFormatError(f"missing prediction {pfm}")
            pred = read_pfm(pfm)
            gt = bundle.gt_depth[v]
            mask = np.isfinite(gt) & (gt > 0)
            rows.append(evaluate(pred, gt, mask, bundle.cameras[v].depth_interval))
            row_names.append(f"{name}/view{v}")
            if v == 0:
                panels.append((name, pred, gt))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_table(rows, row_names), encoding="utf-8")
    m = mean_report(rows)
    print(f"scenes={len(dataset)} mae={m.mae:.6g} acc06={m.acc_06m:.4f} "
          f"acc3i={m.acc_3interval:.4f} comp={m.completeness:.4f}")
    if not args.no_figures:
        from .report import save_depth_figure, save_metrics_figure
        save_metrics_figure(row_names, rows, out.with_suffix(".png"))
        for name, pred, gt in panels:
            save_depth_figure(pred, gt, out.parent / f"depth_{name}.png", title=name)
    return 0


def cmd_fuse(args) -> int:
    dataset, names = _load_dataset(args.data)
    pred_root = Path(args.pred)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for bundle, name in zip(dataset, names):
        depths = []
        for v in range(len(bundle.images)):
            pfm = pred_root / name / f"depth_{v}.pfm"
            if not pfm.is_file():
                raise DataFormatError(f"missing prediction {pfm}")
            depths.append(read_pfm(pfm))
        cloud = consistency_filter(depths, bundle.cameras, bundle.images,
                                   reproj_px_tol=args.reproj_px_tol,
                                   depth_rel_tol=args.depth_rel_tol,
                                   min_views=args.min_views)
        write_ply(cloud, out / f"{name}.ply")
        total += len(cloud)
    print(f"fused {len(dataset)} scene(s), {total} points, into {out}")
    return 0


def ablation_variants(axis: str, cfg: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    flag_rows = [
        ("baseline", (False, False, False)),
        ("sampling", (True, False, False)),
        ("range", (False, True, False)),
        ("interval", (False, False, True)),
        ("sampling+range", (True, True, False)),
        ("sampling+interval", (True, False, True)),
        ("full", (True, True, True)),
    ]

    def flags(s, r, i):
        return dict(sampling_enabled=s, adaptive_range=r, adaptive_interval=i)

    if axis == "modules":
        return [(n, cfg.with_overrides(**flags(*f))) for n, f in flag_rows]
    if axis == "pss":
        return [("off", cfg.with_overrides(sampling_enabled=False)),
                ("on", cfg.with_overrides(sampling_enabled=True))]
    if axis == "dhd-range":
        return [("off", cfg.with_overrides(adaptive_range=False)),
                ("on", cfg.with_overrides(adaptive_range=True))]
    if axis == "dhd-interval":
        return [("off", cfg.with_overrides(adaptive_interval=False)),
                ("on", cfg.with_overrides(adaptive_interval=True))]
    if axis == "points":
        base = cfg.with_overrides(sample_points=9, sampling_enabled=True)
        return [("random", base.with_overrides(point_scheme="random")),
                ("kernel", base.with_overrides(point_scheme="kernel"))]
    if axis == "spaces":
        base = cfg.with_overrides(sampling_enabled=True)
        return [("3d", base.with_overrides(sampling_3d=True, sampling_2d=False)),
                ("2d", base.with_overrides(sampling_3d=False, sampling_2d=True)),
                ("both", base.with_overrides(sampling_3d=True, sampling_2d=True))]
    if axis == "scheme":
        base = cfg.with_overrides(adaptive_range=True, adaptive_interval=True)
        return [("uniform", base.with_overrides(interval_scheme="uniform")),
                ("loguniform", base.with_overrides(interval_scheme="loguniform")),
                ("centered", base.with_overrides(interval_scheme="centered"))]
    raise UsageError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    dataset, _ = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, hold_idx = split_dataset(len(dataset), cfg)
    eval_bundles = [dataset[i] for i in hold_idx] or dataset
    rows = []
    for name, vcfg in ablation_variants(args.axis, cfg):
        model = init_model(vcfg)
        train(dataset, vcfg, model, out / f"{args.axis}_{name}.ckpt")
        stats = evaluate_model(model, eval_bundles)
        rows.append((name, stats))
        print(f"{args.axis}:{name} mae={stats['mae']:.6g} acc3i={stats['acc3i']:.4f} "
              f"acc06={stats['acc06']:.4f}")
    csv = "variant,mae,acc3i,acc06\n" + "".join(
        f"{n},{s['mae']!r},{s['acc3i']!r},{s['acc06']!r}\n" for n, s in rows)
    (out / f"ablate_{args.axis}.csv").write_text(csv, encoding="utf-8")
    if not args.no_figures:
        from .metrics import EvalReport
        from .report import save_ablation_figure
        reps = [EvalReport(s["mae"], s["acc06"], s["acc3i"], 1.0, 0) for _, s in rows]
        save_ablation_figure([n for n, _ in rows], reps, out / f"ablate_{args.axis}.png")
    return 0


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError, NotADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
