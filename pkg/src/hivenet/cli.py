"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files, shape mismatches), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .centerline import (
    CenterlineSet,
    ProximityConfig,
    distance_transform,
    normalize_proximity,
    proximity_map,
    read_centerlines,
    write_centerlines,
)
from .config import ConfigError, RunConfig, apply_overrides, from_text
from .hvec import ABLATION_VARIANTS
from .io import FormatError, load_checkpoint, read_hvol, save_checkpoint, write_hvol
from .metrics import SWEEP_THRESHOLDS, connected_components, evaluate, format_kv, format_table
from .network import PRESETS, build_network, count_flops, count_params, layer_summary
from .phantom import LabeledVolume, PhantomConfig, generate
from .train import NumericError, load_for_inference, predict, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=S, metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--preset", default=S, choices=sorted(PRESETS), help="network preset")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--lambda", dest="lam", type=float, default=S,
                   help="weight of the segmentation loss (default 0.7)")
    p.add_argument("--single-task", action="store_true", default=S,
                   help="drop the detection decoder")
    p.add_argument("--data-fraction", type=float, default=S,
                   help="train on this leading fraction of the volume's slices")
    p.add_argument("--tta", action="store_true", default=S,
                   help="average predictions over four in-plane rotations")
    p.add_argument("--ablation", choices=sorted(ABLATION_VARIANTS), default=S,
                   help="HVEC variant: A none, B focal only, C inter-branch only, D both")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="hivenet", parents=[common],
                description="Multitask 3D segmentation with hierarchical view-ensemble convolutions.")
    p.add_argument("--version", action="version", version=f"hivenet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-phantom", parents=[common], help="write synthetic volumes")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    g.add_argument("--prefix", default="phantom")

    m = sub.add_parser("make-proximity", parents=[common], help="proximity map from centerlines")
    m.add_argument("--centerlines", required=True)
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--like", help="HVOL volume whose dims and spacing to use")
    src.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    m.add_argument("--out", required=True)
    m.add_argument("--raw", action="store_true", help="write unnormalized values")

    t = sub.add_parser("train", parents=[common], help="train on one labeled volume")
    t.add_argument("--image", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--centerlines", help="required unless single-task or lambda = 1")
    t.add_argument("--val-image")
    t.add_argument("--val-labels")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV training log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--crops-per-epoch", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")

    r = sub.add_parser("predict", parents=[common], help="sliding-window inference")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True, help="probability volume (HVOL f32)")
    r.add_argument("--proximity-out", help="predicted proximity volume (normalized)")
    r.add_argument("--window", type=int, nargs=3, metavar=("D", "H", "W"))

    e = sub.add_parser("evaluate", parents=[common], help="metrics of a prediction")
    e.add_argument("--pred", required=True, help="probability or binary volume")
    e.add_argument("--gt", required=True, help="instance ids or binary labels")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    e.add_argument("--sweep", action="store_true",
                   help="F1/AP over overlap thresholds 0.50:0.05:0.85")
    e.add_argument("--report", help="write metric=value lines here")

    a = sub.add_parser("analyze", parents=[common], help="parameter and FLOP counts")
    a.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    a.add_argument("--per-layer", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cfg = from_text(path.read_text())
    else:
        cfg = RunConfig()
    if getattr(args, "preset", None):
        crop = cfg.network.input_crop
        cfg = dataclasses.replace(cfg, network=PRESETS[args.preset]())
        if args.preset not in ("tiny", "overfit"):
            cfg.network.input_crop = crop
    items = []
    for s in getattr(args, "set", None) or []:
        key, eq, value = s.partition("=")
        if not eq:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {s!r}")
        items.append((key.strip(), value.strip()))
    if getattr(args, "seed", None) is not None:
        items.append(("train.seed", str(args.seed)))
    if getattr(args, "lam", None) is not None:
        items.append(("loss.lam", repr(args.lam)))
    if getattr(args, "single_task", False):
        items.append(("network.multitask", "false"))
    if getattr(args, "data_fraction", None) is not None:
        items.append(("train.data_fraction", repr(args.data_fraction)))
    if getattr(args, "tta", False):
        items.append(("train.tta", "true"))
    if getattr(args, "ablation", None):
        inter, focal = ABLATION_VARIANTS[args.ablation]
        items.append(("network.inter_branch_connections", str(inter).lower()))
        items.append(("network.focal_view_branch", str(focal).lower()))
    return apply_overrides(cfg, items).validate()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_phantom(args, cfg: RunConfig, out) -> int:
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    pc = cfg.phantom
    if args.dims:
        pc = dataclasses.replace(pc, dims=tuple(args.dims))
    for i in range(args.count):
        v = generate(dataclasses.replace(pc, seed=pc.seed + i))
        stem = outdir / f"{args.prefix}_{i:03d}"
        write_hvol(f"{stem}_image.hvol", v.image, v.spacing, "f32")
        write_hvol(f"{stem}_labels.hvol", v.labels, v.spacing, "u8")
        write_hvol(f"{stem}_instances.hvol", v.instances, v.spacing, "u16")
        write_centerlines(f"{stem}_centerlines.txt", v.all_centerlines(),
                          comment=f"phantom seed {pc.seed + i}, {len(v.centerlines)} instances")
        print(f"{stem}: dims {v.dims}, {len(v.centerlines)} instances, "
              f"foreground {v.labels.mean():.4f}", file=out)
    return EXIT_OK


def cmd_make_proximity(args, cfg: RunConfig, out) -> int:
    if args.like:
        arr, spacing = read_hvol(args.like)
        dims = arr.shape
    else:
        dims, spacing = tuple(args.dims), None
    c = read_centerlines(args.centerlines, spacing)
    m = proximity_map(distance_transform(dims, c), cfg.proximity)
    if not args.raw:
        m = normalize_proximity(m, cfg.proximity)
    write_hvol(args.out, m, c.spacing, "f32")
    print(f"proximity map {dims} written to {args.out} (max {m.max():.6f})", file=out)
    return EXIT_OK


def _read_labeled(image, labels, centerlines) -> LabeledVolume:
    img, spacing = read_hvol(image)
    lab, _ = read_hvol(labels)
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and labels {lab.shape} differ in shape")
    inst = connected_components(lab > 0) if lab.max() <= 1 else lab.astype(np.int32)
    cls = [read_centerlines(centerlines, spacing)] if centerlines else []
    return LabeledVolume(img, (lab > 0).astype(np.uint8), inst, cls, spacing)


def cmd_train(args, cfg: RunConfig, out) -> int:
    tc = cfg.train
    updates = {}
    if args.epochs is not None:
        updates["max_epochs"] = args.epochs
    if args.iterations is not None:
        updates["max_iterations"] = args.iterations
    if args.crops_per_epoch is not None:
        updates["crops_per_epoch"] = args.crops_per_epoch
    if updates:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(tc, **updates).validate())
    needs_cl = cfg.network.multitask and cfg.loss.lam < 1.0
    if needs_cl and not args.centerlines:
        raise UsageError("train: --centerlines is required for multitask training with lambda < 1")
    vol = _read_labeled(args.image, args.labels, args.centerlines)
    val = None
    if args.val_image or args.val_labels:
        if not (args.val_image and args.val_labels):
            raise UsageError("train: --val-image and --val-labels go together")
        val = _read_labeled(args.val_image, args.val_labels, None)
    state = None
    if args.resume:
        from .train import state_from_checkpoint
        state = state_from_checkpoint(load_checkpoint(args.resume))
        state.cfg = cfg

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d}  it {row['iterations']:6d}  lr {row['lr']:.3g}  "
                  f"seg {row['l_seg']:.4f}  reg {row['l_reg']:.5f}  total {row['l_total']:.4f}  "
                  f"jac {row['train_jac']:.4f}", file=out)

    state = train(cfg, vol, val, state=state, log_path=args.log, checkpoint_path=args.out,
                  progress=progress)
    save_checkpoint(args.out, state.checkpoint())
    if args.log:
        write_log(args.log, state.log)
    print(f"checkpoint written to {args.out} after {state.epoch} epochs", file=out)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, out) -> int:
    ck = load_checkpoint(args.checkpoint)
    run_cfg, net = load_for_inference(ck)
    img, spacing = read_hvol(args.image)
    window = tuple(args.window) if args.window else run_cfg.network.input_crop
    tta = cfg.train.tta or run_cfg.train.tta
    prob, prox = predict(net, img, window, tta=tta)
    write_hvol(args.out, prob, spacing, "f32")
    if args.proximity_out:
        if prox is None:
            raise UsageError("predict: single-task checkpoints have no proximity output")
        write_hvol(args.proximity_out, prox, spacing, "f32")
    print(f"prediction {prob.shape} written to {args.out}"
          f" (tta {'on' if tta else 'off'})", file=out)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, out) -> int:
    pred, _ = read_hvol(args.pred)
    gt, _ = read_hvol(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    gt_inst = connected_components(gt > 0, args.connectivity) if gt.max() <= 1 else gt.astype(np.int64)
    res = evaluate(gt_inst, pred.astype(np.float64), args.threshold, args.connectivity, args.sweep)
    print(format_table(res), file=out)
    if args.sweep:
        print("\nthreshold  F1        AP", file=out)
        for t in SWEEP_THRESHOLDS:
            tag = int(round(t * 100))
            print(f"{t:.2f}       {res[f'f1_{tag}']:.6f}  {res[f'ap_{tag}']:.6f}", file=out)
    if args.report:
        Path(args.report).write_text(format_kv(res))
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig, out) -> int:
    net = build_network(cfg.network, cfg.train.seed)
    dims = tuple(args.dims) if args.dims else cfg.network.input_crop
    n = count_params(net)
    print(f"encoder channels            {cfg.network.encoder_channels}", file=out)
    print(f"segmentation decoder        {cfg.network.segmentation_decoder_channels}", file=out)
    if cfg.network.multitask:
        print(f"detection decoder           {cfg.network.detection_decoder_channels}", file=out)
    print(f"hvec inter-branch / focal   {cfg.network.inter_branch_connections} / "
          f"{cfg.network.focal_view_branch}", file=out)
    print(f"parameters                  {n} ({n / 1e6:.3f} M)", file=out)
    for conv in ("mac", "2mac"):
        f = count_flops(net, dims, conv)
        print(f"FLOPs at {'x'.join(map(str, dims))} ({conv:4s})  {f} ({f / 1e9:.2f} G)", file=out)
    if args.per_layer:
        print(f"\n{'layer':24s} {'kind':8s} {'params':>10s} {'MACs':>14s} {'elementwise':>12s}  shape",
              file=out)
        for row in layer_summary(net, dims):
            print(f"{row.name:24s} {row.kind:8s} {row.params:10d} {row.macs:14d} "
                  f"{row.elementwise:12d}  {row.out_shape}", file=out)
    return EXIT_OK


COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "make-proximity": cmd_make_proximity,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(err)
            return EXIT_USAGE
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=err)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=err)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, IsADirectoryError, ValueError, RuntimeError) as e:
        print(f"data error: {e}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
