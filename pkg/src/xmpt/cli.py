"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import tensor as T
from .pipeline import (
    Checkpoint,
    CheckpointError,
    ConfigError,
    NonFiniteGradient,
    linear_probe,
    net_from_checkpoint,
    train_stage1,
    train_stage2,
)
from .scenegen import SceneConfig, SceneError, SceneIOError, generate_dataset, load_scene

log = logging.getLogger("xmpt")

CORRUPT_ENV = "XMPT_CORRUPT_OP"


def _positive_int(s: str) -> int:
    try:
        n = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _size(s: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}") from None
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise argparse.ArgumentTypeError(f"extents must be positive multiples of 8, got {s!r}")
    return h, w


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config, args.set or ())
    for line in cfg.resolved():
        print(f"config {line}", file=sys.stderr)
    return cfg


def cmd_gen_data(args) -> int:
    h, w = args.size
    seed = args.seed if args.seed is not None else int(os.environ.get("XMPT_SEED", 0))
    manifest = generate_dataset(args.out, args.scenes, seed, SceneConfig(height=h, width=w))
    print(f"wrote {args.scenes} scenes, manifest {manifest}")
    return 0


def cmd_pretrain2d(args) -> int:
    cfg = _load_config(args).train_config("stage1")
    ckpt = train_stage1(cfg, sink=print if args.verbose else None)
    print(f"checkpoint {cfg.checkpoint} step={ckpt.meta['step']}")
    return 0


def cmd_pretrain3d(args) -> int:
    cfg = _load_config(args).train_config("stage2", teacher=args.teacher)
    teacher = Checkpoint.load(args.teacher)
    ckpt = train_stage2(cfg, teacher, sink=print if args.verbose else None)
    print(f"checkpoint {cfg.checkpoint} step={ckpt.meta['step']}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args).train_config("probe", backbone=args.backbone)
    backbone = Checkpoint.load(args.backbone) if args.backbone else None
    res = linear_probe(cfg, backbone)
    iou = " ".join("nan" if x != x else f"{x:.4f}" for x in res.per_class_iou)
    print(f"miou={res.miou:.6f} per_class_iou={iou} config_hash={res.config_hash}")
    return 0


def cmd_visualize(args) -> int:
    from .visualize import heatmaps, write_heatmaps

    nets = {}
    for path in args.checkpoint:
        net = net_from_checkpoint(Checkpoint.load(path))
        if net.kind in nets:
            raise ConfigError(f"two {net.kind} checkpoints given")
        nets[net.kind] = net
    scene = load_scene(args.scene)
    maps = heatmaps(scene, nets.get("image2d"), nets.get("point3d"))
    for path in write_heatmaps(maps, args.out):
        print(f"wrote {path}")
    if maps.color_distance is not None:
        print(f"color_distance={maps.color_distance:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from contextlib import nullcontext

    from .gradcheck import run_suite

    corrupt = os.environ.get(CORRUPT_ENV)
    failing = []
    with T.corrupt_gradient(corrupt) if corrupt else nullcontext():
        for name, err in run_suite(args.seed):
            print(f"check={name} max_rel_err={err:.3e}")
            if not err < args.tol:
                failing.append(name)
    if failing:
        print(f"FAILED: {' '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmpt", description="Image-to-point-cloud contrastive pre-training")
    p.add_argument("-v", "--verbose", action="store_true", help="echo training log lines")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic RGB-D scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW, multiples of 8")
    g.set_defaults(func=cmd_gen_data)

    def config_args(sp):
        sp.add_argument("--config", help="section.key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    s1 = sub.add_parser("pretrain2d", help="stage 1: pixel-level contrastive training")
    config_args(s1)
    s1.set_defaults(func=cmd_pretrain2d)

    s2 = sub.add_parser("pretrain3d", help="stage 2: distil frozen 2-D features into the 3-D net")
    config_args(s2)
    s2.add_argument("--teacher", required=True, help="stage-1 checkpoint")
    s2.set_defaults(func=cmd_pretrain3d)

    pr = sub.add_parser("probe", help="linear-probe segmentation mIoU")
    config_args(pr)
    pr.add_argument("--backbone", default=None, help="stage-2 checkpoint; omit for a random backbone")
    pr.set_defaults(func=cmd_probe)

    vz = sub.add_parser("visualize", help="PCA feature heatmaps")
    vz.add_argument("--checkpoint", action="append", required=True, help="2-D and/or 3-D checkpoint")
    vz.add_argument("--scene", required=True, help="scene directory")
    vz.add_argument("--out", required=True, help="output prefix")
    vz.set_defaults(func=cmd_visualize)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"xmpt: config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteGradient as e:
        print(f"xmpt: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, SceneIOError, SceneError, OSError, ValueError, RuntimeError) as e:
        print(f"xmpt: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
