"""Command-line interface: train, eval, flops, rf, lower, verify."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import analysis, verify
from .backend import backend_name
from .config import network_config, parse_config, train_config
from .data import data_dir_from_env, load_cifar10
from .errors import ConfigError, DataError
from .masking import MaskConfig
from .network import build_network, load_checkpoint
from .ops import CombConvLayer
from .training import evaluate, train


def _add_common(p):
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="output path or directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="combnet",
        description="Comb-convolution networks: training, verification, and analysis")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a network and write history + checkpoints")
    _add_common(p)
    p.add_argument("--data", default=None, help="CIFAR-10 binary batch directory "
                   "(defaults to COMBNET_DATA)")
    p.add_argument("--full", action="store_true",
                   help="full protocol: all images, 300 epochs")

    p = sub.add_parser("eval", help="load a checkpoint and print test accuracy")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--full", action="store_true")

    p = sub.add_parser("flops", help="MAC accounting for a config, both modes")
    _add_common(p)
    p.add_argument("--count-adds", action="store_true",
                   help="count multiply and add separately (2 units per MAC)")

    p = sub.add_parser("rf", help="receptive field of one output unit")
    _add_common(p)
    p.add_argument("--pos", required=True, metavar="LAYER,ROW,COL",
                   help="conv/pool layer index and output position")
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("lower", help="write a layer's sparse matrix-vector form")
    _add_common(p)
    p.add_argument("--in-shape", default="1,4,4", metavar="C,H,W")
    p.add_argument("--c-out", type=int, default=1)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--mode", choices=("comb", "standard"), default="comb")
    p.add_argument("--interleave", action="store_true")
    p.add_argument("--phase", type=int, choices=(0, 1), default=0)

    p = sub.add_parser("verify", help="run the hermetic oracle suite")
    _add_common(p)
    return parser


def _load_data(args, cfg):
    data_dir = data_dir_from_env(args.data)
    n_train = cfg["train_subset"] or None
    n_test = cfg["test_subset"] or None
    return load_cifar10(data_dir, n_train, n_test)


def cmd_train(args):
    cfg = parse_config(args.config, args.set, full=args.full)
    if args.seed is not None:
        cfg["seed"] = args.seed
    net_cfg = network_config(cfg)
    tcfg = train_config(cfg)
    data = _load_data(args, cfg)
    net = build_network(net_cfg, seed=cfg["seed"])
    out_dir = args.out or "runs/latest"
    print(f"backend: {backend_name()}  arch: {net_cfg.arch}-{net_cfg.depth} "
          f"width {net_cfg.width} mode {net_cfg.mode}")
    history = train(net, data, tcfg, out_dir=out_dir, use_augment=cfg["augment"],
                    log=print)
    print(f"final test accuracy: {history[-1][2]:.4f}  (outputs in {out_dir})")
    return 0


def cmd_eval(args):
    cfg = parse_config(args.config, args.set, full=args.full)
    net_cfg = network_config(cfg)
    data = _load_data(args, cfg)
    net = build_network(net_cfg, seed=cfg["seed"])
    load_checkpoint(net, args.checkpoint)
    acc = evaluate(net, data[1])
    print(f"test accuracy: {acc:.4f}")
    return 0


def cmd_flops(args):
    cfg = parse_config(args.config, args.set)
    scale = 2 if args.count_adds else 1
    # the comb build's report carries standard and comb counts per layer,
    # which is exactly the two-column pairing the table needs
    net = build_network(network_config(dict(cfg, mode="comb")), seed=cfg["seed"])
    report = net.flop_report()
    csv = report.to_csv(scale=scale)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv)
    print(csv, end="")
    unit = "MFLOPs" if args.count_adds else "MMACs"
    print(f"standard total: {report.total_standard * scale / 1e6:.2f} {unit}")
    print(f"comb total:     {report.total_comb * scale / 1e6:.2f} {unit}")
    return 0


def cmd_rf(args):
    cfg = parse_config(args.config, args.set)
    net = build_network(network_config(cfg), seed=cfg["seed"])
    layers = net.rf_layers()
    try:
        li, p, q = (int(part) for part in args.pos.split(","))
    except ValueError:
        raise ConfigError(f"--pos expects LAYER,ROW,COL, got {args.pos!r}") from None
    in_hw = net.config.input_shape[1:]
    rf = analysis.receptive_field(layers, in_hw, (li, p, q), channel=args.channel)
    coords = sorted(rf.input_coords)
    r0, c0, r1, c1 = rf.bounding_box()
    print(f"unit: layer {li} position ({p}, {q}) channel {args.channel}")
    print(f"dependency set ({len(coords)} input pixels): {coords}")
    print(f"bounding box: rows [{r0}, {r1}], cols [{c0}, {c1}] "
          f"({r1 - r0 + 1}x{c1 - c0 + 1})")
    return 0


def cmd_lower(args):
    try:
        c, h, w = (int(part) for part in args.in_shape.split(","))
    except ValueError:
        raise ConfigError(f"--in-shape expects C,H,W, got {args.in_shape!r}") from None
    rng = np.random.default_rng(args.seed or 0)
    k = args.kernel_size
    layer = CombConvLayer(
        weights=rng.standard_normal((args.c_out, c, k, k)),
        stride=args.stride, pad=args.pad, mode=args.mode,
        mask_cfg=MaskConfig(interleave=args.interleave, layer_phase=args.phase,
                            stride=args.stride, pad=args.pad, kernel_size=k))
    sm = analysis.lower_to_sparse(layer, (c, h, w))
    text = sm.to_text()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {sm.rows}x{sm.cols} matrix, {len(sm.entries)} entries, to {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_verify(args):
    failures = verify.run_all(seed=args.seed or 0)
    if failures:
        print(f"verification failed: {failures[0]}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "rf": cmd_rf,
    "lower": cmd_lower,
    "verify": cmd_verify,
}


def dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
