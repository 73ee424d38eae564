"""Command-line entry point: ``cais <subcommand> ...``.

Reports go to stdout as ``key = value`` lines. Exit status is 0 on
success, 1 on numerical failure (non-finite values, tolerance breach) and 2
on usage or input errors.
"""
import argparse
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .aggregate import BASELINE_METHODS, cais_upsample, full3d_upsample, upsample_baseline
from .flops import flops_analytic, flops_runtime, runtime_report
from .harness.gradcheck import TARGETS, adjoint_check, gradcheck
from .harness.losses import bad_ratio, epe
from .harness.scenes import gen_scene
from .harness.training import (TOY_AGGREGATION, ToyConfig, format_report, heldout_samples,
                               predict_disparity, train_toy)
from .tensor_io import TensorFormatError, read_pfm, read_tensor, write_pfm, write_tensor
from .validation import AggregationConfig, ConfigError, ShapeError

HELP_WIDTH = 80
EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=30)


def _dims(text, n):
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        vals = ()
    if len(vals) != n or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected %s with positive integers, got %r"
                                         % ("x".join("N" * n), text))
    return vals


def _hw(text):
    return _dims(text, 2)


def _hwd(text):
    return _dims(text, 3)


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1, got %d" % v)
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="cais", formatter_class=_formatter,
        description="Content-aware inter-scale cost aggregation: generate synthetic "
                    "stereo data, upsample cost volumes, check gradients, count FLOPs "
                    "and train the toy guidance encoder.")
    p.add_argument("--threads", type=_positive, default=None,
                   help="cap on worker threads (default: all cores); outputs do not "
                        "depend on it")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    g = sub.add_parser("gen-synthetic", formatter_class=_formatter,
                       help="write a synthetic stereo pair",
                       description="Write left.cvt1, right.cvt1, gt.pfm and mask.cvt1.")
    g.add_argument("--seed", type=int, default=0, help="scene seed")
    g.add_argument("--size", type=_hw, default=(32, 32), metavar="HxW",
                   help="image size (default 32x32)")
    g.add_argument("--dmax", type=int, default=8, help="disparity bound, exclusive")
    g.add_argument("--rects", type=int, default=3, help="number of foreground rectangles")
    g.add_argument("--out", required=True, help="output directory")

    u = sub.add_parser("upsample", formatter_class=_formatter,
                       help="upsample a coarse cost volume",
                       description="Upsample an (H, W, D) CVT1 cost volume by --scale.")
    u.add_argument("--cv", required=True, help="coarse cost volume (CVT1)")
    u.add_argument("--guidance-left", help="left guidance field (CVT1)")
    u.add_argument("--guidance-right", help="right guidance field (CVT1)")
    u.add_argument("--scale", type=int, default=2, help="scale ratio: 2, 4 or 8")
    how = u.add_mutually_exclusive_group()
    how.add_argument("--mode", choices=("decomposed", "full3d"),
                     help="learned aggregation path (default decomposed)")
    how.add_argument("--method", choices=BASELINE_METHODS, help="fixed-weight baseline")
    u.add_argument("--ws", type=int, default=3, help="spatial window")
    u.add_argument("--wd", type=int, default=3, help="disparity window")
    u.add_argument("--warp-alignment", choices=("block", "pixel"), default="block",
                   help="coarse cell attributed to a warped right pixel")
    u.add_argument("--out", required=True, help="output fine volume (CVT1)")

    c = sub.add_parser("gradcheck", formatter_class=_formatter,
                       help="compare a backward pass with finite differences")
    c.add_argument("--target", choices=TARGETS, required=True, help="operator to check")
    c.add_argument("--seed", type=int, default=0, help="instance seed")
    c.add_argument("--scale", type=int, default=2, help="scale ratio: 2, 4 or 8")

    b = sub.add_parser("bench", formatter_class=_formatter,
                       help="FLOP reports and wall times, full3d vs decomposed")
    b.add_argument("--size", type=_hwd, required=True, metavar="HxWxD",
                   help="coarse cost-volume size")
    b.add_argument("--scale", type=int, default=2, help="scale ratio: 2, 4 or 8")
    b.add_argument("--ws", type=int, default=3, help="spatial window")
    b.add_argument("--wd", type=int, default=3, help="disparity window")
    b.add_argument("--seed", type=int, default=0, help="seed of the random instance")

    t = sub.add_parser("train-toy", formatter_class=_formatter,
                       help="train the guidance encoder on synthetic scenes")
    t.add_argument("--iters", type=int, default=500, help="Adam iterations")
    t.add_argument("--seed", type=int, default=0, help="run seed")
    t.add_argument("--scale", type=int, default=2, help="scale ratio: 2, 4 or 8")
    t.add_argument("--size", type=_hw, default=(32, 32), metavar="HxW",
                   help="scene size (default 32x32)")
    t.add_argument("--dmax", type=int, default=8, help="disparity bound, exclusive")
    t.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    abl = t.add_mutually_exclusive_group()
    abl.add_argument("--ablate-stereo", action="store_true",
                     help="reuse the left guidance for the right view")
    abl.add_argument("--ablate-encoding", action="store_true",
                     help="one center-direction logit shared by all directions")
    abl.add_argument("--ablate-fusion-head", action="store_true",
                     help="unshifted fine/coarse concatenation, one output per direction")
    t.add_argument("--out", required=True, help="directory for the trained params")
    t.add_argument("--dump-pfm", metavar="DIR",
                   help="also write held-out predictions as PFM")

    e = sub.add_parser("eval", formatter_class=_formatter,
                       help="EPE and bad-pixel ratios of a disparity map")
    e.add_argument("--pred", required=True, help="predicted disparity (PFM)")
    e.add_argument("--gt", required=True, help="ground-truth disparity (PFM)")
    e.add_argument("--mask", help="evaluation mask (CVT1, nonzero = evaluated)")
    e.add_argument("--delta", type=float, action="append",
                   help="bad-pixel threshold, repeatable (default 1 and 4)")
    return p


def _emit(lines):
    sys.stdout.write("\n".join(lines) + "\n")


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("%s contains non-finite values" % name)


def cmd_gen_synthetic(args):
    sc = gen_scene(args.seed, args.size, args.rects, args.dmax)
    os.makedirs(args.out, exist_ok=True)
    write_tensor(os.path.join(args.out, "left.cvt1"), sc.left)
    write_tensor(os.path.join(args.out, "right.cvt1"), sc.right)
    write_pfm(os.path.join(args.out, "gt.pfm"), sc.gt)
    write_tensor(os.path.join(args.out, "mask.cvt1"), sc.mask.astype(np.float32))
    _emit(["seed = %d" % args.seed, "size = %dx%d" % args.size, "dmax = %d" % args.dmax,
           "visible_fraction = %.6f" % sc.mask.mean(), "out = %s" % args.out])


def cmd_upsample(args):
    cv = read_tensor(args.cv)
    if args.method:
        out = upsample_baseline(cv, args.scale, args.method)
        label = "method = %s" % args.method
    else:
        if not (args.guidance_left and args.guidance_right):
            raise UsageError("--mode needs --guidance-left and --guidance-right")
        cfg = AggregationConfig(s=args.scale, w_s=args.ws, w_d=args.wd,
                                warp_alignment=args.warp_alignment)
        g_l, g_r = read_tensor(args.guidance_left), read_tensor(args.guidance_right)
        mode = args.mode or "decomposed"
        fn = cais_upsample if mode == "decomposed" else full3d_upsample
        out = fn(cv, g_l, g_r, cfg)
        label = "mode = %s" % mode
    _check_finite("upsampled volume", out)
    write_tensor(args.out, out)
    _emit([label, "scale = %d" % args.scale, "in_shape = %s" % "x".join(map(str, cv.shape)),
           "out_shape = %s" % "x".join(map(str, out.shape)), "out = %s" % args.out])


def cmd_gradcheck(args):
    res = gradcheck(args.target, args.seed, args.scale)
    lines = [res.to_text()]
    ok = res.passed
    if args.target == "cais":
        gap = adjoint_check(args.seed, args.scale)
        lines += ["adjoint_rel_gap = %.3e" % gap]
        ok = ok and gap < 1e-5
    _emit(lines)
    return EXIT_OK if ok else EXIT_NUMERIC


def _random_guidance(rng, k, shape):
    g = rng.uniform(0.05, 1.0, size=(k,) + shape).astype(np.float32)
    return g / g.sum(axis=0, keepdims=True)


def cmd_bench(args):
    H, W, D = args.size
    cfg = AggregationConfig(s=args.scale, w_s=args.ws, w_d=args.wd)
    rng = np.random.default_rng(args.seed)
    cv = rng.uniform(0, 4, size=(H, W, D)).astype(np.float32)
    fine = (H * cfg.s, W * cfg.s)
    g_l = _random_guidance(rng, cfg.n_dirs, fine)
    g_r = _random_guidance(rng, cfg.n_dirs, fine)
    lines = []
    totals = {}
    agree = True
    for mode, fn in (("full3d", full3d_upsample), ("decomposed", cais_upsample)):
        t0 = time.perf_counter()
        _, stages = flops_runtime(fn, cv, g_l, g_r, cfg)
        wall = time.perf_counter() - t0
        analytic = flops_analytic((H, W, D), cfg, mode)
        runtime = runtime_report(mode, (H, W, D), cfg, stages)
        same = runtime.stages == analytic.stages
        agree = agree and same
        totals[mode] = analytic.aggregation_flops
        lines.append(analytic.to_text(prefix="%s." % mode))
        lines.append("%s.runtime_matches_analytic = %s" % (mode, same))
        lines.append("%s.wall_seconds = %.6f" % (mode, wall))
    lines.append("flop_ratio_full3d_over_decomposed = %.6f"
                 % (totals["full3d"] / totals["decomposed"]))
    _emit(lines)
    return EXIT_OK if agree else EXIT_NUMERIC


def cmd_train_toy(args):
    ablation = ("left_only" if args.ablate_stereo else "no_encoding" if args.ablate_encoding
                else "fusion_head" if args.ablate_fusion_head else "none")
    cfg = ToyConfig(seed=args.seed, iterations=args.iters, s=args.scale, size=args.size,
                    d_max=args.dmax, ablation=ablation,
                    agg=replace(TOY_AGGREGATION, s=args.scale))
    if args.lr is not None:
        cfg.lr = args.lr
    params, report = train_toy(cfg)
    os.makedirs(args.out, exist_ok=True)
    params.save(args.out)
    lines = [format_report(report), "out = %s" % args.out]
    if args.dump_pfm:
        os.makedirs(args.dump_pfm, exist_ok=True)
        for i, smp in enumerate(heldout_samples(cfg)):
            write_pfm(os.path.join(args.dump_pfm, "heldout_%02d_pred.pfm" % i),
                      predict_disparity(params, smp, cfg.agg, ablation))
            write_pfm(os.path.join(args.dump_pfm, "heldout_%02d_gt.pfm" % i), smp.gt)
        lines.append("pfm_dir = %s" % args.dump_pfm)
    _emit(lines)


def cmd_eval(args):
    pred, gt = read_pfm(args.pred), read_pfm(args.gt)
    mask = None
    if args.mask:
        mask = read_tensor(args.mask) != 0
    _check_finite("prediction", pred)
    deltas = args.delta or [1.0, 4.0]
    lines = ["epe = %.6f" % epe(pred, gt, mask)]
    lines += ["bad_%g = %.6f" % (d, bad_ratio(pred, gt, mask, d)) for d in deltas]
    _emit(lines)


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "upsample": cmd_upsample,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench, "train-toy": cmd_train_toy,
            "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    limit = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        with limit:
            code = COMMANDS[args.command](args)
    except FloatingPointError as exc:
        print("cais: numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ShapeError, TensorFormatError, ValueError,
            OSError) as exc:
        print("cais %s: error: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
