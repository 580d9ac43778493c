"""Command-line surface: sample, reconstruct, train, eval, baseline,
gradcheck and ablate subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baseline as bl
from . import gradcheck
from . import model as md
from . import sampling
from . import training
from .metrics import ReconstructionReport, file_sha256, psnr, ssim
from .pgm import read_image, write_image


def _cmd_sample(args):
    image = read_image(args.image)
    kind = "learned-init" if args.matrix == "learned" else "orthogonalized-random"
    op = sampling.make_operator(args.block, args.rate, kind, args.seed)
    m = sampling.measure_image(op, image)
    sampling.write_measurements(args.out, m)
    print(f"wrote {args.out}: {m.blocks_y}x{m.blocks_x} blocks, {m.n_meas} measurements/block")
    return 0


def _cmd_reconstruct(args):
    cfg, params, op = md.load_checkpoint(args.checkpoint)
    m = sampling.read_measurements(args.measurements)
    if m.block_size != cfg.block_size or m.n_meas != op.n_meas:
        raise ValueError(
            f"measurement geometry (B={m.block_size}, n_B={m.n_meas}) does not match "
            f"checkpoint (B={cfg.block_size}, n_B={op.n_meas})"
        )
    with ad.no_grad():
        xs, _, _ = md.forward(params, cfg, op, m, training=False)
    recon = sampling.crop_to(xs[-1], (m.orig_h, m.orig_w))[0, 0]
    write_image(args.out, recon)
    print(f"wrote {args.out} ({m.orig_h}x{m.orig_w})")
    return 0


def _cmd_train(args):
    cfg = training.parse_train_config(args.config)
    result = training.train(cfg, args.out)
    print(f"trained {len(result.losses)} steps; checkpoint {result.checkpoint}; curve {result.curve}")
    return 0


def _cmd_eval(args):
    cfg, params, op = md.load_checkpoint(args.checkpoint)
    paths = sorted(
        p for p in Path(args.dataset).iterdir() if p.suffix.lower() in (".pgm", ".ppm")
    )
    if not paths:
        raise ValueError(f"no images found in {args.dataset!r}")
    report = ReconstructionReport(
        checkpoint_hash=file_sha256(args.checkpoint),
        config_echo=json.dumps(
            {
                "phases": cfg.phases,
                "block_size": cfg.block_size,
                "rate": cfg.rate,
                "channels": cfg.channels,
                "feb_blocks": cfg.feb_blocks,
                "patch_size": cfg.patch_size,
                "ssg": cfg.ssg_variant,
                "nl": cfg.nl_kind,
                "nl_subsample": cfg.nl_subsample,
            }
        ),
    )
    offset_lo, offset_hi = np.inf, -np.inf
    for p in paths:
        image = read_image(p)
        m = sampling.measure_image(op, image)
        with ad.no_grad():
            xs, _, diag = md.forward(params, cfg, op, m, training=False, collect_diag=True)
        recon = sampling.crop_to(xs[-1], (m.orig_h, m.orig_w))[0, 0]
        for lo, hi in diag.get("offset_ranges") or []:
            offset_lo, offset_hi = min(offset_lo, lo), max(offset_hi, hi)
        report.add(p.name, cfg.rate, cfg.ssg_variant, cfg.nl_kind, psnr(recon, image), ssim(recon, image))
    if np.isfinite(offset_lo):
        report.offset_range = (offset_lo, offset_hi)
    report.write_csv(args.out)
    print(f"wrote {args.out}: mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f}")
    return 0


def _cmd_baseline(args):
    image = read_image(args.image)
    op = sampling.make_operator(args.block, args.rate, "orthogonalized-random", args.seed)
    m = sampling.measure_image(op, image)
    rho = args.rho if args.rho is not None else 0.9 / bl.operator_norm_sq(op)
    cfg = bl.IstaConfig(rho=rho, lam=args.lam, iterations=args.iters, transform_block=args.block)
    recon, trace = bl.ista_reconstruct(op, m, cfg)
    write_image(args.out, recon)
    if args.trace:
        bl.write_trace(args.trace, trace)
    print(f"wrote {args.out}; PSNR {psnr(recon, image):.2f} dB; final fidelity {trace[-1]:.3e}")
    return 0


def _cmd_gradcheck(args):
    seeds = args.seeds if args.seeds else (10 if args.full else 2)
    samples = args.samples if args.samples else (100 if args.full else 40)
    ok = gradcheck.run_suite(list(range(seeds)), samples=samples, include_model=True)
    print("gradcheck:", "all checks passed" if ok else "FAILURES detected")
    return 0 if ok else 1


def _cmd_ablate(args):
    rng = np.random.default_rng(args.seed)
    patches = [training.augment_patch(read_image(p), args.block, rng)
               for p in sorted(Path(args.data).iterdir())
               if p.suffix.lower() in (".pgm", ".ppm")][: args.patches]
    if not patches:
        raise ValueError(f"no usable images in {args.data!r}")
    rows = []
    for ssg in args.ssg.split(","):
        for nl in args.nl.split(","):
            cfg = md.desk_config(
                ssg_variant=ssg, nl_kind=nl, rate=args.rate, nl_subsample=args.nl_subsample
            )
            params, op, losses = training.overfit(
                patches, cfg, steps=args.steps, lr=args.lr, seed=args.seed
            )
            scores = []
            with ad.no_grad():
                for patch in patches:
                    m = sampling.measure_image(op, patch)
                    xs, _, _ = md.forward(params, cfg, op, m, training=False)
                    scores.append(psnr(xs[-1].data[0, 0], patch))
            rows.append((ssg, nl, losses[0], losses[-1], float(np.mean(scores))))
            print(f"ssg={ssg} nl={nl}: loss {losses[0]:.4g} -> {losses[-1]:.4g}, "
                  f"train PSNR {rows[-1][4]:.2f} dB")
    with open(args.out, "w") as fh:
        fh.write("ssg,nl,initial_loss,final_loss,train_psnr_db\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]},{row[2]:.6g},{row[3]:.6g},{row[4]:.4f}\n")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csunfold",
        description="Block compressed sensing with an unfolded reconstruction network",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="measure an image into a .dcsm file")
    p.add_argument("--image", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--block", type=int, default=33)
    p.add_argument("--matrix", choices=("learned", "random"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("reconstruct", help="reconstruct measurements with a checkpoint")
    p.add_argument("--measurements", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="train_out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a directory of images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline", help="classical iterative reconstruction")
    p.add_argument("--image", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--block", type=int, default=33)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--full", action="store_true", help="10 seeds x 100 coordinates")
    p.add_argument("--seeds", type=int, default=0, help="override seed count")
    p.add_argument("--samples", type=int, default=0, help="override sampled coordinates per check")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate step-size and non-local variants")
    p.add_argument("--ssg", default="full,block,global,fixed")
    p.add_argument("--nl", default="dinlm,nlm,none")
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block", type=int, default=33)
    p.add_argument("--patches", type=int, default=4)
    p.add_argument("--nl-subsample", type=int, default=2, dest="nl_subsample")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
