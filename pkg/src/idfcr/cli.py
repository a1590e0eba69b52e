"""Command line entry point.

    idfcr make-data [--config F] [--seed N] [--out DIR] ...
    idfcr train --phase pixel|codec|trunk|control [--config F] ...
    idfcr infer --input PATH [--steps N] [--seed N] [--out DIR]
    idfcr eval --pred DIR --label DIR [--out FILE]

Failures raise idfcr error classes; main() converts them to one JSON line
on stderr and the class's stable exit code.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import load_run_config
from .errors import IdfcrError


def _add_common(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override run seed")
    p.add_argument("--data-root", default=None, help="override dataset root")
    p.add_argument("--out", default=None, help="override output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="idfcr",
        description="Two-stage cloud removal: pixel restoration then "
        "latent diffusion refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write the synthetic paired dataset")
    _add_common(p)
    p.add_argument("--n-pairs", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)

    p = sub.add_parser("train", help="run one training phase")
    _add_common(p)
    p.add_argument("--phase", required=True, choices=harness.PHASES)
    p.add_argument("--inr-k", type=int, default=None,
                   help="inner refinement updates per batch (control phase)")

    p = sub.add_parser("infer", help="restore cloudy PNGs")
    _add_common(p)
    p.add_argument("--input", required=True, help="cloudy PNG file or directory")
    p.add_argument("--steps", type=int, default=None, help="sampling steps")

    p = sub.add_parser("eval", help="PSNR/SSIM/RMSE over matched PNG dirs")
    p.add_argument("--pred", required=True, help="directory of predictions")
    p.add_argument("--label", required=True, help="directory of references")
    p.add_argument("--out", default=None, help="write the JSON report here")
    return parser


def _config_from(args):
    overrides = {
        "seed": getattr(args, "seed", None),
        "data_root": getattr(args, "data_root", None),
        "out_dir": getattr(args, "out", None),
        "n_pairs": getattr(args, "n_pairs", None),
        "image_size": getattr(args, "image_size", None),
        "inr_k": getattr(args, "inr_k", None),
    }
    return load_run_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-data":
            names = harness.cmd_make_data(_config_from(args))
            print(json.dumps({"written": len(names)}))
        elif args.command == "train":
            ck = harness.cmd_train(_config_from(args), args.phase)
            print(json.dumps({"phase": ck.phase, "steps": ck.step}))
        elif args.command == "infer":
            # --out names the image output dir; checkpoints stay in the
            # config's out_dir
            cfg = load_run_config(args.config, {
                "seed": args.seed, "data_root": args.data_root,
            })
            names = harness.cmd_infer(
                cfg, args.input, out_dir=args.out,
                seed=args.seed, steps=args.steps,
            )
            print(json.dumps({"written": len(names)}))
        elif args.command == "eval":
            report = harness.cmd_eval(args.pred, args.label, out_path=args.out)
            print(json.dumps(report.to_json_dict()["mean"], sort_keys=True))
    except IdfcrError as exc:
        line = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
