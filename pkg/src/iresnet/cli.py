"""Command-line entry point: ``iresnet {gen-synth,train,eval,predict,verify}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format fault,
3 numerical fault.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .config import load_run_config, write_run_config
from .data import (StereoSample, load_all, pad_sample, read_image, read_index, unpad, write_kitti_png,
                   write_pfm)
from .errors import ConfigError, FormatError, IResNetError
from .metrics import evaluate_dataset, report_lines, write_report
from .model import build_model
from .synth import synth_generate
from .training import train_loop
from .verify import run_all

CONFIG_NAME = "config.ini"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _index_path(data):
    path = os.path.join(data, "index.txt") if os.path.isdir(data) else data
    if not os.path.isfile(path):
        raise FormatError(f"dataset index not found: {path}")
    return path


def _config_for_checkpoint(ckpt, explicit=None, overrides=()):
    path = explicit or os.path.join(os.path.dirname(os.path.abspath(ckpt)), CONFIG_NAME)
    if not os.path.isfile(path):
        raise ConfigError(f"no run config at {path}; pass --config")
    return load_run_config(path, overrides)


def _load_model(args):
    run = _config_for_checkpoint(args.checkpoint, args.config, args.set)
    model = build_model(run.model)
    load_checkpoint(args.checkpoint, model)
    return run, model


def cmd_gen_synth(args):
    index = synth_generate(args.count, args.height, args.width, args.max_disp, args.seed, args.out)
    print(f"wrote {args.count} pairs, index {index}")
    return 0


def cmd_train(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    if args.max_iters is not None:
        overrides.append(f"train.max_iters={args.max_iters}")
    run = load_run_config(args.config, overrides)
    index = read_index(_index_path(args.data), seed=run.train.seed)
    samples = load_all(index)
    model = build_model(run.model, dry_run=True)
    os.makedirs(args.out, exist_ok=True)
    write_run_config(os.path.join(args.out, CONFIG_NAME), run)
    echo = None if args.quiet else print
    result = train_loop(model, samples, run.train, args.out, resume=args.resume, echo=echo)
    print(f"final checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_eval(args):
    run, model = _load_model(args)
    iters = run.model.refine_iters if args.iters is None else args.iters
    if iters > 0 and not model.has_drs:
        raise ConfigError("checkpoint model has no refinement network; use --iters 0")
    samples = load_all(read_index(_index_path(args.data)))
    report = evaluate_dataset(model, samples, iters)
    for line in report_lines(report):
        print(line)
    if args.report:
        paths = write_report(report, args.report)
        print(f"report written to {paths[0]} and {paths[1]}")
    return 2 if report.faults and not report.per_sample else 0


def cmd_predict(args):
    run, model = _load_model(args)
    iters = run.model.refine_iters if args.iters is None else args.iters
    left, right = read_image(args.left), read_image(args.right)
    if left.shape != right.shape:
        raise FormatError(f"left {left.shape[1:]} and right {right.shape[1:]} sizes differ")
    h, w = left.shape[1:]
    dummy = np.zeros((1, 1, h, w), dtype=np.float32)
    sample = pad_sample(StereoSample(left[None], right[None], dummy, dummy, os.path.basename(args.left)))
    pyr = model(sample.left, sample.right, iters=iters)
    disp = unpad(pyr.at_iteration(iters).data[0, 0], sample.orig_size).astype(np.float32)
    write_pfm(args.out, disp)
    if args.png16:
        write_kitti_png(args.png16, disp)
    print(f"wrote {args.out} ({w}x{h})" + (f" and {args.png16}" if args.png16 else ""))
    return 0


def cmd_verify(args):
    checks = run_all(inject_fault=args.inject_fault, grad_trials=args.grad_trials, echo=print)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def _add_model_source(p):
    p.add_argument("--checkpoint", required=True, help="model checkpoint file (.irn)")
    p.add_argument("--config", help="run config (INI); default: config.ini next to the checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value; repeatable")
    p.add_argument("--iters", type=int, help="refinement iterations to run (count; default from config)")


def build_parser():
    parser = _Parser(prog="iresnet", description="Stereo disparity estimation with iterative residual refinement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic stereo dataset")
    p.add_argument("--count", type=int, required=True, help="number of stereo pairs (count)")
    p.add_argument("--height", type=int, required=True, help="image height (pixels, multiple of 64)")
    p.add_argument("--width", type=int, required=True, help="image width (pixels, multiple of 64)")
    p.add_argument("--max-disp", type=int, required=True, help="largest disparity (pixels, < width/4)")
    p.add_argument("--seed", type=int, default=0, help="random seed (integer; default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config (INI); defaults apply when omitted")
    p.add_argument("--data", required=True, help="dataset index file or directory holding index.txt")
    p.add_argument("--out", required=True, help="output directory for checkpoints, train.log and config.ini")
    p.add_argument("--resume", help="checkpoint (.irn) to resume from; its .adam file must sit beside it")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value; repeatable")
    p.add_argument("--seed", type=int, help="seed for initialisation and batch order (integer)")
    p.add_argument("--max-iters", type=int, help="total training iterations (count)")
    p.add_argument("--quiet", action="store_true", help="do not echo per-iteration log lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_model_source(p)
    p.add_argument("--data", required=True, help="dataset index file or directory holding index.txt")
    p.add_argument("--report", help="report path (key=value lines); a .tsv table is written beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the disparity of one stereo pair")
    _add_model_source(p)
    p.add_argument("--left", required=True, help="left image (8-bit PNG/PPM)")
    p.add_argument("--right", required=True, help="right image (8-bit PNG/PPM)")
    p.add_argument("--out", required=True, help="output disparity (PFM, pixels)")
    p.add_argument("--png16", help="also write a 16-bit PNG (disparity * 256, pixels)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="run gradient, oracle and architecture checks")
    p.add_argument("--inject-fault", metavar="ROW", help="widen this layer's output by one channel (fault drill)")
    p.add_argument("--grad-trials", type=int, default=10, help="random shapes per operator (count; default 10)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IResNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
