"""Command-line entry point: ``hint <command> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error (unreadable
image, checkpoint or dataset), 3 numeric failure (non-finite training or a
failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, HintError, NumericError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(record: dict) -> None:
    print(json.dumps(record, default=_plain), flush=True)


def _plain(obj):
    if isinstance(obj, (np.generic,)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


# -- commands --------------------------------------------------------------------------
def cmd_train(args) -> int:
    from .plotting import loss_curve
    from .train import TrainConfig, train

    cfg = TrainConfig.load(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
        cfg.validate()
    every = max(1, cfg.steps // 20)
    progress = (lambda r: _emit(r) if r["step"] % every == 0 else None) if args.verbose else None
    result = train(cfg, args.out, progress=progress)
    figure = loss_curve(result.log.records, Path(args.out) / "loss.png")
    final = result.log.evals()[-1]
    _emit({"event": "done", "checkpoint": result.checkpoint, "runlog": Path(args.out) / "runlog.jsonl",
           "figure": figure, "psnr": final["psnr"], "ssim": final["ssim"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv

    from .checkpoint import load_checkpoint
    from .data import load_pair_dir
    from .metrics import average, measure
    from .train import restore

    model = load_checkpoint(args.ckpt)
    rows, reports = [], []
    for name, clean, degraded in load_pair_dir(args.data, with_names=True):
        reports.append(measure(np.clip(restore(model, degraded), 0.0, 1.0), clean))
        rows.append({"image": name, **reports[-1].as_dict()})
        _emit({"event": "image", **rows[-1]})
    mean = average(reports)
    summary = {"event": "mean", "images": len(rows), **mean.as_dict()}
    _emit(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "eval.jsonl").open("w", encoding="utf-8") as fh:
            for row in rows + [summary]:
                fh.write(json.dumps(row) + "\n")
        with (out / "eval.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["image", "psnr", "ssim"])
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import infer

    out = infer(args.ckpt, args.input, args.output)
    _emit({"event": "done", "output": args.output, "shape": list(out.shape)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .model import build_model
    from .train import TrainConfig, grad_check, perturb_parameters

    cfg = TrainConfig.load(args.config)
    model = build_model(cfg.model, cfg.seed, dtype=np.float64)
    perturb_parameters(model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    image = rng.random((cfg.model.in_channels, args.size, args.size))
    target = rng.random(image.shape)
    report = grad_check(model, image, target, n_samples=args.samples, seed=cfg.seed)
    _emit({"event": "gradcheck", **report.summary()})
    if args.out:
        from .plotting import gradcheck_scatter

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "gradcheck.jsonl").open("w", encoding="utf-8") as fh:
            for s in report.samples:
                fh.write(json.dumps({"name": s.name, "index": list(s.index), "analytic": s.analytic,
                                     "numeric": s.numeric, "rel_error": s.rel_error}) + "\n")
        gradcheck_scatter(report.samples, out / "gradcheck.png", report.tolerance)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .ablation import direction_check, run_ablation, summarize, write_results
    from .train import TrainConfig

    cfg = TrainConfig.load(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    runs = run_ablation(cfg, args.variants, args.seeds, Path(args.out) / "runs", progress=_emit)
    paths = write_results(runs, args.out)
    _emit({"event": "summary", **summarize(runs)})
    if "full" in args.variants and "hmha_only" in args.variants:
        _emit(direction_check(runs))
    _emit({"event": "done", **paths})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import make_pairs, save_pair_dir
    from .train import TrainConfig

    cfg = TrainConfig.load(args.config)
    pairs = make_pairs(args.count, args.size or cfg.image_size, cfg.data, args.seed)
    save_pair_dir(pairs, args.out, args.suffix)
    _emit({"event": "done", "pairs": len(pairs), "root": args.out})
    return EXIT_OK


def cmd_summary(args) -> int:
    from .model import ModelConfig
    from .train import TrainConfig, model_summary

    cfg = TrainConfig.load(args.config).model if args.config else ModelConfig()
    _emit(model_summary(cfg, args.size, args.size))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    from .ablation import DEFAULT_VARIANTS, VARIANTS

    parser = _Parser(prog="hint", description="HINT image restoration: train, evaluate, verify.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/train", help="directory for runlog, checkpoint and figure")
    p.add_argument("--steps", type=int, help="override the config's step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a clean/degraded directory pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory holding clean/ and degraded/")
    p.add_argument("--out", help="write eval.jsonl and eval.csv here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences (64-bit)")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--size", type=int, default=8, help="input height and width")
    p.add_argument("--out", help="write gradcheck.jsonl and gradcheck.png here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train component variants and compare final losses")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--variants", nargs="+", default=list(DEFAULT_VARIANTS), choices=sorted(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int, help="override the config's step count")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write synthetic clean/degraded pairs to a directory")
    p.add_argument("--config", required=True, help="degradations are taken from its data list")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suffix", choices=[".png", ".ppm"], default=".png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("summary", help="parameter and MAC counts for a model config")
    p.add_argument("--config", help="training config; default is the full-size model")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_summary)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    # parse, format, input, version and I/O failures, plus anything else from the library
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (HintError, OSError, ValueError) as exc:
        print(f"hint: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
