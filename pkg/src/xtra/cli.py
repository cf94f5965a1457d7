"""``xtra`` command line: mask, cost, dataset, pretrain, probe, generate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from .cost import CostInputs, estimate_cost, parse_count
from .data import load_xid, save_xid, synth_dataset, to_float
from .generation import reconstruct, render_grid
from .masking import BlockLayout, build_block_causal_mask, parse_grid
from .model import ModelConfig, XTRAModel
from .probes import ATTENTIVE, LINEAR, PAPER_LR_GRID, ProbeConfig, extract_features, run_probe
from .trainer import TrainConfig, check_against_config, load_checkpoint, pretrain, read_run_config

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path, overrides=()) -> tuple[ModelConfig, TrainConfig]:
    """Flat TOML mirroring ModelConfig / TrainConfig field names, plus ``key=value`` overrides."""
    doc = tomli.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        doc[key.strip()] = _parse_value(value.strip())
    if "image_size" not in doc and "image_height" not in doc:
        raise UsageError("config needs image_size (or image_height/image_width)")
    if "total_epochs" not in doc and "epochs" in doc:
        doc["total_epochs"] = doc.pop("epochs")
    try:
        return ModelConfig.from_dict(doc), TrainConfig.from_dict(doc)
    except KeyError as exc:
        raise UsageError(f"config is missing {exc.args[0]!r}") from None


def cmd_mask(args) -> int:
    rows, cols = parse_grid(args.grid)
    layout = BlockLayout(rows, cols, channels=1, patch=1, block=args.block,
                         pattern=args.pattern, seed=args.seed)
    mask = build_block_causal_mask(layout)
    text = mask.to_ascii() if args.format == "ascii" else mask.to_pbm()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_cost(args) -> int:
    inputs = CostInputs(parse_count(args.params), parse_count(args.samples), parse_count(args.epochs),
                        parse_count(args.views), parse_count(args.tokens))
    print(f"{round(estimate_cost(inputs), 2):g}")
    return 0


def cmd_dataset(args) -> int:
    ds = synth_dataset(args.classes, args.count, args.size, args.seed)
    save_xid(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg = load_config(args.config, args.set)
    data = load_xid(args.data)
    log = pretrain(model_cfg, train_cfg, data, checkpoint_dir=args.out, resume=args.resume)
    summary = {"steps": log.steps, "epoch_losses": log.epoch_losses}
    (Path(args.out) / "log.json").write_text(json.dumps(summary, indent=2))
    for i, loss in enumerate(log.epoch_losses):
        print(f"epoch {i}: loss {loss:.4f}")
    return 0


def _load_trunk(args):
    model_cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text())["model"]) \
        if getattr(args, "config", None) else read_run_config(args.checkpoint)
    params = load_checkpoint(args.checkpoint).params()
    check_against_config(params, model_cfg)
    return XTRAModel(model_cfg), params


def cmd_probe(args) -> int:
    model, params = _load_trunk(args)
    data = load_xid(args.data)
    if args.test_data:
        train, test = data, load_xid(args.test_data)
    else:
        order = np.random.default_rng(args.seed).permutation(len(data))
        cut = int(round(0.8 * len(data)))
        train, test = data.subset(order[:cut]), data.subset(order[cut:])
    grid = tuple(args.lr_grid) if args.lr_grid else PAPER_LR_GRID
    cfg = ProbeConfig(mode=args.mode, lr_grid=grid, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed)
    f_train = extract_features(params, model, to_float(train.images))
    f_test = extract_features(params, model, to_float(test.images))
    report = run_probe(f_train, train.labels, f_test, test.labels, cfg, model.config.enc_heads)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    print(f"{args.mode} probe: best lr {report.best_lr:g}, top-1 {report.accuracy:.4f}")
    return 0


def cmd_generate(args) -> int:
    model, params = _load_trunk(args)
    data = load_xid(args.data)
    originals = to_float(data.images[:args.count])
    render_grid(originals, reconstruct(params, model, originals), args.out)
    print(f"wrote {len(originals)} reconstructions to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xtra", description="Block-causal auto-regressive image pre-training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("mask", help="dump a block-causal attention mask")
    p.add_argument("--grid", required=True, help="token grid as RxC")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--pattern", choices=["raster", "random"], default="raster")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["ascii", "pbm"], default="ascii")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("cost", help="estimate pre-training cost in units of 1e22")
    for name in ("params", "samples", "epochs", "views", "tokens"):
        p.add_argument(f"--{name}", required=True)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="action", parser_class=_Parser)
    s = dsub.add_parser("synth", help="write a synthetic XID dataset")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    p = sub.add_parser("pretrain", help="pre-train on an XID dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="probe a frozen trunk")
    p.add_argument("--mode", choices=[LINEAR, ATTENTIVE], required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config.json (default: next to the checkpoint)")
    p.add_argument("--lr-grid", type=float, nargs="+")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("generate", help="render teacher-forced reconstructions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config.json (default: next to the checkpoint)")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError(f"xtra {args.command}: missing sub-command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xtra: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError) as exc:
        print(f"xtra: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
