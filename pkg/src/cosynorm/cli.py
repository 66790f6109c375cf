"""Command-line surface: datagen, train, convert, eval, selftest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datagen import (DatasetConfig, build_dataset, load_world, read_features,
                      write_features)
from .decoder import SpeakerEmbedding
from .flow import GuidanceWeights, SamplerConfig
from .pipeline import (ConversionModel, TrainConfig, convert, evaluate, train,
                       write_report)


def _load_config(path, cls):
    if path is None:
        return cls()
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return cls.from_dict(data)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosynorm",
        description="Duration-controllable accent normalization at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="build the synthetic paired corpus")
    p.add_argument("--config", help="dataset config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train a conversion checkpoint")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--steps", type=int, help="override the step count")
    p.add_argument("--ablate", choices=["ctc", "speaker", "posscale"],
                   help="train an ablated variant")

    p = sub.add_parser("convert", help="convert one source feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (for speakers)")
    p.add_argument("--source", required=True, help="source feature file")
    p.add_argument("--speaker", required=True, help="speaker id")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--mode", choices=["inherit", "predict", "fixed"], default="inherit")
    p.add_argument("--fixed-len", type=int, default=None)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=32, help="Euler steps")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--mode", choices=["inherit", "predict", "fixed"], default="inherit")
    p.add_argument("--report", help="write per-utterance records here")
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-items", type=int, default=None)

    sub.add_parser("selftest", help="run the numeric self-checks")
    return parser


def _cmd_datagen(args) -> int:
    config = _load_config(args.config, DatasetConfig)
    if args.seed is not None:
        config.seed = args.seed
    entries = build_dataset(config, args.out)
    print(f"wrote {len(entries)} rows to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config, TrainConfig)
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.n_steps = args.steps
    if args.ablate is not None:
        config.ablate = args.ablate
    result = train(config, args.data, checkpoint_path=args.out)
    print(f"checkpoint {args.out}  final val cfm {result.final_val_cfm:.4f}")
    return 0


def _cmd_convert(args) -> int:
    model = ConversionModel.load(args.checkpoint)
    world = load_world(args.data)
    speaker = SpeakerEmbedding(world.speaker_by_id(args.speaker).signature, args.speaker)
    source = read_features(args.source)
    out = convert(
        model, source, speaker, mode=args.mode, fixed_len=args.fixed_len,
        weights=GuidanceWeights(args.w1, args.w2),
        sampler=SamplerConfig(args.steps, args.seed))
    write_features(args.out, out.features)
    Path(args.out + ".json").write_text(
        json.dumps(out.metadata, indent=2) + "\n", encoding="utf-8")
    print(f"{args.out}: {out.metadata['tgt_len']} frames ({args.mode})")
    return 0


def _cmd_eval(args) -> int:
    model = ConversionModel.load(args.checkpoint)
    report = evaluate(
        model, args.data, split=args.split, mode=args.mode,
        weights=GuidanceWeights(args.w1, args.w2), n_steps=args.steps,
        seed=args.seed, max_items=args.max_items)
    if args.report:
        write_report(args.report, report)
    print(report.summary())
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest

    return selftest.run()


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "datagen": _cmd_datagen,
        "train": _cmd_train,
        "convert": _cmd_convert,
        "eval": _cmd_eval,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
