"""Command line front end: synth, decouple, train, eval, bench, export-attn.

Exit codes: 0 on success, 1 for usage errors and bad inputs (missing files,
malformed configs, invalid flags), 2 for internal failures.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from . import bench as benchmod
from .attention import write_attention_csv
from .checkpoint import Checkpoint, CheckpointError
from .datapipe import (
    DEFAULT_FAST_STRIDE,
    DEFAULT_SLOW_STRIDE,
    STREAMS,
    SkeletonFormatError,
    load_manifest,
    load_skeleton_file,
    save_skeleton_file,
    stream_sequence,
    synth_generate,
)
from .network import ConfigError, DSTANet, default_config, load_config
from .trainer import (
    ScoreTable,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    format_log,
    fuse_scores,
    net_from_checkpoint,
    prepare_sample,
    train,
)

SEED_ENV = "DSTA_SEED"
# frames drawn before the random crop, relative to the crop length
SAMPLE_TO_CROP = 150 / 128


class UsageError(Exception):
    """Bad invocation or bad user-supplied input; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"must be a finite non-negative number, got {text}")
    return value


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}: expected an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dstanet", description="Skeleton action recognition with joint and frame attention.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic hand-gesture dataset")
    p.add_argument("--classes", type=_positive, required=True)
    p.add_argument("--per-class", type=_positive, required=True)
    p.add_argument("--joints", type=_positive, default=10)
    p.add_argument("--frames", type=_positive, default=40)
    p.add_argument("--noise", type=_nonneg_float, default=0.05)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decouple", help="extract one stream of a skeleton file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--stream", choices=STREAMS, required=True)
    p.add_argument("--fast-stride", type=_positive, default=DEFAULT_FAST_STRIDE)
    p.add_argument("--slow-stride", type=_positive, default=DEFAULT_SLOW_STRIDE)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one stream model")
    p.add_argument("--config", help="JSON network config, optionally with a 'train' section")
    p.add_argument("--data", required=True, help="manifest.csv or its directory")
    p.add_argument("--stream", choices=STREAMS)
    p.add_argument("--ckpt", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="epoch log path (default: <ckpt>.log.csv)")
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--lr", type=_nonneg_float)
    p.add_argument("--sample-frames", type=_positive)
    p.add_argument("--crop-frames", type=_positive)
    p.add_argument("--fast-stride", type=_positive)
    p.add_argument("--slow-stride", type=_positive)

    p = sub.add_parser("eval", help="evaluate a checkpoint or fuse score tables")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--stream", choices=STREAMS)
    p.add_argument("--fuse", help="comma-separated score tables to average")
    p.add_argument("--out", help="score table CSV to write")

    p = sub.add_parser("bench", help="count and time score-map computation")
    p.add_argument("--strategy", choices=benchmod.BENCH_STRATEGIES, required=True)
    p.add_argument("--N", type=_positive, required=True)
    p.add_argument("--T", type=_positive, required=True)
    p.add_argument("--C", type=_positive, required=True)
    p.add_argument("--repeat", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="also write the CSV here")

    p = sub.add_parser("export-attn", help="dump attention maps for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = synth_generate(out, args.classes, args.per_class, args.joints, args.frames,
                                  args.noise, _seed(args))
    except OSError as exc:
        raise UsageError(f"--out: cannot write {out}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    n_train = len(manifest.split("train"))
    n_test = len(manifest.split("test"))
    print(f"wrote {len(manifest.entries)} samples ({n_train} train, {n_test} test) "
          f"in {len(manifest.classes)} classes to {out}")
    return 0


def cmd_decouple(args) -> int:
    seq = load_skeleton_file(args.inp)
    if args.stream in ("ft", "sl"):
        stride = args.fast_stride if args.stream == "ft" else args.slow_stride
        if stride >= seq.num_frames:
            raise UsageError(f"--{'fast' if args.stream == 'ft' else 'slow'}-stride: {stride} "
                             f"is not below the {seq.num_frames} frames of {args.inp}")
    out = stream_sequence(seq, args.stream, args.fast_stride, args.slow_stride)
    save_skeleton_file(out, args.out)
    print(f"wrote stream {args.stream} ({out.num_frames} frames, {out.num_joints} joints) "
          f"to {args.out}")
    return 0


def _train_config(args, section: dict, num_frames) -> TrainConfig:
    data = dict(section)
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
             "sample_frames": args.sample_frames, "crop_frames": args.crop_frames,
             "fast_stride": args.fast_stride, "slow_stride": args.slow_stride,
             "stream": args.stream}
    data.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        data["seed"] = args.seed
    elif "seed" not in section:
        data["seed"] = _seed(args)
    data.setdefault("crop_frames", num_frames)
    data.setdefault("sample_frames", max(data["crop_frames"],
                                         math.ceil(data["crop_frames"] * SAMPLE_TO_CROP)))
    try:
        cfg = TrainConfig.from_dict(data)
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    train_set = manifest.load("train")
    if not train_set:
        raise UsageError(f"--data: {args.data} has no training samples")
    first = train_set[0]
    if args.config:
        net_cfg, section = load_config(args.config)
        if not isinstance(section, dict):
            raise UsageError(f"{args.config}: train: expected an object")
    else:
        crop = args.crop_frames or 128
        net_cfg = default_config(first.num_joints, crop, first.frames.shape[2],
                                 len(manifest.classes))
        section = {}
    cfg = _train_config(args, section, net_cfg.num_frames)
    if cfg.crop_frames != net_cfg.num_frames:
        raise UsageError(f"train.crop_frames: {cfg.crop_frames} does not match "
                         f"num_frames {net_cfg.num_frames} of the network")
    if first.num_joints != net_cfg.num_joints:
        raise UsageError(f"num_joints: config says {net_cfg.num_joints}, "
                         f"data has {first.num_joints}")
    if first.frames.shape[2] != net_cfg.in_channels:
        raise UsageError(f"in_channels: config says {net_cfg.in_channels}, "
                         f"data has {first.frames.shape[2]}")
    if len(manifest.classes) > net_cfg.num_classes:
        raise UsageError(f"num_classes: config says {net_cfg.num_classes}, "
                         f"manifest lists {len(manifest.classes)}")
    net = DSTANet(net_cfg, cfg.seed)
    result = train(net, train_set, cfg,
                   on_epoch=lambda e: print(e.line(), flush=True))
    result.checkpoint.save(args.ckpt)
    log_path = args.out or f"{args.ckpt}.log.csv"
    Path(log_path).write_text(format_log(result.history))
    print(f"wrote checkpoint {args.ckpt} and epoch log {log_path}")
    return 0


def cmd_eval(args) -> int:
    if args.fuse is not None:
        paths = [p for p in args.fuse.split(",") if p]
        if len(paths) < 2:
            raise UsageError("--fuse: needs at least two score tables")
        tables = [ScoreTable.load(p) for p in paths]
        try:
            result = fuse_scores(tables)
        except ValueError as exc:
            raise UsageError(f"--fuse: {exc}") from None
    else:
        missing = [f for f, v in (("--ckpt", args.ckpt), ("--data", args.data)) if v is None]
        if missing:
            raise UsageError(f"eval: the following arguments are required: {', '.join(missing)}"
                             " (or use --fuse)")
        net, cfg = net_from_checkpoint(Checkpoint.load(args.ckpt))
        if cfg is None:
            n = net.config.num_frames
            cfg = TrainConfig(sample_frames=math.ceil(n * SAMPLE_TO_CROP), crop_frames=n)
        if args.stream is not None:
            cfg.stream = args.stream
        sequences = load_manifest(args.data).load(args.split)
        result = evaluate(net, sequences, cfg)
    if args.out:
        result.table.save(args.out)
    print(f"accuracy {result.accuracy!r} ({len(result.table.ids)} samples, "
          f"stream {result.table.stream})")
    return 0


def cmd_bench(args) -> int:
    rows = benchmod.bench_rows(args.strategy, args.N, args.T, args.C, args.repeat,
                               _seed(args))
    text = benchmod.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export_attn(args) -> int:
    from .network import export_attention

    net, cfg = net_from_checkpoint(Checkpoint.load(args.ckpt))
    seq = load_skeleton_file(args.sample)
    if cfg is None:
        n = net.config.num_frames
        cfg = TrainConfig(sample_frames=math.ceil(n * SAMPLE_TO_CROP), crop_frames=n)
    x = prepare_sample(seq, cfg, False)
    if x.shape != (net.config.num_joints, net.config.num_frames, net.config.in_channels):
        raise UsageError(f"--sample: stream shape {x.shape} does not fit the network")
    maps = export_attention(net, x)
    write_attention_csv(maps, args.out)
    rows = sum(m.values.size for m in maps)
    print(f"wrote {len(maps)} maps ({rows} rows) to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "decouple": cmd_decouple,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-attn": cmd_export_attn,
}

USER_ERRORS = (UsageError, ConfigError, SkeletonFormatError, CheckpointError,
               FileNotFoundError, IsADirectoryError, PermissionError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
