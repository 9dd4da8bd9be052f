"""Command-line interface: gen | train | eval | bench.

All commands exit 0 only on success; validation and contract failures print
one error line to stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, config_to_dict, load_config
from .costmodel import reports_to_csv, reports_to_json, sweep
from .errors import VdformerError
from .pipeline import (
    SPLITS,
    evaluate_checkpoint,
    generate_dataset,
    get_version,
    train,
)

FUSION_CHOICES = ("none", "p3d", "c3d", "vdformer")

DEFAULT_BENCH_SHAPES = [
    (4, 4, 4), (8, 8, 8), (16, 16, 8), (32, 32, 4), (64, 64, 3), (128, 128, 3),
]
DEFAULT_BENCH_WINDOWS = [2, 3, 7]


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "fusion", None) is not None:
        overrides["fusion"] = args.fusion
    if overrides:
        payload = config_to_dict(config)
        payload.update(overrides)
        from .config import config_from_dict

        config = config_from_dict(payload)
    return config


def cmd_gen(args) -> int:
    config = _load_run_config(args)
    manifest = generate_dataset(config, args.out)
    counts = {split: len(ids) for split, ids in manifest["splits"].items()}
    print(f"wrote dataset to {args.out}: {counts}")
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args)
    data_dir = args.data if args.data else config.data_dir
    last = {"step": -1}

    def progress(record):
        last["step"] = record["step"]
        if record["step"] % 50 == 0:
            print(
                f"step {record['step']} epoch {record['epoch']} "
                f"loss {record['loss']:.4f}",
                flush=True,
            )

    final = train(config, data_dir, args.out, resume=args.checkpoint,
                  progress=progress)
    print(f"training complete after step {last['step']}; checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    if args.data:
        data_dir = args.data
    else:
        from .params import read_checkpoint
        from .config import config_from_dict

        _arrays, config_dict, _meta = read_checkpoint(args.checkpoint)
        data_dir = config_from_dict(config_dict).data_dir
    report, detections = evaluate_checkpoint(args.checkpoint, data_dir, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"eval_{args.split}.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    det_path = out / f"detections_{args.split}.jsonl"
    from .synthdata import write_boxes_jsonl

    write_boxes_jsonl(det_path, detections)
    print(f"mAP@0.5 {report.map50:.4f}  avg sensitivity {report.avg_sensitivity:.4f}")
    print(f"report: {report_path}")
    return 0


def cmd_bench(args) -> int:
    reports = sweep(DEFAULT_BENCH_SHAPES, DEFAULT_BENCH_WINDOWS,
                    channels=args.channels, bytes_per_scalar=args.bytes_per_scalar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "cost_table.csv"
    json_path = out / "cost_table.json"
    csv_path.write_text(reports_to_csv(reports), encoding="utf-8")
    json_path.write_text(reports_to_json(reports), encoding="utf-8")
    print(f"wrote {csv_path} and {json_path} ({len(reports)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdformer",
        description="Synthetic 3D lesion detection with view-cascaded attention",
    )
    parser.add_argument("--version", action="version", version=get_version())
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--config", type=str, default=None, help="run config JSON")
    p_gen.add_argument("--out", type=str, required=True, help="dataset directory")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a detector")
    p_train.add_argument("--config", type=str, default=None)
    p_train.add_argument("--data", type=str, default=None,
                         help="dataset directory (default: config data_dir)")
    p_train.add_argument("--out", type=str, required=True, help="output directory")
    p_train.add_argument("--checkpoint", type=str, default=None,
                         help="resume from this checkpoint")
    p_train.add_argument("--fusion", choices=FUSION_CHOICES, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--data", type=str, default=None,
                        help="dataset directory (default: checkpoint config data_dir)")
    p_eval.add_argument("--split", choices=SPLITS, default="test")
    p_eval.add_argument("--out", type=str, required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="emit the attention cost table")
    p_bench.add_argument("--out", type=str, required=True)
    p_bench.add_argument("--channels", type=int, default=256)
    p_bench.add_argument("--bytes-per-scalar", type=int, default=4)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VdformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
