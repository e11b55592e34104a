"""Command-line interface.

Subcommands: train, eval, predict, synth, gradcheck, bench. Run
`rmsda <subcommand> --help` for the flags of each.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import backend
from .errors import CheckpointError, DataError
from .network import NetworkConfig, load_checkpoint


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmsda",
                                description="segmentation network trainer")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", type=Path, default=None,
                   help="JSON file with 'network' and 'train' sections")
    t.add_argument("--data", type=Path, required=True, help="manifest CSV")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")

    e = sub.add_parser("eval", help="score a checkpoint against a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--report", type=Path, required=True,
                   help="where to write the JSON report")

    pr = sub.add_parser("predict", help="segment a single image")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--image", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True,
                    help="output mask PNG path")
    pr.add_argument("--threshold", type=float, default=0.5)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--scale", choices=("toy", "small"), default="toy")

    sub.add_parser("bench", help="compare compiled and numpy kernels")
    return p


def _load_configs(path):
    from .train import TrainConfig

    if path is None:
        return NetworkConfig(), TrainConfig()
    with open(path) as f:
        raw = json.load(f)
    unknown = set(raw) - {"network", "train"}
    if unknown:
        raise DataError(f"config has unknown sections {sorted(unknown)}")
    net = NetworkConfig.from_dict(raw.get("network", {}))
    allowed = set(TrainConfig.__dataclass_fields__)
    train_raw = raw.get("train", {})
    bad = set(train_raw) - allowed
    if bad:
        raise DataError(f"config train section has unknown keys {sorted(bad)}")
    return net, TrainConfig(**train_raw)


def _working_size(meta: dict, default: int = 224) -> int:
    return int(meta.get("train_config", {}).get("image_size", default))


def _cmd_train(args) -> int:
    from .data import read_manifest
    from .train import train

    net_cfg, train_cfg = _load_configs(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    records = read_manifest(args.data)
    print(f"training on {len(records)} pairs "
          f"(augment={'on' if train_cfg.augment else 'off'}, "
          f"size={train_cfg.image_size}, base={net_cfg.base_channels}, "
          f"backend={backend.backend_name()})")

    def on_epoch(log):
        print(f"epoch {log.epoch + 1:4d}/{train_cfg.epochs}  "
              f"loss {log.loss:.5f}  lr {log.lr:.2e}  {log.seconds:.1f}s",
              flush=True)

    result = train(records, net_cfg, train_cfg, args.out, on_epoch=on_epoch)
    print(f"checkpoint written to {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    from .data import read_manifest
    from .train import evaluate

    model, meta = load_checkpoint(args.checkpoint)
    records = read_manifest(args.data)
    report = evaluate(model, records, _working_size(meta), args.threshold)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w") as f:
        json.dump(report, f, indent=2)
    agg = report["aggregate"]
    print(f"evaluated {report['n_images']} images at threshold {args.threshold}")
    for key in ("accuracy", "specificity", "recall", "dice", "jaccard"):
        print(f"  {key:<12} {agg[key]:.4f}")
    if agg["degenerate"]:
        print(f"  degenerate: {', '.join(agg['degenerate'])}")
    print(f"report written to {args.report}")
    return 0


def _cmd_predict(args) -> int:
    from .train import predict

    model, meta = load_checkpoint(args.checkpoint)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    predict(model, args.image, args.out, _working_size(meta), args.threshold)
    print(f"mask written to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    from .data import synthesize

    records = synthesize(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(records)} pairs and manifest.csv to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .train import run_model_gradcheck

    report = run_model_gradcheck(args.scale)
    print(report)
    return 0 if report.passed else 1


def _cmd_bench(args) -> int:
    from .bench import format_rows, run_benchmark

    print(format_rows(run_benchmark()))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "predict": _cmd_predict,
        "synth": _cmd_synth,
        "gradcheck": _cmd_gradcheck,
        "bench": _cmd_bench,
    }[args.command]
    try:
        return handler(args)
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
