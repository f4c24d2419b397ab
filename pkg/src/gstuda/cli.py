"""Command-line entry point: gen-data, pretrain, adapt, eval, experiment.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure
(including non-finite training losses).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig
from .selftrain import ABLATIONS, TrainingAborted
from .synthdata import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value file (e.g. an earlier config.txt echo)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override such as gst.K=10 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("assignments", nargs="*", metavar="KEY=VALUE", help="same as --set")

    p = argparse.ArgumentParser(prog="gstuda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic source/target dataset")
    g.add_argument("--preset", choices=PRESETS)

    t = sub.add_parser("pretrain", parents=[common], help="train the translator on the source domain")
    t.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    t.add_argument("--pretrain-epochs", type=int)

    a = sub.add_parser("adapt", parents=[common], help="run self-training rounds on the target domain")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--ablation", choices=ABLATIONS)
    a.add_argument("--rounds", type=int)

    e = sub.add_parser("eval", parents=[common], help="score target predictions against the oracle images")
    e.add_argument("--manifest", type=Path, help="target manifest (default: <data>/target.jsonl)")
    e.add_argument("--data", type=Path)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred-dir", type=Path)
    e.add_argument("--panels", action="store_true", help="also write input|prediction|oracle panels")

    x = sub.add_parser("experiment", parents=[common],
                       help="full matrix: presets x seeds x {w/o UDA, GST, GST-A, GST-E}")
    x.add_argument("--presets", default="cross_scanner,cross_center,null_shift")
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--ablations", default=",".join(ABLATIONS))
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file {args.config} not found")
        cfg.load(args.config)
    cfg.update(args.overrides + args.assignments)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "preset", None):
        cfg.set("preset", args.preset)
    if getattr(args, "pretrain_epochs", None) is not None:
        cfg.set("gst.pretrain_epochs", args.pretrain_epochs)
    if getattr(args, "ablation", None):
        cfg.set("gst.ablation", args.ablation)
    if getattr(args, "rounds", None) is not None:
        cfg.set("gst.rounds", args.rounds)
    cfg.validate()
    return cfg


def _prepare_out(out: Path, must_not_exist: bool = False) -> None:
    if not out.parent.is_dir():
        raise UsageError(f"parent directory of {out} does not exist")
    if must_not_exist and out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} already exists and is not empty")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} {path} not found")
    return path


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _run_config(args)
        out: Path = args.out
        if args.command == "gen-data":
            _prepare_out(out, must_not_exist=True)
            src, tgt = pipeline.generate_data(cfg.preset, out, cfg.seed, **cfg.data())
            cfg.write(out / "config.txt")
            print(f"wrote {src} and {tgt}")
        elif args.command == "pretrain":
            _require(args.data / "source.jsonl", "source manifest")
            _prepare_out(out)
            ckpt = pipeline.run_pretrain(args.data, out, cfg.model(), cfg.gst())
            cfg.write(out / "config.txt")
            print(f"wrote {ckpt}")
        elif args.command == "adapt":
            _require(args.data / "target.jsonl", "target manifest")
            _require(args.checkpoint, "checkpoint")
            _prepare_out(out)
            final = pipeline.run_adapt(args.data, args.checkpoint, out, cfg.gst())
            cfg.write(out / "config.txt")
            print(f"wrote {out / 'rounds.csv'} and {final}")
        elif args.command == "eval":
            manifest = args.manifest or (args.data / "target.jsonl" if args.data else None)
            if manifest is None:
                raise UsageError("eval needs --manifest or --data")
            _require(manifest, "manifest")
            _require(args.checkpoint or args.pred_dir, "predictions")
            _prepare_out(out)
            report = pipeline.evaluate(manifest, out, checkpoint=args.checkpoint,
                                       pred_dir=args.pred_dir, panels=args.panels)
            cfg.write(out / "config.txt")
            print(f"n={report.n_images} l1={report.l1_mean:.4f} ssim={report.ssim:.4f} psnr={report.psnr:.3f}")
        elif args.command == "experiment":
            _prepare_out(out)
            out.mkdir(exist_ok=True)
            presets = [s for s in args.presets.split(",") if s]
            bad = [s for s in presets if s not in PRESETS]
            ablations = [s for s in args.ablations.split(",") if s]
            bad += [s for s in ablations if s not in ABLATIONS]
            if bad:
                raise UsageError(f"unknown preset/ablation: {', '.join(bad)}")
            seeds = [int(s) for s in args.seeds.split(",") if s]
            results = pipeline.run_experiment(out, presets, seeds, ablations, base=cfg)
            _, md_path = pipeline.write_comparison(results, out)
            cfg.write(out / "config.txt")
            print(md_path.read_text(), end="")
    except (ConfigError, UsageError, FileNotFoundError, FileExistsError) as exc:
        print(f"gstuda: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"gstuda: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"gstuda: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
