"""Disk-level stages shared by the CLI and the experiment runner.

Only :func:`evaluate` opens target clean images; every other stage reads
the source pairs and the target tagged images.
"""
from __future__ import annotations

import csv
import logging
import shutil
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, pgm
from .config import RunConfig
from .selftrain import GstConfig, pretrain, run_gst
from .synthdata import (build_datasets, load_source, load_target_inputs, load_target_oracle,
                        preset_specs, read_manifest, split_validation)
from .translator import ModelConfig, build_model, load_checkpoint, predict, save_checkpoint

log = logging.getLogger(__name__)


def generate_data(preset: str, out_dir, seed: int = 0, n_source: int = 200, n_target: int = 24):
    source_spec, target_spec = preset_specs(preset, seed)
    return build_datasets(source_spec, target_spec, n_source, n_target, out_dir)


def _source_split(data_dir: Path, config: GstConfig):
    x, y = load_source(read_manifest(data_dir / "source.jsonl"))
    return split_validation(x, y, config.val_fraction)


def run_pretrain(data_dir, out_dir, model_config: ModelConfig, config: GstConfig) -> Path:
    """Writes ``pretrain.ckpt`` and ``pretrain_loss.csv`` into ``out_dir``."""
    data_dir, out = Path(data_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = _source_split(data_dir, config)
    params = build_model(model_config)
    params, history = pretrain(params, *train, config)
    ckpt = out / "pretrain.ckpt"
    save_checkpoint(params, ckpt, {"stage": "pretrain", "epochs": config.pretrain_epochs})
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for h in history:
            w.writerow([h["epoch"], repr(h["loss"])])
    return ckpt


def run_adapt(data_dir, checkpoint, out_dir, config: GstConfig) -> Path:
    """Writes per-round checkpoints, ``rounds.csv`` and ``final.ckpt``."""
    data_dir, out = Path(data_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _source_split(data_dir, config)
    x_t = load_target_inputs(read_manifest(data_dir / "target.jsonl"))
    params, _ = load_checkpoint(checkpoint)
    params, _ = run_gst(config, params, train, x_t, out_dir=out, validation=val)
    final = out / "final.ckpt"
    save_checkpoint(params, final, {"stage": "adapt", "ablation": config.ablation})
    return final


def write_predictions(checkpoint, manifest_path, pred_dir) -> Path:
    manifest = read_manifest(manifest_path)
    params, _ = load_checkpoint(checkpoint)
    preds = predict(params, load_target_inputs(manifest))
    pred_dir = Path(pred_dir)
    pred_dir.mkdir(parents=True, exist_ok=True)
    for iid, pred in zip(manifest.ids, preds):
        pgm.write_pgm(pred_dir / f"{iid}.pgm", pred)
    return pred_dir


def write_panels(manifest_path, pred_dir, panel_dir) -> int:
    """One PGM per image: tagged input | prediction | oracle, side by side."""
    manifest = read_manifest(manifest_path)
    panel_dir = Path(panel_dir)
    panel_dir.mkdir(parents=True, exist_ok=True)
    inputs = load_target_inputs(manifest)
    oracles = load_target_oracle(manifest)
    for iid, x, y in zip(manifest.ids, inputs, oracles):
        pred = pgm.read_pgm(Path(pred_dir) / f"{iid}.pgm")
        gap = np.ones((pred.shape[0], 2), dtype=np.float32)
        pgm.write_pgm(panel_dir / f"{iid}.pgm", np.hstack([x[0], gap, pred, gap, y[0]]))
    return len(manifest)


def evaluate(manifest_path, out_dir, checkpoint=None, pred_dir=None, panels: bool = False) -> metrics.MetricReport:
    """Score predictions (given, or produced from ``checkpoint``) into ``metrics.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if (checkpoint is None) == (pred_dir is None):
        raise ValueError("give exactly one of checkpoint or pred_dir")
    if checkpoint is not None:
        pred_dir = write_predictions(checkpoint, manifest_path, out / "pred")
    report = metrics.evaluate_set(pred_dir, manifest_path, out / "metrics.csv")
    if panels:
        write_panels(manifest_path, pred_dir, out / "panels")
    return report


# ---------------------------------------------------------------- experiment matrix

@dataclass
class RunResult:
    preset: str
    seed: int
    method: str
    l1: float
    ssim: float
    psnr: float
    metrics_csv: Path


METHOD_LABELS = {"baseline": "w/o UDA", "full": "GST", "gst_a": "GST-A", "gst_e": "GST-E"}


def run_experiment(out_root, presets=("cross_scanner", "null_shift"), seeds=(0, 1, 2),
                   ablations=("full", "gst_a", "gst_e"), base: RunConfig | None = None) -> list[RunResult]:
    """gen-data -> pretrain -> adapt (one per ablation) -> eval for every (preset, seed).

    Layout: ``<root>/<preset>/seed<k>/{data,adapt_<ablation>,eval_<method>}`` plus
    ``<root>/pretrain/seed<k>-<source spec hash>``.
    Existing stage outputs are reused, so an interrupted matrix can resume.
    """
    root = Path(out_root)
    results = []
    for preset in presets:
        for seed in seeds:
            cfg = RunConfig(dict((base or RunConfig()).values))
            cfg.set("seed", seed)
            cfg.set("preset", preset)
            run = root / preset / f"seed{seed}"
            run.mkdir(parents=True, exist_ok=True)
            data = run / "data"
            if not (data / "target.jsonl").exists():
                shutil.rmtree(data, ignore_errors=True)
                generate_data(preset, data, seed, **cfg.data())
            gst = cfg.gst()
            # presets share the source domain, so one pretraining per seed serves all of them
            source_spec, _ = preset_specs(preset, seed)
            pre_dir = root / "pretrain" / f"seed{seed}-{source_spec.digest()}"
            ckpt = pre_dir / "pretrain.ckpt"
            if not ckpt.exists():
                run_pretrain(data, pre_dir, cfg.model(), gst)
            stages = {"baseline": ckpt}
            for ab in ablations:
                final = run / f"adapt_{ab}" / "final.ckpt"
                if not final.exists():
                    run_adapt(data, ckpt, run / f"adapt_{ab}", gst.replace(ablation=ab))
                stages[ab] = final
            for method, c in stages.items():
                ev = run / f"eval_{method}"
                if not (ev / "metrics.csv").exists():
                    evaluate(data / "target.jsonl", ev, checkpoint=c)
                _, summary = metrics.read_metrics_csv(ev / "metrics.csv")
                results.append(RunResult(preset, seed, method, summary["l1"], summary["ssim"],
                                         summary["psnr"], ev / "metrics.csv"))
                log.info("%s seed %d %s: psnr %.3f ssim %.4f", preset, seed, method,
                         summary["psnr"], summary["ssim"])
    return results


def comparison_table(results: list[RunResult]) -> tuple[list[dict], str]:
    """Median-over-seeds table per (preset, method), as rows and as markdown."""
    rows = []
    presets = sorted({r.preset for r in results})
    methods = [m for m in METHOD_LABELS if any(r.method == m for r in results)]
    for preset in presets:
        base = [r for r in results if r.preset == preset and r.method == "baseline"]
        base_psnr = statistics.median(r.psnr for r in base) if base else float("nan")
        for m in methods:
            rs = [r for r in results if r.preset == preset and r.method == m]
            if not rs:
                continue
            psnr = statistics.median(r.psnr for r in rs)
            rows.append({"preset": preset, "method": METHOD_LABELS[m], "n_seeds": len(rs),
                         "l1": statistics.median(r.l1 for r in rs),
                         "ssim": statistics.median(r.ssim for r in rs),
                         "psnr": psnr, "delta_psnr": psnr - base_psnr})
    lines = ["| preset | method | seeds | L1 | SSIM | PSNR | dPSNR vs w/o UDA |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['preset']} | {r['method']} | {r['n_seeds']} | {r['l1']:.3f} | "
                     f"{r['ssim']:.4f} | {r['psnr']:.3f} | {r['delta_psnr']:+.3f} |")
    return rows, "\n".join(lines) + "\n"


def write_comparison(results: list[RunResult], out_dir) -> tuple[Path, Path]:
    rows, md = comparison_table(results)
    out = Path(out_dir)
    csv_path, md_path = out / "comparison.csv", out / "comparison.md"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    md_path.write_text(md)
    return csv_path, md_path
