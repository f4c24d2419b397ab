"""L1 / SSIM / PSNR on [0,1] images, plus directory-level evaluation."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import pgm
from .synthdata import DatasetManifest, read_manifest

PSNR_CAP = 99.0


@dataclass
class MetricReport:
    l1_mean: float
    ssim: float
    psnr: float
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1_mean(a, b) -> float:
    """Mean absolute error of [0,1] images, reported on the 0-255 scale."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)) * 255.0)


def psnr(a, b, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return cap
    return float(min(cap, 10.0 * np.log10(max_val ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, only at positions where the whole window fits
    rows = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(rows, g.size, axis=-2) @ g


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid Gaussian windows (no padding)."""
    a, b = _pair(a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("ssim expects a single-channel 2-D image")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_metrics(pred, target) -> dict:
    return {"l1": l1_mean(pred, target), "ssim": ssim(pred, target), "psnr": psnr(pred, target)}


def summarize(rows: list[dict]) -> MetricReport:
    if not rows:
        raise ValueError("no images to summarize")
    return MetricReport(
        l1_mean=float(np.mean([r["l1"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        psnr=float(np.mean([r["psnr"] for r in rows])),
        n_images=len(rows))


def evaluate_arrays(ids: list[str], preds: np.ndarray, oracles: np.ndarray) -> tuple[list[dict], MetricReport]:
    rows = [{"image_id": iid, **image_metrics(p, o)} for iid, p, o in zip(ids, preds, oracles)]
    return rows, summarize(rows)


def write_metrics_csv(path, rows: list[dict], report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "l1", "ssim", "psnr"])
        for r in rows:
            w.writerow([r["image_id"], repr(float(r["l1"])), repr(float(r["ssim"])), repr(float(r["psnr"]))])
        w.writerow(["mean", repr(float(report.l1_mean)), repr(float(report.ssim)), repr(float(report.psnr))])


def read_metrics_csv(path) -> tuple[list[dict], dict]:
    rows, summary = [], None
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rec = {"image_id": r["image_id"], "l1": float(r["l1"]), "ssim": float(r["ssim"]),
                   "psnr": float(r["psnr"])}
            if r["image_id"] == "mean":
                summary = rec
            else:
                rows.append(rec)
    return rows, summary


def evaluate_set(pred_dir, oracle_manifest, csv_path=None) -> MetricReport:
    """Compare ``<pred_dir>/<id>.pgm`` with each manifest entry's clean image."""
    manifest = oracle_manifest if isinstance(oracle_manifest, DatasetManifest) else read_manifest(oracle_manifest)
    pred_dir = Path(pred_dir)
    rows = []
    for e in manifest.entries:
        pred_path = pred_dir / f"{e['id']}.pgm"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction for {e['id']}: {pred_path}")
        pred = pgm.read_pgm(pred_path)
        oracle = pgm.read_pgm(manifest.path(e["clean"]))
        rows.append({"image_id": e["id"], **image_metrics(pred, oracle)})
    report = summarize(rows)
    if csv_path is not None:
        write_metrics_csv(csv_path, rows, report)
    return report
