"""Synthetic tagged/clean image pairs with controllable domain shift.

A clean image is a smooth field of Gaussian bumps; its tagged counterpart is
the same field multiplied by a sinusoidal stripe pattern plus noise. Shifting
stripe period/angle, contrast gamma and noise between source and target gives
the domain gap.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgm

MANIFEST_VERSION = 1
IMAGE_SIZE = (64, 64)


@dataclass(frozen=True)
class DomainSpec:
    tag_period: float = 8.0
    tag_angle: float = 0.0
    tag_depth: float = 0.7
    contrast_gamma: float = 1.0
    noise_sigma: float = 0.0
    blob_count: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.tag_period < 2:
            raise ValueError("tag_period must be >= 2 (Nyquist)")
        if not 0.0 <= self.tag_depth <= 1.0:
            raise ValueError("tag_depth must be in [0, 1]")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "DomainSpec":
        return dataclasses.replace(self, **kw)


SOURCE_SPEC = DomainSpec()

PRESETS = ("cross_scanner", "cross_center", "null_shift")


def preset_specs(preset: str, seed: int = 0) -> tuple[DomainSpec, DomainSpec]:
    """(source, target) specs for a named scenario."""
    source = SOURCE_SPEC.replace(seed=seed)
    if preset == "cross_scanner":
        target = source.replace(tag_period=12.0, contrast_gamma=1.4, noise_sigma=0.02, seed=seed + 1)
    elif preset == "cross_center":
        target = source.replace(tag_period=12.0, contrast_gamma=1.4, noise_sigma=0.02,
                                tag_angle=0.3, seed=seed + 1)
    elif preset == "null_shift":
        target = source.replace(seed=seed + 1)
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return source, target


def image_rng(spec: DomainSpec, image_id: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, image_id])


def clean_field(spec: DomainSpec, rng: np.random.Generator, size=IMAGE_SIZE) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    scale = min(h, w)
    for _ in range(spec.blob_count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(scale / 16, scale / 6)
        amp = rng.uniform(0.3, 1.0)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    return field ** spec.contrast_gamma


def tag_modulation(spec: DomainSpec, size=IMAGE_SIZE) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = 2 * np.pi * (xx * np.cos(spec.tag_angle) + yy * np.sin(spec.tag_angle)) / spec.tag_period
    return 1.0 - spec.tag_depth * (1.0 + np.cos(phase)) / 2.0


def generate_image_pair(spec: DomainSpec, image_id: int, rng: np.random.Generator | None = None,
                        size=IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """(tagged, clean), both float32 [1,H,W] in [0,1]."""
    if rng is None:
        rng = image_rng(spec, image_id)
    clean = clean_field(spec, rng, size)
    tagged = clean * tag_modulation(spec, size)
    if spec.noise_sigma > 0:
        tagged = tagged + rng.normal(0.0, spec.noise_sigma, size=tagged.shape)
    tagged = np.clip(tagged, 0.0, 1.0)
    return tagged[None].astype(np.float32), clean[None].astype(np.float32)


# ---------------------------------------------------------------- on-disk datasets

@dataclass
class DatasetManifest:
    version: int
    role: str
    spec: DomainSpec
    image_size: tuple[int, int]
    entries: list[dict]
    root: Path

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, rel: str) -> Path:
        return self.root / rel


def _write_manifest(path: Path, role: str, spec: DomainSpec, size, entries: list[dict]) -> None:
    lines = [json.dumps({"record": "header", "version": MANIFEST_VERSION, "role": role,
                         "spec": spec.to_dict(), "spec_hash": spec.digest(),
                         "image_size": list(size), "count": len(entries)}, sort_keys=True)]
    lines += [json.dumps({"record": "image", **e}, sort_keys=True) for e in entries]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    header, entries = None, []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("record")
        if kind == "header":
            header = rec
        elif kind == "image":
            entries.append(rec)
        else:
            raise ValueError(f"{path}: unknown record type {kind!r}")
    if header is None:
        raise ValueError(f"{path}: missing header record")
    if header["version"] != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {header['version']}")
    if header["count"] != len(entries):
        raise ValueError(f"{path}: header count {header['count']} != {len(entries)} entries")
    spec = DomainSpec(**header["spec"])
    for e in entries:
        if e["role"] != header["role"]:
            raise ValueError(f"{path}: entry {e['id']} role mismatch")
        if header["role"] == "source" and not e.get("clean"):
            raise ValueError(f"{path}: source entry {e['id']} lacks a clean image")
    return DatasetManifest(header["version"], header["role"], spec, tuple(header["image_size"]),
                           entries, path.parent)


def build_datasets(source_spec: DomainSpec, target_spec: DomainSpec, n_source: int = 200,
                   n_target: int = 24, out_dir=".", size=IMAGE_SIZE) -> tuple[Path, Path]:
    """Write source pairs and target images as PGM plus one manifest per domain.

    Everything is staged in a temporary directory next to ``out_dir`` and moved
    into place at the end, so a failure leaves nothing behind.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError("n_source and n_target must be >= 1")
    out = Path(out_dir)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} exists and is not empty")
    stage = Path(tempfile.mkdtemp(prefix=".gen-", dir=out.parent))
    try:
        for role, spec, n in (("source", source_spec, n_source), ("target", target_spec, n_target)):
            (stage / role / "tagged").mkdir(parents=True)
            (stage / role / "clean").mkdir(parents=True)
            entries = []
            for i in range(n):
                tagged, clean = generate_image_pair(spec, i, size=size)
                iid = f"{role[0]}{i:04d}"
                tp, cp = f"{role}/tagged/{iid}.pgm", f"{role}/clean/{iid}.pgm"
                pgm.write_pgm(stage / tp, tagged)
                pgm.write_pgm(stage / cp, clean)
                entry = {"id": iid, "role": role, "tagged": tp, "clean": cp,
                         "spec_hash": spec.digest()}
                if role == "target":
                    entry["oracle_only"] = True
                entries.append(entry)
            _write_manifest(stage / f"{role}.jsonl", role, spec, size, entries)
        if out.exists():
            out.rmdir()
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out / "source.jsonl", out / "target.jsonl"


def load_source(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Tagged inputs and clean labels, each [N,1,H,W]."""
    if manifest.role != "source":
        raise ValueError("load_source needs a source manifest")
    xs = [pgm.read_pgm(manifest.path(e["tagged"])) for e in manifest.entries]
    ys = [pgm.read_pgm(manifest.path(e["clean"])) for e in manifest.entries]
    return np.stack(xs)[:, None], np.stack(ys)[:, None]


def load_target_inputs(manifest: DatasetManifest) -> np.ndarray:
    """Tagged target images only; the oracle clean images are never opened here."""
    return np.stack([pgm.read_pgm(manifest.path(e["tagged"])) for e in manifest.entries])[:, None]


def load_target_oracle(manifest: DatasetManifest) -> np.ndarray:
    """Withheld clean target images. Evaluation only."""
    return np.stack([pgm.read_pgm(manifest.path(e["clean"])) for e in manifest.entries])[:, None]


def split_validation(x: np.ndarray, y: np.ndarray, fraction: float = 0.1):
    """Hold out the last max(1, floor(fraction*N)) pairs (none if N == 1)."""
    n = len(x)
    n_val = max(1, int(n * fraction)) if n > 1 else 0
    cut = n - n_val
    return (x[:cut], y[:cut]), (x[cut:], y[cut:])
