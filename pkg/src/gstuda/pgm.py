"""8-bit binary PGM (P5) read/write for [0,1] float images."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Quantize a 2-D [0,1] image (or [1,H,W]) to 8 bits and write it as P5."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {arr.shape}")
    data = arr if arr.dtype == np.uint8 else to_uint8(arr)
    h, w = data.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())
    os.replace(tmp, path)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    toks, i = [], 0
    while len(toks) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        toks.append(buf[i:j])
        i = j
    return toks, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float32 [H,W] array in [0,1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start).reshape(h, w)
    return (data.astype(np.float32) / np.float32(maxval))


def write_heatmap(path, values: np.ndarray) -> tuple[float, float]:
    """Affine-normalize ``values`` to [0,1], write a PGM plus a ``.scale`` sidecar.

    Pixel v maps back to lo + v * (hi - lo).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    norm = (arr - lo) / span if span > 0 else np.zeros_like(arr)
    write_pgm(path, norm)
    Path(str(path) + ".scale").write_text(f"min={lo!r}\nmax={hi!r}\n")
    return lo, hi
