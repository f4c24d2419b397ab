"""Dual-head micro U-Net: tagged image -> (mean image, log-variance map)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, clamp, concat_channels, conv2d, dropout, nearest_upsample2x, relu

CHECKPOINT_MAGIC = b"GSTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 8
    dropout_rate: float = 0.2
    seed: int = 0
    logvar_clamp: float = 10.0
    # fixed multiplier on the log-variance head output; under one SGD step size
    # it raises that head's effective learning rate by gain**2
    logvar_gain: float = 255.0
    # dropout stays on while pretraining on the source domain
    pretrain_dropout: bool = True

    def __post_init__(self):
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"input_size {self.input_size} must be positive and divisible by 8")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.logvar_clamp <= 0:
            raise ValueError("logvar_clamp must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in canonical order."""
    b = config.base_channels
    # stride-2 encoder convs use 4x4 kernels so the output extent divides exactly
    table: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k):
        table[f"{name}.w"] = (c_out, c_in, k, k)
        table[f"{name}.b"] = (c_out,)

    conv("enc1", b, 1, 4)
    conv("enc2", 2 * b, b, 4)
    conv("enc3", 4 * b, 2 * b, 4)
    conv("bottleneck", 4 * b, 4 * b, 3)
    conv("dec3", 2 * b, 4 * b + 2 * b, 3)
    conv("dec2", b, 2 * b + b, 3)
    conv("dec1", b, b + 1, 3)
    conv("head_mean", 1, b, 1)
    conv("head_logvar", 1, b, 1)
    return table


@dataclass
class TranslatorParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self, dtype=None) -> "TranslatorParams":
        return TranslatorParams(self.config, {
            k: Tensor(np.array(t.data, dtype=dtype or t.dtype, copy=True), requires_grad=True)
            for k, t in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, t in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def equal(self, other: "TranslatorParams") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(t.data, other[k].data) for k, t in self.items()))


def build_model(config: ModelConfig, rng: np.random.Generator | None = None,
                dtype=np.float32) -> TranslatorParams:
    """Fan-in scaled uniform weights (variance 1/fan_in), zero biases.

    The log-variance head starts at zero so every pixel begins at unit variance.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".b") or name == "head_logvar.w":
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True)
    return TranslatorParams(config, tensors)


def forward(params: TranslatorParams, x, mc_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Run the translator on ``x`` of shape [1,H,W] or a batch [N,1,H,W].

    ``mc_mode`` switches the three decoder dropout sites on; with it off the
    pass is deterministic. Returns (mean, log_var) with the input's shape.
    """
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    if x.shape[-3:] != (1, *cfg.input_size):
        raise ValueError(f"input shape {x.shape} does not match config {(1, *cfg.input_size)}")
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    p = params.tensors
    rate = cfg.dropout_rate

    def block(h, name, stride=1, padding=1):
        return relu(conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding))

    xc = x - 0.5
    e1 = block(xc, "enc1", stride=2)
    e2 = block(e1, "enc2", stride=2)
    e3 = block(e2, "enc3", stride=2)
    bt = block(e3, "bottleneck")
    d3 = dropout(block(concat_channels(nearest_upsample2x(bt), e2), "dec3"), rate, mc_mode, rng)
    d2 = dropout(block(concat_channels(nearest_upsample2x(d3), e1), "dec2"), rate, mc_mode, rng)
    d1 = dropout(block(concat_channels(nearest_upsample2x(d2), xc), "dec1"), rate, mc_mode, rng)
    mean = conv2d(d1, p["head_mean.w"], p["head_mean.b"])
    raw = conv2d(d1, p["head_logvar.w"], p["head_logvar.b"])
    if cfg.logvar_gain != 1.0:
        raw = raw * cfg.logvar_gain
    log_var = clamp(raw, -cfg.logvar_clamp, cfg.logvar_clamp)
    return mean, log_var


def predict(params: TranslatorParams, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Deterministic mean-head predictions for a stack of [N,1,H,W] images."""
    outs = []
    for i in range(0, len(images), batch):
        mean, _ = forward(params, images[i:i + batch], mc_mode=False)
        outs.append(mean.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: TranslatorParams, path, extra: dict | None = None) -> None:
    """Write config echo + named arrays. Byte-identical for identical params."""
    path = Path(path)
    entries = []
    offset = 0
    blobs = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
              "arrays": entries, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"%d\n" % CHECKPOINT_VERSION)
        fh.write(b"%d\n" % len(head))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TranslatorParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path} is not a translator checkpoint")
        version = int(magic[len(CHECKPOINT_MAGIC):])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n = int(fh.readline())
        header = json.loads(fh.read(n))
        payload = fh.read()
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for e in header["arrays"]:
        dt = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(payload, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        tensors[e["name"]] = Tensor(arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"]),
                                    requires_grad=True)
    return TranslatorParams(config, tensors), header.get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
