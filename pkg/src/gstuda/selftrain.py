"""Losses, source pretraining and the round-based self-training loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .tensor import NonFiniteError, Tensor, backward, sgd_step
from .translator import TranslatorParams, forward, predict, save_checkpoint
from .uncertainty import PseudoLabelSet, estimate, make_pseudo_labels, select_masks_global

log = logging.getLogger(__name__)

ABLATIONS = ("full", "gst_a", "gst_e")
THRESHOLD_SCOPES = ("per_image", "global")

REPORT_FIELDS = ["round", "p", "epsilon_mean", "masked_fraction", "loss_src", "loss_tgt",
                 "psnr_val", "ssim_val", "seconds"]


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class GstConfig:
    K: int = 20
    beta: float = 1.0
    p_start: float = 0.30
    p_end: float = 0.80
    rounds: int = 6
    epochs_per_round: int = 2
    pretrain_epochs: int = 20
    lr: float = 1e-9
    batch: int = 4
    seed: int = 0
    ablation: str = "full"
    mask_regularizer: bool = True
    threshold_scope: str = "per_image"
    val_fraction: float = 0.1
    # losses are evaluated on this intensity scale; network I/O stays in [0,1]
    intensity_scale: float = 255.0

    def __post_init__(self):
        if not 0 < self.p_start <= self.p_end <= 1:
            raise ValueError("need 0 < p_start <= p_end <= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be positive")
        if self.batch < 1 or self.epochs_per_round < 0 or self.pretrain_epochs < 0:
            raise ValueError("batch must be >= 1 and epoch counts >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.threshold_scope not in THRESHOLD_SCOPES:
            raise ValueError(f"threshold_scope must be one of {THRESHOLD_SCOPES}")

    def replace(self, **kw) -> "GstConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class RoundReport:
    round: int
    p: float
    epsilons: list[float]
    masked_fraction: float
    loss_src: float
    loss_tgt: float
    psnr_val: float
    ssim_val: float
    seconds: float
    batch_losses: list[tuple[float, float, float]] = field(default_factory=list, repr=False)
    pseudo_labels: list[PseudoLabelSet] = field(default_factory=list, repr=False)

    @property
    def epsilon_mean(self) -> float:
        return float(np.mean(self.epsilons))

    def csv_row(self) -> dict:
        return {"round": self.round, "p": repr(self.p), "epsilon_mean": repr(self.epsilon_mean),
                "masked_fraction": repr(self.masked_fraction), "loss_src": repr(self.loss_src),
                "loss_tgt": repr(self.loss_tgt), "psnr_val": repr(self.psnr_val),
                "ssim_val": repr(self.ssim_val), "seconds": f"{self.seconds:.3f}"}


# ---------------------------------------------------------------- losses

def _batch_size(t: Tensor) -> int:
    return t.shape[0] if t.data.ndim == 4 else 1


def source_loss(y_s, y_tilde_s: Tensor) -> Tensor:
    """Pixel-summed squared error, averaged over the batch."""
    if not isinstance(y_tilde_s, Tensor):
        y_tilde_s = Tensor(np.asarray(y_tilde_s))
    y = np.asarray(y_s.data if isinstance(y_s, Tensor) else y_s, dtype=y_tilde_s.dtype)
    if y.shape != y_tilde_s.shape:
        raise ValueError(f"source_loss: shape mismatch {y.shape} vs {y_tilde_s.shape}")
    return (y_tilde_s - y).square().sum() * (1.0 / _batch_size(y_tilde_s))


def target_loss(y_hat, y_tilde: Tensor, log_var: Tensor, mask, beta: float = 1.0,
                mask_regularizer: bool = True) -> Tensor:
    """Variance-normalized masked residual plus beta * log-variance, batch averaged.

    ``y_hat`` and ``mask`` are constants. With ``mask_regularizer`` the
    log-variance term is masked too; otherwise it covers every pixel.
    """
    if not isinstance(y_tilde, Tensor):
        y_tilde = Tensor(np.asarray(y_tilde))
    if not isinstance(log_var, Tensor):
        log_var = Tensor(np.asarray(log_var, dtype=y_tilde.dtype))
    dt = y_tilde.dtype
    y_hat = np.asarray(y_hat.data if isinstance(y_hat, Tensor) else y_hat, dtype=dt)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=dt)
    if not (y_hat.shape == y_tilde.shape == log_var.shape == mask.shape):
        raise ValueError("target_loss: all maps must share one shape")
    residual = (y_tilde - y_hat) * mask
    fit = (log_var * -1.0).exp() * residual.square()
    reg = log_var * mask if mask_regularizer else log_var
    return (fit + reg * beta).sum() * (1.0 / _batch_size(y_tilde))


# ---------------------------------------------------------------- schedule & rngs

def p_schedule(config: GstConfig) -> list[float]:
    r = config.rounds
    if r == 1:
        return [config.p_start]
    return [round(config.p_start + (config.p_end - config.p_start) * i / (r - 1), 12) for i in range(r)]


def _rng(config: GstConfig, *path: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *path])


def _check(loss: Tensor, what: str) -> float:
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingAborted(f"non-finite {what} loss")
    return v


def validation_snapshot(params: TranslatorParams, x_val, y_val) -> tuple[float, float]:
    if x_val is None or len(x_val) == 0:
        return float("nan"), float("nan")
    pred = np.clip(predict(params, x_val), 0.0, 1.0)
    ps = [metrics.psnr(p, y) for p, y in zip(pred, y_val)]
    ss = [metrics.ssim(p, y) for p, y in zip(pred, y_val)]
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------- pretraining

def pretrain(params: TranslatorParams, x_s: np.ndarray, y_s: np.ndarray, config: GstConfig,
             rng: np.random.Generator | None = None, checkpoint_path=None):
    """SGD on the source regression loss. Returns (new params, per-epoch history)."""
    if len(x_s) == 0:
        raise ValueError("empty source set")
    if rng is None:
        rng = _rng(config, 0)
    params = params.copy()
    use_dropout = params.config.pretrain_dropout
    scale = config.intensity_scale
    history = []
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(len(x_s))
        total, steps = 0.0, 0
        for i in range(0, len(order), config.batch):
            idx = np.sort(order[i:i + config.batch])
            try:
                mean, _ = forward(params, x_s[idx], mc_mode=use_dropout, rng=rng)
                loss = source_loss(y_s[idx] * scale, mean * scale)
                total += _check(loss, "source")
                params.zero_grad()
                backward(loss)
                sgd_step(params.tensors, config.lr)
            except NonFiniteError as exc:
                raise TrainingAborted(f"pretrain epoch {epoch} step {steps}: {exc}") from exc
            steps += 1
        history.append({"epoch": epoch, "loss": total / steps})
        log.info("pretrain epoch %d loss %.5f", epoch, total / steps)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path, {"stage": "pretrain", "epochs": config.pretrain_epochs})
    return params, history


# ---------------------------------------------------------------- adaptation

def generate_pseudo_labels(params: TranslatorParams, x_t: np.ndarray, p: float, config: GstConfig,
                           round_index: int = 0) -> list[PseudoLabelSet]:
    """Step a: MC-dropout uncertainty and top-p% masks for every target image."""
    bundles = [estimate(params, x, config.K, _rng(config, 1, round_index, i), config.intensity_scale)
               for i, x in enumerate(x_t)]
    if config.threshold_scope == "per_image":
        return [make_pseudo_labels(b, p, config.ablation) for b in bundles]
    masks, eps = select_masks_global([b.for_ablation(config.ablation) for b in bundles], p)
    return [PseudoLabelSet(y_hat=b.mu.copy(), mask=m, epsilon=eps, p=p) for b, m in zip(bundles, masks)]


def retrain(params: TranslatorParams, x_s, y_s, x_t, labels: list[PseudoLabelSet], config: GstConfig,
            rng: np.random.Generator) -> list[tuple[float, float, float]]:
    """Step b: SGD on source + masked target loss with frozen pseudo-labels (in place).

    Each step uses ``batch`` target images and ``batch`` source images; an epoch
    is one pass over the target set.
    """
    dt = params.dtype
    scale = config.intensity_scale
    y_hat = np.stack([pl.y_hat for pl in labels]).astype(dt) * dt.type(scale)
    masks = np.stack([pl.mask for pl in labels]).astype(dt)
    losses = []
    src_order = np.empty(0, dtype=int)
    for _ in range(config.epochs_per_round):
        order = rng.permutation(len(x_t))
        for i in range(0, len(order), config.batch):
            t_idx = np.sort(order[i:i + config.batch])
            if len(src_order) < len(t_idx):
                src_order = np.concatenate([src_order, rng.permutation(len(x_s))])
            s_idx, src_order = np.sort(src_order[:len(t_idx)]), src_order[len(t_idx):]
            try:
                mean_s, _ = forward(params, x_s[s_idx], mc_mode=True, rng=rng)
                mean_t, log_var_t = forward(params, x_t[t_idx], mc_mode=True, rng=rng)
                l_src = source_loss(y_s[s_idx] * scale, mean_s * scale)
                l_tgt = target_loss(y_hat[t_idx], mean_t * scale, log_var_t, masks[t_idx],
                                    config.beta, config.mask_regularizer)
                total = l_src + l_tgt
                losses.append((_check(total, "total"), _check(l_src, "source"), _check(l_tgt, "target")))
                params.zero_grad()
                backward(total)
                sgd_step(params.tensors, config.lr)
            except NonFiniteError as exc:
                raise TrainingAborted(f"retraining step {len(losses)}: {exc}") from exc
    return losses


def adapt_round(params: TranslatorParams, source, x_t: np.ndarray, p: float, config: GstConfig,
                rng: np.random.Generator | None = None, round_index: int = 0, validation=None):
    """One alternation: pseudo-labels + masks (a), then retraining (b).

    ``source`` is an (x, y) pair of training arrays; ``validation`` an optional
    held-out (x, y) pair for the report snapshot. Returns (params, RoundReport).
    """
    if len(x_t) == 0:
        raise ValueError("empty target set")
    start = time.perf_counter()
    labels = generate_pseudo_labels(params, x_t, p, config, round_index)
    params = params.copy()
    if rng is None:
        rng = _rng(config, 2, round_index)
    losses = retrain(params, source[0], source[1], x_t, labels, config, rng)
    psnr_val, ssim_val = validation_snapshot(params, *(validation or (None, None)))
    report = RoundReport(
        round=round_index, p=p,
        epsilons=[pl.epsilon for pl in labels],
        masked_fraction=float(np.mean([pl.masked_fraction for pl in labels])),
        loss_src=float(np.mean([l[1] for l in losses])) if losses else float("nan"),
        loss_tgt=float(np.mean([l[2] for l in losses])) if losses else float("nan"),
        psnr_val=psnr_val, ssim_val=ssim_val,
        seconds=time.perf_counter() - start,
        batch_losses=losses, pseudo_labels=labels)
    log.info("round %d p=%.2f eps=%.4g loss_src=%.4f loss_tgt=%.4f psnr_val=%.2f",
             round_index, p, report.epsilon_mean, report.loss_src, report.loss_tgt, psnr_val)
    return params, report


def write_reports_csv(path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


def run_gst(config: GstConfig, params: TranslatorParams, source, x_t: np.ndarray,
            out_dir=None, validation=None):
    """Rounds r = 0..R-1 at linearly increasing p, starting from pretrained ``params``.

    With ``out_dir`` set, writes ``round_<r>.ckpt`` after each round and
    ``rounds.csv`` with one row per round.
    """
    reports = []
    out = Path(out_dir) if out_dir is not None else None
    for r, p in enumerate(p_schedule(config)):
        params, report = adapt_round(params, source, x_t, p, config, round_index=r, validation=validation)
        reports.append(report)
        if out is not None:
            save_checkpoint(params, out / f"round_{r}.ckpt", {"stage": "adapt", "round": r, "p": p})
            write_reports_csv(out / "rounds.csv", reports)
    return params, reports

