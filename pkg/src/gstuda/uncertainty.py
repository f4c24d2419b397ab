"""MC-dropout sampling, per-pixel uncertainty maps and top-p% mask selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .translator import TranslatorParams, forward


@dataclass
class UncertaintyBundle:
    mu: np.ndarray
    u_epistemic: np.ndarray
    u_aleatoric: np.ndarray
    u_total: np.ndarray
    sigma2_mean: np.ndarray

    def for_ablation(self, ablation: str) -> np.ndarray:
        """The map that drives mask selection: full -> total, gst_a -> epistemic, gst_e -> aleatoric."""
        if ablation == "full":
            return self.u_total
        if ablation == "gst_a":
            return self.u_epistemic
        if ablation == "gst_e":
            return self.u_aleatoric
        raise ValueError(f"unknown ablation {ablation!r}")


@dataclass
class PseudoLabelSet:
    y_hat: np.ndarray
    mask: np.ndarray
    epsilon: float
    p: float

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.sum()) / self.mask.size


def mc_sample(params: TranslatorParams, x_t: np.ndarray, K: int = 20,
              rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """K dropout-active forward passes of one image (or a stack of images).

    Returns (means, log_vars), each shaped [K, *x_t.shape]. All K passes run as
    one batch, each with its own dropout realization.
    """
    if K < 2:
        raise ValueError("K must be >= 2 for a variance estimate")
    if rng is None:
        rng = np.random.default_rng(params.config.seed)
    x = np.asarray(x_t, dtype=params.dtype)
    single = x.ndim == 3
    stack = x[None] if single else x
    batch = np.repeat(stack[None], K, axis=0).reshape((K * len(stack),) + stack.shape[1:])
    mean, log_var = forward(params, batch, mc_mode=True, rng=rng)
    shape = (K,) + x.shape
    return mean.data.reshape(shape), log_var.data.reshape(shape)


def epistemic_map(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and population variance (divisor K) across axis 0."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("need K >= 2 samples")
    mu = samples.mean(axis=0)
    u = ((samples - mu) ** 2).mean(axis=0)
    return mu, u


def aleatoric_map(log_var_samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average predicted variance exp(log_var) across axis 0; returned twice (u, sigma2_mean)."""
    log_var_samples = np.asarray(log_var_samples, dtype=np.float64)
    if log_var_samples.shape[0] < 2:
        raise ValueError("need K >= 2 samples")
    u = np.exp(log_var_samples).mean(axis=0)
    return u, u.copy()


def bundle_from_samples(means: np.ndarray, log_vars: np.ndarray, scale: float = 1.0) -> UncertaintyBundle:
    """Combine K samples into the uncertainty maps.

    ``mu`` stays in network units. The epistemic variance is measured on
    ``scale * means`` so it shares units with the predicted variance, which is
    trained against residuals on that same intensity scale.
    """
    mu, u_epi = epistemic_map(means)
    if scale != 1.0:
        u_epi = u_epi * scale ** 2
    u_ale, sigma2 = aleatoric_map(log_vars)
    return UncertaintyBundle(mu=mu, u_epistemic=u_epi, u_aleatoric=u_ale,
                             u_total=u_epi + u_ale, sigma2_mean=sigma2)


def estimate(params: TranslatorParams, x_t: np.ndarray, K: int = 20,
             rng: np.random.Generator | None = None, scale: float = 1.0) -> UncertaintyBundle:
    return bundle_from_samples(*mc_sample(params, x_t, K, rng), scale=scale)


def select_count(n: int, p: float) -> int:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    # guard against p*n landing a hair below an integer, e.g. 0.3*10
    k = int(np.floor(p * n + 1e-9))
    if k == 0:
        raise ValueError(f"p={p} selects no pixels out of {n}; use a larger p")
    return k


def select_mask(u_total: np.ndarray, p: float) -> tuple[np.ndarray, float]:
    """Select the floor(p*N) lowest-uncertainty pixels.

    Ties are broken by ascending flat index. Returns a mask of u_total's shape
    (dtype float32, values 0/1) and epsilon, the largest selected value.
    """
    u = np.asarray(u_total)
    flat = u.reshape(-1)
    k = select_count(flat.size, p)
    order = np.argsort(flat, kind="stable")
    chosen = order[:k]
    mask = np.zeros(flat.size, dtype=np.float32)
    mask[chosen] = 1.0
    return mask.reshape(u.shape), float(flat[order[k - 1]])


def make_pseudo_labels(bundle: UncertaintyBundle, p: float, ablation: str = "full") -> PseudoLabelSet:
    mask, eps = select_mask(bundle.for_ablation(ablation), p)
    return PseudoLabelSet(y_hat=np.array(bundle.mu, copy=True), mask=mask, epsilon=eps, p=p)


def select_masks_global(u_maps: list[np.ndarray], p: float) -> tuple[list[np.ndarray], float]:
    """One threshold over every pixel of every image; ties by (image, pixel) order."""
    stacked = np.stack([np.asarray(u) for u in u_maps])
    mask, eps = select_mask(stacked, p)
    return list(mask), eps
