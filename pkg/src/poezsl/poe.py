"""Diagonal Gaussian experts, product-of-experts fusion, sampling, and KL.

Experts may carry a leading batch axis; every operation is elementwise over
the latent dimension, so ``mean`` can be ``(d,)`` or ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianExpert:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mean.shape != log_var.shape:
            raise ValueError(f"mean {mean.shape} and log_var {log_var.shape} differ in shape")
        if not np.all(np.isfinite(log_var)):
            raise ValueError("log_var must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def precision(self) -> np.ndarray:
        return np.exp(-self.log_var)

    @classmethod
    def standard(cls, shape) -> "GaussianExpert":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_params(cls, params: np.ndarray) -> "GaussianExpert":
        """Split an encoder output ``[mean | log_var]`` along the last axis."""
        params = np.asarray(params, dtype=np.float64)
        d = params.shape[-1] // 2
        if params.shape[-1] != 2 * d:
            raise ValueError("encoder output width must be even")
        return cls(params[..., :d], params[..., d:])


@dataclass(frozen=True)
class LatentSample:
    z: np.ndarray
    noise: np.ndarray


def _check_dims(experts):
    shape = experts[0].mean.shape
    for e in experts[1:]:
        if e.mean.shape != shape:
            raise ValueError(f"expert shapes differ: {shape} vs {e.mean.shape}")
    return shape


def fuse_experts(experts: list[GaussianExpert], include_prior: bool = True,
                 dim: int | None = None) -> GaussianExpert:
    """Precision-weighted product of Gaussian experts, optionally with N(0, I).

    With no experts the result is the prior alone, which needs ``dim``.
    """
    experts = list(experts)
    if not experts:
        if not include_prior:
            raise ValueError("nothing to fuse: empty expert list and no prior")
        if dim is None:
            raise ValueError("prior-only fusion needs the latent dimension")
        return GaussianExpert.standard(dim)
    _check_dims(experts)
    precisions = [e.precision for e in experts]
    total = sum(precisions)
    if include_prior:
        total = total + 1.0
    weighted = sum(e.mean * t for e, t in zip(experts, precisions))
    return GaussianExpert(weighted / total, -np.log(total))


def fuse_experts_backward(experts, fused: GaussianExpert, g_mean, g_log_var):
    """Gradients of a loss w.r.t. each expert's (mean, log_var) given those w.r.t. the fused expert."""
    total = np.exp(-fused.log_var)
    out = []
    for e in experts:
        w = e.precision / total
        gm = g_mean * w
        gl = -g_mean * w * (e.mean - fused.mean) + g_log_var * w
        out.append((gm, gl))
    return out


def product_of_latents(experts: list[GaussianExpert]) -> GaussianExpert:
    """Ablation fusion that multiplies per-modality statistics instead of pooling precisions.

    Mean is the elementwise product of expert means and the standard
    deviation the product of expert standard deviations. The prior's unit
    std is a no-op factor; its zero mean is left out since it would collapse
    every product to zero.
    """
    experts = list(experts)
    if not experts:
        raise ValueError("nothing to fuse")
    _check_dims(experts)
    mean = experts[0].mean.copy()
    for e in experts[1:]:
        mean = mean * e.mean
    return GaussianExpert(mean, sum(e.log_var for e in experts))


def product_of_latents_backward(experts, fused, g_mean, g_log_var):
    out = []
    for i in range(len(experts)):
        others = np.ones_like(g_mean)
        for j, e in enumerate(experts):
            if j != i:
                others = others * e.mean
        out.append((g_mean * others, np.array(g_log_var, copy=True)))
    return out


def reparameterize(expert: GaussianExpert, noise) -> LatentSample:
    """z = mean + noise * std."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != expert.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match expert {expert.mean.shape}")
    return LatentSample(expert.mean + noise * expert.std, noise)


def reparameterize_backward(expert: GaussianExpert, sample: LatentSample, g_z):
    """Return (d/dmean, d/dlog_var) for upstream gradient ``g_z``."""
    return g_z, g_z * 0.5 * sample.noise * expert.std


def kl_to_standard_normal(q: GaussianExpert) -> np.ndarray:
    """KL(q || N(0, I)), summed over the latent axis."""
    # expm1(v) - v >= 0 exactly; clamp guards the last-ulp rounding near v = 0
    per_dim = q.mean**2 + np.maximum(np.expm1(q.log_var) - q.log_var, 0.0)
    return 0.5 * np.sum(per_dim, axis=-1)


def kl_backward(q: GaussianExpert):
    return q.mean, 0.5 * (q.var - 1.0)
