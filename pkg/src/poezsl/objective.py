"""Loss terms, their per-sample assembly, and the beta/gamma annealing ramps.

All losses are minimized quantities (negated ELBOs). Reconstruction uses a
unit-variance Gaussian likelihood, i.e. half the squared error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .poe import GaussianExpert, kl_to_standard_normal

ALPHA_CLAMP = 1e-7


def _same_width(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def reconstruction_nll(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    _same_width(x, x_hat, "reconstruction")
    return 0.5 * np.sum((x - x_hat) ** 2, axis=-1)


def elbo_joint(inputs: dict, reconstructions: dict, fused: GaussianExpert, beta: float):
    """Summed reconstruction loss over every present modality plus beta * KL(fused || prior)."""
    if not inputs:
        raise ValueError("elbo_joint needs at least one modality")
    if set(inputs) != set(reconstructions):
        raise ValueError(f"reconstructions {sorted(reconstructions)} do not match inputs {sorted(inputs)}")
    recon = sum(reconstruction_nll(inputs[m], reconstructions[m]) for m in inputs)
    return recon + beta * kl_to_standard_normal(fused)


def elbo_skip(x, x_hat, posterior: GaussianExpert, beta: float):
    """Self-reconstruction loss of one modality from its own latent."""
    return reconstruction_nll(x, x_hat) + beta * kl_to_standard_normal(posterior)


def aud_loss(predicted_pseudo, target_pseudo):
    """L1 distance between decoded and supplied pseudo-attributes."""
    p = np.asarray(predicted_pseudo, dtype=np.float64)
    t = np.asarray(target_pseudo, dtype=np.float64)
    _same_width(p, t, "pseudo-attribute")
    return np.sum(np.abs(p - t), axis=-1)


def indicator_loss(alpha_hat, indicator):
    """Binary cross-entropy of the pairedness head."""
    a = np.clip(np.asarray(alpha_hat, dtype=np.float64), ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    y = np.asarray(indicator, dtype=np.float64)
    return -(y * np.log(a) + (1.0 - y) * np.log(1.0 - a))


def indicator_loss_grad(alpha_hat, indicator):
    a = np.asarray(alpha_hat, dtype=np.float64)
    y = np.asarray(indicator, dtype=np.float64)
    inside = (a > ALPHA_CLAMP) & (a < 1.0 - ALPHA_CLAMP)
    ac = np.clip(a, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    return np.where(inside, -y / ac + (1.0 - y) / (1.0 - ac), 0.0)


# --- annealing ----------------------------------------------------------------

@dataclass(frozen=True)
class AnnealingSchedule:
    """Linear ramp: ``rate * clamp(epoch - start_epoch, 0, end_epoch - start_epoch)``."""

    kind: str
    rate: float
    start_epoch: int = 0
    end_epoch: int = 85

    def __post_init__(self):
        if self.kind not in ("beta", "gamma"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.end_epoch < self.start_epoch:
            raise ValueError("end_epoch precedes start_epoch")

    def value(self, epoch: int) -> float:
        return schedule_value(self, epoch)

    @property
    def final_value(self) -> float:
        return self.value(self.end_epoch)


def schedule_value(schedule: AnnealingSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    span = min(max(epoch - schedule.start_epoch, 0), schedule.end_epoch - schedule.start_epoch)
    return schedule.rate * span


def beta_schedule(rate: float = 0.0035, end_epoch: int = 85) -> AnnealingSchedule:
    return AnnealingSchedule("beta", rate, 0, end_epoch)


def gamma_schedule(rate: float = 0.005, start_epoch: int = 10, end_epoch: int = 56) -> AnnealingSchedule:
    return AnnealingSchedule("gamma", rate, start_epoch, end_epoch)


def gamma_schedule_to(final: float, start_epoch: int = 10, end_epoch: int = 56) -> AnnealingSchedule:
    """Gamma ramp over the default window that ends at ``final``."""
    span = end_epoch - start_epoch
    return AnnealingSchedule("gamma", final / span if span else 0.0, start_epoch, end_epoch)


# --- assembly -----------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    recon_per_modality: dict
    kl_joint: float
    recon_skip_per_modality: dict
    kl_skip_per_modality: dict
    l_aud: float
    indicator_loss: float
    total: float
    beta: float
    gamma: float
    count: int = 1

    def weighted_sum(self) -> float:
        """Recompute the total from the parts."""
        return (
            sum(self.recon_per_modality.values())
            + self.beta * self.kl_joint
            + sum(self.recon_skip_per_modality.values())
            + self.beta * sum(self.kl_skip_per_modality.values())
            + self.gamma * self.l_aud
            + self.indicator_loss
        )

    def as_dict(self) -> dict:
        return {
            "recon": dict(self.recon_per_modality),
            "kl_joint": self.kl_joint,
            "recon_skip": dict(self.recon_skip_per_modality),
            "kl_skip": dict(self.kl_skip_per_modality),
            "l_aud": self.l_aud,
            "indicator_loss": self.indicator_loss,
            "total": self.total,
            "beta": self.beta,
            "gamma": self.gamma,
            "count": self.count,
        }

    def is_finite(self) -> bool:
        vals = [self.kl_joint, self.l_aud, self.indicator_loss, self.total]
        for d in (self.recon_per_modality, self.recon_skip_per_modality, self.kl_skip_per_modality):
            vals.extend(d.values())
        return bool(np.all(np.isfinite(vals)))


@dataclass
class SampleTerms:
    """Per-row loss pieces for a group of samples; absent terms are zero."""

    recon: dict = field(default_factory=dict)
    kl_joint: np.ndarray = None
    recon_skip: dict = field(default_factory=dict)
    kl_skip: dict = field(default_factory=dict)
    l_aud: np.ndarray = None
    indicator: np.ndarray = None
    beta: float = 0.0
    gamma: float = 0.0

    def totals(self) -> np.ndarray:
        t = sum(self.recon.values()) + self.beta * self.kl_joint
        t = t + sum(self.recon_skip.values(), np.zeros_like(t))
        t = t + self.beta * sum(self.kl_skip.values(), np.zeros_like(t))
        return t + self.gamma * self.l_aud + self.indicator


def sample_terms(trace, beta: float, gamma: float, modalities) -> SampleTerms:
    """Per-row loss pieces for a paired or auxiliary trace.

    Paired rows: joint ELBO over all modalities + skip ELBOs + indicator BCE.
    Auxiliary rows: image-only ELBO + gamma * L1 pseudo-attribute loss
    (only where a target exists) + indicator BCE.
    """
    n = trace.n
    zeros = np.zeros(n)
    if trace.indicator == 1:
        missing = set(modalities) - set(trace.inputs)
        if missing:
            raise ValueError(f"paired sample is missing modalities {sorted(missing)}")
    else:
        if len(trace.experts) != 1:
            raise ValueError(
                f"auxiliary sample must carry only the image expert, got {sorted(trace.experts)}"
            )
    recon = {m: zeros.copy() for m in modalities}
    for m in trace.reconstructions:
        recon[m] = reconstruction_nll(trace.inputs[m], trace.reconstructions[m])
    kl_joint = kl_to_standard_normal(trace.fused)
    recon_skip = {m: zeros.copy() for m in modalities}
    kl_skip = {m: zeros.copy() for m in modalities}
    for m, (_, x_hat) in trace.skip.items():
        recon_skip[m] = reconstruction_nll(trace.inputs[m], x_hat)
        kl_skip[m] = kl_to_standard_normal(trace.experts[m])
    l_aud = zeros.copy()
    if trace.pseudo_pred is not None:
        mask = trace.pseudo_mask
        l_aud[mask] = aud_loss(trace.pseudo_pred[mask], trace.pseudo_target[mask])
    ind = indicator_loss(trace.alpha_hat, np.full(n, trace.indicator))
    return SampleTerms(recon, kl_joint, recon_skip, kl_skip, l_aud, ind, beta, gamma)


def merge_terms(parts: list[SampleTerms]) -> SampleTerms:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ValueError("no terms to merge")
    beta, gamma = parts[0].beta, parts[0].gamma
    cat = np.concatenate
    return SampleTerms(
        {m: cat([p.recon[m] for p in parts]) for m in parts[0].recon},
        cat([p.kl_joint for p in parts]),
        {m: cat([p.recon_skip[m] for p in parts]) for m in parts[0].recon_skip},
        {m: cat([p.kl_skip[m] for p in parts]) for m in parts[0].kl_skip},
        cat([p.l_aud for p in parts]),
        cat([p.indicator for p in parts]),
        beta,
        gamma,
    )


def report_from_terms(terms: SampleTerms) -> LossReport:
    """Batch-mean LossReport."""
    mean = lambda a: float(np.mean(a))  # noqa: E731
    return LossReport(
        {m: mean(v) for m, v in terms.recon.items()},
        mean(terms.kl_joint),
        {m: mean(v) for m, v in terms.recon_skip.items()},
        {m: mean(v) for m, v in terms.kl_skip.items()},
        mean(terms.l_aud),
        mean(terms.indicator),
        mean(terms.totals()),
        terms.beta,
        terms.gamma,
        len(terms.indicator),
    )


def total_loss(traces, beta: float, gamma: float, modalities) -> LossReport:
    """Mean loss over one or more traces (e.g. the paired and auxiliary halves of a batch)."""
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    return report_from_terms(merge_terms([sample_terms(t, beta, gamma, modalities) for t in traces]))


def average_reports(reports: list[LossReport]) -> LossReport:
    """Row-count-weighted mean of reports that may span different beta/gamma."""
    if not reports:
        raise ValueError("no reports to average")
    w = np.array([r.count for r in reports], dtype=np.float64)
    w = w / w.sum()

    def avg(get):
        return float(sum(wi * get(r) for wi, r in zip(w, reports)))

    mods = list(reports[0].recon_per_modality)
    return LossReport(
        {m: avg(lambda r: r.recon_per_modality[m]) for m in mods},
        avg(lambda r: r.kl_joint),
        {m: avg(lambda r: r.recon_skip_per_modality[m]) for m in mods},
        {m: avg(lambda r: r.kl_skip_per_modality[m]) for m in mods},
        avg(lambda r: r.l_aud),
        avg(lambda r: r.indicator_loss),
        avg(lambda r: r.total),
        avg(lambda r: r.beta),
        avg(lambda r: r.gamma),
        int(sum(r.count for r in reports)),
    )
