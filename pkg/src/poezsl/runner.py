"""Run configuration, end-to-end training/evaluation runs, and the ablation table."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import objective
from .dataio import Dataset, apply_limited_supervision
from .evaluation import GzslMetrics, evaluate
from .model import ModelConfig, ModelParams, Schedules, TrainingData, train_epoch
from .neural_core import AdamState


@dataclass
class RunConfig:
    latent_dim: int = 128
    encoder_hidden: int = 1400
    decoder_hidden: int = 550
    pseudo_hidden: int = 200
    classifier_hidden: int = 100
    indicator_hidden: int = 64
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 1
    beta_rate: float = 0.0035
    beta_end: int = 85
    gamma_rate: float = 0.005
    gamma_start: int = 10
    gamma_end: int = 56
    gamma_final: float | None = None  # overrides gamma_rate so the ramp ends here
    skip_connections: bool = True
    use_aud: bool = True
    use_pseudo_attributes: bool = True
    fusion: str = "poe"
    missing_fraction: float = 0.0
    classifier_epochs: int = 50
    prior_for_single: bool = True

    def schedules(self) -> Schedules:
        beta = objective.AnnealingSchedule("beta", self.beta_rate, 0, self.beta_end)
        if self.gamma_final is not None:
            gamma = objective.gamma_schedule_to(self.gamma_final, self.gamma_start, self.gamma_end)
        else:
            gamma = objective.AnnealingSchedule("gamma", self.gamma_rate, self.gamma_start, self.gamma_end)
        return Schedules(beta, gamma)

    def model_config(self, dataset: Dataset) -> ModelConfig:
        pseudo_dim = dataset.pseudo_dim if (self.use_aud and self.use_pseudo_attributes) else None
        return ModelConfig.for_dims(
            dataset.feature_dim, dataset.attr_dim, pseudo_dim,
            encoder_hidden=self.encoder_hidden, decoder_hidden=self.decoder_hidden,
            latent_dim=self.latent_dim, pseudo_hidden=self.pseudo_hidden,
            indicator_hidden=self.indicator_hidden, skip_connections=self.skip_connections,
            fusion=self.fusion,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    losses: list = field(default_factory=list)
    metrics: dict | None = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)


def prepare_dataset(dataset: Dataset, cfg: RunConfig) -> Dataset:
    if cfg.missing_fraction:
        return apply_limited_supervision(dataset, cfg.missing_fraction, cfg.seed)
    return dataset


def train_model(dataset: Dataset, cfg: RunConfig, callback=None):
    """Train from scratch; returns ``(params, per-epoch LossReports)``."""
    data = TrainingData.from_dataset(dataset, use_aud=cfg.use_aud, use_pseudo=cfg.use_pseudo_attributes)
    params = ModelParams.init(cfg.model_config(dataset), cfg.seed)
    state = AdamState(learning_rate=cfg.learning_rate)
    schedules = cfg.schedules()
    history = []
    for epoch in range(cfg.epochs):
        params, report = train_epoch(params, data, schedules, state, cfg.seed, epoch, cfg.batch_size)
        history.append(report)
        if callback is not None:
            callback(epoch, report)
    return params, history


def run(dataset: Dataset, cfg: RunConfig, k_shots=(0,)) -> tuple[RunRecord, ModelParams, list[GzslMetrics]]:
    """Train and evaluate; the record's metrics are those of the first k."""
    t0 = time.perf_counter()
    ds = prepare_dataset(dataset, cfg)
    params, history = train_model(ds, cfg)
    metrics = [
        evaluate(params, ds, k, cfg.seed, cfg.classifier_epochs, prior_for_single=cfg.prior_for_single)
        for k in k_shots
    ]
    rec = RunRecord(
        cfg.to_dict(),
        [r.as_dict() for r in history],
        metrics[0].record(k_shots[0], cfg.missing_fraction, cfg.seed),
        time.perf_counter() - t0,
    )
    return rec, params, metrics


ABLATIONS = {
    "no_skip": dict(skip_connections=False, use_aud=False, use_pseudo_attributes=False),
    "skip": dict(skip_connections=True, use_aud=False, use_pseudo_attributes=False),
    "skip_aud": dict(skip_connections=True, use_aud=True, use_pseudo_attributes=False),
    "skip_aud_pseudo": dict(skip_connections=True, use_aud=True, use_pseudo_attributes=True),
    "latent_product": dict(skip_connections=True, use_aud=True, use_pseudo_attributes=True, fusion="product"),
}


def ablate(dataset: Dataset, base: RunConfig) -> list[dict]:
    """Run the four component ablations and the fusion-mode comparison under one seed."""
    rows = []
    for name, overrides in ABLATIONS.items():
        cfg = dataclasses.replace(base, **overrides)
        rec, _, _ = run(dataset, cfg)
        rows.append({"name": name, **{k: rec.metrics[k] for k in ("S", "U", "H", "top1")},
                     "final_loss": rec.losses[-1]["total"] if rec.losses else None,
                     "config": rec.config, "wall_time": rec.wall_time})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'config':<18}{'S':>8}{'U':>8}{'H':>8}"]
    for r in rows:
        lines.append(f"{r['name']:<18}{100 * r['S']:8.1f}{100 * r['U']:8.1f}{100 * r['H']:8.1f}")
    return "\n".join(lines)


def smoothed(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")
