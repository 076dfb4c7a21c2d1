"""The multimodal POE-VAE with an auxiliary-data branch, and its training loop.

Paired samples (image + attribute) go through every modality encoder, are
fused with the prior, and reconstruct every modality from the joint latent;
with skip connections each modality also reconstructs itself from its own
latent. Auxiliary samples carry only an image: they reuse the image
encoder/decoder and optionally supervise a pseudo-attribute decoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objective
from .neural_core import AdamState, Mlp, adam_step
from .poe import (
    GaussianExpert,
    LatentSample,
    fuse_experts,
    fuse_experts_backward,
    kl_backward,
    product_of_latents,
    product_of_latents_backward,
    reparameterize,
    reparameterize_backward,
)

IMAGE = "image"
ATTRIBUTE = "attribute"
FUSIONS = ("poe", "product")


class NumericError(FloatingPointError):
    """Raised when a parameter or loss stops being finite."""


@dataclass
class ModalityConfig:
    name: str
    feature_dim: int
    encoder_hidden: int = 1400
    decoder_hidden: int = 550

    def __post_init__(self):
        if self.feature_dim <= 0 or self.encoder_hidden <= 0 or self.decoder_hidden <= 0:
            raise ValueError(f"modality {self.name!r}: dimensions must be positive")
        if "." in self.name or not self.name:
            raise ValueError(f"bad modality name {self.name!r}")


@dataclass
class ModelConfig:
    modalities: list
    latent_dim: int = 128
    pseudo_dim: int | None = None
    pseudo_hidden: int = 200
    indicator_hidden: int = 64
    skip_connections: bool = True
    fusion: str = "poe"

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if IMAGE not in names:
            raise ValueError("one modality must be named 'image'")
        if len(set(names)) != len(names):
            raise ValueError("duplicate modality names")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @classmethod
    def for_dims(cls, feature_dim: int, attr_dim: int, pseudo_dim: int | None = None,
                 encoder_hidden: int = 1400, decoder_hidden: int = 550, **kw) -> "ModelConfig":
        mods = [
            ModalityConfig(IMAGE, feature_dim, encoder_hidden, decoder_hidden),
            ModalityConfig(ATTRIBUTE, attr_dim, encoder_hidden, decoder_hidden),
        ]
        return cls(mods, pseudo_dim=pseudo_dim, **kw)


class ModelParams:
    """All learnable networks. The auxiliary branch aliases the image networks."""

    def __init__(self, config: ModelConfig, encoders: dict, decoders: dict,
                 pseudo_decoder: Mlp | None, indicator_head: Mlp):
        self.config = config
        self.encoders = encoders
        self.decoders = decoders
        self.pseudo_decoder = pseudo_decoder
        self.indicator_head = indicator_head
        self._check()

    def _check(self):
        d = self.config.latent_dim
        for m in self.config.modalities:
            enc, dec = self.encoders[m.name], self.decoders[m.name]
            if enc.in_dim != m.feature_dim or enc.out_dim != 2 * d:
                raise ValueError(f"encoder {m.name!r} must map {m.feature_dim} -> {2 * d}")
            if dec.in_dim != d or dec.out_dim != m.feature_dim:
                raise ValueError(f"decoder {m.name!r} must map {d} -> {m.feature_dim}")
        if self.indicator_head.in_dim != d or self.indicator_head.out_dim != 1:
            raise ValueError("indicator head must map latent -> 1")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d = config.latent_dim
        encoders, decoders = {}, {}
        for m in config.modalities:
            encoders[m.name] = Mlp.build([m.feature_dim, m.encoder_hidden, 2 * d], "relu", "identity", rng)
            decoders[m.name] = Mlp.build([d, m.decoder_hidden, m.feature_dim], "relu", "identity", rng)
        pseudo = None
        if config.pseudo_dim:
            pseudo = Mlp.build([d, config.pseudo_hidden, config.pseudo_dim], "relu", "identity", rng)
        head = Mlp.build([d, config.indicator_hidden, 1], "relu", "sigmoid", rng)
        return cls(config, encoders, decoders, pseudo, head)

    @property
    def image_encoder(self) -> Mlp:
        return self.encoders[IMAGE]

    @property
    def image_decoder(self) -> Mlp:
        return self.decoders[IMAGE]

    def networks(self):
        for name in self.config.names:
            yield f"encoder.{name}.", self.encoders[name]
        for name in self.config.names:
            yield f"decoder.{name}.", self.decoders[name]
        if self.pseudo_decoder is not None:
            yield "pseudo_decoder.", self.pseudo_decoder
        yield "indicator_head.", self.indicator_head

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, keyed by stable names."""
        out = {}
        for prefix, net in self.networks():
            out.update(net.named_parameters(prefix))
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.named_parameters().items()}

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors(
            {k: v.copy() for k, v in self.named_parameters().items()},
            skip_connections=self.config.skip_connections,
            fusion=self.config.fusion,
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.named_parameters().values())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], skip_connections: bool = True,
                     fusion: str = "poe") -> "ModelParams":
        """Rebuild the model from named tensors, inferring every width from the shapes."""
        from .neural_core import DenseLayer

        groups: dict[str, dict[int, dict[str, np.ndarray]]] = {}
        for name, arr in tensors.items():
            prefix, idx, kind = name.rsplit(".", 2)
            groups.setdefault(prefix, {}).setdefault(int(idx), {})[kind] = np.asarray(arr, dtype=np.float64)

        def net(prefix, out_act):
            layers = groups[prefix]
            n = len(layers)
            return Mlp([
                DenseLayer(layers[k]["weight"], layers[k]["bias"], out_act if k == n - 1 else "relu")
                for k in range(n)
            ])

        names = [p.split(".", 1)[1] for p in groups if p.startswith("encoder.")]
        encoders = {n: net(f"encoder.{n}", "identity") for n in names}
        decoders = {n: net(f"decoder.{n}", "identity") for n in names}
        pseudo = net("pseudo_decoder", "identity") if "pseudo_decoder" in groups else None
        head = net("indicator_head", "sigmoid")
        latent = encoders[names[0]].out_dim // 2
        mods = [
            ModalityConfig(n, encoders[n].in_dim, encoders[n].layers[0].out_dim, decoders[n].layers[0].out_dim)
            for n in names
        ]
        cfg = ModelConfig(
            mods,
            latent_dim=latent,
            pseudo_dim=pseudo.out_dim if pseudo else None,
            pseudo_hidden=pseudo.layers[0].out_dim if pseudo else 200,
            indicator_hidden=head.layers[0].out_dim,
            skip_connections=skip_connections,
            fusion=fusion,
        )
        return cls(cfg, encoders, decoders, pseudo, head)


# --- samples and traces ---------------------------------------------------------

@dataclass
class TrainingSample:
    features: dict
    indicator: int
    pseudo_attribute: np.ndarray | None = None
    label: int | None = None


@dataclass
class ForwardTrace:
    indicator: int
    inputs: dict
    experts: dict
    fused: GaussianExpert
    joint: LatentSample
    reconstructions: dict
    alpha_hat: np.ndarray
    skip: dict = field(default_factory=dict)
    pseudo_pred: np.ndarray | None = None
    pseudo_target: np.ndarray | None = None
    pseudo_mask: np.ndarray | None = None
    caches: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.joint.z.shape[0]

    @property
    def z(self):
        return self.joint.z


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _noise(source, shape):
    if source is None:
        return np.zeros(shape)
    if isinstance(source, np.random.Generator):
        return source.standard_normal(shape)
    return np.asarray(source(shape), dtype=np.float64)


def _encode(params: ModelParams, modality: str, feature):
    if modality not in params.encoders:
        raise KeyError(f"unknown modality {modality!r}")
    out, cache = params.encoders[modality].forward(feature)
    return GaussianExpert.from_params(out), cache


def encode(params: ModelParams, modality: str, feature) -> GaussianExpert:
    """Expert q(z | modality) for one vector or a batch of rows."""
    return _encode(params, modality, feature)[0]


def fuse(params: ModelParams, experts: list[GaussianExpert]) -> GaussianExpert:
    if params.config.fusion == "poe":
        return fuse_experts(experts, include_prior=True)
    return product_of_latents(experts)


def _fuse_backward(params, experts, fused, g_mean, g_log_var):
    if params.config.fusion == "poe":
        return fuse_experts_backward(experts, fused, g_mean, g_log_var)
    return product_of_latents_backward(experts, fused, g_mean, g_log_var)


def forward_paired(params: ModelParams, features: dict, noise_source=None) -> ForwardTrace:
    """Joint pass for paired rows; ``features`` maps every modality to a row batch."""
    cfg = params.config
    missing = set(cfg.names) - set(features)
    if missing:
        raise ValueError(f"paired sample is missing modalities {sorted(missing)}")
    inputs = {m: _rows(features[m]) for m in cfg.names}
    caches = {}
    experts = {}
    for m in cfg.names:
        experts[m], caches[f"enc.{m}"] = _encode(params, m, inputs[m])
    fused = fuse(params, [experts[m] for m in cfg.names])
    joint = reparameterize(fused, _noise(noise_source, fused.mean.shape))
    recons = {}
    for m in cfg.names:
        recons[m], caches[f"dec.{m}"] = params.decoders[m].forward(joint.z)
    skip = {}
    if cfg.skip_connections:
        for m in cfg.names:
            s = reparameterize(experts[m], _noise(noise_source, experts[m].mean.shape))
            x_hat, caches[f"skip.{m}"] = params.decoders[m].forward(s.z)
            skip[m] = (s, x_hat)
    alpha, caches["head"] = params.indicator_head.forward(joint.z)
    return ForwardTrace(1, inputs, experts, fused, joint, recons, alpha[:, 0], skip, caches=caches)


def forward_aud(params: ModelParams, image, pseudo_target=None, noise_source=None,
                attribute=None) -> ForwardTrace:
    """Image-only pass for auxiliary rows.

    ``pseudo_target`` may contain NaN rows for samples without a pseudo-attribute.
    """
    if attribute is not None:
        raise ValueError("auxiliary samples must not carry an attribute")
    x = _rows(image)
    caches = {}
    expert, caches[f"enc.{IMAGE}"] = _encode(params, IMAGE, x)
    fused = fuse(params, [expert])
    joint = reparameterize(fused, _noise(noise_source, fused.mean.shape))
    x_hat, caches[f"dec.{IMAGE}"] = params.image_decoder.forward(joint.z)
    trace = ForwardTrace(0, {IMAGE: x}, {IMAGE: expert}, fused, joint, {IMAGE: x_hat}, None, caches=caches)
    if pseudo_target is not None and params.pseudo_decoder is not None:
        target = _rows(pseudo_target)
        mask = ~np.any(np.isnan(target), axis=1)
        if mask.any():
            pred, caches["pseudo"] = params.pseudo_decoder.forward(joint.z)
            trace.pseudo_pred = pred
            trace.pseudo_target = target
            trace.pseudo_mask = mask
    alpha, caches["head"] = params.indicator_head.forward(joint.z)
    trace.alpha_hat = alpha[:, 0]
    return trace


def forward(params: ModelParams, sample: TrainingSample, noise_source=None) -> ForwardTrace:
    if sample.indicator == 1:
        return forward_paired(params, sample.features, noise_source)
    extra = set(sample.features) - {IMAGE}
    if extra:
        raise ValueError(f"auxiliary sample carries extra modalities {sorted(extra)}")
    return forward_aud(params, sample.features[IMAGE], sample.pseudo_attribute, noise_source)


# --- backward -------------------------------------------------------------------

def _accumulate(grads, prefix, layer_grads):
    for k, (dW, db) in enumerate(layer_grads):
        grads[f"{prefix}{k}.weight"] += dW
        grads[f"{prefix}{k}.bias"] += db


def backward(params: ModelParams, trace: ForwardTrace, beta: float, gamma: float,
             weight: float, grads: dict) -> None:
    """Add ``weight * d(sum of per-row totals)/d(params)`` into ``grads``."""
    c = trace.caches
    g_z = np.zeros_like(trace.z)
    for m, x_hat in trace.reconstructions.items():
        g = (x_hat - trace.inputs[m]) * weight
        lg, gz = params.decoders[m].backward(g, c[f"dec.{m}"])
        _accumulate(grads, f"decoder.{m}.", lg)
        g_z += gz
    g_alpha = objective.indicator_loss_grad(trace.alpha_hat, trace.indicator) * weight
    lg, gz = params.indicator_head.backward(g_alpha[:, None], c["head"])
    _accumulate(grads, "indicator_head.", lg)
    g_z += gz
    if trace.pseudo_pred is not None:
        g = np.zeros_like(trace.pseudo_pred)
        mask = trace.pseudo_mask
        g[mask] = gamma * weight * np.sign(trace.pseudo_pred[mask] - trace.pseudo_target[mask])
        lg, gz = params.pseudo_decoder.backward(g, c["pseudo"])
        _accumulate(grads, "pseudo_decoder.", lg)
        g_z += gz

    g_mu, g_lv = reparameterize_backward(trace.fused, trace.joint, g_z)
    k_mu, k_lv = kl_backward(trace.fused)
    g_mu = g_mu + beta * weight * k_mu
    g_lv = g_lv + beta * weight * k_lv

    names = list(trace.experts)
    per_expert = _fuse_backward(params, [trace.experts[m] for m in names], trace.fused, g_mu, g_lv)
    expert_grads = {m: [gm, gl] for m, (gm, gl) in zip(names, per_expert)}

    for m, (sample, x_hat) in trace.skip.items():
        g = (x_hat - trace.inputs[m]) * weight
        lg, gz = params.decoders[m].backward(g, c[f"skip.{m}"])
        _accumulate(grads, f"decoder.{m}.", lg)
        e = trace.experts[m]
        gm, gl = reparameterize_backward(e, sample, gz)
        km, kl = kl_backward(e)
        expert_grads[m][0] = expert_grads[m][0] + gm + beta * weight * km
        expert_grads[m][1] = expert_grads[m][1] + gl + beta * weight * kl

    for m, (gm, gl) in expert_grads.items():
        lg, _ = params.encoders[m].backward(np.concatenate([gm, gl], axis=-1), c[f"enc.{m}"])
        _accumulate(grads, f"encoder.{m}.", lg)


def batch_loss_and_grads(params: ModelParams, traces: list[ForwardTrace], beta: float, gamma: float):
    """Mean loss over all rows of ``traces`` and its gradient."""
    n = sum(t.n for t in traces)
    report = objective.total_loss(traces, beta, gamma, params.config.names)
    grads = params.zero_grads()
    for t in traces:
        backward(params, t, beta, gamma, 1.0 / n, grads)
    return report, grads


# --- training -------------------------------------------------------------------

@dataclass
class Schedules:
    beta: objective.AnnealingSchedule = field(default_factory=objective.beta_schedule)
    gamma: objective.AnnealingSchedule = field(default_factory=objective.gamma_schedule)


@dataclass
class TrainingData:
    """Flat view of the rows a model trains on."""

    paired_image: np.ndarray
    paired_attribute: np.ndarray
    aud_image: np.ndarray
    aud_pseudo: np.ndarray | None

    @property
    def n_paired(self) -> int:
        return len(self.paired_image)

    @property
    def n_aud(self) -> int:
        return len(self.aud_image)

    @classmethod
    def from_dataset(cls, dataset, use_aud: bool = True, use_pseudo: bool = True) -> "TrainingData":
        rows = dataset.paired_train_rows()
        img = dataset.features[rows]
        att = dataset.class_attributes[dataset.labels[rows]]
        aud = dataset.aud_rows if use_aud else np.array([], dtype=np.int64)
        aud_img = dataset.features[aud]
        pseudo = None
        if use_pseudo and dataset.pseudo_attributes is not None:
            pseudo = dataset.pseudo_attributes[aud]
        return cls(img, att, aud_img, pseudo)


def train_epoch(params: ModelParams, data: TrainingData, schedules: Schedules, state: AdamState,
                rng_seed: int, epoch: int = 0, batch_size: int = 32):
    """One pass over shuffled mini-batches with one Adam step per batch.

    Returns ``(params, report)`` where ``report`` is the row-weighted mean of
    the per-batch reports. Raises NumericError on a non-finite loss or parameter.
    """
    n_p, n_a = data.n_paired, data.n_aud
    total = n_p + n_a
    if total == 0:
        raise ValueError("no training rows")
    rng = np.random.default_rng([rng_seed, epoch])
    order = rng.permutation(total)
    beta = schedules.beta.value(epoch)
    gamma = schedules.gamma.value(epoch)
    live = params.named_parameters()
    reports = []
    for start in range(0, total, batch_size):
        idx = order[start:start + batch_size]
        p_idx = idx[idx < n_p]
        a_idx = idx[idx >= n_p] - n_p
        traces = []
        if len(p_idx):
            traces.append(forward_paired(
                params, {IMAGE: data.paired_image[p_idx], ATTRIBUTE: data.paired_attribute[p_idx]}, rng))
        if len(a_idx):
            pseudo = data.aud_pseudo[a_idx] if data.aud_pseudo is not None else None
            traces.append(forward_aud(params, data.aud_image[a_idx], pseudo, rng))
        report, grads = batch_loss_and_grads(params, traces, beta, gamma)
        if not np.isfinite(report.total):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        adam_step(live, grads, state)
        reports.append(report)
    if not params.all_finite():
        raise NumericError(f"non-finite parameter after epoch {epoch}")
    return params, objective.average_reports(reports)


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"POEZSL01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams | dict, path) -> None:
    tensors = params.named_parameters() if isinstance(params, ModelParams) else params
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header at offset 8")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}

    def need(k):
        if off + k > len(data):
            raise CheckpointError(f"{path}: truncated at offset {off}")

    while off < len(data):
        need(2)
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        need(nlen + 1)
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        rank = data[off]
        off += 1
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims).copy()
        off += nbytes
    return out
