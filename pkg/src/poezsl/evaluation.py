"""Test-time recognition: latent extraction, latent classifier, GZSL/GFSL metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .model import ATTRIBUTE, IMAGE, ModelParams, encode, fuse
from .neural_core import AdamState, Mlp, adam_step, flatten_grads
from .poe import fuse_experts

FUSED_MEAN = "fused_mean"
SINGLE_MEAN = "single_modality_mean"


@dataclass(frozen=True)
class LatentRepresentation:
    vector: np.ndarray
    source: str


def represent(params: ModelParams, features: dict, prior_for_single: bool = True) -> tuple[np.ndarray, str]:
    """Batched latent means for rows that all carry the same modalities."""
    if not features:
        raise ValueError("sample has no modalities")
    experts = [encode(params, m, x) for m, x in features.items()]
    if len(experts) > 1:
        return fuse(params, experts).mean, FUSED_MEAN
    e = experts[0]
    if prior_for_single and params.config.fusion == "poe":
        return fuse_experts([e], include_prior=True).mean, SINGLE_MEAN
    return e.mean, SINGLE_MEAN


def extract_representation(params: ModelParams, sample: dict, prior_for_single: bool = True) -> LatentRepresentation:
    """Deterministic latent for one sample given as ``{modality: vector}``.

    Paired samples give the fused mean. A lone modality gives its expert's
    mean, fused with the prior unless ``prior_for_single`` is off.
    """
    vec, source = represent(params, {m: np.asarray(v, dtype=np.float64)[None, :] for m, v in sample.items()},
                            prior_for_single)
    return LatentRepresentation(vec[0], source)


# --- classifier training set ------------------------------------------------------

@dataclass
class LatentSet:
    latents: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def unseen_support_split(dataset: Dataset, seed: int, max_shots: int = 10):
    """Per unseen class, a seeded pool of ``max_shots`` support rows and the remaining test rows.

    The pool is fixed for a given seed so that every k <= max_shots is scored
    on the same unseen test rows.
    """
    rng = np.random.default_rng([seed, 7919])
    support, test = {}, []
    for c in dataset.unseen_classes:
        rows = np.flatnonzero(dataset.labels == c)
        rows = rows[rng.permutation(len(rows))]
        support[int(c)] = rows[:max_shots]
        test.append(rows[max_shots:])
    test = np.sort(np.concatenate(test)) if test else np.array([], dtype=np.int64)
    return support, test


def build_classifier_trainset(params: ModelParams, dataset: Dataset, k_shot: int, seed: int = 0,
                              max_shots: int = 10, prior_for_single: bool = True) -> LatentSet:
    """Seen paired training latents, one attribute latent per unseen class, and k image latents per unseen class."""
    if k_shot < 0:
        raise ValueError("k_shot must be >= 0")
    if k_shot > max_shots:
        raise ValueError(f"k_shot {k_shot} exceeds the reserved support pool of {max_shots}")
    support, _ = unseen_support_split(dataset, seed, max_shots)
    for c, rows in support.items():
        if len(rows) < k_shot:
            raise ValueError(f"unseen class {c} has only {len(rows)} support samples, need {k_shot}")
    rows = dataset.paired_train_rows()
    parts, labels = [], []
    if len(rows):
        lat, _ = represent(params, {IMAGE: dataset.features[rows],
                                    ATTRIBUTE: dataset.class_attributes[dataset.labels[rows]]})
        parts.append(lat)
        labels.append(dataset.labels[rows])
    unseen = dataset.unseen_classes
    lat, _ = represent(params, {ATTRIBUTE: dataset.class_attributes[unseen]}, prior_for_single)
    parts.append(lat)
    labels.append(unseen)
    if k_shot:
        shot_rows = np.concatenate([support[int(c)][:k_shot] for c in unseen])
        lat, _ = represent(params, {IMAGE: dataset.features[shot_rows]}, prior_for_single)
        parts.append(lat)
        labels.append(dataset.labels[shot_rows])
    return LatentSet(np.concatenate(parts), np.concatenate(labels).astype(np.int64))


def build_testset(params: ModelParams, dataset: Dataset, seed: int = 0, max_shots: int = 10,
                  prior_for_single: bool = True) -> LatentSet:
    """Image-only latents for seen test rows and the unseen rows outside the support pool."""
    _, unseen_test = unseen_support_split(dataset, seed, max_shots)
    rows = np.concatenate([dataset.seen_test_rows(), unseen_test])
    lat, _ = represent(params, {IMAGE: dataset.features[rows]}, prior_for_single)
    return LatentSet(lat, dataset.labels[rows])


# --- classifier -----------------------------------------------------------------

class LatentClassifier:
    """One-hidden-layer softmax classifier over latent means."""

    def __init__(self, net: Mlp, classes: np.ndarray):
        self.net = net
        self.classes = np.asarray(classes, dtype=np.int64)
        self.history: list[float] = []

    def logits(self, latents) -> np.ndarray:
        return self.net(latents)

    def predict_proba(self, latents) -> np.ndarray:
        z = self.logits(latents)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, latents) -> np.ndarray:
        return self.classes[np.argmax(self.logits(latents), axis=-1)]


def _cross_entropy(logits, targets, weights):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(targets)
    loss = -np.sum(weights * logp[np.arange(n), targets]) / np.sum(weights)
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    g *= (weights / np.sum(weights))[:, None]
    return loss, g


def train_latent_classifier(trainset: LatentSet, epochs: int = 50, seed: int = 0, hidden: int = 100,
                            lr: float = 1e-3, batch_size: int = 32, balanced: bool = True,
                            classes=None) -> LatentClassifier:
    """Cross-entropy training with Adam on seeded mini-batches.

    With ``balanced`` each class carries equal total weight, so an unseen
    class represented by a single prototype is not swamped by seen classes.
    """
    classes = np.unique(trainset.labels) if classes is None else np.asarray(classes, dtype=np.int64)
    counts = np.array([(trainset.labels == c).sum() for c in classes])
    if np.any(counts == 0):
        raise ValueError(f"class {int(classes[np.argmax(counts == 0)])} has no training examples")
    lookup = {int(c): i for i, c in enumerate(classes)}
    targets = np.array([lookup[int(c)] for c in trainset.labels])
    weights = 1.0 / counts[targets] if balanced else np.ones(len(targets))
    weights = weights * len(targets) / weights.sum()

    rng = np.random.default_rng(seed)
    net = Mlp.build([trainset.latents.shape[1], hidden, len(classes)], "relu", "identity", rng)
    clf = LatentClassifier(net, classes)
    params = dict(net.named_parameters())
    state = AdamState(learning_rate=lr)
    clf.history.append(_cross_entropy(net(trainset.latents), targets, weights)[0])
    n = len(targets)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = net.forward(trainset.latents[idx])
            _, g = _cross_entropy(out, targets[idx], weights[idx])
            grads, _ = net.backward(g, cache)
            adam_step(params, flatten_grads(net, grads), state)
        clf.history.append(_cross_entropy(net(trainset.latents), targets, weights)[0])
    return clf


# --- metrics --------------------------------------------------------------------

def harmonic_mean(s: float, u: float) -> float:
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


@dataclass(frozen=True)
class GzslMetrics:
    seen_acc: float
    unseen_acc: float
    harmonic: float
    top1: float

    @classmethod
    def from_accuracies(cls, s: float, u: float, top1: float | None = None) -> "GzslMetrics":
        return cls(s, u, harmonic_mean(s, u), (s + u) / 2 if top1 is None else top1)

    def to_json(self, k_shot: int = 0, missing_fraction: float = 0.0, seed: int = 0) -> str:
        return json.dumps(self.record(k_shot, missing_fraction, seed))

    def record(self, k_shot: int = 0, missing_fraction: float = 0.0, seed: int = 0) -> dict:
        return {"S": self.seen_acc, "U": self.unseen_acc, "H": self.harmonic, "top1": self.top1,
                "k_shot": int(k_shot), "missing_fraction": float(missing_fraction), "seed": int(seed)}


def per_class_accuracy(pred, labels, classes) -> float:
    """Mean over ``classes`` (present in ``labels``) of within-class accuracy."""
    accs = [np.mean(pred[labels == c] == c) for c in classes if np.any(labels == c)]
    return float(np.mean(accs)) if accs else 0.0


def metrics_from_predictions(pred, labels, seen_classes, unseen_classes) -> GzslMetrics:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    known = np.union1d(seen_classes, unseen_classes)
    unknown = labels[~np.isin(labels, known)]
    if unknown.size:
        raise ValueError(f"test label {int(unknown[0])} is neither seen nor unseen")
    s = per_class_accuracy(pred, labels, seen_classes)
    u = per_class_accuracy(pred, labels, unseen_classes)
    top1 = per_class_accuracy(pred, labels, np.unique(labels))
    return GzslMetrics(s, u, harmonic_mean(s, u), top1)


def gzsl_metrics(classifier, latents, labels, seen_classes, unseen_classes) -> GzslMetrics:
    """Per-class-averaged seen/unseen accuracy and their harmonic mean."""
    return metrics_from_predictions(classifier.predict(latents), labels, seen_classes, unseen_classes)


def evaluate(params: ModelParams, dataset: Dataset, k_shot: int = 0, seed: int = 0, epochs: int = 50,
             max_shots: int = 10, prior_for_single: bool = True, balanced: bool = True) -> GzslMetrics:
    """Full recognition protocol for one k."""
    train = build_classifier_trainset(params, dataset, k_shot, seed, max_shots, prior_for_single)
    test = build_testset(params, dataset, seed, max_shots, prior_for_single)
    classes = np.union1d(dataset.seen_classes, dataset.unseen_classes)
    clf = train_latent_classifier(train, epochs=epochs, seed=seed, balanced=balanced, classes=classes)
    return gzsl_metrics(clf, test.latents, test.labels, dataset.seen_classes, dataset.unseen_classes)
