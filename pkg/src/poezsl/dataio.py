"""Datasets, their on-disk format, the synthetic benchmark, and split transforms.

Rows are indexed once and never reordered, so row indices stay meaningful
across every transform. Unlabeled rows carry the label ``NO_LABEL``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

NO_LABEL = -1
MATRIX_MAGIC = b"POEMAT01"
LABELS_MAGIC = b"POELBL01"
_U32_NONE = 0xFFFFFFFF


class FormatError(ValueError):
    """Malformed binary file; the message names the byte offset."""


class ValidationError(ValueError):
    """Structurally readable data that violates a dataset invariant."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (rows, feature_dim)
    class_attributes: np.ndarray  # (classes, attr_dim)
    labels: np.ndarray  # (rows,), NO_LABEL for unlabeled rows
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    aud_rows: np.ndarray
    test_rows: np.ndarray
    pseudo_attributes: np.ndarray | None = None  # (rows, pseudo_dim), NaN rows where absent

    def __post_init__(self):
        validate(self)

    @property
    def n_rows(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.class_attributes.shape[1]

    @property
    def pseudo_dim(self) -> int | None:
        return None if self.pseudo_attributes is None else self.pseudo_attributes.shape[1]

    def paired_train_rows(self) -> np.ndarray:
        """Labeled seen-class rows outside the test split."""
        seen = np.isin(self.labels, self.seen_classes)
        mask = seen & ~np.isin(np.arange(self.n_rows), self.test_rows)
        return np.flatnonzero(mask)

    def training_rows(self) -> np.ndarray:
        """Every row a model may see during training: paired rows and auxiliary rows."""
        return np.union1d(self.paired_train_rows(), self.aud_rows)

    def seen_test_rows(self) -> np.ndarray:
        return self.test_rows[np.isin(self.labels[self.test_rows], self.seen_classes)]

    def unseen_rows(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.unseen_classes))

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return all(
            same(getattr(self, f), getattr(other, f))
            for f in ("features", "class_attributes", "labels", "seen_classes",
                      "unseen_classes", "aud_rows", "test_rows", "pseudo_attributes")
        )


def _as_index(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).reshape(-1)


def make_dataset(features, class_attributes, labels, seen_classes, unseen_classes,
                 aud_rows=(), test_rows=(), pseudo_attributes=None) -> Dataset:
    """Build a Dataset, coercing dtypes."""
    pa = None if pseudo_attributes is None else np.asarray(pseudo_attributes, dtype=np.float64)
    return Dataset(
        np.asarray(features, dtype=np.float64),
        np.asarray(class_attributes, dtype=np.float64),
        _as_index(labels),
        np.sort(_as_index(seen_classes)),
        np.sort(_as_index(unseen_classes)),
        np.sort(_as_index(aud_rows)),
        np.sort(_as_index(test_rows)),
        pa,
    )


def validate(d: Dataset) -> None:
    n = len(d.features)
    n_classes = len(d.class_attributes)
    if d.features.ndim != 2 or d.class_attributes.ndim != 2:
        raise ValidationError("features and class_attributes must be matrices")
    if len(d.labels) != n:
        raise ValidationError(f"{len(d.labels)} labels for {n} feature rows")
    if not np.all(np.isfinite(d.features)):
        raise ValidationError("feature matrix contains non-finite values")
    for name, idx, bound in (("seen_classes", d.seen_classes, n_classes),
                             ("unseen_classes", d.unseen_classes, n_classes),
                             ("aud_rows", d.aud_rows, n),
                             ("test_rows", d.test_rows, n)):
        bad = idx[(idx < 0) | (idx >= bound)]
        if bad.size:
            raise ValidationError(f"{name} index {int(bad[0])} out of range [0, {bound})")
        if len(np.unique(idx)) != len(idx):
            raise ValidationError(f"{name} has duplicate entries")
    overlap = np.intersect1d(d.seen_classes, d.unseen_classes)
    if overlap.size:
        raise ValidationError(f"class {int(overlap[0])} is both seen and unseen")
    labeled = d.labels[d.labels != NO_LABEL]
    known = np.union1d(d.seen_classes, d.unseen_classes)
    stray = labeled[~np.isin(labeled, known)]
    if stray.size:
        raise ValidationError(f"label {int(stray[0])} is neither seen nor unseen")
    bad_neg = d.labels[(d.labels < 0) & (d.labels != NO_LABEL)]
    if bad_neg.size:
        raise ValidationError(f"invalid label {int(bad_neg[0])}")
    aud_labels = d.labels[d.aud_rows]
    if np.any(aud_labels != NO_LABEL):
        i = int(np.flatnonzero(aud_labels != NO_LABEL)[0])
        row, lab = int(d.aud_rows[i]), int(aud_labels[i])
        kind = "unseen" if lab in d.unseen_classes else "seen"
        raise ValidationError(f"aud row {row} carries {kind} class label {lab}")
    in_test = np.intersect1d(d.aud_rows, d.test_rows)
    if in_test.size:
        raise ValidationError(f"row {int(in_test[0])} is both auxiliary and test")
    test_unlabeled = d.test_rows[d.labels[d.test_rows] == NO_LABEL]
    if test_unlabeled.size:
        raise ValidationError(f"test row {int(test_unlabeled[0])} has no label")
    # inductive guarantee: every unseen-class row is held out
    unseen_rows = np.flatnonzero(np.isin(d.labels, d.unseen_classes))
    leaked = np.setdiff1d(unseen_rows, d.test_rows)
    if leaked.size:
        raise ValidationError(f"unseen-class row {int(leaked[0])} is not in the test split")
    if d.pseudo_attributes is not None:
        pa = d.pseudo_attributes
        if pa.ndim != 2 or len(pa) != n:
            raise ValidationError("pseudo_attributes must have one row per feature row")
        present = np.flatnonzero(~np.any(np.isnan(pa), axis=1))
        outside = np.setdiff1d(present, d.aud_rows)
        if outside.size:
            raise ValidationError(f"row {int(outside[0])} has a pseudo-attribute but is not auxiliary")


# --- synthetic benchmark ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    num_seen: int = 10
    num_unseen: int = 5
    num_aud_classes: int = 10
    samples_per_class: int = 50
    attr_dim: int = 8
    feature_dim: int = 128
    feature_noise_sigma: float = 0.3
    pseudo_attr_noise_sigma: float = 0.3
    seed: int = 1
    feature_scale: float = 3.0  # std of each clean feature coordinate
    seen_test_fraction: float = 0.2
    aud_factor: float = 2.0  # auxiliary pool size relative to the paired training set

    def __post_init__(self):
        for name in ("num_seen", "num_unseen", "num_aud_classes", "samples_per_class", "attr_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")
        if self.feature_noise_sigma < 0 or self.pseudo_attr_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0 <= self.seen_test_fraction < 1:
            raise ValueError("seen_test_fraction must be in [0, 1)")
        if self.aud_factor < 0:
            raise ValueError("aud_factor must be >= 0")


@dataclass(frozen=True)
class SyntheticTruth:
    """Generator internals kept for tests: the feature map and every class prototype."""

    feature_map: np.ndarray
    prototypes: np.ndarray  # seen, unseen, then auxiliary classes
    aud_class: np.ndarray  # hidden source class of each aux row (-1 elsewhere)


def generate_synthetic(config: SyntheticConfig, return_truth: bool = False):
    """Linear-Gaussian stand-in for image features over attribute prototypes.

    Class ``c`` has prototype ``a_c ~ N(0, I)``; its image features are
    ``M a_c + noise``. Seen classes are split into train/test rows, every
    unseen row is test-only, and auxiliary rows come from extra prototype
    classes that belong to neither set, with pseudo-attributes ``a_c + noise``.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_cls = cfg.num_seen + cfg.num_unseen
    protos = rng.standard_normal((n_cls + cfg.num_aud_classes, cfg.attr_dim))
    fmap = cfg.feature_scale * rng.standard_normal((cfg.feature_dim, cfg.attr_dim)) / np.sqrt(cfg.attr_dim)

    n_seen_test = int(round(cfg.seen_test_fraction * cfg.samples_per_class))
    n_seen_train = cfg.samples_per_class - n_seen_test
    n_aud_total = int(round(cfg.aud_factor * n_seen_train * cfg.num_seen))
    aud_per_class = np.full(cfg.num_aud_classes, n_aud_total // cfg.num_aud_classes)
    aud_per_class[: n_aud_total % cfg.num_aud_classes] += 1

    feats, labels, aud_src, test_mask = [], [], [], []
    for c in range(n_cls):
        labels.append(np.full(cfg.samples_per_class, c))
        aud_src.append(np.full(cfg.samples_per_class, -1))
        t = np.zeros(cfg.samples_per_class, dtype=bool)
        if c < cfg.num_seen:
            t[n_seen_train:] = True
        else:
            t[:] = True
        test_mask.append(t)
    for j, cnt in enumerate(aud_per_class):
        labels.append(np.full(cnt, NO_LABEL))
        aud_src.append(np.full(cnt, n_cls + j))
        test_mask.append(np.zeros(cnt, dtype=bool))
    labels = np.concatenate(labels)
    aud_src = np.concatenate(aud_src)
    test_mask = np.concatenate(test_mask)
    source = np.where(labels >= 0, labels, aud_src)
    clean = protos[source] @ fmap.T
    feats = clean + cfg.feature_noise_sigma * rng.standard_normal(clean.shape)

    aud_rows = np.flatnonzero(aud_src >= 0)
    pseudo = np.full((len(labels), cfg.attr_dim), np.nan)
    pseudo[aud_rows] = protos[aud_src[aud_rows]] + cfg.pseudo_attr_noise_sigma * rng.standard_normal(
        (len(aud_rows), cfg.attr_dim))

    ds = make_dataset(
        feats,
        protos[:n_cls],
        labels,
        np.arange(cfg.num_seen),
        np.arange(cfg.num_seen, n_cls),
        aud_rows,
        np.flatnonzero(test_mask),
        pseudo if len(aud_rows) else None,
    )
    if return_truth:
        return ds, SyntheticTruth(fmap, protos, aud_src)
    return ds


def aggregate_pseudo_attribute(token_vectors) -> np.ndarray:
    """Sum of per-token word vectors."""
    vecs = [np.asarray(v, dtype=np.float64) for v in token_vectors]
    if not vecs:
        raise ValueError("need at least one token vector")
    dim = vecs[0].shape
    for v in vecs:
        if v.shape != dim:
            raise ValueError(f"token vector shape {v.shape} differs from {dim}")
    return np.sum(vecs, axis=0)


def apply_limited_supervision(dataset: Dataset, missing_fraction: float, seed: int) -> Dataset:
    """Strip label and attribute pairing from a seeded fraction of paired training rows.

    The stripped rows join the auxiliary pool without pseudo-attributes.
    Test rows, unseen rows, and existing auxiliary rows are left alone.
    """
    if not 0.0 <= missing_fraction <= 1.0:
        raise ValueError(f"missing_fraction must be in [0, 1], got {missing_fraction}")
    paired = dataset.paired_train_rows()
    k = int(np.floor(missing_fraction * len(paired) + 1e-9))
    if k == 0:
        return dataset
    rng = np.random.default_rng(seed)
    drop = np.sort(rng.choice(paired, size=k, replace=False))
    labels = dataset.labels.copy()
    labels[drop] = NO_LABEL
    return replace(dataset, labels=labels, aud_rows=np.union1d(dataset.aud_rows, drop))


# --- binary files and manifest --------------------------------------------------

def write_matrix(path, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", *m.shape))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    rows, cols = struct.unpack_from("<QQ", data, 8)
    need = 24 + 8 * rows * cols
    if len(data) != need:
        raise FormatError(f"{path}: payload ends at offset {len(data)}, expected {need}")
    return np.frombuffer(data, dtype="<f8", offset=24).reshape(rows, cols).copy()


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    raw = np.where(labels == NO_LABEL, _U32_NONE, labels).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw.tobytes())


def read_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    (count,) = struct.unpack_from("<Q", data, 8)
    need = 16 + 4 * count
    if len(data) != need:
        raise FormatError(f"{path}: payload ends at offset {len(data)}, expected {need}")
    raw = np.frombuffer(data, dtype="<u4", offset=16).astype(np.int64)
    return np.where(raw == _U32_NONE, NO_LABEL, raw)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write the binary files plus ``manifest.json``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "features.bin", dataset.features)
    write_matrix(d / "class_attributes.bin", dataset.class_attributes)
    write_labels(d / "labels.bin", dataset.labels)
    manifest = {
        "features": "features.bin",
        "class_attributes": "class_attributes.bin",
        "labels": "labels.bin",
        "seen_classes": dataset.seen_classes.tolist(),
        "unseen_classes": dataset.unseen_classes.tolist(),
        "aud_rows": dataset.aud_rows.tolist(),
        "test_rows": dataset.test_rows.tolist(),
        "pseudo_attributes": None,
    }
    if dataset.pseudo_attributes is not None:
        write_matrix(d / "pseudo_attributes.bin", dataset.pseudo_attributes)
        manifest["pseudo_attributes"] = "pseudo_attributes.bin"
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


REQUIRED_KEYS = ("features", "class_attributes", "labels", "seen_classes", "unseen_classes",
                 "aud_rows", "pseudo_attributes")


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON at offset {e.pos}") from e
    if not isinstance(manifest, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in manifest]
    if missing:
        raise ValidationError(f"{manifest_path}: missing keys {missing}")
    base = manifest_path.parent
    pa = manifest.get("pseudo_attributes")
    labels = read_labels(base / manifest["labels"])
    test_rows = manifest.get("test_rows")
    if test_rows is None:
        # without an explicit split, hold out exactly the unseen-class rows
        test_rows = np.flatnonzero(np.isin(labels, manifest["unseen_classes"]))
    return make_dataset(
        read_matrix(base / manifest["features"]),
        read_matrix(base / manifest["class_attributes"]),
        labels,
        manifest["seen_classes"],
        manifest["unseen_classes"],
        manifest["aud_rows"],
        test_rows,
        None if pa is None else read_matrix(base / pa),
    )
