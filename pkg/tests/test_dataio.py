import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poezsl.dataio import (
    NO_LABEL,
    FormatError,
    SyntheticConfig,
    ValidationError,
    aggregate_pseudo_attribute,
    apply_limited_supervision,
    generate_synthetic,
    load_dataset,
    make_dataset,
    read_labels,
    read_matrix,
    save_dataset,
    write_labels,
    write_matrix,
)

SMALL = SyntheticConfig(num_seen=4, num_unseen=2, num_aud_classes=3, samples_per_class=10,
                        attr_dim=3, feature_dim=5, seed=3)


def test_noiseless_classes_have_identical_features():
    ds = generate_synthetic(SyntheticConfig(feature_noise_sigma=0.0, samples_per_class=6, seed=2))
    for c in np.union1d(ds.seen_classes, ds.unseen_classes):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_generation_is_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert a.equals(b)
    assert a.features.tobytes() == b.features.tobytes()
    assert not a.equals(generate_synthetic(SyntheticConfig(**{**SMALL.__dict__, "seed": 4})))


def test_class_means_follow_linear_map():
    cfg = SyntheticConfig(samples_per_class=400, feature_noise_sigma=0.7, seed=11)
    ds, truth = generate_synthetic(cfg, return_truth=True)
    se = cfg.feature_noise_sigma / np.sqrt(cfg.samples_per_class)
    dev = []
    for c in np.union1d(ds.seen_classes, ds.unseen_classes):
        mean = ds.features[ds.labels == c].mean(axis=0)
        dev.append(np.abs(mean - truth.feature_map @ ds.class_attributes[c]) / se)
    dev = np.concatenate(dev)
    # 1920 coordinates: a 3-sigma band holds ~99.7% of them, none should reach 5 sigma
    assert np.mean(dev < 3) >= 0.99
    assert dev.max() < 5


def test_synthetic_layout():
    ds, truth = generate_synthetic(SyntheticConfig(), return_truth=True)
    assert len(ds.seen_classes) == 10 and len(ds.unseen_classes) == 5
    assert len(ds.paired_train_rows()) == 400
    assert len(ds.aud_rows) == 800
    # auxiliary rows come from prototypes outside seen and unseen classes
    assert np.all(truth.aud_class[ds.aud_rows] >= 15)
    assert np.all(ds.labels[ds.aud_rows] == NO_LABEL)
    assert np.all(np.isfinite(ds.pseudo_attributes[ds.aud_rows]))
    assert len(ds.unseen_rows()) == 250
    assert np.all(np.isin(ds.unseen_rows(), ds.test_rows))


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(num_unseen=0)
    with pytest.raises(ValueError):
        SyntheticConfig(feature_noise_sigma=-1)


# --- pseudo-attribute aggregation ---

def test_aggregate_pseudo_attribute():
    assert np.array_equal(aggregate_pseudo_attribute([[1, 0], [0, 1]]), [1, 1])
    assert np.array_equal(aggregate_pseudo_attribute([[2.5, -1.0]]), [2.5, -1.0])
    rng = np.random.default_rng(0)
    toks = rng.normal(size=(5, 7))
    want = np.zeros(7)
    for t in toks:
        for j in range(7):
            want[j] += t[j]
    np.testing.assert_allclose(aggregate_pseudo_attribute(list(toks)), want, rtol=1e-14)
    with pytest.raises(ValueError):
        aggregate_pseudo_attribute([])
    with pytest.raises(ValueError):
        aggregate_pseudo_attribute([[1, 2], [1, 2, 3]])


# --- limited supervision ---

def make_100_paired():
    rng = np.random.default_rng(0)
    return make_dataset(rng.normal(size=(120, 3)), rng.normal(size=(4, 2)),
                        np.r_[np.arange(100) % 3, np.full(20, 3)], [0, 1, 2], [3],
                        aud_rows=[], test_rows=np.arange(100, 120))


def test_fraction_zero_is_identity():
    ds = generate_synthetic(SMALL)
    assert apply_limited_supervision(ds, 0.0, 1).equals(ds)


def test_fraction_one_removes_all_pairing():
    ds = generate_synthetic(SMALL)
    out = apply_limited_supervision(ds, 1.0, 1)
    assert len(out.paired_train_rows()) == 0
    assert len(out.aud_rows) == len(ds.aud_rows) + len(ds.paired_train_rows())


def test_fraction_converts_exact_count_reproducibly():
    ds = make_100_paired()
    a = apply_limited_supervision(ds, 0.8, 9)
    b = apply_limited_supervision(ds, 0.8, 9)
    assert len(a.aud_rows) == 80 and len(a.paired_train_rows()) == 20
    assert np.array_equal(a.aud_rows, b.aud_rows)
    assert not np.array_equal(a.aud_rows, apply_limited_supervision(ds, 0.8, 10).aud_rows)
    # test rows untouched
    assert np.array_equal(a.labels[ds.test_rows], ds.labels[ds.test_rows])


def test_fraction_out_of_range():
    with pytest.raises(ValueError):
        apply_limited_supervision(make_100_paired(), 1.2, 0)
    with pytest.raises(ValueError):
        apply_limited_supervision(make_100_paired(), -0.1, 0)


def test_repeated_transforms_never_restore_pairing():
    ds = make_100_paired()
    once = apply_limited_supervision(ds, 0.3, 1)
    twice = apply_limited_supervision(once, 0.5, 2)
    assert set(once.aud_rows) <= set(twice.aud_rows)
    assert set(twice.paired_train_rows()) <= set(once.paired_train_rows())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 2**31)), min_size=1, max_size=4), st.integers(0, 50))
def test_inductive_guarantee_over_transform_sequences(steps, gen_seed):
    ds, truth = generate_synthetic(
        SyntheticConfig(num_seen=3, num_unseen=2, num_aud_classes=2, samples_per_class=6, attr_dim=2,
                        feature_dim=3, seed=gen_seed), return_truth=True)
    original = ds.labels.copy()
    for frac, seed in steps:
        ds = apply_limited_supervision(ds, frac, seed)
        train = ds.training_rows()
        assert not np.any(np.isin(original[train], ds.unseen_classes))
        assert not np.any(np.isin(train, ds.test_rows))
        assert np.all(np.isfinite(ds.features))


# --- files ---

def test_dataset_round_trip(tmp_path):
    ds = generate_synthetic(SMALL)
    manifest = save_dataset(ds, tmp_path / "d")
    loaded = load_dataset(manifest)
    assert loaded.equals(ds)
    assert load_dataset(tmp_path / "d").equals(ds)
    doc = json.loads(manifest.read_text())
    for key in ("features", "class_attributes", "labels", "seen_classes", "unseen_classes",
                "aud_rows", "pseudo_attributes"):
        assert key in doc


def test_round_trip_without_pseudo_attributes(tmp_path):
    ds = make_100_paired()
    loaded = load_dataset(save_dataset(ds, tmp_path))
    assert loaded.equals(ds) and loaded.pseudo_attributes is None


def test_matrix_and_label_layout(tmp_path):
    m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    write_matrix(tmp_path / "m.bin", m)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"POEMAT01"
    assert int.from_bytes(raw[8:16], "little") == 2 and int.from_bytes(raw[16:24], "little") == 3
    assert np.array_equal(read_matrix(tmp_path / "m.bin"), m)
    write_labels(tmp_path / "l.bin", [3, NO_LABEL, 0])
    raw = (tmp_path / "l.bin").read_bytes()
    assert raw[:8] == b"POELBL01" and len(raw) == 16 + 12
    assert list(read_labels(tmp_path / "l.bin")) == [3, NO_LABEL, 0]


def test_truncated_matrix_is_format_error(tmp_path):
    ds = generate_synthetic(SMALL)
    manifest = save_dataset(ds, tmp_path)
    path = tmp_path / "features.bin"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="offset"):
        load_dataset(manifest)
    path.write_bytes(b"POEMAT01\x01")
    with pytest.raises(FormatError):
        load_dataset(manifest)


def test_bad_magic_is_format_error(tmp_path):
    manifest = save_dataset(generate_synthetic(SMALL), tmp_path)
    path = tmp_path / "labels.bin"
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(FormatError, match="magic"):
        load_dataset(manifest)


def test_dangling_index_names_the_index(tmp_path):
    manifest = save_dataset(generate_synthetic(SMALL), tmp_path)
    doc = json.loads(manifest.read_text())
    doc["aud_rows"].append(10_000)
    manifest.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="10000"):
        load_dataset(manifest)


def test_unseen_row_in_aud_rows_is_rejected(tmp_path):
    ds = generate_synthetic(SMALL)
    manifest = save_dataset(ds, tmp_path)
    doc = json.loads(manifest.read_text())
    row = int(ds.unseen_rows()[0])
    doc["aud_rows"].append(row)
    doc["test_rows"].remove(row)
    manifest.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="unseen"):
        load_dataset(manifest)


def test_overlapping_class_sets_rejected():
    with pytest.raises(ValidationError):
        make_dataset(np.zeros((2, 2)), np.zeros((2, 2)), [0, 1], [0, 1], [1], test_rows=[1])


def test_unseen_rows_must_be_held_out():
    with pytest.raises(ValidationError, match="unseen-class row"):
        make_dataset(np.zeros((2, 2)), np.zeros((2, 2)), [0, 1], [0], [1], test_rows=[])


def test_non_finite_features_rejected():
    with pytest.raises(ValidationError):
        make_dataset(np.array([[np.nan, 0.0]]), np.zeros((1, 2)), [0], [0], [])


def test_invalid_json_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "manifest.json")
