import numpy as np
import pytest

from poezsl import objective as obj
from poezsl.model import (
    ATTRIBUTE,
    IMAGE,
    CheckpointError,
    ModelConfig,
    ModelParams,
    NumericError,
    Schedules,
    TrainingData,
    TrainingSample,
    batch_loss_and_grads,
    encode,
    forward,
    forward_aud,
    forward_paired,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)
from poezsl.neural_core import AdamState, compare_gradients, numerical_gradient
from poezsl.poe import GaussianExpert, fuse_experts


def small_config(**kw):
    base = dict(pseudo_dim=3, encoder_hidden=6, decoder_hidden=5, latent_dim=2, pseudo_hidden=4, indicator_hidden=4)
    base.update(kw)
    return ModelConfig.for_dims(4, 3, **base)


@pytest.fixture
def params():
    return ModelParams.init(small_config(), seed=0)


def test_encoder_output_width_is_twice_latent(params):
    for m in params.config.names:
        assert params.encoders[m].out_dim == 2 * params.config.latent_dim


def test_zero_final_layer_gives_standard_expert(params):
    last = params.encoders[IMAGE].layers[-1]
    last.weights[:] = 0
    last.bias[:] = 0
    e = encode(params, IMAGE, np.arange(4.0))
    assert np.array_equal(e.mean, np.zeros(2)) and np.array_equal(e.log_var, np.zeros(2))


def test_encode_is_deterministic_and_composes(params):
    x = np.random.default_rng(1).normal(size=4)
    a, b = encode(params, IMAGE, x), encode(params, IMAGE, x.copy())
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_var, b.log_var)
    h = x
    for layer in params.encoders[IMAGE].layers:
        h = layer.weights @ h + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0)
    np.testing.assert_allclose(a.mean, h[:2], rtol=1e-14)
    np.testing.assert_allclose(a.log_var, h[2:], rtol=1e-14)
    with pytest.raises(KeyError):
        encode(params, "audio", x)


def test_paired_forward_is_deterministic_without_noise(params):
    rng = np.random.default_rng(2)
    feats = {IMAGE: rng.normal(size=(3, 4)), ATTRIBUTE: rng.normal(size=(3, 3))}
    t1, t2 = forward_paired(params, feats), forward_paired(params, feats)
    assert t1.z.tobytes() == t2.z.tobytes()
    for m in feats:
        assert t1.reconstructions[m].tobytes() == t2.reconstructions[m].tobytes()
    assert t1.alpha_hat.tobytes() == t2.alpha_hat.tobytes()


def test_paired_fused_expert_is_fusion_of_encodings(params):
    rng = np.random.default_rng(3)
    feats = {IMAGE: rng.normal(size=(2, 4)), ATTRIBUTE: rng.normal(size=(2, 3))}
    t = forward_paired(params, feats, rng)
    want = fuse_experts([encode(params, m, feats[m]) for m in (IMAGE, ATTRIBUTE)], include_prior=True)
    np.testing.assert_array_equal(t.fused.mean, want.mean)
    np.testing.assert_array_equal(t.fused.log_var, want.log_var)
    assert set(t.experts) == {IMAGE, ATTRIBUTE}
    assert set(t.skip) == {IMAGE, ATTRIBUTE}


def test_paired_requires_all_modalities(params):
    with pytest.raises(ValueError):
        forward_paired(params, {IMAGE: np.zeros(4)})


def test_aud_rejects_attribute(params):
    with pytest.raises(ValueError):
        forward_aud(params, np.zeros(4), attribute=np.zeros(3))
    with pytest.raises(ValueError):
        forward(params, TrainingSample({IMAGE: np.zeros(4), ATTRIBUTE: np.zeros(3)}, indicator=0))


def test_aud_latent_conditions_on_image_only(params):
    x = np.random.default_rng(4).normal(size=(1, 4))
    t = forward_aud(params, x, None, None)
    want = fuse_experts([encode(params, IMAGE, x)])
    np.testing.assert_array_equal(t.fused.mean, want.mean)
    assert list(t.experts) == [IMAGE]
    assert t.pseudo_pred is None


def test_aud_path_aliases_image_weights(params):
    x = np.random.default_rng(5).normal(size=(1, 4))
    before = forward_aud(params, x, None, None).experts[IMAGE].mean.copy()
    params.encoders[IMAGE].layers[0].weights *= 1.5
    after_aud = forward_aud(params, x, None, None).experts[IMAGE]
    after_paired = forward_paired(params, {IMAGE: x, ATTRIBUTE: np.zeros((1, 3))}).experts[IMAGE]
    assert not np.array_equal(before, after_aud.mean)
    np.testing.assert_array_equal(after_aud.mean, after_paired.mean)
    names = [k for k in params.named_parameters() if k.startswith("encoder.image.")]
    assert len(names) == 4


def test_aud_loss_termwise(params):
    rng = np.random.default_rng(6)
    x, target = rng.normal(size=4), rng.normal(size=3)
    t = forward(params, TrainingSample({IMAGE: x}, 0, pseudo_attribute=target), None)
    beta, gamma = 0.2, 0.4
    r = obj.total_loss(t, beta, gamma, params.config.names)
    fused = GaussianExpert(t.fused.mean[0], t.fused.log_var[0])
    want = (obj.reconstruction_nll(x, t.reconstructions[IMAGE][0])
            + beta * float(np.sum(0.5 * (fused.mean**2 + np.exp(fused.log_var) - 1 - fused.log_var)))
            + gamma * np.sum(np.abs(t.pseudo_pred[0] - target))
            + obj.indicator_loss(t.alpha_hat[0], 0))
    assert r.total == pytest.approx(want, rel=1e-12)


def _grads_for(params, traces_fn, beta=0.3, gamma=0.2):
    return batch_loss_and_grads(params, traces_fn(), beta, gamma)


def test_pseudo_decoder_idle_for_paired_and_attribute_idle_for_aud(params):
    rng = np.random.default_rng(7)
    _, g = _grads_for(params, lambda: [forward_paired(params, {IMAGE: rng.normal(size=(2, 4)),
                                                                 ATTRIBUTE: rng.normal(size=(2, 3))}, rng)])
    assert all(not g[k].any() for k in g if k.startswith("pseudo_decoder."))
    _, g = _grads_for(params, lambda: [forward_aud(params, rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), rng)])
    assert all(not g[k].any() for k in g if ".attribute." in k)
    assert any(g[k].any() for k in g if k.startswith("pseudo_decoder."))


@pytest.mark.parametrize("fusion", ["poe", "product"])
@pytest.mark.parametrize("skip", [True, False])
def test_end_to_end_gradient(fusion, skip):
    params = ModelParams.init(small_config(skip_connections=skip, fusion=fusion), seed=12)
    rng = np.random.default_rng(13)
    xp, ap = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    xa, pa = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))

    def traces():
        r = np.random.default_rng(99)
        return [forward_paired(params, {IMAGE: xp, ATTRIBUTE: ap}, r), forward_aud(params, xa, pa, r)]

    _, g = batch_loss_and_grads(params, traces(), 0.25, 0.15)
    f = lambda: batch_loss_and_grads(params, traces(), 0.25, 0.15)[0].total  # noqa: E731
    num = {k: numerical_gradient(f, v, 1e-6) for k, v in params.named_parameters().items()}
    report = compare_gradients(g, num, tol=1e-3)
    assert report.passed, report


# --- training ---

def toy_data(seed=0, n=16):
    """Two classes, 4-d features, 2-d attributes."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(2, 2))
    fmap = rng.normal(size=(4, 2))
    lab = np.arange(n) % 2
    x = protos[lab] @ fmap.T + 0.05 * rng.normal(size=(n, 4))
    aud_lab = rng.integers(0, 2, size=n)
    xa = protos[aud_lab] @ fmap.T + 0.05 * rng.normal(size=(n, 4))
    return TrainingData(x, protos[lab], xa, protos[aud_lab] + 0.05 * rng.normal(size=(n, 2)))


def toy_params(seed=0):
    cfg = ModelConfig.for_dims(4, 2, pseudo_dim=2, encoder_hidden=32, decoder_hidden=32, latent_dim=4,
                               pseudo_hidden=16, indicator_hidden=8)
    return ModelParams.init(cfg, seed)


def test_zero_learning_rate_freezes_parameters():
    params = toy_params()
    before = {k: v.copy() for k, v in params.named_parameters().items()}
    _, report = train_epoch(params, toy_data(), Schedules(), AdamState(learning_rate=0.0), 3, epoch=0)
    for k, v in params.named_parameters().items():
        assert np.array_equal(v, before[k])
    assert report.total > 0 and report.count == 32


def test_same_seed_same_parameters():
    runs = []
    for _ in range(2):
        params = toy_params(1)
        state = AdamState()
        for epoch in range(3):
            train_epoch(params, toy_data(), Schedules(), state, rng_seed=5, epoch=epoch)
        runs.append(params.named_parameters())
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_toy_training_reduces_loss():
    params = toy_params(2)
    data = toy_data(2)
    state = AdamState()
    schedules = Schedules()
    reports = [train_epoch(params, data, schedules, state, 7, epoch=e, batch_size=8)[1] for e in range(200)]
    assert all(r.is_finite() for r in reports)
    assert reports[-1].total < 0.25 * reports[0].total


def test_perfect_reconstruction_leaves_only_indicator_term():
    params = toy_params(3)
    x = np.array([0.5, -1.0, 2.0, 0.25])
    a = np.array([1.0, -0.5])
    n = 8
    data = TrainingData(np.tile(x, (n, 1)), np.tile(a, (n, 1)), np.tile(x, (n, 1)), None)
    for m, target in ((IMAGE, x), (ATTRIBUTE, a)):
        params.encoders[m].layers[-1].weights[:] = 0
        params.encoders[m].layers[-1].bias[:] = 0
        params.decoders[m].layers[-1].weights[:] = 0
        params.decoders[m].layers[-1].bias[:] = target
    _, report = train_epoch(params, data, Schedules(), AdamState(learning_rate=0.0), 0, epoch=0, batch_size=4)
    assert report.beta == 0.0 and report.gamma == 0.0
    assert report.total == pytest.approx(report.indicator_loss, rel=1e-14)


def test_non_finite_parameter_raises():
    params = toy_params()
    params.indicator_head.layers[0].weights[0, 0] = np.nan
    with pytest.raises(NumericError):
        train_epoch(params, toy_data(), Schedules(), AdamState(), 0)


def test_training_data_without_aud():
    data = toy_data()
    empty = TrainingData(data.paired_image, data.paired_attribute, data.aud_image[:0], None)
    params = toy_params()
    _, report = train_epoch(params, empty, Schedules(), AdamState(), 0)
    assert report.l_aud == 0.0 and report.count == data.n_paired


# --- checkpoints ---

def test_checkpoint_round_trip_is_bit_exact(tmp_path, params):
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    assert path.read_bytes()[:8] == b"POEZSL01"
    loaded = load_checkpoint(path)
    live = params.named_parameters()
    assert list(loaded) == list(live)
    for k in live:
        assert loaded[k].tobytes() == live[k].tobytes()
    rebuilt = ModelParams.from_tensors(loaded)
    assert rebuilt.config.latent_dim == 2 and rebuilt.config.pseudo_dim == 3
    x = np.random.default_rng(0).normal(size=(2, 4))
    assert np.array_equal(encode(rebuilt, IMAGE, x).mean, encode(params, IMAGE, x).mean)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint({"w": np.array([[1.0, 2.0]])}, path)
    raw = path.read_bytes()
    want = (b"POEZSL01" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"w" + bytes([2])
            + (1).to_bytes(8, "little") + (2).to_bytes(8, "little") + np.array([1.0, 2.0], "<f8").tobytes())
    assert raw == want


def test_checkpoint_truncation_and_magic(tmp_path, params):
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
