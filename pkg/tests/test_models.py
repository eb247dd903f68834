"""Model containers, training loops, and the checkpoint format."""

import numpy as np
import pytest

from fairwash import dataio as D
from fairwash.models import (AutoencoderModel, Layer, LogRegModel, MlpModel,
                             ModelFormatError, TrainConfig, accuracy,
                             dataset_xent, init_mlp, load_model,
                             logreg_as_mlp, mlp_forward, predict,
                             predicted_class, save_model, select_logits,
                             softmax_probs, stable_sigmoid, train_autoencoder,
                             train_classifier, xent_loss)
from fairwash.rng import RngState
from fairwash.tape import ContractError, Tape, grad


def test_logreg_score_is_a_dot_product():
    model = LogRegModel(np.array([0.9, 0.1, 0.0]), 0.0)
    assert predict(model, np.array([1.0, 0.5, 7.0])) == pytest.approx(0.95, abs=1e-15)
    scores = predict(model, np.array([[1.0, 1.0, 0.0], [-1.0, 0.0, 3.0]]))
    assert scores == pytest.approx([1.0, -0.9], abs=1e-15)
    assert predicted_class(model, [[1.0, 1.0, 0.0], [-1.0, 0.0, 3.0]]).tolist() == [1, 0]


def test_zero_weight_mlp_predicts_biases_and_ties_break_low():
    layer = Layer(np.zeros((4, 3)), np.zeros(3), "none")
    model = MlpModel([layer])
    out = predict(model, np.ones((2, 4)))
    assert np.array_equal(out, np.zeros((2, 3)))
    assert predicted_class(model, np.ones((2, 4))).tolist() == [0, 0]


def test_softmax_props_hold_over_many_random_rows():
    rng = RngState(3).stream("softmax")
    for _ in range(1000):
        z = rng.normal(size=(1, 6)) * rng.uniform(0.1, 50.0)
        p = softmax_probs(z)
        assert p.shape == (1, 6)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p > 0)
        assert np.argmax(p) == np.argmax(z)
        shifted = softmax_probs(z + 123.4)
        assert np.max(np.abs(p - shifted)) <= 1e-12


def test_softmax_is_stable_for_huge_logits():
    p = softmax_probs(np.array([1e4, 0.0, -1e4]))
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0, abs=1e-12)


def test_stable_sigmoid_extremes_and_agreement():
    assert stable_sigmoid(np.array([1000.0])) == pytest.approx(1.0)
    assert stable_sigmoid(np.array([-1000.0])) == pytest.approx(0.0)
    x = np.linspace(-20, 20, 41)
    assert np.max(np.abs(stable_sigmoid(x) - 1.0 / (1.0 + np.exp(-x)))) <= 1e-15


def _blobs(n_per, seed=0):
    rng = RngState(seed).stream("blobs")
    centers = np.array([[0.0, 3.0], [3.0, -1.0], [-3.0, -1.0]])
    xs, ys = [], []
    for cls, c in enumerate(centers):
        xs.append(rng.normal(size=(n_per, 2)) * 0.6 + c)
        ys.append(np.full(n_per, cls))
    return np.vstack(xs), np.concatenate(ys)


def test_training_separates_gaussian_blobs():
    x, y = _blobs(60)
    model = init_mlp([2, 16, 3], "relu", seed=1)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.05, momentum=0.5,
                      batch_size=32, epochs=50, seed=5)
    trained, history = train_classifier(model, x, y, cfg)
    assert history[0]["event"] == "init"
    assert history[-1]["event"] == "final"
    assert history[-1]["loss"] < history[0]["loss"]
    assert accuracy(trained, x, y) >= 0.95
    # the input model is untouched
    assert np.array_equal(model.layers[0].W, init_mlp([2, 16, 3], "relu", seed=1).layers[0].W)


def test_zero_learning_rate_changes_nothing():
    x, y = _blobs(10)
    model = init_mlp([2, 8, 3], "relu", seed=2)
    cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=16, seed=0)
    trained, _ = train_classifier(model, x, y, cfg)
    for before, after in zip(model.layers, trained.layers):
        assert np.array_equal(before.W, after.W)
        assert np.array_equal(before.b, after.b)


def test_training_is_reproducible_and_seed_sensitive():
    x, y = _blobs(20)
    cfg = TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, seed=9)
    m1, h1 = train_classifier(init_mlp([2, 8, 3], seed=4), x, y, cfg)
    m2, h2 = train_classifier(init_mlp([2, 8, 3], seed=4), x, y, cfg)
    assert h1 == h2
    for a, b in zip(m1.layers, m2.layers):
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    cfg_other = TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, seed=10)
    m3, _ = train_classifier(init_mlp([2, 8, 3], seed=4), x, y, cfg_other)
    assert not np.array_equal(m1.layers[0].W, m3.layers[0].W)


def test_training_on_synthetic_digits_reaches_sane_accuracy():
    train, test = D.gen_digits_split(500, 100, seed=21)
    train = D.normalize(train)
    test = D.normalize_with(test, train.norm)
    model = init_mlp([train.dim, 64, 10], "relu", seed=3)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.05, momentum=0.5,
                      batch_size=64, epochs=12, seed=3)
    trained, _ = train_classifier(model, train.inputs, train.labels, cfg)
    assert accuracy(trained, train.inputs, train.labels) >= 0.9
    assert accuracy(trained, test.inputs, test.labels) >= 0.6


def test_xent_loss_on_tape_matches_numpy_evaluation():
    rng = RngState(6).stream("xent")
    model = init_mlp([5, 7, 4], "relu", seed=6)
    x = rng.normal(size=(9, 5))
    y = rng.integers(0, 4, size=9)
    tp = Tape()
    logits = mlp_forward(tp, model, tp.leaf(x))
    loss = xent_loss(tp, logits, y, 4)
    assert float(loss.value) == pytest.approx(dataset_xent(model, x, y), abs=1e-12)


def test_select_logits_gradient_recovers_per_row_weight_columns():
    rng = RngState(7).stream("select")
    w = rng.normal(size=(5, 3))
    model = MlpModel([Layer(w, np.zeros(3), "none")])
    x = rng.normal(size=(4, 5))
    ks = np.array([0, 2, 1, 2])
    tp = Tape()
    xv = tp.leaf(x)
    logits = mlp_forward(tp, model, xv)
    (g,) = grad(select_logits(tp, logits, ks), [xv])
    assert np.max(np.abs(g.value - w[:, ks].T)) <= 1e-14


def test_autoencoder_learns_an_exact_plane():
    rng = RngState(8).stream("plane")
    a = rng.normal(size=(2, 5))
    x = rng.normal(size=(256, 2)) @ a
    enc = init_mlp([5, 2], "none", seed=8, tag="enc")
    dec = init_mlp([2, 5], "none", seed=8, tag="dec")
    cfg = TrainConfig(optimizer="adam", learning_rate=0.02, epochs=200,
                      batch_size=64, seed=8)
    ae, history = train_autoencoder(AutoencoderModel(enc, dec), x, cfg)
    assert history[-1]["loss"] < history[0]["loss"]
    recon = predict(ae.decoder, predict(ae.encoder, x))
    ae_mse = float(((recon - x) ** 2).mean())
    # oracle: the best rank-2 linear reconstruction, via the data SVD
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    best = (u[:, :2] * s[:2]) @ vt[:2]
    pca_mse = float(((best - x) ** 2).mean())
    assert ae_mse <= pca_mse + 1e-3


def test_identity_autoencoder_has_zero_loss_and_stays_put():
    eye = np.eye(3)
    enc = MlpModel([Layer(eye.copy(), np.zeros(3), "none")])
    dec = MlpModel([Layer(eye.copy(), np.zeros(3), "none")])
    ae = AutoencoderModel(enc, dec)
    x = RngState(9).stream("id").normal(size=(32, 3))
    trained, history = train_autoencoder(ae, x, TrainConfig(learning_rate=0.0, epochs=2,
                                                            batch_size=8))
    assert history[0]["loss"] == pytest.approx(0.0, abs=1e-28)
    assert history[-1]["loss"] == pytest.approx(0.0, abs=1e-28)
    assert np.array_equal(trained.encoder.layers[0].W, eye)


def test_init_mlp_bounds_and_determinism():
    m1 = init_mlp([10, 20, 5], "relu", seed=11)
    m2 = init_mlp([10, 20, 5], "relu", seed=11)
    m3 = init_mlp([10, 20, 5], "relu", seed=12)
    for l1, l2 in zip(m1.layers, m2.layers):
        assert np.array_equal(l1.W, l2.W)
        assert np.array_equal(l1.b, np.zeros_like(l1.b))
    assert not np.array_equal(m1.layers[0].W, m3.layers[0].W)
    bound = np.sqrt(6.0 / 10)
    assert np.max(np.abs(m1.layers[0].W)) <= bound


def test_model_contracts():
    with pytest.raises(ContractError):
        Layer(np.zeros((3, 2)), np.zeros(5), "none")  # bias length
    with pytest.raises(ContractError):
        Layer(np.zeros((3, 2)), np.zeros(2), "gelu")  # unknown activation
    with pytest.raises(ContractError):
        MlpModel([Layer(np.zeros((3, 2)), np.zeros(2), "none"),
                  Layer(np.zeros((5, 2)), np.zeros(2), "none")])  # chain break
    with pytest.raises(ContractError):
        MlpModel([Layer(np.zeros((3, 2)), np.zeros(2), "relu")])  # final act
    with pytest.raises(ContractError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ContractError):
        TrainConfig(momentum=1.0)
    model = init_mlp([4, 3], seed=0)
    with pytest.raises(ContractError):
        train_classifier(model, np.zeros((0, 4)), np.zeros(0, dtype=int), TrainConfig())
    with pytest.raises(ContractError):
        train_classifier(model, np.zeros((2, 4)), np.array([0, 3]), TrainConfig())
    with pytest.raises(ContractError):
        predict(model, np.ones(5))


def test_logreg_as_mlp_matches_the_original_scores():
    model = LogRegModel(np.array([0.4, -1.2]), 0.3)
    as_mlp = logreg_as_mlp(model)
    x = RngState(13).stream("lr").normal(size=(6, 2))
    assert np.max(np.abs(predict(as_mlp, x).ravel() - predict(model, x))) <= 1e-15


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _roundtrip(model, tmp_path, name):
    p = tmp_path / name
    save_model(model, p)
    return p, load_model(p)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    mlp = init_mlp([6, 5, 3], "softplus", seed=14, beta=7.5)
    # f32 storage: write f32-representable weights so the trip is lossless
    for layer in mlp.layers:
        layer.W[:] = layer.W.astype(np.float32)
    p, back = _roundtrip(mlp, tmp_path, "m.fwmodel")
    assert isinstance(back, MlpModel)
    for a, b in zip(mlp.layers, back.layers):
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.b, b.b)
        assert a.activation == b.activation and a.beta == b.beta
    # saving the loaded model again reproduces the file byte for byte
    p2 = tmp_path / "m2.fwmodel"
    save_model(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_roundtrip_logreg_and_autoencoder(tmp_path):
    lr = LogRegModel(np.array([0.5, -0.25, 1.0], dtype=np.float32).astype(np.float64), 0.125)
    _, lr_back = _roundtrip(lr, tmp_path, "lr.fwmodel")
    assert isinstance(lr_back, LogRegModel)
    assert np.array_equal(lr.w, lr_back.w) and lr.c == lr_back.c

    enc = init_mlp([4, 3, 2], "relu", seed=15, tag="enc")
    dec = init_mlp([2, 3, 4], "relu", seed=15, tag="dec")
    for layer in enc.layers + dec.layers:
        layer.W[:] = layer.W.astype(np.float32)
    ae = AutoencoderModel(enc, dec)
    _, ae_back = _roundtrip(ae, tmp_path, "ae.fwmodel")
    assert isinstance(ae_back, AutoencoderModel)
    x = RngState(16).stream("ae").normal(size=(5, 4))
    assert np.array_equal(predict(ae.encoder, x), predict(ae_back.encoder, x))


def test_checkpoint_rejects_garbage(tmp_path):
    good = tmp_path / "good.fwmodel"
    save_model(init_mlp([3, 2], seed=0), good)
    raw = good.read_bytes()

    bad_magic = tmp_path / "bad_magic.fwmodel"
    bad_magic.write_bytes(b"NOTMODEL" + raw[8:])
    with pytest.raises(ModelFormatError):
        load_model(bad_magic)

    truncated = tmp_path / "trunc.fwmodel"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(ModelFormatError):
        load_model(truncated)

    padded = tmp_path / "padded.fwmodel"
    padded.write_bytes(raw + b"\x00\x00")
    with pytest.raises(ModelFormatError):
        load_model(padded)
