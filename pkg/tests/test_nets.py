import numpy as np
import pytest

from leba import nets
from leba import tensor as T
from leba.nets import ModelSpec
from conftest import central_diff, max_rel_err

CNN = ModelSpec("tinycnn", input_shape=(1, 8, 8), classes=4, channels=(3, 4), kernel=3, seed=5)
MLP = ModelSpec("mlp", input_shape=(1, 6, 6), classes=3, hidden=(7,), seed=2)


def test_init_is_deterministic():
    a, b = nets.init_model(CNN), nets.init_model(CNN)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_linear_param_count():
    spec = ModelSpec("mlp", input_shape=(2, 5, 5), classes=4, hidden=())
    assert nets.param_count(nets.init_model(spec)) == 2 * 5 * 5 * 4 + 4


def test_tinycnn_param_count_by_shape_accounting():
    spec = ModelSpec("tinycnn", input_shape=(1, 28, 28), classes=10, channels=(8, 16), kernel=3)
    # conv: out*in*k*k + out per layer; each layer halves H and W; head maps flat features to K
    expected = 0
    c_in, side = 1, 28
    for c_out in (8, 16):
        expected += c_out * c_in * 9 + c_out
        c_in, side = c_out, side // 2
    expected += c_in * side * side * 10 + 10
    assert nets.param_count(nets.init_model(spec)) == expected == 9098


def test_unknown_arch():
    with pytest.raises(T.ContractError):
        ModelSpec("resnet")


def test_zero_head_gives_uniform():
    m = nets.init_model(CNN)
    m.params["out.w"][:] = 0
    m.params["out.b"][:] = 0
    p = nets.predict(m, np.random.default_rng(0).random((1, 8, 8)))
    np.testing.assert_allclose(p, np.full(4, 0.25), atol=1e-15)


@pytest.mark.parametrize("spec", [CNN, MLP])
def test_probabilities_normalised_and_argmax_matches_logits(spec, rng):
    m = nets.init_model(spec)
    X = rng.random((5,) + spec.input_shape)
    p = nets.predict(m, X)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    z = nets.logits(m, T.constant(X)).value
    np.testing.assert_array_equal(p.argmax(axis=1), z.argmax(axis=1))
    np.testing.assert_allclose(nets._logits_np(m, X), z, atol=1e-12)


def test_predict_shape_mismatch():
    with pytest.raises(T.ContractError):
        nets.predict(nets.init_model(CNN), np.zeros((1, 9, 9)))


def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    x = np.where(y[:, None] == 1, 0.75, 0.25) + rng.normal(scale=0.05, size=(n, 4))
    return nets.LabeledDataset(np.clip(x, 0, 1).reshape(n, 1, 2, 2), y)


def test_train_separable_blobs():
    spec = ModelSpec("mlp", input_shape=(1, 2, 2), classes=2, hidden=(8,), seed=1)
    _, acc = nets.train(nets.init_model(spec), _blobs(), epochs=20, lr=0.5, batch=8)
    assert acc >= 0.99


def test_train_zero_lr_is_fixed_point():
    m = nets.init_model(MLP)
    data = nets.LabeledDataset(np.random.default_rng(0).random((6, 1, 6, 6)), [0, 1, 2, 0, 1, 2])
    trained, _ = nets.train(m, data, epochs=2, lr=0.0, batch=3)
    for k in m.params:
        np.testing.assert_array_equal(trained.params[k], m.params[k])


def test_single_step_reduces_loss():
    m = nets.init_model(MLP)
    x = np.random.default_rng(3).random((1, 1, 6, 6))
    data = nets.LabeledDataset(x, [1])

    def loss(model):
        return -nets.log_probs(model, x)[0, 1]

    trained, _ = nets.train(m, data, epochs=1, lr=1e-2, batch=1)
    assert loss(trained) < loss(m)


def test_train_deterministic():
    data = _blobs(seed=4)
    spec = ModelSpec("mlp", input_shape=(1, 2, 2), classes=2, hidden=(4,), seed=3)
    a, _ = nets.train(nets.init_model(spec), data, 3, 0.1, 8)
    b, _ = nets.train(nets.init_model(spec), data, 3, 0.1, 8)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_empty_dataset_rejected():
    empty = nets.LabeledDataset(np.zeros((0, 1, 6, 6)), [])
    with pytest.raises(T.ContractError):
        nets.train(nets.init_model(MLP), empty, 1, 0.1)


def test_grad_input_zero_first_layer():
    m = nets.init_model(CNN)
    m.params["conv0.w"][:] = 0
    m.params["conv0.b"][:] = 0
    g = nets.grad_input(m, np.random.default_rng(1).random((1, 8, 8)), 2)
    np.testing.assert_array_equal(g, np.zeros((1, 8, 8)))


def test_grad_input_linear_closed_form(rng):
    spec = ModelSpec("mlp", input_shape=(1, 3, 3), classes=4, hidden=())
    m = nets.init_model(spec)
    x = rng.random((1, 3, 3))
    t = 2
    p = nets.predict(m, x)
    e = np.eye(4)[t]
    expected = (m.params["out.w"] @ (e - p)).reshape(1, 3, 3)
    np.testing.assert_allclose(nets.grad_input(m, x, t), expected, atol=1e-14)


@pytest.mark.parametrize("spec", [CNN, MLP])
def test_grad_input_finite_differences(spec, rng):
    m = nets.init_model(spec)
    x = rng.random(spec.input_shape)
    g = nets.grad_input(m, x, 1)
    fd = central_diff(lambda v: nets.log_probs(m, v)[1], x, h=1e-5)
    assert max_rel_err(g, fd) < 1e-5


def test_grad_input_target_out_of_range():
    with pytest.raises(T.ContractError):
        nets.grad_input(nets.init_model(CNN), np.zeros((1, 8, 8)), 4)


# ---------------------------------------------------------------- weight files


def test_weights_round_trip(tmp_path, rng):
    m = nets.init_model(CNN)
    path = tmp_path / "m.w"
    nets.save_weights(m, path)
    loaded = nets.load_weights(CNN, path)
    x = rng.random((1, 8, 8))
    assert nets.predict(loaded, x).tobytes() == nets.predict(m, x).tobytes()
    for k in m.params:
        assert loaded.params[k].tobytes() == m.params[k].tobytes()
    assert nets.load_any(path).spec == CNN


def test_weights_wrong_spec(tmp_path):
    path = tmp_path / "m.w"
    nets.save_weights(nets.init_model(CNN), path)
    with pytest.raises(nets.IncompatibleWeightsError):
        nets.load_weights(MLP, path)


def test_weights_header_corruption_names_offset(tmp_path):
    path = tmp_path / "m.w"
    nets.save_weights(nets.init_model(CNN), path)
    raw = bytearray(path.read_bytes())
    header_len = len(nets.MAGIC) + 1 + 4  # magic, version, spec length
    for pos in range(header_len):
        bad = bytearray(raw)
        bad[pos] ^= 0xFF
        path.write_bytes(bytes(bad))
        with pytest.raises(nets.WeightFormatError, match="offset"):
            nets.load_weights(CNN, path)


def test_activation_pattern_mlp_by_hand():
    spec = ModelSpec("mlp", input_shape=(1, 1, 2), classes=2, hidden=(3,))
    m = nets.init_model(spec)
    m.params["fc0.w"][:] = [[1.0, -1.0, 0.0], [0.0, 0.0, 1.0]]
    m.params["fc0.b"][:] = [0.0, 0.0, -0.5]
    pat = nets.activation_pattern(m, np.array([[[[0.3, 0.2]]], [[[-0.3, 0.9]]]]))
    np.testing.assert_array_equal(pat, [[True, False, False], [False, True, True]])


@pytest.mark.parametrize("spec", [CNN, MLP])
def test_activation_pattern_counts_every_relu(spec, rng):
    m = nets.init_model(spec)
    units = sum(spec.hidden) if spec.arch == "mlp" else None
    pat = nets.activation_pattern(m, rng.random((2, *spec.input_shape)))
    assert pat.dtype == bool and pat.shape[0] == 2
    if units is not None:
        assert pat.shape[1] == units
