from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cetflab.errors import ConfigError, FormatError, InputError
from cetflab.micronet import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    LayerSpec,
    MaxPool,
    Network,
    NetworkConfig,
    ReLU,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    parameter_count,
    reference_config,
    save_checkpoint,
    softmax_cross_entropy,
    tensors_equal,
    train,
)

from .gradcheck import check_layer, fd_gradient, relative_error


def tiny_config(classes=4, widths=(3, 4)):
    return reference_config(widths, classes, input_shape=(2, 8, 8))


# --- shapes and config ------------------------------------------------------


def test_reference_config_shapes():
    cfg = reference_config((8, 16))
    shapes = cfg.layer_shapes()
    assert shapes[0] == (8, 32, 32)
    assert shapes[3] == (8, 16, 16)
    assert shapes[7] == (16, 8, 8)
    assert shapes[-1] == (10,)


def test_forward_output_shape_and_mode_check():
    net = Network(tiny_config(), seed=1)
    x = np.random.default_rng(0).random((5, 2, 8, 8), dtype=np.float32)
    assert net.forward(x).shape == (5, 4)
    with pytest.raises(ConfigError):
        net.forward(x, mode="bogus")


def test_wrong_input_shape_is_config_error():
    net = Network(tiny_config(), seed=1)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((2, 3, 8, 8), np.float32))


def test_bad_config_rejected():
    layers = (LayerSpec("conv", out_channels=2, kernel=3, stride=1, pad=1), LayerSpec("maxpool", size=3))
    with pytest.raises(ConfigError):
        NetworkConfig((1, 8, 8), 2, layers).layer_shapes()
    with pytest.raises(ConfigError):
        NetworkConfig((1, 4, 4), 3, (LayerSpec("flatten"), LayerSpec("dense", out_features=2))).layer_shapes()


def test_train_mode_needs_two_images():
    net = Network(tiny_config(), seed=1)
    with pytest.raises(InputError):
        net.forward(np.zeros((1, 2, 8, 8), np.float32), mode="train")


def test_parameter_naming_and_count():
    net = Network(tiny_config(), seed=1)
    names = list(net.state_dict())
    assert names[:2] == ["0.weight", "0.bias"]
    assert "1.running_mean" in names and "1.gamma" in names
    assert "1.running_mean" not in net.trainable_names()
    # conv 2->3 (54+3), bn 3x4, conv 3->4 (108+4), bn 4x4, dense 16->4 (64+4)
    assert parameter_count(tiny_config()) == 57 + 12 + 112 + 16 + 68


def test_seeded_init_is_reproducible():
    a, b = Network(tiny_config(), seed=7), Network(tiny_config(), seed=7)
    assert tensors_equal(a.state_dict(), b.state_dict())
    c = Network(tiny_config(), seed=8)
    assert not tensors_equal(a.state_dict(), c.state_dict())


# --- per-layer gradient checks (float64, central differences) ------------------


RNG = np.random.default_rng(1234)


def test_conv_gradients():
    layer = Conv2D(3, 4, 3, 1, 1, np.random.default_rng(0), np.float64)
    layer.bias[:] = RNG.normal(size=4)
    check_layer(layer, RNG.normal(size=(3, 2, 6, 6)), RNG, params=("weight", "bias"))


def test_strided_unpadded_conv_gradients():
    layer = Conv2D(2, 3, 3, 2, 0, np.random.default_rng(1), np.float64)
    check_layer(layer, RNG.normal(size=(2, 2, 7, 7)), RNG, params=("weight", "bias"))


def test_batchnorm_train_gradients():
    layer = BatchNorm(3, 0.1, 1e-5, np.float64)
    layer.state.gamma[:] = RNG.uniform(0.5, 1.5, 3)
    layer.state.beta[:] = RNG.normal(size=3)
    check_layer(layer, RNG.normal(size=(3, 4, 5, 5)), RNG, params=("gamma", "beta"), train=True)


def test_batchnorm_eval_gradients():
    layer = BatchNorm(3, 0.1, 1e-5, np.float64)
    layer.state.running_mean[:] = RNG.normal(size=3)
    layer.state.running_var[:] = RNG.uniform(0.5, 2, 3)
    layer.state.gamma[:] = RNG.uniform(0.5, 1.5, 3)
    check_layer(layer, RNG.normal(size=(3, 4, 5, 5)), RNG, params=("gamma", "beta"), train=False)


def test_batchnorm_flat_input_gradients():
    layer = BatchNorm(6, 0.1, 1e-5, np.float64)
    layer.state.gamma[:] = RNG.uniform(0.5, 1.5, 6)
    check_layer(layer, RNG.normal(size=(8, 6)), RNG, params=("gamma", "beta"), train=True)


def test_relu_gradients():
    check_layer(ReLU(), RNG.normal(size=(3, 2, 5, 5)), RNG)


def test_maxpool_gradients():
    check_layer(MaxPool(2), RNG.normal(size=(3, 2, 6, 6)), RNG)


def test_flatten_gradients():
    check_layer(Flatten(), RNG.normal(size=(3, 2, 4, 4)), RNG)


def test_dense_gradients():
    layer = Dense(12, 5, np.random.default_rng(2), np.float64)
    layer.bias[:] = RNG.normal(size=5)
    check_layer(layer, RNG.normal(size=(4, 12)), RNG, params=("weight", "bias"))


def test_softmax_cross_entropy_gradient():
    logits = RNG.normal(size=(5, 4))
    labels = RNG.integers(0, 4, 5)
    _, d = softmax_cross_entropy(logits, labels)
    num = fd_gradient(lambda z: softmax_cross_entropy(z, labels)[0], logits.copy())
    assert relative_error(d, num) < 1e-6


def test_end_to_end_parameter_and_input_gradients():
    net = Network(tiny_config(), seed=3).astype(np.float64)
    rng = np.random.default_rng(5)
    x = rng.random((6, 2, 8, 8))
    y = rng.integers(0, 4, 6)
    snapshot = {k: v.copy() for k, v in net.state_dict().items()}

    def loss_fn():
        # train-mode loss without touching running statistics
        for k, v in net.state_dict().items():
            if "running" in k:
                v[...] = snapshot[k]
        return net.loss_and_grads(x, y, mode="train")[0]

    _, grads = net.loss_and_grads(x, y, mode="train", input_grad=True)
    params = net.state_dict()
    checked = 0
    for name in net.trainable_names():
        p = params[name]
        for flat in rng.choice(p.size, size=min(5, p.size), replace=False):
            idx = np.unravel_index(flat, p.shape)
            num = fd_gradient(loss_fn, p, idx)
            ana = grads[name][idx]
            assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num), 1e-6), (name, idx, ana, num)
            checked += 1
    for flat in rng.choice(x.size, size=20, replace=False):
        idx = np.unravel_index(flat, x.shape)
        num = fd_gradient(loss_fn, x, idx)
        ana = grads["input"][idx]
        assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num), 1e-6)
    assert checked >= 20


def test_bn_mask_only_returns_bn_affine_grads():
    net = Network(tiny_config(), seed=3)
    x = np.random.default_rng(0).random((4, 2, 8, 8), dtype=np.float32)
    _, grads = net.loss_and_grads(x, [0, 1, 2, 3], param_mask="bn")
    assert sorted(grads) == ["1.beta", "1.gamma", "5.beta", "5.gamma"]


def test_labels_validated():
    net = Network(tiny_config(), seed=3)
    x = np.zeros((2, 2, 8, 8), np.float32)
    with pytest.raises(InputError):
        net.loss_and_grads(x, [0, 9])
    with pytest.raises(InputError):
        net.loss_and_grads(x, [0])


# --- batch norm semantics ---------------------------------------------------


def test_batchnorm_running_stats_oracle():
    """Running mean/var follow the momentum rule with the biased batch variance."""
    layer = BatchNorm(2, 0.25, 1e-5, np.float64)
    x = RNG.normal(2.0, 3.0, size=(2, 5, 3, 3))
    layer.forward(x, train=True)
    flat = x.reshape(2, -1)
    np.testing.assert_allclose(layer.state.running_mean, 0.75 * 0 + 0.25 * flat.mean(axis=1))
    np.testing.assert_allclose(layer.state.running_var, 0.75 * 1 + 0.25 * flat.var(axis=1))


def test_batchnorm_eval_uses_running_stats_and_is_pure():
    layer = BatchNorm(2, 0.1, 1e-5, np.float64)
    layer.state.running_mean[:] = [1.0, -1.0]
    layer.state.running_var[:] = [4.0, 0.25]
    x = RNG.normal(size=(2, 3, 2, 2))
    y, _ = layer.forward(x, train=False)
    want = (x - np.array([1.0, -1.0])[:, None, None, None]) / np.sqrt(np.array([4.0, 0.25]) + 1e-5)[:, None, None, None]
    np.testing.assert_allclose(y, want)
    assert layer.state.running_mean.tolist() == [1.0, -1.0]
    np.testing.assert_array_equal(layer.infer(x.copy()), y)


def test_eval_forward_leaves_state_unchanged():
    net = Network(tiny_config(), seed=3)
    before = {k: v.copy() for k, v in net.state_dict().items()}
    net.forward(np.random.default_rng(0).random((3, 2, 8, 8), dtype=np.float32))
    assert tensors_equal(before, net.state_dict())


def test_fast_and_recorded_eval_paths_agree():
    net = Network(tiny_config(), seed=3)
    x = np.random.default_rng(0).random((1, 2, 8, 8), dtype=np.float32)
    logits, acts = net.forward_with_activations(x[0])
    np.testing.assert_array_equal(logits, net.forward(x)[0])
    assert len(acts) == len(net.layers)


# --- training ---------------------------------------------------------------


def test_training_fits_a_separable_problem():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 64)
    x = rng.normal(0, 0.3, (64, 2, 8, 8)).astype(np.float32)
    x[y == 1, 0, :4] += 1.5
    net = Network(reference_config((4,), 2, (2, 8, 8)), seed=0)
    result = train(net, x, y, epochs=15, lr=0.1, batch_size=16, seed=1)
    assert result.loss_trace[-1] < result.loss_trace[0]
    assert (net.predict(x) == y).mean() > 0.95


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.random((20, 2, 8, 8), dtype=np.float32)
    y = rng.integers(0, 4, 20)
    a, b = Network(tiny_config(), seed=2), Network(tiny_config(), seed=2)
    train(a, x, y, 2, 0.05, 8, seed=4, lr_schedule="cosine")
    train(b, x, y, 2, 0.05, 8, seed=4, lr_schedule="cosine")
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_train_rejects_bad_data():
    net = Network(tiny_config(), seed=2)
    with pytest.raises(InputError):
        train(net, np.zeros((0, 2, 8, 8), np.float32), np.zeros(0, int), 1, 0.1)
    with pytest.raises(InputError):
        train(net, np.zeros((3, 2, 8, 8), np.float32), np.zeros(2, int), 1, 0.1)


def test_sgd_step_rejects_unknown_tensors():
    net = Network(tiny_config(), seed=2)
    with pytest.raises(KeyError):
        net.sgd_step({"1.running_mean": np.zeros(3, np.float32)}, 0.1)


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = Network(tiny_config(), seed=9)
    x = np.random.default_rng(0).random((4, 2, 8, 8), dtype=np.float32)
    net.forward(x, mode="train")
    path = save_checkpoint(net, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert tensors_equal(net.state_dict(), back.state_dict())
    assert checkpoint_bytes(back) == path.read_bytes()
    np.testing.assert_array_equal(net.forward(x), back.forward(x))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), widths=st.lists(st.integers(1, 5), min_size=1, max_size=2))
def test_checkpoint_roundtrip_property(seed, widths):
    net = Network(reference_config(tuple(widths), 3, (1, 8, 8)), seed=seed)
    data = checkpoint_bytes(net)
    assert checkpoint_bytes(checkpoint_from_bytes(data)) == data


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + (99).to_bytes(4, "little") + d[8:],
        lambda d: d[:-3],
        lambda d: d + b"\0",
        lambda d: d[:12] + b"[" + d[13:],
    ],
    ids=["magic", "version", "truncated", "trailing", "config"],
)
def test_corrupt_checkpoint_is_format_error(mutate):
    data = checkpoint_bytes(Network(tiny_config(), seed=1))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(mutate(data))


def test_missing_checkpoint_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.ckpt")


# --- worked examples --------------------------------------------------------


def identity_dense_net(k=4):
    cfg = NetworkConfig((k,), k, (LayerSpec("dense", out_features=k),))
    net = Network(cfg, seed=0)
    net.layers[0].weight[...] = np.eye(k, dtype=np.float32)
    net.layers[0].bias[...] = 0
    return net


def test_identity_dense_net_passes_basis_vectors():
    net = identity_dense_net(4)
    for k in range(4):
        e = np.zeros((1, 4), np.float32)
        e[0, k] = 1
        np.testing.assert_array_equal(net.forward(e), e)


def test_batchnorm_identity_with_zero_epsilon():
    layer = BatchNorm(3, 0.1, 0.0)
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 4)).astype(np.float32)
    y, _ = layer.forward(x, train=False)
    np.testing.assert_array_equal(y, x)


def test_eval_forward_is_bitwise_repeatable():
    net = Network(tiny_config(), seed=5)
    x = np.random.default_rng(1).random((7, 2, 8, 8), dtype=np.float32)
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_batchnorm_running_update_is_exact():
    # values chosen so every intermediate is exactly representable
    layer = BatchNorm(1, 0.5, 1e-5)
    x = np.array([1, 3, 5, 7], np.float32).reshape(1, 4, 1, 1)
    layer.forward(x, train=True)
    assert layer.state.running_mean[0] == np.float32(0.5 * 0 + 0.5 * 4)
    assert layer.state.running_var[0] == np.float32(0.5 * 1 + 0.5 * 5)


def test_uniform_logits_loss_is_log_classes():
    for c in (2, 5, 10):
        loss, _ = softmax_cross_entropy(np.zeros((3, c)), np.arange(3) % c)
        assert loss == pytest.approx(np.log(c), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.integers(0, 2))
def test_loss_is_non_negative(logits, label):
    loss, _ = softmax_cross_entropy(np.array([logits]), np.array([label]))
    assert loss >= 0


def test_sgd_examples():
    net = identity_dense_net(2)
    before = checkpoint_bytes(net)
    net.sgd_step({"0.bias": np.ones(2, np.float32)}, 0.0)
    assert checkpoint_bytes(net) == before
    net.layers[0].bias[...] = 1
    net.sgd_step({"0.bias": np.array([0.5, 0.5], np.float32)}, 0.1)
    np.testing.assert_array_equal(net.layers[0].bias, np.float32(1) - np.float32(0.1 * 0.5))
    assert net.layers[0].bias[0] == pytest.approx(0.95)


def test_bn_only_step_leaves_conv_and_dense_untouched():
    net = Network(tiny_config(), seed=3)
    x = np.random.default_rng(0).random((4, 2, 8, 8), dtype=np.float32)
    frozen = [n for n in net.trainable_names() if not n.split(".")[0] in ("1", "5")]
    before = {n: net.state_dict()[n].copy() for n in frozen}
    _, grads = net.loss_and_grads(x, [0, 1, 2, 3], param_mask="bn")
    net.sgd_step(grads, 0.5)
    assert tensors_equal(before, net.state_dict(), frozen)


def test_activations_match_plain_forward_on_100_images():
    net = Network(reference_config((4, 8)), seed=2)
    images = np.random.default_rng(3).random((100, 3, 32, 32), dtype=np.float32)
    for img in images:
        logits, acts = net.forward_with_activations(img)
        assert logits.tobytes() == net.forward(img[None])[0].tobytes()
        assert len(acts) == len(net.layers)
    shapes = net.config.layer_shapes()
    last_conv = net.last_conv_activation_index()
    assert acts[last_conv].shape == shapes[last_conv]


def test_linearly_separable_set_is_learned():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(200, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(3, 8, 8))
    y = (np.tensordot(x, w, axes=3) > 0).astype(int)
    net = Network(NetworkConfig((3, 8, 8), 2, (LayerSpec("flatten"), LayerSpec("dense", out_features=2))), seed=0)
    result = train(net, x, y, epochs=60, lr=0.5, batch_size=20, seed=0)
    assert all(np.isfinite(result.loss_trace))
    assert (net.predict(x) == y).mean() >= 0.99


def test_reference_checkpoint_is_small():
    net = Network(reference_config((16, 32)), seed=0)
    assert len(checkpoint_bytes(net)) <= 10 * 2**20
    assert len(checkpoint_bytes(net)) > 4 * parameter_count(net.config)


def test_finite_outputs_and_gradients():
    net = Network(tiny_config(), seed=3)
    x = np.random.default_rng(0).random((4, 2, 8, 8), dtype=np.float32)
    loss, grads = net.loss_and_grads(x, [0, 1, 2, 3], input_grad=True)
    assert np.isfinite(loss)
    assert all(np.isfinite(g).all() for g in grads.values())
