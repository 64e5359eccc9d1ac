import numpy as np
import pytest

from conftest import TINY_SIZES, tiny_model
from evstream.nn import (
    AdamState,
    BatchNormState,
    DenseLayer,
    Layer,
    MlpModel,
    TrainConfig,
    adam_step,
    backward_block,
    fold_block,
    forward_block,
    load_config,
    load_weights,
    loss,
    save_config,
    save_weights,
    softmax_cross_entropy,
    squared_error,
    weights_checksum,
)


class TestForward:
    def test_identity_layer(self):
        layer = Layer(DenseLayer(np.eye(4), np.zeros(4)), None, "linear")
        x = np.random.default_rng(0).standard_normal((5, 4))
        out, _ = forward_block([layer], x, training=False)
        assert np.array_equal(out, x)

    def test_inference_bn_passthrough(self):
        bn = BatchNormState(4)  # running mean 0, var 1, gamma 1, beta 0
        layer = Layer(DenseLayer(np.eye(4), np.zeros(4)), bn, "linear")
        x = np.random.default_rng(0).standard_normal((5, 4))
        out, _ = forward_block([layer], x, training=False)
        assert np.allclose(out, x, rtol=1e-4)

    def test_two_layer_matches_matrix_oracle(self):
        rng = np.random.default_rng(1)
        w1, b1 = rng.standard_normal((6, 3)), rng.standard_normal(6)
        w2, b2 = rng.standard_normal((2, 6)), rng.standard_normal(2)
        layers = [Layer(DenseLayer(w1, b1), None, "relu"),
                  Layer(DenseLayer(w2, b2), None, "linear")]
        x = rng.standard_normal((7, 3))
        out, _ = forward_block(layers, x, training=True)
        want = np.maximum(x @ w1.T + b1, 0) @ w2.T + b2
        assert np.max(np.abs(out - want)) < 1e-12

    def test_width_mismatch_rejected(self):
        layer = Layer(DenseLayer(np.eye(4), np.zeros(4)), None, "linear")
        with pytest.raises(ValueError, match="width"):
            forward_block([layer], np.zeros((2, 3)), training=False)


class TestBackward:
    def test_zero_output_gradient(self):
        rng = np.random.default_rng(2)
        layers = [Layer(DenseLayer(rng.standard_normal((4, 3)), rng.standard_normal(4)),
                        BatchNormState(4), "relu")]
        x = rng.standard_normal((6, 3))
        out, caches = forward_block(layers, x, training=True)
        d_in, grads = backward_block(layers, caches, np.zeros_like(out))
        assert np.all(d_in == 0)
        for g in grads[0]:
            assert np.all(g == 0)

    def test_linear_layer_squared_loss_closed_form(self):
        # loss = |W x - y|^2 => dW = 2 (W x - y) x^T
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal((1, 4))
        y = rng.standard_normal((1, 3))
        layers = [Layer(DenseLayer(w, np.zeros(3)), None, "linear")]
        out, caches = forward_block(layers, x, training=True)
        _, d_out = squared_error(out, y)
        _, grads = backward_block(layers, caches, d_out)
        want = 2.0 * (w @ x[0] - y[0])[:, None] @ x
        assert np.max(np.abs(grads[0][0] - want)) < 1e-12


class TestAdam:
    def test_zero_gradient_no_update(self):
        p = np.ones(4)
        state = AdamState([p])
        adam_step([p], [np.zeros(4)], state, lr=0.1)
        assert np.array_equal(p, np.ones(4))

    def test_first_step_hand_computed(self):
        g = np.array([0.3, -2.0])
        p = np.zeros(2)
        state = AdamState([p])
        adam_step([p], [g], state, lr=0.01)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        want = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.max(np.abs(p - want)) < 1e-12

    def test_quadratic_converges(self):
        p = np.array([3.0])
        state = AdamState([p])
        losses = []
        for _ in range(100):
            losses.append(p[0] ** 2)
            adam_step([p], [2 * p], state, lr=0.1)
        # approaches zero from the start without ever exceeding it
        assert losses[-1] < 1e-3 * losses[0]
        assert max(losses) == losses[0]


class TestLosses:
    def test_perfect_one_hot(self):
        logits = np.array([[100.0, 0.0, 0.0]])
        value, _ = softmax_cross_entropy(logits, np.array([0]))
        assert value < 1e-12

    def test_l2_identical(self):
        x = np.random.default_rng(0).standard_normal((4, 2))
        value, grad = squared_error(x, x.copy())
        assert value == 0.0
        assert np.all(grad == 0)

    def test_cross_entropy_matches_logsumexp(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((20, 7))
        labels = rng.integers(0, 7, 20)
        value, _ = softmax_cross_entropy(logits, labels)
        direct = np.mean(np.log(np.sum(np.exp(logits), axis=1))
                         - logits[np.arange(20), labels])
        assert abs(value - direct) < 1e-12

    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, 5)
        _, grad = softmax_cross_entropy(logits, labels)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        probs[np.arange(5), labels] -= 1
        assert np.max(np.abs(grad - probs / 5)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_dispatch(self):
        v, _ = loss(np.zeros((1, 2)), np.zeros((1, 2)), "l2")
        assert v == 0.0
        with pytest.raises(ValueError):
            loss(np.zeros((1, 2)), np.zeros(1, dtype=int), "hinge")


class TestBatchNormFolding:
    def test_fold_matches_inference_forward(self):
        rng = np.random.default_rng(7)
        model = tiny_model(seed=7)
        # make running stats non-trivial
        for _, block in model.blocks():
            for layer in block:
                if layer.bn is not None:
                    layer.bn.running_mean = rng.standard_normal(layer.bn.dim) * 0.2
                    layer.bn.running_var = rng.uniform(0.5, 2.0, layer.bn.dim)
                    layer.bn.gamma = rng.uniform(0.5, 1.5, layer.bn.dim)
                    layer.bn.beta = rng.standard_normal(layer.bn.dim) * 0.1
        x = rng.standard_normal((50, 3))
        out, _ = forward_block(model.mlp1, x, training=False)
        folded_out, _ = forward_block(fold_block(model.mlp1), x, training=False)
        assert np.max(np.abs(out - folded_out)) < 1e-6

    def test_degenerate_variance_rejected(self):
        model = tiny_model(seed=8)
        model.mlp1[0].bn.running_var[:] = 1e-15
        with pytest.raises(ValueError, match="degenerate"):
            fold_block(model.mlp1)


class TestTanhBound:
    def test_mlp2_magnitudes_below_one(self):
        model = tiny_model(seed=9)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200, 3)) * 100  # drive tanh into saturation
        local, _ = forward_block(model.mlp1, x, training=False)
        z, _ = forward_block(model.mlp2, local, training=False)
        assert np.all(np.abs(z) < 1.0)
        assert model.mlp2[-1].activation == "tanh"


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path):
        model = tiny_model(seed=10)
        path = tmp_path / "w.bin"
        checksum = save_weights(model, path)
        back = load_weights(path)
        assert weights_checksum(back) == checksum
        for (n1, b1), (n2, b2) in zip(model.blocks(), back.blocks()):
            for l1, l2 in zip(b1, b2):
                assert np.array_equal(l1.dense.weights, l2.dense.weights)
                assert np.array_equal(l1.dense.bias, l2.dense.bias)
                assert (l1.bn is None) == (l2.bn is None)
                if l1.bn is not None:
                    assert np.array_equal(l1.bn.running_var, l2.bn.running_var)
                    assert l1.bn.momentum == l2.bn.momentum
        assert back.k == model.k and back.pointnet == model.pointnet

    def test_checksum_changes_with_weights(self, tmp_path):
        model = tiny_model(seed=11)
        c1 = weights_checksum(model)
        model.mlp1[0].dense.weights[0, 0] += 1.0
        assert weights_checksum(model) != c1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_weights(path)


class TestTrainConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(learning_rate=2e-4)
        assert cfg.lr_at(0) == 2e-4
        assert cfg.lr_at(19) == 2e-4
        assert cfg.lr_at(20) == 1e-4
        assert cfg.lr_at(40) == 5e-5
        assert cfg.lr_at(100) == 2e-4 / 32
        assert cfg.lr_at(400) == 2e-4 / 32

    def test_bn_momentum_ramp(self):
        cfg = TrainConfig(epochs=11)
        assert cfg.bn_momentum_at(0) == pytest.approx(0.5)
        assert cfg.bn_momentum_at(10) == pytest.approx(0.99)

    def test_json_roundtrip(self, tmp_path):
        cfg = TrainConfig(k=32, epochs=3, heads=("global",), crop=(8, 8),
                          sizes=TINY_SIZES, mode="no_tr")
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_defaults_follow_protocol(self):
        cfg = TrainConfig()
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
        assert cfg.learning_rate == 2e-4
        assert cfg.epochs == 500
        assert cfg.streams_per_epoch == 8000
