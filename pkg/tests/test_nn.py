import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from purifynet import nn
from support import network_gradcheck, random_network


def tiny_net():
    # 2 -> 2 -> 1 with hand-picked parameters
    w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.0, 1.0])
    w2 = np.array([[1.0], [-2.0]])
    b2 = np.array([0.5])
    return nn.MlpNetwork([2, 2, 1], [w1, w2], [b1, b2])


def test_forward_matches_hand_computation():
    out = nn.forward(tiny_net(), np.array([[1.0, 1.0], [-1.0, 0.0]])).output
    # row 1: z1 = [3, 0.5] -> relu -> [3, 0.5]; out = 3 - 1 + 0.5
    # row 2: z1 = [-1, 2] -> relu -> [0, 2]; out = -4 + 0.5
    np.testing.assert_allclose(out, [[2.5], [-3.5]])


def test_output_layer_is_identity():
    net = tiny_net()
    out = nn.forward(net, np.array([[0.0, 1.0]])).output  # hidden [2, 1.5] -> 2 - 3 + 0.5
    assert out[0, 0] < 0


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    net, x, _ = random_network(seed)
    errors = network_gradcheck(net, x, None, seed)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("seed", range(10, 16))
def test_backward_with_embedding_matches_finite_differences(seed):
    net, x, e = random_network(seed, embed=True)
    errors = network_gradcheck(net, x, e, seed)
    assert any(k.endswith("embed_proj") for k in errors)
    assert max(errors.values()) < 1e-4, errors


def test_shared_embedding_gradient():
    net, x, _ = random_network(3, embed=True)
    e = nn.sinusoidal_embedding(7, 8)
    errors = network_gradcheck(net, x, e, 3)
    assert max(errors.values()) < 1e-4


@given(st.integers(0, 10_000))
def test_forward_is_row_independent(seed):
    net, x, _ = random_network(seed)
    full = nn.forward(net, x).output
    for i in range(x.shape[0]):
        np.testing.assert_allclose(nn.forward(net, x[i:i + 1]).output, full[i:i + 1], rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_input_gradient_is_linear_in_output_gradient(seed, scale):
    net, x, _ = random_network(seed)
    cache = nn.forward(net, x)
    g = nn.make_rng(seed).standard_normal(cache.output.shape)
    _, a = nn.backward(net, cache, g)
    _, b = nn.backward(net, cache, scale * g)
    np.testing.assert_allclose(b, scale * a, rtol=1e-10, atol=1e-12)


def test_shape_errors():
    net = tiny_net()
    with pytest.raises(nn.ShapeError):
        nn.forward(net, np.zeros((3, 5)))
    with pytest.raises(nn.ShapeError):
        nn.MlpNetwork([2, 2, 1], [np.zeros((2, 3)), np.zeros((2, 1))], [np.zeros(2), np.zeros(1)])
    cache = nn.forward(net, np.zeros((3, 2)))
    with pytest.raises(nn.ShapeError):
        nn.backward(net, cache, np.zeros((3, 2)))
    with pytest.raises(nn.ShapeError):
        nn.backward(nn.MlpNetwork.create([2, 4, 1], nn.make_rng(0)), cache, np.zeros((3, 1)))


def test_embedding_required_iff_injection():
    rng = nn.make_rng(0)
    plain = nn.MlpNetwork.create([3, 4, 3], rng)
    emb = nn.MlpNetwork.create([3, 4, 3], rng, embed_injection=True)
    with pytest.raises(nn.ShapeError):
        nn.forward(plain, np.zeros((1, 3)), np.zeros(128))
    with pytest.raises(nn.ShapeError):
        nn.forward(emb, np.zeros((1, 3)))
    with pytest.raises(nn.ShapeError):
        nn.forward(emb, np.zeros((2, 3)), np.zeros((3, 128)))


def test_glorot_bounds_and_zero_biases():
    net = nn.MlpNetwork.create([10, 30, 5], nn.make_rng(1))
    assert np.abs(net.weights[0]).max() <= math.sqrt(6 / 40)
    assert np.abs(net.weights[1]).max() <= math.sqrt(6 / 35)
    assert all(not b.any() for b in net.biases)


def test_create_is_deterministic():
    a = nn.MlpNetwork.create([4, 8, 2], nn.make_rng(5), embed_injection=True)
    b = nn.MlpNetwork.create([4, 8, 2], nn.make_rng(5), embed_injection=True)
    assert a.checksum() == b.checksum()


# optimizers -----------------------------------------------------------------

def adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain loop transcription of Adam / AdamW for one parameter array."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p * (1 - lr * wd) - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adam_first_step_is_signed_learning_rate():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    nn.optimizer_step([p], [g], nn.OptimizerState("adam", 0.01))
    # bias correction makes the first update lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    np.testing.assert_allclose(p[:2], [0.99, -1.99], rtol=1e-9)


def test_adam_matches_reference_over_steps():
    rng = nn.make_rng(2)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(7)]
    p = p0.copy()
    state = nn.OptimizerState("adam", 0.05)
    for g in grads:
        nn.optimizer_step([p], [g], state)
    np.testing.assert_allclose(p, adam_reference(p0, grads, 0.05), rtol=1e-12)
    assert state.step_count == 7


def test_adamw_decays_weights_but_not_biases():
    rng = nn.make_rng(3)
    w0, b0 = rng.standard_normal((3, 2)), rng.standard_normal(2)
    grads = [(rng.standard_normal((3, 2)), rng.standard_normal(2)) for _ in range(4)]
    w, b = w0.copy(), b0.copy()
    state = nn.OptimizerState("adamw", 0.01, weight_decay=0.1)
    for gw, gb in grads:
        nn.optimizer_step([w, b], [gw, gb], state, decay_mask=[True, False])
    np.testing.assert_allclose(w, adam_reference(w0, [g[0] for g in grads], 0.01, wd=0.1), rtol=1e-12)
    np.testing.assert_allclose(b, adam_reference(b0, [g[1] for g in grads], 0.01, wd=0.0), rtol=1e-12)


def test_adam_ignores_weight_decay():
    p = np.array([1.0])
    nn.optimizer_step([p], [np.array([0.0])], nn.OptimizerState("adam", 0.1, weight_decay=0.5))
    assert p[0] == 1.0


def test_nonfinite_gradient_names_layer():
    net = tiny_net()
    grads = [np.zeros_like(p) for p in net.params()]
    grads[1][0, 0] = np.nan
    with pytest.raises(nn.NonFiniteError, match="layer2.weight"):
        nn.optimizer_step(net.params(), grads, nn.OptimizerState(), names=net.param_names())


def test_optimizer_rejects_bad_config():
    with pytest.raises(ValueError):
        nn.OptimizerState("sgd")
    with pytest.raises(ValueError):
        nn.OptimizerState("adam", 0.0)
    with pytest.raises(nn.ShapeError):
        nn.optimizer_step([np.zeros(2)], [np.zeros(3)], nn.OptimizerState())


# losses ---------------------------------------------------------------------

def test_mse_value_and_gradient():
    loss, g = nn.mse_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
    assert loss == 2.5
    np.testing.assert_allclose(g, [[1.0, 2.0]])


def test_cross_entropy_reference_values():
    loss, g = nn.cross_entropy_loss(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2), rel=1e-15)
    np.testing.assert_allclose(g, [[-0.5, 0.5]])
    loss, _ = nn.cross_entropy_loss(np.array([[2.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log1p(math.exp(-2.0)), rel=1e-14)


def test_cross_entropy_is_stable_for_large_logits():
    loss, g = nn.cross_entropy_loss(np.array([[1000.0, 0.0], [0.0, 1000.0]]), np.array([0, 0]))
    assert math.isfinite(loss) and loss == pytest.approx(500.0)
    assert np.all(np.isfinite(g))


@given(st.integers(0, 10_000))
def test_cross_entropy_gradient_matches_finite_differences(seed):
    rng = nn.make_rng(seed)
    z = rng.standard_normal((3, 2)) * 3
    y = rng.integers(0, 2, size=3)
    _, g = nn.cross_entropy_loss(z, y)
    h = 1e-6
    for i in range(3):
        for j in range(2):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (nn.cross_entropy_loss(zp, y)[0] - nn.cross_entropy_loss(zm, y)[0]) / (2 * h)
            assert abs(fd - g[i, j]) < 1e-7


def test_cross_entropy_label_errors():
    with pytest.raises(ValueError):
        nn.cross_entropy_loss(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(nn.ShapeError):
        nn.cross_entropy_loss(np.zeros((2, 2)), np.array([0]))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(row):
    p = nn.softmax(np.array([row]))
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p >= 0)


# embeddings -----------------------------------------------------------------

def test_sinusoidal_embedding_reference_values():
    e = nn.sinusoidal_embedding(1, 4)
    # frequencies 1 and 10000 ** (-2 / 4) = 0.01
    np.testing.assert_allclose(e, [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], rtol=1e-15)
    np.testing.assert_array_equal(nn.sinusoidal_embedding(0, 6), [0, 1, 0, 1, 0, 1])


def test_sinusoidal_embedding_batches():
    rows = nn.sinusoidal_embedding(np.array([3, 9]), 128)
    assert rows.shape == (2, 128)
    np.testing.assert_array_equal(rows[1], nn.sinusoidal_embedding(9, 128))


@given(st.integers(0, 5000))
def test_sinusoidal_pairs_lie_on_unit_circle(t):
    e = nn.sinusoidal_embedding(t, 16)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, rtol=1e-12)


def test_sinusoidal_embedding_errors():
    with pytest.raises(ValueError):
        nn.sinusoidal_embedding(1, 5)
    with pytest.raises(ValueError):
        nn.sinusoidal_embedding(-1, 4)


# checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = nn.MlpNetwork.create([3, 5, 3], nn.make_rng(4), embed_injection=True)
    sha = nn.save_checkpoint(tmp_path / "c.json", "diffusion", net, {"lr": 0.1})
    loaded, doc = nn.load_checkpoint(tmp_path / "c.json")
    assert loaded.checksum() == net.checksum()
    assert doc["config"] == {"lr": 0.1}
    assert len(sha) == 64
    x = nn.make_rng(0).standard_normal((4, 3))
    e = nn.sinusoidal_embedding(5)
    np.testing.assert_array_equal(nn.forward(loaded, x, e).output, nn.forward(net, x, e).output)


def test_checkpoint_version_is_checked(tmp_path):
    path = tmp_path / "c.json"
    nn.save_checkpoint(path, "classifier", tiny_net(), {})
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format_version"):
        nn.load_checkpoint(path)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    net = tiny_net()
    a = nn.save_checkpoint(tmp_path / "a.json", "classifier", net, {"k": 1})
    b = nn.save_checkpoint(tmp_path / "b.json", "classifier", net.copy(), {"k": 1})
    assert a == b
