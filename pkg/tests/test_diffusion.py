import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from purifynet import diffusion as df
from purifynet import nn
from purifynet.datasets import Dataset

STANDARD = dict(T=1000, beta1=1e-4, betaT=0.02)


def standard():
    return df.linear_schedule(**STANDARD)


def oracle_sigma2(T, b1, bT, t):
    """1 - prod(1 - beta_i), with the betas built one at a time."""
    prod = 1.0
    for i in range(1, t + 1):
        beta = b1 if T == 1 else b1 + (i - 1) * (bT - b1) / (T - 1)
        prod *= 1.0 - beta
    return 1.0 - prod


def test_linear_schedule_endpoints_and_spacing():
    s = standard()
    assert s.beta[0] == 1e-4
    assert s.beta[-1] == pytest.approx(0.02, rel=1e-14)
    np.testing.assert_allclose(np.diff(s.beta), (0.02 - 1e-4) / 999, rtol=1e-9)
    assert s.beta_at(1) == 1e-4


def test_single_step_schedule():
    s = df.linear_schedule(1, 0.3, 0.3)
    np.testing.assert_array_equal(s.beta, [0.3])
    assert s.alpha_bar_at(1) == pytest.approx(0.7)


def test_constant_schedule_closed_form():
    s = df.linear_schedule(100, 0.05, 0.05)
    for t in (1, 10, 50, 100):
        assert s.alpha_bar_at(t) == pytest.approx(0.95 ** t, rel=1e-12)


@pytest.mark.parametrize("t", [1, 2, 44, 300, 1000])
def test_sigma2_matches_product_oracle(t):
    assert df.composed_variance(standard(), t) == pytest.approx(oracle_sigma2(1000, 1e-4, 0.02, t), rel=1e-12)


@pytest.mark.parametrize("T,t,reported", [(1000, 46, 0.0249), (1000, 54, 0.0333), (100, 19, 0.0357), (100, 11, 0.0121)])
def test_reported_optimal_variances_are_standard_schedule_steps(T, t, reported):
    # the reported optima are composed variances of the standard schedule, to 4 decimals
    s = df.linear_schedule(T, 1e-4, 0.02)
    assert round(df.composed_variance(s, t), 4) == reported


def test_alpha_bar_plus_sigma2_is_exactly_one():
    for s in (standard(), df.linear_schedule(100, 1e-4, 0.02), df.linear_schedule(200, 0.05, 0.05)):
        assert np.all(s.alpha_bar + s.sigma2 == 1.0)


@given(st.integers(1, 400), st.floats(1e-5, 0.2), st.floats(0.0, 0.3))
def test_schedule_invariants(T, b1, extra):
    bT = min(b1 + extra, 0.5)
    s = df.linear_schedule(T, b1, bT)
    assert np.all(s.alpha_bar + s.sigma2 == 1.0)
    assert np.all(np.diff(s.alpha_bar) <= 0)
    # alpha_bar may underflow for aggressive schedules, so sigma2 can reach 1.0
    assert np.all((s.sigma2 > 0) & (s.sigma2 <= 1))
    assert np.all(np.diff(s.beta) >= 0)
    assert s.alpha_bar_at(0) == 1.0


def test_posterior_variance():
    s = standard()
    assert s.posterior_variance(1) == 0.0
    t = 10
    expected = s.beta_at(t) * (1 - s.alpha_bar_at(t - 1)) / (1 - s.alpha_bar_at(t))
    assert s.posterior_variance(t) == expected
    assert 0 < s.posterior_variance(t) < s.beta_at(t)


def test_schedule_rejects_bad_parameters():
    with pytest.raises(ValueError):
        df.linear_schedule(0, 1e-4, 0.02)
    with pytest.raises(ValueError):
        df.linear_schedule(10, 0.02, 1e-4)
    with pytest.raises(ValueError):
        df.linear_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        standard().beta_at(0)
    with pytest.raises(ValueError):
        standard().alpha_bar_at(1001)


def test_schedule_round_trip():
    s = standard()
    assert df.VarianceSchedule.from_dict(s.to_dict()) == s
    assert not s.beta.flags.writeable


def test_forward_sample_uses_given_noise():
    s = standard()
    x0 = np.array([[0.2, 0.8]])
    eps = np.array([[1.0, -1.0]])
    a = s.alpha_bar_at(5)
    np.testing.assert_allclose(df.forward_sample(x0, 5, s, noise=eps),
                               math.sqrt(a) * x0 + math.sqrt(1 - a) * eps, rtol=1e-15)
    np.testing.assert_array_equal(df.forward_sample(x0, 0, s), x0)


@pytest.mark.parametrize("t", [1, 10, 50])
def test_forward_chain_agrees_with_closed_form(t):
    s = df.linear_schedule(100, 0.05, 0.05)
    n = 10_000
    x0 = np.tile([0.2, 0.9], (n, 1))
    chain = df.forward_chain(x0, t, s, nn.make_rng(1))
    direct = df.forward_sample(x0, t, s, nn.make_rng(2))
    a = s.alpha_bar_at(t)
    mean, var = np.sqrt(a) * x0[0], 1 - a
    for sample in (chain, direct):
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2 / (n - 1))
        assert np.all(np.abs(sample.mean(axis=0) - mean) < 3 * se_mean)
        assert np.all(np.abs(sample.var(axis=0, ddof=1) - var) < 3 * se_var)


def toy_model(d=3, T=20, seed=0, posterior="beta_tilde"):
    net = nn.MlpNetwork.create([d, 8, d], nn.make_rng(seed), embed_injection=True)
    return df.DiffusionModel(df.linear_schedule(T, 1e-3, 0.05), net, {}, posterior)


def test_reverse_step_inverts_first_step_with_true_noise():
    m = toy_model()
    x0 = np.array([[0.1, 0.5, 0.9]])
    eps = np.array([[0.3, -1.2, 0.7]])
    x1 = df.forward_sample(x0, 1, m.schedule, noise=eps)
    np.testing.assert_allclose(df.reverse_step(m, x1, 1, eps_hat=eps), x0, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("posterior", ["beta_tilde", "beta"])
def test_reverse_step_formula(posterior):
    m = toy_model(posterior=posterior)
    s = m.schedule
    x = np.array([[0.4, -0.2, 1.1]])
    eps_hat = np.array([[0.5, 0.1, -0.3]])
    z = np.array([[1.0, -2.0, 0.5]])
    t = 7
    b, ab = s.beta_at(t), s.alpha_bar_at(t)
    var = s.posterior_variance(t) if posterior == "beta_tilde" else b
    expected = (x - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(1 - b) + math.sqrt(var) * z
    np.testing.assert_allclose(df.reverse_step(m, x, t, noise=z, eps_hat=eps_hat), expected, rtol=1e-14)


def test_reverse_step_adds_no_noise_at_step_one():
    m = toy_model()
    x = np.array([[0.3, 0.3, 0.3]])
    a = df.reverse_step(m, x, 1, nn.make_rng(0))
    b = df.reverse_step(m, x, 1, nn.make_rng(99))
    np.testing.assert_array_equal(a, b)


def test_purify_zero_steps_is_identity():
    m = toy_model()
    x = nn.make_rng(3).uniform(size=(5, 3))
    out = df.purify(m, x, 0, nn.make_rng(0))
    assert out.tobytes() == x.tobytes()
    assert out is not x


@given(st.integers(1, 20), st.integers(0, 1000))
def test_purify_stays_in_unit_box(t, seed):
    m = toy_model()
    x = nn.make_rng(seed).uniform(size=(4, 3))
    out = df.purify(m, x, t, nn.make_rng(seed))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_purify_is_reproducible_and_checks_width():
    m = toy_model()
    x = nn.make_rng(3).uniform(size=(5, 3))
    np.testing.assert_array_equal(df.purify(m, x, 9, nn.make_rng(4)), df.purify(m, x, 9, nn.make_rng(4)))
    with pytest.raises(nn.ShapeError):
        df.purify(m, np.zeros((2, 4)), 3, nn.make_rng(0))
    with pytest.raises(ValueError):
        df.purify(m, x, 21, nn.make_rng(0))


def test_model_validation():
    s = df.linear_schedule(10, 1e-3, 0.05)
    with pytest.raises(nn.ShapeError):
        df.DiffusionModel(s, nn.MlpNetwork.create([3, 4, 2], nn.make_rng(0), embed_injection=True))
    with pytest.raises(ValueError):
        df.DiffusionModel(s, nn.MlpNetwork.create([3, 4, 3], nn.make_rng(0)))


def blob_data(n=256, seed=0):
    rng = nn.make_rng(seed)
    x = np.clip(0.5 + 0.05 * rng.standard_normal((n, 3)), 0, 1)
    return Dataset(x, np.arange(n) % 2, ["a", "b", "c"])


def test_training_reduces_loss_and_is_deterministic():
    cfg = df.DiffusionTrainConfig(epochs=60, learning_rate=3e-3, batch_size=64, hidden=(32, 32), log_interval=20)
    s = df.linear_schedule(50, 1e-3, 0.1)
    m1, h1 = df.train_diffusion(blob_data(), s, cfg)
    m2, h2 = df.train_diffusion(blob_data(), s, cfg)
    assert [e for e, _ in h1] == [20, 40, 60]
    assert h1[-1][1] < 1.0  # an untrained predictor scores about 1 on unit-variance noise
    assert m1.checksum() == m2.checksum() and h1 == h2


def test_diffusion_checkpoint_round_trip(tmp_path):
    m = toy_model(posterior="beta")
    m.save(tmp_path / "d.json")
    loaded = df.DiffusionModel.load(tmp_path / "d.json")
    assert loaded.schedule == m.schedule and loaded.posterior == "beta"
    assert loaded.checksum() == m.checksum()
    x = nn.make_rng(0).uniform(size=(3, 3))
    np.testing.assert_array_equal(df.purify(loaded, x, 5, nn.make_rng(1)), df.purify(m, x, 5, nn.make_rng(1)))


def test_train_config_validation():
    with pytest.raises(ValueError):
        df.DiffusionTrainConfig(epochs=0)
    with pytest.raises(ValueError):
        df.DiffusionTrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        df.train_diffusion(Dataset(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), ["a", "b", "c"]),
                           df.linear_schedule(5, 1e-3, 0.01), df.DiffusionTrainConfig(epochs=1))


def test_three_step_constant_schedule():
    s = df.linear_schedule(3, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81, 0.729], rtol=1e-15)
    np.testing.assert_allclose(s.sigma2, [0.1, 0.19, 0.271], rtol=1e-14)
    assert df.composed_variance(s, 3) == pytest.approx(0.271, rel=1e-14)
    np.testing.assert_array_equal(df.linear_schedule(1, 0.5, 0.5).beta, [0.5])


def test_composed_variance_ends():
    s = standard()
    assert df.composed_variance(s, 1) == pytest.approx(1e-4, rel=1e-12)
    assert df.composed_variance(s, 1000) > 0.999
    with pytest.raises(ValueError):
        df.composed_variance(s, 0)


def test_forward_sample_statistics():
    s = standard()
    np.testing.assert_allclose(df.forward_sample(np.full((2, 3), 0.7), 30, s, noise=np.zeros((2, 3))),
                               math.sqrt(s.alpha_bar_at(30)) * 0.7, rtol=1e-15)
    late = df.forward_sample(np.full((10_000, 2), 0.8), 1000, s, nn.make_rng(0))
    np.testing.assert_allclose(late.var(axis=0), 1.0, rtol=0.05)
    t = 200
    zero = df.forward_sample(np.zeros((10_000, 2)), t, s, nn.make_rng(1))
    var = s.sigma2[t - 1]
    assert np.all(np.abs(zero.mean(axis=0)) < 3 * math.sqrt(var / 10_000))
    np.testing.assert_allclose(zero.var(axis=0), var, rtol=0.05)


def test_zero_output_network_scores_unit_loss():
    m = toy_model(d=2, T=50)
    m.noise_net.weights[-1][:] = 0.0
    m.noise_net.biases[-1][:] = 0.0
    rng = nn.make_rng(0)
    n = 20_000
    x0 = rng.uniform(size=(n, 2))
    eps = rng.standard_normal((n, 2))
    t = int(rng.integers(1, 51))
    pred = m.predict_noise(df.forward_sample(x0, t, m.schedule, noise=eps), t)
    loss = float(np.mean((pred - eps) ** 2))
    # the mean of 2n unit chi-square draws has standard error sqrt(2 / 2n)
    assert abs(loss - 1.0) < 3 * math.sqrt(1 / n)


def test_two_feature_training_drives_loss_below_half():
    rng = nn.make_rng(0)
    x = np.clip(np.c_[rng.normal(0.3, 0.05, (500, 1)), rng.normal(0.7, 0.05, (500, 1))], 0, 1)
    cfg = df.DiffusionTrainConfig(epochs=400, learning_rate=3e-3, batch_size=128, hidden=(32, 32), log_interval=100)
    _, history = df.train_diffusion(Dataset(x, np.arange(500) % 2, ["a", "b"]), df.linear_schedule(100, 1e-4, 0.02), cfg)
    assert all(loss > 0 for _, loss in history)
    assert history[-1][1] < 0.5
