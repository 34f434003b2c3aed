import numpy as np
import pytest
import torch

from shapediff.checks import (
    categorical_marginal_deviation,
    categorical_posterior_deviation,
    exhaustive_feature_posterior,
    gaussian_marginal_zscores,
    gaussian_posterior_zscores,
)
from shapediff.forward_process import (
    feature_marginal,
    feature_transition_matrix,
    noise_features,
    noise_positions,
    posterior_coefficients,
    posterior_features,
    posterior_positions,
)


def test_noise_positions_closed_form(schedule):
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(5, 3, dtype=torch.float64)
    xt, eps = noise_positions(x0, 100, schedule, gen)
    abar = schedule.alpha_bar_x[100]
    torch.testing.assert_close(xt, abar**0.5 * x0 + (1 - abar) ** 0.5 * eps)


def test_noise_positions_per_row_steps(schedule):
    x0 = torch.ones(3, 3, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    xt, eps = noise_positions(x0, t, schedule, torch.Generator().manual_seed(1))
    for i, ti in enumerate(t.tolist()):
        a = schedule.alpha_bar_x[ti]
        torch.testing.assert_close(xt[i], a**0.5 * x0[i] + (1 - a) ** 0.5 * eps[i])


def test_step_bounds(schedule):
    with pytest.raises(ValueError):
        noise_positions(torch.zeros(1, 3), 0, schedule)
    with pytest.raises(ValueError):
        noise_positions(torch.zeros(1, 3), torch.tensor([1, 1001]), schedule)


def test_noise_features_requires_one_hot(schedule):
    with pytest.raises(ValueError):
        noise_features(torch.full((2, 15), 1 / 15, dtype=torch.float64), 3, schedule)


def test_noise_features_frequencies(schedule):
    v0 = torch.zeros(20000, 15, dtype=torch.float64)
    v0[:, 3] = 1
    vt = noise_features(v0, 400, schedule, torch.Generator().manual_seed(0))
    freq = vt.mean(0)
    expected = feature_marginal(v0[:1], 400, schedule)[0]
    se = (expected * (1 - expected) / 20000).sqrt()
    assert torch.all((freq - expected).abs() < 4 * se)


def test_feature_marginal_at_T_is_uniform(schedule):
    v0 = torch.eye(15, dtype=torch.float64)
    torch.testing.assert_close(feature_marginal(v0, 1000, schedule), torch.full((15, 15), 1 / 15, dtype=torch.float64))


def test_transition_matrix_rows(schedule):
    M = feature_transition_matrix(10, schedule, 15)
    torch.testing.assert_close(M.sum(1), torch.ones(15, dtype=torch.float64))


def test_categorical_posterior_exhaustive(schedule):
    assert categorical_posterior_deviation(schedule, ts=(1, 2, 500, 1000)) < 1e-12


def test_categorical_posterior_hand_case(schedule):
    # at t = 1 the previous state is v_0 itself
    v0 = torch.eye(15, dtype=torch.float64)[[4]]
    vt = torch.eye(15, dtype=torch.float64)[[7]]
    torch.testing.assert_close(posterior_features(vt, v0, 1, schedule), v0)


def test_categorical_posterior_soft_v0_normalised(schedule, rng):
    v0 = torch.softmax(torch.as_tensor(rng.normal(size=(6, 15))), -1)
    vt = torch.eye(15, dtype=torch.float64)[rng.integers(0, 15, 6)]
    p = posterior_features(vt, v0, 37, schedule)
    torch.testing.assert_close(p.sum(-1), torch.ones(6, dtype=torch.float64))
    assert torch.all(p >= 0)


def test_exhaustive_posterior_small_K(schedule):
    # K = 2 by hand at t = 2
    P = exhaustive_feature_posterior(2, schedule, 2)
    a1 = 1 - schedule.beta_v[1]
    a2 = 1 - schedule.beta_v[2]
    prior = np.array([[a1 + (1 - a1) / 2, (1 - a1) / 2], [(1 - a1) / 2, a1 + (1 - a1) / 2]])
    like = np.array([[a2 + (1 - a2) / 2, (1 - a2) / 2], [(1 - a2) / 2, a2 + (1 - a2) / 2]])
    # v0 = 0, v_t = 1
    num = prior[0] * like[:, 1]
    np.testing.assert_allclose(P[0, 1].numpy(), num / num.sum(), rtol=1e-13)


def test_gaussian_posterior_identities(schedule):
    x0 = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    post = posterior_positions(x0, x0, 1, schedule)
    torch.testing.assert_close(post.mean, x0)
    assert post.variance == 0.0
    c0, ct, var = posterior_coefficients(500, schedule)
    ab, abp, b = schedule.alpha_bar_x[500], schedule.alpha_bar_x[499], schedule.beta_x[500]
    assert c0 == pytest.approx(abp**0.5 * b / (1 - ab), rel=1e-14)
    assert ct == pytest.approx((1 - b) ** 0.5 * (1 - abp) / (1 - ab), rel=1e-14)
    assert var == pytest.approx((1 - abp) / (1 - ab) * b, rel=1e-14)


def test_gaussian_posterior_importance_sampling(schedule):
    assert gaussian_posterior_zscores(schedule, ts=(2, 10, 500), n=20_000, seed=3) < 4.0


def test_marginals_compose(schedule):
    assert categorical_marginal_deviation(schedule) < 1e-12
    assert gaussian_marginal_zscores(schedule, ts=(1, 10, 50), n=20_000, seed=2) < 4.0
