"""Forward noising kernels and exact posteriors.

Positions follow a Gaussian chain, feature classes a uniform-mixing
categorical chain. ``t`` may be a Python int or a per-row integer tensor
(one step per atom); per-row values broadcast over the trailing dimension.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .schedule import Schedule


class GaussianPosterior(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor | float


def _col(schedule: Schedule, name: str, t, like: torch.Tensor):
    val = schedule.at(name, t, like)
    if isinstance(val, torch.Tensor):
        val = val.unsqueeze(-1)
    return val


def _sqrt(v):
    return v.sqrt() if isinstance(v, torch.Tensor) else v**0.5


def noise_positions(x0: torch.Tensor, t, schedule: Schedule, generator=None):
    """Sample x_t ~ q(x_t | x_0); returns ``(x_t, eps)``."""
    schedule.check_step(t)
    abar = _col(schedule, "alpha_bar_x", t, x0)
    eps = torch.randn(x0.shape, dtype=x0.dtype, generator=generator)
    return _sqrt(abar) * x0 + _sqrt(1.0 - abar) * eps, eps


def position_step(x_prev: torch.Tensor, t, schedule: Schedule, generator=None) -> torch.Tensor:
    """One transition of the Gaussian chain, q(x_t | x_{t-1})."""
    schedule.check_step(t)
    beta = _col(schedule, "beta_x", t, x_prev)
    eps = torch.randn(x_prev.shape, dtype=x_prev.dtype, generator=generator)
    return _sqrt(1.0 - beta) * x_prev + _sqrt(beta) * eps


def _check_one_hot(v: torch.Tensor) -> None:
    if not (((v == 0) | (v == 1)).all() and (v.sum(-1) == 1).all()):
        raise ValueError("feature vectors must be one-hot")


def feature_marginal(v0: torch.Tensor, t, schedule: Schedule) -> torch.Tensor:
    abar = _col(schedule, "alpha_bar_v", t, v0)
    K = v0.shape[-1]
    return abar * v0 + (1.0 - abar) / K


def sample_one_hot(probs: torch.Tensor, generator=None) -> torch.Tensor:
    idx = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=generator)
    out = torch.zeros_like(probs).reshape(-1, probs.shape[-1])
    out.scatter_(1, idx, 1.0)
    return out.reshape(probs.shape)


def noise_features(v0: torch.Tensor, t, schedule: Schedule, generator=None) -> torch.Tensor:
    """Sample a one-hot v_t from the closed-form marginal q(v_t | v_0)."""
    _check_one_hot(v0)
    schedule.check_step(t)
    return sample_one_hot(feature_marginal(v0, t, schedule), generator)


def feature_transition_matrix(t: int, schedule: Schedule, K: int, dtype=torch.float64) -> torch.Tensor:
    """Row-stochastic matrix M with M[i, j] = q(v_t = j | v_{t-1} = i)."""
    beta = schedule.at("beta_v", t)
    return (1.0 - beta) * torch.eye(K, dtype=dtype) + beta / K


def posterior_coefficients(t, schedule: Schedule, like: torch.Tensor | None = None):
    """Coefficients of x_0 and x_t in the posterior mean, and the posterior variance."""
    like = like if like is not None else torch.zeros((), dtype=torch.float64)
    abar = _col(schedule, "alpha_bar_x", t, like)
    abar_prev = schedule.at("alpha_bar_x", t - 1, like)
    if isinstance(abar_prev, torch.Tensor):
        abar_prev = abar_prev.unsqueeze(-1)
    beta = _col(schedule, "beta_x", t, like)
    coef0 = _sqrt(abar_prev) * beta / (1.0 - abar)
    coeft = _sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    var = (1.0 - abar_prev) / (1.0 - abar) * beta
    return coef0, coeft, var


def posterior_positions(x_t: torch.Tensor, x0: torch.Tensor, t, schedule: Schedule) -> GaussianPosterior:
    schedule.check_step(t)
    coef0, coeft, var = posterior_coefficients(t, schedule, x_t)
    return GaussianPosterior(coef0 * x0 + coeft * x_t, var)


def posterior_features(v_t: torch.Tensor, v0: torch.Tensor, t, schedule: Schedule) -> torch.Tensor:
    """Probabilities of q(v_{t-1} | v_t, v_0); ``v0`` may be a soft prediction."""
    schedule.check_step(t)
    K = v_t.shape[-1]
    alpha = 1.0 - _col(schedule, "beta_v", t, v_t)
    abar_prev = schedule.at("alpha_bar_v", t - 1, v_t)
    if isinstance(abar_prev, torch.Tensor):
        abar_prev = abar_prev.unsqueeze(-1)
    unnorm = (alpha * v_t + (1.0 - alpha) / K) * (abar_prev * v0 + (1.0 - abar_prev) / K)
    total = unnorm.sum(-1, keepdim=True)
    if (total < 1e-300).any():
        raise ValueError("degenerate posterior")
    return unnorm / total
