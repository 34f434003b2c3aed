"""Oracle checks shared by the ``verify`` command and the acceptance tests.

Every check returns a :class:`CheckResult`; the numbers it reports are the
measured deviation and the bound it was held to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .forward_process import (
    feature_marginal,
    feature_transition_matrix,
    noise_positions,
    position_step,
    posterior_features,
    posterior_positions,
)
from .geometry import Molecule, build_surface_point_cloud, random_rotation, sample_query_points
from .predictor import Predictor, PredictorConfig, eq_gnn_layer, inv_gnn_layer
from .schedule import Schedule
from .shape_autoencoder import AutoencoderConfig, ShapeAutoencoder, pretrain_loss
from .training import TrainConfig, TrainItem, total_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.3e} (bound {self.bound:.1e}, {self.seconds:.1f}s) {self.detail}".rstrip()


def _timed(fn: Callable[[], tuple[float, float, str]], name: str, compare=lambda v, b: v < b) -> CheckResult:
    start = time.perf_counter()
    value, bound, detail = fn()
    return CheckResult(name, bool(compare(value, bound)), value, bound, time.perf_counter() - start, detail)


# --- posteriors ---------------------------------------------------------


def cumulative_transition(t: int, schedule: Schedule, K: int) -> torch.Tensor:
    """Product of the one-step feature transition matrices for steps 1..t."""
    M = torch.eye(K, dtype=torch.float64)
    for s in range(1, t + 1):
        M = M @ feature_transition_matrix(s, schedule, K)
    return M


def exhaustive_feature_posterior(t: int, schedule: Schedule, K: int) -> torch.Tensor:
    """P[i, k, j] = q(v_{t-1}=j | v_t=k, v_0=i) by Bayes over explicit matrices."""
    prior = cumulative_transition(t - 1, schedule, K)  # [i, j] = q(v_{t-1}=j | v_0=i)
    step = feature_transition_matrix(t, schedule, K)  # [j, k] = q(v_t=k | v_{t-1}=j)
    joint = prior[:, None, :] * step.T[None, :, :]  # [i, k, j]
    return joint / joint.sum(-1, keepdim=True)


def categorical_posterior_deviation(schedule: Schedule, ts=(1, 2, 500, 1000), K: int = 15) -> float:
    eye = torch.eye(K, dtype=torch.float64)
    v0 = eye.repeat_interleave(K, 0)  # i-major
    vt = eye.repeat(K, 1)
    worst = 0.0
    for t in ts:
        closed = posterior_features(vt, v0, t, schedule).reshape(K, K, K)
        worst = max(worst, float((closed - exhaustive_feature_posterior(t, schedule, K)).abs().max()))
    return worst


def gaussian_posterior_zscores(schedule: Schedule, ts=(2, 10, 500), n: int = 100_000, seed: int = 0):
    """Self-normalised importance-sampling estimate of E[x_{t-1} | x_t, x_0].

    Proposals come from q(x_{t-1} | x_0) and are weighted by q(x_t | x_{t-1});
    returns the largest |estimate - closed form| / standard error.
    """
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for t in ts:
        x0 = torch.tensor([[0.7, -1.2, 0.3]], dtype=torch.float64)
        xt, _ = noise_positions(x0, t, schedule, gen)
        abar_prev = schedule.at("alpha_bar_x", t - 1)
        beta = schedule.at("beta_x", t)
        prop = abar_prev**0.5 * x0 + (1 - abar_prev) ** 0.5 * torch.randn((n, 3), dtype=torch.float64, generator=gen)
        logw = -((xt - (1 - beta) ** 0.5 * prop) ** 2) / (2 * beta)  # per coordinate
        w = torch.softmax(logw, dim=0)
        est = (w * prop).sum(0)
        se = ((w**2) * (prop - est) ** 2).sum(0).sqrt()
        mu = posterior_positions(xt, x0, t, schedule).mean[0]
        worst = max(worst, float(((est - mu).abs() / se).max()))
    return worst


def categorical_marginal_deviation(schedule: Schedule, ts=None, K: int = 15) -> float:
    """Matrix products against the closed-form marginal over steps below T."""
    ts = ts or (1, 2, 10, 100, 500, schedule.T - 1)
    eye = torch.eye(K, dtype=torch.float64)
    worst = 0.0
    M = torch.eye(K, dtype=torch.float64)
    last = 0
    for t in sorted(ts):
        for s in range(last + 1, t + 1):
            M = M @ feature_transition_matrix(s, schedule, K)
        last = t
        worst = max(worst, float((M - feature_marginal(eye, t, schedule)).abs().max()))
    return worst


def gaussian_marginal_zscores(schedule: Schedule, ts=(1, 10, 100), n: int = 100_000, seed: int = 0) -> float:
    """Chain per-step kernels from a fixed x_0 and z-score the sample moments."""
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.tensor([1.5, -0.5, 0.25], dtype=torch.float64)
    x = x0.expand(n, 3).clone()
    worst, last = 0.0, 0
    for t in sorted(ts):
        for s in range(last + 1, t + 1):
            x = position_step(x, s, schedule, gen)
        last = t
        abar = schedule.at("alpha_bar_x", t)
        mean, var = abar**0.5 * x0, 1 - abar
        z_mean = (x.mean(0) - mean).abs() / (var / n) ** 0.5
        z_var = (x.var(0) - var).abs() / (var * (2.0 / (n - 1)) ** 0.5)
        worst = max(worst, float(z_mean.max()), float(z_var.max()))
    return worst


# --- schedule -----------------------------------------------------------


def schedule_report(schedule: Schedule) -> dict:
    T = schedule.T
    return {
        "beta_x_half": float(schedule.beta_x[T // 2]),
        "abar_v_0": float(schedule.alpha_bar_v[0]),
        "abar_v_T": float(schedule.alpha_bar_v[T]),
        "abar_x_monotone": bool(np.all(np.diff(schedule.alpha_bar_x) <= 0)),
        "abar_v_monotone": bool(np.all(np.diff(schedule.alpha_bar_v) <= 0)),
        "beta_x_max": float(schedule.beta_x[1:].max()),
    }


# --- equivariance -------------------------------------------------------


def _small_autoencoder(seed: int = 0) -> ShapeAutoencoder:
    torch.manual_seed(seed)
    return ShapeAutoencoder(
        AutoencoderConfig(hidden=8, latent=4, n_layers=2, k=6, decoder_layers=3, dtype="float64")
    )


def _small_predictor(seed: int = 0, latent: int = 4) -> Predictor:
    torch.manual_seed(seed)
    return Predictor(
        PredictorConfig(hidden=8, n_layers=2, n_heads=2, n_neighbors=4, latent=latent, n_rbf=4, time_dim=4, dtype="float64")
    )


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / b.norm().clamp_min(1e-300))


def _probe_molecule(seed: int = 0, n: int = 7) -> Molecule:
    rng = np.random.default_rng(seed)
    pos = np.cumsum(rng.normal(scale=0.9, size=(n, 3)), axis=0)
    return Molecule(pos - pos.mean(0), rng.integers(0, 15, size=n))


def equivariance_errors(n_rotations: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error of each equivariance or invariance property."""
    ae = _small_autoencoder(seed)
    model = _small_predictor(seed)
    mol = _probe_molecule(seed)
    cloud = torch.as_tensor(build_surface_point_cloud(mol, 32, seed).points)
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(16, 3, dtype=torch.float64, generator=gen) * 2
    x = torch.as_tensor(mol.positions)
    v = torch.nn.functional.one_hot(torch.as_tensor(mol.types), 15).to(torch.float64)
    t = 250
    with torch.no_grad():
        H = ae.encode(cloud)
        sdf = ae.decode(q, H)
        pred, layers = model(x, v, H, t, return_layers=True)
        h1 = model.initial_embedding(v, torch.full((len(v),), t))
        h_inv = inv_gnn_layer(h1, x, H, model.inv_layers[0], model)
        x_eq = eq_gnn_layer(x, h_inv, H, model.eq_layers[0], model)
    worst = dict.fromkeys(
        ["encoder", "decoder", "inv_layer", "eq_layer", "predictor_x", "predictor_v", "layer_trace"], 0.0
    )
    for r in range(n_rotations):
        R = torch.as_tensor(random_rotation([seed, r]).matrix)
        with torch.no_grad():
            HR = ae.encode(cloud @ R.T)
            worst["encoder"] = max(worst["encoder"], _rel(HR, H @ R.T))
            worst["decoder"] = max(worst["decoder"], _rel(ae.decode(q @ R.T, HR), sdf))
            hR = inv_gnn_layer(h1, x @ R.T, HR, model.inv_layers[0], model)
            worst["inv_layer"] = max(worst["inv_layer"], _rel(hR, h_inv))
            xR = eq_gnn_layer(x @ R.T, hR, HR, model.eq_layers[0], model)
            worst["eq_layer"] = max(worst["eq_layer"], _rel(xR, x_eq @ R.T))
            predR, layersR = model(x @ R.T, v, HR, t, return_layers=True)
            worst["predictor_x"] = max(worst["predictor_x"], _rel(predR.x0_hat, pred.x0_hat @ R.T))
            worst["predictor_v"] = max(worst["predictor_v"], _rel(predR.v0_hat, pred.v0_hat))
            for (xl, hl), (xlR, hlR) in zip(layers, layersR):
                worst["layer_trace"] = max(worst["layer_trace"], _rel(xlR, xl @ R.T), _rel(hlR, hl))
    return worst


# --- gradients ----------------------------------------------------------


def finite_difference_errors(
    loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.nn.Parameter], h: float = 1e-5, floor: float = 1e-6
) -> dict[str, float]:
    """Relative error ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, floor) per parameter tensor.

    Central differences perturb every scalar entry in turn. The floor keeps
    tensors whose true gradient is zero (a key bias under softmax, say) from
    reporting pure roundoff as a relative error of one.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    out = {}
    for name, p in params.items():
        g_ad = p.grad.detach().clone()
        g_fd = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g_fd.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
        scale = max(float(g_ad.norm()), float(g_fd.norm()), floor)
        out[name] = float((g_ad - g_fd).norm()) / scale
    return out


def autoencoder_gradient_errors(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    ae = _small_autoencoder(seed)
    mol = _probe_molecule(seed, 4)
    cloud = build_surface_point_cloud(mol, 16, seed)
    queries = sample_query_points(mol, 8, seed).shifted(-cloud.offset)
    batch = [(cloud, queries)]
    return finite_difference_errors(lambda: pretrain_loss(batch, ae), dict(ae.named_parameters()), h)


def predictor_gradient_errors(seed: int = 0, h: float = 1e-5, n_atoms: int = 2) -> dict[str, float]:
    model = _small_predictor(seed)
    schedule = Schedule.build(1000)
    mol = _probe_molecule(seed, n_atoms)
    H = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    items = [TrainItem(torch.as_tensor(mol.positions), torch.as_tensor(mol.types), H)]
    cfg = TrainConfig()

    # a mid-chain step keeps both loss terms well above roundoff
    def loss():
        return total_loss(items, model, schedule, cfg, torch.Generator().manual_seed(seed + 1), t=[50])

    return finite_difference_errors(loss, dict(model.named_parameters()), h)


# --- suite --------------------------------------------------------------


def run_suite(quick: bool = False) -> list[CheckResult]:
    """All oracle checks; ``quick`` lowers sample and rotation counts."""
    sched = Schedule.build(1000)
    n_mc = 20_000 if quick else 100_000
    n_rot = 10 if quick else 100
    results = [
        _timed(lambda: (categorical_posterior_deviation(sched), 1e-12, ""), "categorical posterior vs Bayes"),
        _timed(lambda: (gaussian_posterior_zscores(sched, n=n_mc), 4.0, "max z"), "gaussian posterior vs IS"),
        _timed(lambda: (categorical_marginal_deviation(sched), 1e-12, ""), "categorical marginals vs products"),
        _timed(lambda: (gaussian_marginal_zscores(sched, n=n_mc), 4.0, "max z"), "gaussian marginals vs chain"),
    ]

    def sched_check():
        rep = schedule_report(sched)
        dev = max(
            abs(rep["beta_x_half"] - 0.00500005),
            abs(rep["abar_v_0"] - 1.0),
            abs(rep["abar_v_T"]),
            0.0 if rep["abar_x_monotone"] and rep["abar_v_monotone"] else 1.0,
            0.0 if rep["beta_x_max"] < 0.1 else 1.0,
        )
        return dev, 1e-12, ""

    results.append(_timed(sched_check, "schedule endpoints and monotonicity"))

    def eq_check():
        errs = equivariance_errors(n_rot)
        name = max(errs, key=errs.get)
        return errs[name], 1e-6, f"worst: {name}"

    results.append(_timed(eq_check, "equivariance"))

    def grad_check():
        errs = {f"ae.{k}": v for k, v in autoencoder_gradient_errors().items()}
        errs.update({f"diff.{k}": v for k, v in predictor_gradient_errors().items()})
        name = max(errs, key=errs.get)
        return errs[name], 1e-4, f"worst: {name} over {len(errs)} tensors"

    results.append(_timed(grad_check, "finite-difference gradients"))
    return results
