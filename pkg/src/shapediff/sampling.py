"""Ancestral sampling with optional shape guidance.

Generation runs in the frame centred on the condition's surface cloud. All
Gaussian draws go through ``noise_fn`` so tests can couple the noise of a
rotated run to the original one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from . import kernels
from .forward_process import posterior_features, posterior_positions, sample_one_hot
from .geometry import Molecule, PointCloud, build_surface_point_cloud
from .predictor import Prediction, Predictor
from .schedule import Schedule
from .shape_autoencoder import ShapeAutoencoder, encode

POSTERIOR_VARIANCES = ("as_printed", "beta_tilde")


@dataclass
class GuidanceConfig:
    gamma: float = 0.2
    stop_step: int = 300
    sigma_range: tuple[float, float] = (0.2, 0.8)
    n_neighbors: int = 5
    phi: float = 0.049
    points_per_atom: int = 20

    def __post_init__(self):
        lo, hi = self.sigma_range
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.stop_step <= 1:
            raise ValueError("stop_step must exceed 1")
        if self.n_neighbors < 1 or self.points_per_atom < 1:
            raise ValueError("n_neighbors and points_per_atom must be at least 1")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("sigma_range must satisfy 0 <= lo <= hi <= 1")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "sigma_range" in known:
            known["sigma_range"] = tuple(known["sigma_range"])
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


class DiffusionState(NamedTuple):
    x: torch.Tensor
    v: torch.Tensor
    t: int


NoiseFn = Callable[[tuple, torch.dtype], torch.Tensor]


def gaussian_noise(generator: torch.Generator | None) -> NoiseFn:
    def draw(shape, dtype=torch.float64):
        return torch.randn(shape, dtype=dtype, generator=generator)

    return draw


def sample_prior(n_atoms: int, K: int, generator=None, T: int = 1000, dtype=torch.float64, noise_fn=None):
    if n_atoms < 1:
        raise ValueError("n_atoms must be at least 1")
    noise_fn = noise_fn or gaussian_noise(generator)
    x = noise_fn((n_atoms, 3), dtype)
    v = sample_one_hot(torch.full((n_atoms, K), 1.0 / K, dtype=dtype), generator)
    return DiffusionState(x, v, T)


def build_guidance_points(condition: Molecule, cfg: GuidanceConfig, generator=None, offset=None, noise_fn=None):
    """``points_per_atom`` Gaussian draws around every condition atom, shifted by ``-offset``."""
    if len(condition) == 0:
        raise ValueError("empty condition molecule")
    noise_fn = noise_fn or gaussian_noise(generator)
    centers = condition.positions - (np.zeros(3) if offset is None else np.asarray(offset))
    eps = noise_fn((len(condition) * cfg.points_per_atom, 3), torch.float64).numpy()
    return np.repeat(centers, cfg.points_per_atom, axis=0) + np.sqrt(cfg.phi) * eps


def apply_shape_guidance(x0_hat, Q, cfg: GuidanceConfig, generator=None):
    """Pull atoms farther than ``gamma`` from ``Q`` toward their nearest guidance points.

    Returns the adjusted positions and a boolean mask of the atoms that moved.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if len(Q) < cfg.n_neighbors:
        raise ValueError(f"need at least {cfg.n_neighbors} guidance points, got {len(Q)}")
    x = x0_hat.detach() if isinstance(x0_hat, torch.Tensor) else torch.as_tensor(x0_hat)
    dist, target = kernels.nn_mean(x.to(torch.float64).numpy(), Q, cfg.n_neighbors)
    moved = torch.from_numpy(dist > cfg.gamma)
    lo, hi = cfg.sigma_range
    n_moved = int(moved.sum())
    if n_moved == 0:
        return x.clone(), moved
    sigma = lo + (hi - lo) * torch.rand(n_moved, dtype=torch.float64, generator=generator)
    out = x.clone()
    tgt = torch.from_numpy(target[moved.numpy()]).to(x.dtype)
    s = sigma.to(x.dtype).unsqueeze(-1)
    out[moved] = (1.0 - s) * x[moved] + s * tgt
    return out, moved


def sampler_variance(t: int, schedule: Schedule, mode: str = "as_printed") -> float:
    if mode == "as_printed":
        return 1.0 - schedule.at("alpha_bar_x", t)
    if mode == "beta_tilde":
        return (1.0 - schedule.at("alpha_bar_x", t - 1)) / (1.0 - schedule.at("alpha_bar_x", t)) * schedule.at(
            "beta_x", t
        )
    raise ValueError(f"posterior_variance must be one of {POSTERIOR_VARIANCES}")


def denoise_step(
    state: DiffusionState,
    prediction: Prediction,
    schedule: Schedule,
    generator=None,
    posterior_variance: str = "as_printed",
    noise_fn: NoiseFn | None = None,
) -> DiffusionState:
    t = state.t
    schedule.check_step(t)
    var = sampler_variance(t, schedule, posterior_variance)
    mean = posterior_positions(state.x, prediction.x0_hat, t, schedule).mean
    probs = posterior_features(state.v, prediction.v0_hat, t, schedule)
    if t == 1:
        v = torch.nn.functional.one_hot(probs.argmax(-1), probs.shape[-1]).to(probs.dtype)
        return DiffusionState(mean, v, 0)
    noise_fn = noise_fn or gaussian_noise(generator)
    x = mean + var**0.5 * noise_fn(tuple(mean.shape), mean.dtype)
    return DiffusionState(x, sample_one_hot(probs, generator), t - 1)


@dataclass
class StepRecord:
    t: int
    guided: bool
    n_moved: int


@dataclass
class Generation:
    molecules: list[Molecule]
    trace: list[StepRecord] = field(default_factory=list)


def sample_atom_counts(counts, n: int, generator=None) -> list[int]:
    """Draw ``n`` atom counts from the empirical distribution of ``counts``."""
    values, freq = np.unique(np.asarray(counts, dtype=np.int64), return_counts=True)
    probs = torch.as_tensor(freq / freq.sum(), dtype=torch.float64)
    idx = torch.multinomial(probs, n, replacement=True, generator=generator)
    return [int(values[i]) for i in idx]


def _to_molecule(x: torch.Tensor, v: torch.Tensor, offset) -> Molecule:
    pos = x.detach().to(torch.float64).numpy() + offset
    return Molecule(pos, v.argmax(-1).numpy())


def generate_batch(
    condition: Molecule,
    autoencoder: ShapeAutoencoder,
    predictor: Predictor,
    schedule: Schedule,
    n_atoms,
    guidance: GuidanceConfig | None = None,
    seed: int = 0,
    *,
    n_points: int = 128,
    cloud: PointCloud | None = None,
    posterior_variance: str = "as_printed",
    noise_fn: NoiseFn | None = None,
) -> Generation:
    """Generate ``len(n_atoms)`` molecules for one condition in a single packed batch.

    Three RNG streams derive from ``seed``: the diffusion noise, the guidance
    point set and the guidance mixing weights, so runs with and without
    guidance share their diffusion noise draw for draw.
    """
    n_atoms = [int(n) for n in n_atoms]
    if not n_atoms or min(n_atoms) < 1:
        raise ValueError("every generated molecule needs at least one atom")
    gen = torch.Generator().manual_seed(seed)
    gen_q = torch.Generator().manual_seed(seed + 1_000_003)
    gen_s = torch.Generator().manual_seed(seed + 2_000_029)
    noise = noise_fn or gaussian_noise(gen)
    dtype = predictor.dtype
    K = predictor.config.n_classes

    if cloud is None:
        cloud = build_surface_point_cloud(condition, n_points, seed)
    with torch.no_grad():
        H = encode(cloud, autoencoder).to(dtype)
    Q = None
    if guidance is not None:
        q_noise = gaussian_noise(gen_q) if noise_fn is None else noise_fn
        Q = build_guidance_points(condition, guidance, offset=cloud.offset, noise_fn=q_noise)

    batch = torch.cat([torch.full((n,), i, dtype=torch.long) for i, n in enumerate(n_atoms)])
    B = len(n_atoms)
    Hb = H.unsqueeze(0).expand(B, -1, -1)
    state = sample_prior(len(batch), K, gen, schedule.T, dtype, noise_fn=noise)
    trace = []
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            pred = predictor(state.x, state.v, Hb, torch.full((B,), t, dtype=torch.long), batch)
            guided = guidance is not None and t >= guidance.stop_step
            n_moved = 0
            if guided:
                x0, moved = apply_shape_guidance(pred.x0_hat, Q, guidance, gen_s)
                n_moved = int(moved.sum())
                pred = Prediction(x0, pred.v0_hat)
            state = denoise_step(state, pred, schedule, gen, posterior_variance, noise)
            if not torch.isfinite(state.x).all():
                raise FloatingPointError(f"non-finite positions at step {t}")
            trace.append(StepRecord(t, guided, n_moved))
    mols = []
    start = 0
    for n in n_atoms:
        sl = slice(start, start + n)
        mols.append(_to_molecule(state.x[sl], state.v[sl], cloud.offset))
        start += n
    return Generation(mols, trace)


def generate(
    condition: Molecule,
    autoencoder: ShapeAutoencoder,
    predictor: Predictor,
    schedule: Schedule,
    guidance: GuidanceConfig | None = None,
    seed: int = 0,
    *,
    n_atoms: int | None = None,
    atom_counts=None,
    **kwargs,
) -> Molecule:
    """One molecule for ``condition``.

    The atom count is ``n_atoms`` if given, else a draw from ``atom_counts``
    (the training-set sizes), else the condition's own size.
    """
    if n_atoms is None:
        if atom_counts is not None:
            n_atoms = sample_atom_counts(atom_counts, 1, torch.Generator().manual_seed(seed))[0]
        else:
            n_atoms = len(condition)
    return generate_batch(condition, autoencoder, predictor, schedule, [n_atoms], guidance, seed, **kwargs).molecules[0]

