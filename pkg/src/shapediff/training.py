"""Diffusion training objective and optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .forward_process import noise_features, noise_positions, posterior_features
from .geometry import Molecule, build_surface_point_cloud
from .predictor import Predictor, PredictorConfig
from .schedule import Schedule
from .shape_autoencoder import ShapeAutoencoder, encode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    T: int = 1000
    delta: float = 10.0
    xi: float = 100.0
    weighting: str = "snr"  # or "uniform"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.95, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    lr_decay: float = 0.6
    min_lr: float = 1e-5
    patience: int = 10
    eval_interval: int = 50
    steps: int = 500
    n_points: int = 128
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0 or self.xi < 0 or self.lr < 0:
            raise ValueError("delta must be positive, xi and lr non-negative")
        if self.weighting not in ("snr", "uniform"):
            raise ValueError("weighting must be 'snr' or 'uniform'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def snr_weight(t, schedule: Schedule, delta: float = 10.0):
    """min(abar / (1 - abar), delta); works for int or tensor ``t``."""
    abar = schedule.at("alpha_bar_x", t)
    if isinstance(abar, torch.Tensor):
        lam = abar / (1.0 - abar)
        return torch.where(abar >= 1.0, torch.full_like(abar, delta), lam.clamp(max=delta))
    if abar >= 1.0:
        return float(delta)
    return min(abar / (1.0 - abar), delta)


def _per_molecule(values: torch.Tensor, batch: torch.Tensor | None, n_mol: int | None = None):
    if batch is None:
        return values.sum().reshape(1)
    n_mol = n_mol if n_mol is not None else int(batch.max()) + 1
    return torch.zeros(n_mol, dtype=values.dtype).index_add(0, batch, values)


def position_loss(x0_hat, x0, t, schedule: Schedule, delta: float = 10.0, batch=None, weighting="snr"):
    """Weighted squared position error summed over atoms.

    Without ``batch`` this is the scalar loss of one molecule; with a batch
    index and per-molecule ``t`` it returns one loss per molecule.
    """
    if x0_hat.shape != x0.shape:
        raise ValueError("prediction and target shapes differ")
    per_atom = ((x0_hat - x0) ** 2).sum(-1)
    per_mol = _per_molecule(per_atom, batch)
    if weighting == "uniform":
        return per_mol if batch is not None else per_mol[0]
    w = snr_weight(t, schedule, delta)
    w = w.to(per_mol.dtype) if isinstance(w, torch.Tensor) else w
    out = w * per_mol
    return out if batch is not None else out[0]


def categorical_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) along the last axis with q clamped at 1e-30."""
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(1e-30))).sum(-1)


def feature_kl_loss(v0_hat, v0, v_t, t, schedule: Schedule, batch=None):
    """Sum over atoms of KL between the true and the predicted feature posteriors.

    ``t`` is an int or a per-atom tensor.
    """
    true_post = posterior_features(v_t, v0, t, schedule)
    pred_post = posterior_features(v_t, v0_hat, t, schedule)
    per_atom = categorical_kl(true_post, pred_post)
    per_mol = _per_molecule(per_atom, batch)
    return per_mol if batch is not None else per_mol[0]


@dataclass
class TrainItem:
    """A training molecule in its shape-centred frame with its frozen embedding."""

    positions: torch.Tensor
    types: torch.Tensor
    H: torch.Tensor


@dataclass
class PackedBatch:
    x0: torch.Tensor
    v0: torch.Tensor
    H: torch.Tensor
    batch: torch.Tensor

    @property
    def n_molecules(self) -> int:
        return self.H.shape[0]


def pack(items, n_classes: int, dtype) -> PackedBatch:
    x0 = torch.cat([it.positions for it in items]).to(dtype)
    types = torch.cat([it.types for it in items])
    v0 = torch.nn.functional.one_hot(types, n_classes).to(dtype)
    H = torch.stack([it.H for it in items]).to(dtype)
    batch = torch.cat([torch.full((len(it.types),), i, dtype=torch.long) for i, it in enumerate(items)])
    return PackedBatch(x0, v0, H, batch)


def total_loss(items, model: Predictor, schedule: Schedule, config: TrainConfig, generator, parts=False, t=None):
    """Mean over molecules of L^x + xi * L^v at one uniformly drawn step each.

    ``t`` pins the per-molecule steps instead of drawing them.
    """
    if len(items) == 0:
        raise ValueError("empty batch")
    pb = pack(items, model.config.n_classes, model.dtype)
    if t is None:
        t_mol = torch.randint(1, schedule.T + 1, (pb.n_molecules,), generator=generator)
    else:
        t_mol = torch.as_tensor(t, dtype=torch.int64).reshape(pb.n_molecules)
    t_atom = t_mol[pb.batch]
    x_t, _ = noise_positions(pb.x0, t_atom, schedule, generator)
    v_t = noise_features(pb.v0, t_atom, schedule, generator)
    pred = model(x_t, v_t, pb.H, t_mol, pb.batch)
    lx = position_loss(pred.x0_hat, pb.x0, t_mol, schedule, config.delta, pb.batch, config.weighting)
    lv = feature_kl_loss(pred.v0_hat, pb.v0, v_t, t_atom, schedule, pb.batch)
    loss = (lx + config.xi * lv).mean()
    if parts:
        return loss, lx.detach(), lv.detach(), t_mol
    return loss


def parameter_gradients(items, model: Predictor, schedule: Schedule, config: TrainConfig, seed: int = 0):
    """Gradients of the total loss for a fixed draw of steps and noise."""
    gen = torch.Generator().manual_seed(seed)
    model.zero_grad()
    loss = total_loss(items, model, schedule, config, gen)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        grads[name] = g
    return grads


def prepare_items(molecules, autoencoder: ShapeAutoencoder, n_points: int, seed: int) -> list[TrainItem]:
    """Center every molecule on its surface-cloud centre and cache its embedding."""
    items = []
    with torch.no_grad():
        for i, mol in enumerate(molecules):
            cloud = build_surface_point_cloud(mol, n_points, [seed, i])
            H = encode(cloud, autoencoder).to(torch.float64)
            items.append(
                TrainItem(
                    torch.as_tensor(mol.positions - cloud.offset),
                    torch.as_tensor(mol.types),
                    H,
                )
            )
    return items


@dataclass
class TrainResult:
    model: Predictor
    history: list[dict] = field(default_factory=list)
    atom_counts: list[int] = field(default_factory=list)


class DiffusionTrainer:
    """Owns the model, optimiser, LR schedule and RNG so runs can be resumed exactly."""

    def __init__(
        self,
        train_items,
        val_items,
        config: TrainConfig,
        predictor_config: PredictorConfig | None = None,
        schedule: Schedule | None = None,
    ):
        self.config = config
        self.schedule = schedule or Schedule.build(config.T)
        torch.manual_seed(config.seed)
        self.model = Predictor(predictor_config or PredictorConfig(T=config.T))
        self.train_items = list(train_items)
        self.val_items = list(val_items) or self.train_items
        self.opt = torch.optim.Adam(self.model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
        self.lr_sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.opt, factor=config.lr_decay, patience=config.patience, min_lr=config.min_lr
        )
        self.gen = torch.Generator().manual_seed(config.seed)
        self.step_count = 0
        self.history: list[dict] = []

    def validation_loss(self) -> float:
        gen = torch.Generator().manual_seed(self.config.seed + 7919)
        total = 0.0
        with torch.no_grad():
            for start in range(0, len(self.val_items), self.config.batch_size):
                chunk = self.val_items[start : start + self.config.batch_size]
                total += float(total_loss(chunk, self.model, self.schedule, self.config, gen)) * len(chunk)
        return total / len(self.val_items)

    def step(self) -> float:
        pick = torch.randint(len(self.train_items), (self.config.batch_size,), generator=self.gen).tolist()
        loss = total_loss([self.train_items[i] for i in pick], self.model, self.schedule, self.config, self.gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"diffusion loss diverged at step {self.step_count + 1}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return loss.item()

    def run(self, n_steps: int) -> list[dict]:
        if self.step_count == 0 and not self.history:
            self.history.append(
                {"step": 0, "train_loss": math.nan, "val_loss": self.validation_loss(), "lr": self.config.lr}
            )
        for _ in range(n_steps):
            loss = self.step()
            if self.step_count % self.config.eval_interval == 0:
                val = self.validation_loss()
                self.lr_sched.step(val)
                lr = self.opt.param_groups[0]["lr"]
                self.history.append({"step": self.step_count, "train_loss": loss, "val_loss": val, "lr": lr})
                log.info("diff step %d train %.4f val %.4f lr %.2e", self.step_count, loss, val, lr)
        return self.history

    def training_state(self) -> dict:
        """Everything besides model weights needed to resume bit-for-bit."""
        return {
            "step": self.step_count,
            "optimizer": self.opt.state_dict(),
            "lr_scheduler": self.lr_sched.state_dict(),
            "rng_state": self.gen.get_state(),
            "history": self.history,
        }

    def load_training_state(self, state: dict) -> None:
        self.step_count = state["step"]
        self.opt.load_state_dict(state["optimizer"])
        self.lr_sched.load_state_dict(state["lr_scheduler"])
        self.gen.set_state(state["rng_state"])
        self.history = list(state["history"])


def split_items(items, val_fraction: float):
    n_val = 0
    if len(items) > 1:
        n_val = min(max(1, round(val_fraction * len(items))), len(items) - 1)
    return items[n_val:], items[:n_val]


def train_diffusion(
    dataset,
    autoencoder: ShapeAutoencoder,
    config: TrainConfig | None = None,
    seed: int | None = None,
    predictor_config: PredictorConfig | None = None,
) -> TrainResult:
    cfg = config or TrainConfig()
    if seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
    molecules: list[Molecule] = list(dataset)
    if not molecules:
        raise ValueError("empty dataset")
    items = prepare_items(molecules, autoencoder, cfg.n_points, cfg.seed)
    train_items, val_items = split_items(items, cfg.val_fraction)
    trainer = DiffusionTrainer(train_items, val_items, cfg, predictor_config)
    trainer.run(cfg.steps)
    counts = [len(m) for m in molecules]
    return TrainResult(trainer.model, trainer.history, counts)


def atom_count_distribution(counts) -> tuple[np.ndarray, np.ndarray]:
    values, freq = np.unique(np.asarray(counts), return_counts=True)
    return values, freq / freq.sum()
