"""Equivariant shape autoencoder over surface point clouds.

The encoder maps a centered point cloud to a ``(d_p, 3)`` VN embedding by
mean-pooling per-point VN-DGCNN features. The decoder predicts signed
distances of query points from rotation-invariant combinations of the query
and the embedding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import Molecule, PointCloud, QuerySamples, build_surface_point_cloud, sample_query_points
from .vn_layers import MLP, VNDGCNN, VNInvariant

log = logging.getLogger(__name__)

_CENTER_TOL = 1e-5


@dataclass
class AutoencoderConfig:
    hidden: int = 128
    latent: int = 32
    n_layers: int = 4
    k: int = 20
    decoder_layers: int = 4
    n_points: int = 128
    n_queries: int = 256
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.95, 0.999)
    steps: int = 200
    eval_interval: int = 20
    lr_decay: float = 0.6
    min_lr: float = 1e-6
    patience: int = 5
    val_fraction: float = 0.2
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


class ShapeAutoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig | None = None):
        super().__init__()
        cfg = config or AutoencoderConfig()
        self.config = cfg
        self.encoder = VNDGCNN(cfg.hidden, cfg.latent, cfg.n_layers, cfg.k)
        self.vn_in = VNInvariant(cfg.latent, cfg.hidden, cfg.latent)
        sizes = [2 * cfg.latent + 1] + [cfg.hidden] * (cfg.decoder_layers - 1) + [1]
        self.decoder = MLP(sizes)
        self.to(getattr(torch, cfg.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """``(..., n, 3)`` centered points -> ``(..., d_p, 3)`` embedding."""
        mean = points.mean(dim=-2)
        if mean.abs().max() > _CENTER_TOL * max(1.0, float(points.abs().max())):
            raise ValueError("point cloud must be centered")
        return self.encoder(points).mean(dim=-3)

    def decode(self, q: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
        """Signed distances for queries ``(..., m, 3)`` given ``H`` of shape ``(..., d_p, 3)``."""
        proj = torch.einsum("...cd,...md->...mc", H, q)
        sq = (q * q).sum(-1, keepdim=True)
        inv = self.vn_in(H).unsqueeze(-2).expand(*proj.shape[:-1], -1)
        return self.decoder(torch.cat([proj, sq, inv], dim=-1)).squeeze(-1)


def encode(cloud: PointCloud, model: ShapeAutoencoder) -> torch.Tensor:
    if not cloud.centered:
        raise ValueError("point cloud must be centered")
    return model.encode(torch.as_tensor(cloud.points, dtype=model.dtype))


def decode(q, H: torch.Tensor, model: ShapeAutoencoder) -> torch.Tensor:
    q = torch.as_tensor(q, dtype=model.dtype)
    single = q.dim() == 1
    out = model.decode(q.reshape(-1, 3) if single else q, H)
    return out[0] if single else out


def pretrain_loss(batch, model: ShapeAutoencoder) -> torch.Tensor:
    """Sum of squared SDF errors per shape, averaged over the batch.

    ``batch`` holds ``(PointCloud, QuerySamples)`` pairs with the queries
    already expressed in the cloud's centered frame.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    clouds = torch.stack([torch.as_tensor(c.points, dtype=model.dtype) for c, _ in batch])
    queries = torch.stack([torch.as_tensor(q.points, dtype=model.dtype) for _, q in batch])
    target = torch.stack([torch.as_tensor(q.signed_distances, dtype=model.dtype) for _, q in batch])
    H = model.encode(clouds)
    pred = model.decode(queries, H)
    return ((pred - target) ** 2).sum(-1).mean()


@dataclass
class ShapeItem:
    molecule: Molecule
    cloud: PointCloud
    index: int


@dataclass
class FitResult:
    model: nn.Module
    history: list[dict] = field(default_factory=list)


def prepare_shapes(molecules, n_points: int, seed: int) -> list[ShapeItem]:
    return [
        ShapeItem(mol, build_surface_point_cloud(mol, n_points, [seed, i]), i)
        for i, mol in enumerate(molecules)
    ]


def queries_for(item: ShapeItem, n_queries: int, seed: int, epoch: int) -> QuerySamples:
    q = sample_query_points(item.molecule, n_queries, [seed, item.index, epoch])
    return q.shifted(-item.cloud.offset)


def fit_autoencoder(dataset, config: AutoencoderConfig | None = None, seed: int = 0) -> FitResult:
    """Pretrain the autoencoder on SDF regression; returns the model and loss curve."""
    cfg = config or AutoencoderConfig()
    molecules = list(dataset)
    if not molecules:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    model = ShapeAutoencoder(cfg)
    items = prepare_shapes(molecules, cfg.n_points, seed)
    n_val = 0
    if len(items) > 1:
        n_val = min(max(1, round(cfg.val_fraction * len(items))), len(items) - 1)
    val_items, train_items = items[:n_val] or items, items[n_val:]
    val_batch = [(it.cloud, queries_for(it, cfg.n_queries, seed + 1, 0)) for it in val_items]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=1e-8)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=cfg.lr_decay, patience=cfg.patience, min_lr=cfg.min_lr
    )
    gen = torch.Generator().manual_seed(seed)
    history: list[dict] = []

    def validate() -> float:
        with torch.no_grad():
            return float(pretrain_loss(val_batch, model))

    history.append({"step": 0, "train_loss": math.nan, "val_loss": validate(), "lr": cfg.lr})
    seen = 0
    for step in range(1, cfg.steps + 1):
        pick = torch.randint(len(train_items), (cfg.batch_size,), generator=gen).tolist()
        batch = []
        for i in pick:
            epoch = seen // len(train_items)
            batch.append((train_items[i].cloud, queries_for(train_items[i], cfg.n_queries, seed, epoch)))
            seen += 1
        loss = pretrain_loss(batch, model)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"autoencoder loss diverged at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            val = validate()
            sched.step(val)
            lr = opt.param_groups[0]["lr"]
            history.append({"step": step, "train_loss": loss.item(), "val_loss": val, "lr": lr})
            log.info("shape step %d train %.4f val %.4f lr %.2e", step, loss.item(), val, lr)
    return FitResult(model, history)


def embed_molecules(model: ShapeAutoencoder, clouds) -> np.ndarray:
    """Frozen shape embeddings for a list of centered clouds, ``(N, d_p, 3)``."""
    with torch.no_grad():
        out = [encode(c, model).to(torch.float64).numpy() for c in clouds]
    return np.stack(out)
