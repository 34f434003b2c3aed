"""Shape-conditioned denoiser predicting clean positions and feature classes.

Atoms of several molecules are packed into one ``(N, ...)`` tensor with a
``batch`` index per atom. Each of the ``L`` blocks first updates the invariant
atom embeddings with attention over the k nearest neighbours, then moves the
atoms along neighbour differences gated by a second attention head set, plus
a VN layer that sees the position, the neighbourhood update and the shape
embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import kernels
from .geometry import NUM_CLASSES
from .vn_layers import MLP, VNInvariant, VNLeakyReLU, VNLinear, uniform_init_


@dataclass
class PredictorConfig:
    hidden: int = 128
    n_layers: int = 8
    n_heads: int = 16
    n_neighbors: int = 8
    latent: int = 32
    n_classes: int = NUM_CLASSES
    n_rbf: int = 32
    rbf_max: float = 6.0
    time_dim: int = 16
    T: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError("n_heads must divide hidden")

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


class Prediction(NamedTuple):
    x0_hat: torch.Tensor
    v0_hat: torch.Tensor


class NeighborGraph(NamedTuple):
    index: torch.Tensor  # (N, k) neighbour atom index, padded with self
    mask: torch.Tensor  # (N, k) valid entries
    rel: torch.Tensor  # (N, k, 3) x_i - x_j
    dist: torch.Tensor  # (N, k)


def neighbor_index(x: torch.Tensor, batch: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """k nearest atoms within each molecule; all other atoms when fewer than k + 1."""
    n = x.shape[0]
    idx = torch.arange(n).unsqueeze(1).repeat(1, k)
    mask = torch.zeros(n, k, dtype=torch.bool)
    pos = x.detach().to(torch.float64).cpu().numpy()
    counts = torch.bincount(batch).tolist() if n else []
    start = 0
    for count in counts:
        kk = min(k, count - 1)
        if kk > 0:
            nbr = kernels.knn_indices(pos[start : start + count], kk) + start
            idx[start : start + count, :kk] = torch.from_numpy(nbr)
            mask[start : start + count, :kk] = True
        start += count
    return idx, mask


def build_graph(x: torch.Tensor, batch: torch.Tensor, k: int) -> NeighborGraph:
    idx, mask = neighbor_index(x, batch, k)
    rel = x.unsqueeze(1) - x[idx]
    # padded entries point at self; keep their distance away from the sqrt kink
    sq = (rel * rel).sum(-1) + (~mask).to(x.dtype)
    return NeighborGraph(idx, mask, rel, sq.sqrt())


def rbf_encode(dist: torch.Tensor, n_rbf: int, d_max: float) -> torch.Tensor:
    centers = torch.linspace(0.0, d_max, n_rbf, dtype=dist.dtype)
    width = d_max / (n_rbf - 1)
    return torch.exp(-0.5 * ((dist.unsqueeze(-1) - centers) / width) ** 2)


def time_encode(t: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = t.to(dtype).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the neighbour axis (dim 1); atoms without neighbours get zeros."""
    m = mask.unsqueeze(-1)
    logits = torch.where(m, logits, torch.full_like(logits, -1e30))
    return torch.softmax(logits, dim=1) * m


class _EdgeAttention(nn.Module):
    """Query from the centre atom, keys and values from edge features."""

    def __init__(self, cfg: PredictorConfig, value_dim: int):
        super().__init__()
        h, nh = cfg.hidden, cfg.n_heads
        self.n_heads, self.head_dim = nh, h // nh
        edge_dim = 2 * h + cfg.n_rbf + cfg.latent
        self.query = nn.Linear(h, h, bias=False)
        uniform_init_(self.query.weight, h)
        self.key = MLP([edge_dim, h, h])
        self.value = MLP([edge_dim, h, value_dim])

    def forward(self, h, graph: NeighborGraph, rbf, hs_atom):
        N, k = graph.index.shape
        edge = torch.cat(
            [
                h.unsqueeze(1).expand(N, k, -1),
                h[graph.index],
                rbf,
                hs_atom.unsqueeze(1).expand(N, k, -1),
            ],
            dim=-1,
        )
        q = self.query(h).view(N, 1, self.n_heads, self.head_dim)
        key = self.key(edge).view(N, k, self.n_heads, self.head_dim)
        logits = (q * key).sum(-1) / math.sqrt(self.head_dim)
        return _masked_softmax(logits, graph.mask), self.value(edge)


class InvLayer(nn.Module):
    """Invariant update of atom embeddings: h_i + sum_j attention-weighted messages."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = _EdgeAttention(cfg, cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.hidden)
        uniform_init_(self.out.weight, cfg.hidden)
        uniform_init_(self.out.bias, cfg.hidden)

    def forward(self, h, graph: NeighborGraph, rbf, hs_atom):
        N, k = graph.index.shape
        weights, values = self.attn(h, graph, rbf, hs_atom)
        values = values.view(N, k, self.attn.n_heads, self.attn.head_dim)
        msg = (weights.unsqueeze(-1) * values).sum(1).reshape(N, -1)
        return h + self.out(msg) * graph.mask.any(1, keepdim=True)


class EqLayer(nn.Module):
    """Equivariant position update.

    Neighbour differences weighted by attention times a per-head scalar, plus
    a VN term over the position, those differences and the shape embedding,
    scaled by an invariant gate of the atom embedding.
    """

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = _EdgeAttention(cfg, cfg.n_heads)
        vn_in = 1 + cfg.n_heads + cfg.latent
        self.vn_act = VNLeakyReLU(vn_in, cfg.hidden)
        self.vn_out = VNLinear(cfg.hidden, 1)
        self.gate = nn.Linear(cfg.hidden, 1)
        uniform_init_(self.gate.weight, cfg.hidden)
        uniform_init_(self.gate.bias, cfg.hidden)

    def forward(self, x, h, graph: NeighborGraph, rbf, hs_atom, H_atom):
        weights, gates = self.attn(h, graph, rbf, hs_atom)
        w = weights * gates  # (N, k, n_heads)
        delta = (w.unsqueeze(-1) * graph.rel.unsqueeze(2)).sum(1)  # (N, n_heads, 3)
        stacked = torch.cat([x.unsqueeze(1), delta, H_atom], dim=1)
        shift = self.vn_out(self.vn_act(stacked)).squeeze(1)
        return x + delta.mean(1) + self.gate(h) * shift


class Predictor(nn.Module):
    def __init__(self, config: PredictorConfig | None = None):
        super().__init__()
        cfg = config or PredictorConfig()
        self.config = cfg
        self.embed = nn.Linear(cfg.n_classes + cfg.time_dim, cfg.hidden)
        uniform_init_(self.embed.weight, self.embed.in_features)
        uniform_init_(self.embed.bias, self.embed.in_features)
        self.vn_in = VNInvariant(cfg.latent, cfg.hidden, cfg.latent)
        self.inv_layers = nn.ModuleList(InvLayer(cfg) for _ in range(cfg.n_layers))
        self.eq_layers = nn.ModuleList(EqLayer(cfg) for _ in range(cfg.n_layers))
        self.head = MLP([cfg.hidden, cfg.hidden, cfg.n_classes])
        self.to(getattr(torch, cfg.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def initial_embedding(self, v, t_atom):
        temb = time_encode(t_atom, self.config.time_dim, v.dtype)
        return self.embed(torch.cat([v, temb], dim=-1))

    def forward(self, x, v, H, t, batch=None, return_layers: bool = False):
        """Predict ``(x0_hat, v0_hat)``.

        ``x`` (N, 3) and ``v`` (N, K) are noisy atoms in the shape-centred
        frame; ``H`` is (B, d_p, 3) or a single (d_p, 3); ``t`` is an int or a
        (B,) tensor; ``batch`` maps atoms to molecules (all zeros by default).
        """
        if not (torch.isfinite(x).all() and torch.isfinite(v).all() and torch.isfinite(H).all()):
            raise ValueError("non-finite input to predictor")
        cfg = self.config
        N = x.shape[0]
        if H.dim() == 2:
            H = H.unsqueeze(0)
        if batch is None:
            batch = torch.zeros(N, dtype=torch.long)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        t_atom = t[batch] if t.numel() > 1 else t.expand(N)
        hs_atom = self.vn_in(H)[batch]
        H_atom = H[batch]
        h = self.initial_embedding(v, t_atom)
        trace = []
        for inv, eq in zip(self.inv_layers, self.eq_layers):
            graph = build_graph(x, batch, cfg.n_neighbors)
            rbf = rbf_encode(graph.dist, cfg.n_rbf, cfg.rbf_max)
            h = inv(h, graph, rbf, hs_atom)
            x = eq(x, h, graph, rbf, hs_atom, H_atom)
            if return_layers:
                trace.append((x, h))
        v0 = torch.softmax(self.head(h), dim=-1)
        if return_layers:
            return Prediction(x, v0), trace
        return Prediction(x, v0)


def predict(x_t, v_t, H, t, model: Predictor, batch=None) -> Prediction:
    return model(x_t, v_t, H, t, batch)


def inv_gnn_layer(h, x, H, layer: InvLayer, model: Predictor, batch=None) -> torch.Tensor:
    """One invariant embedding update for atoms at positions ``x``."""
    cfg = layer.cfg
    if H.dim() == 2:
        H = H.unsqueeze(0)
    batch = torch.zeros(x.shape[0], dtype=torch.long) if batch is None else batch
    graph = build_graph(x, batch, cfg.n_neighbors)
    rbf = rbf_encode(graph.dist, cfg.n_rbf, cfg.rbf_max)
    return layer(h, graph, rbf, model.vn_in(H)[batch])


def eq_gnn_layer(x, h, H, layer: EqLayer, model: Predictor, batch=None) -> torch.Tensor:
    """One equivariant position update given already-updated embeddings ``h``."""
    cfg = layer.cfg
    if H.dim() == 2:
        H = H.unsqueeze(0)
    batch = torch.zeros(x.shape[0], dtype=torch.long) if batch is None else batch
    graph = build_graph(x, batch, cfg.n_neighbors)
    rbf = rbf_encode(graph.dist, cfg.n_rbf, cfg.rbf_max)
    return layer(x, h, graph, rbf, model.vn_in(H)[batch], H[batch])


def count_parameters(model: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in model.parameters()))
