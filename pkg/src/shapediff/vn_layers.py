"""Vector-neuron layers.

A VN feature is a ``(..., C, 3)`` tensor whose rows are 3-vectors. A rotation
``R`` acts on the right, ``X -> X @ R.T``; every layer here commutes with that
action (or is invariant to it).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import kernels

DEFAULT_SLOPE = 0.2
_EPS = 1e-12


def uniform_init_(tensor: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


class MLP(nn.Module):
    """Plain MLP with leaky-ReLU between layers and no activation on the output."""

    def __init__(self, sizes, slope: float = DEFAULT_SLOPE):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        for lin in self.layers:
            uniform_init_(lin.weight, lin.in_features)
            uniform_init_(lin.bias, lin.in_features)
        self.slope = slope

    def forward(self, x):
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = nn.functional.leaky_relu(x, self.slope)
        return x


def vn_linear(weight: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
    if X.shape[-2] != weight.shape[1] or X.shape[-1] != 3:
        raise ValueError(
            f"VN feature of shape {tuple(X.shape)} does not match weight {tuple(weight.shape)}"
        )
    return torch.einsum("oc,...cd->...od", weight, X)


def vn_leaky_relu(weight, direction_weight, X, negative_slope: float = DEFAULT_SLOPE):
    q = vn_linear(weight, X)
    d = vn_linear(direction_weight, X)
    dot = (q * d).sum(-1, keepdim=True)
    dnorm2 = (d * d).sum(-1, keepdim=True)
    bend = (dot < 0) & (dnorm2 >= _EPS * _EPS)
    proj = dot / dnorm2.clamp_min(_EPS * _EPS) * d
    return torch.where(bend, q - (1.0 - negative_slope) * proj, q)


class VNLinear(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(uniform_init_(torch.empty(out_channels, in_channels), in_channels))

    def forward(self, X):
        return vn_linear(self.weight, X)


class VNLeakyReLU(nn.Module):
    """Channel mixing followed by the VN leaky-ReLU with a learned direction."""

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float = DEFAULT_SLOPE):
        super().__init__()
        if not 0.0 <= negative_slope < 1.0:
            raise ValueError("negative_slope must lie in [0, 1)")
        self.weight = nn.Parameter(uniform_init_(torch.empty(out_channels, in_channels), in_channels))
        self.direction_weight = nn.Parameter(
            uniform_init_(torch.empty(out_channels, in_channels), in_channels)
        )
        self.negative_slope = negative_slope

    def forward(self, X):
        return vn_leaky_relu(self.weight, self.direction_weight, X, self.negative_slope)


def vn_inner_products(H: torch.Tensor) -> torch.Tensor:
    """Rows of ``H`` projected onto the normalised mean row."""
    mean = H.mean(dim=-2, keepdim=True)
    norm = mean.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(mean)
    fallback[..., 0] = 1.0
    direction = torch.where(norm < _EPS, fallback, mean / norm.clamp_min(_EPS))
    return (H * direction).sum(-1)


def vn_invariant(H: torch.Tensor, mlp: nn.Module) -> torch.Tensor:
    return mlp(vn_inner_products(H))


class VNInvariant(nn.Module):
    def __init__(self, channels: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.mlp = MLP([channels, hidden, out_dim or channels])

    def forward(self, H):
        return vn_invariant(H, self.mlp)


def _batched_knn(feats: torch.Tensor, k: int) -> torch.Tensor:
    flat = feats.detach().reshape(feats.shape[0], feats.shape[1], -1).cpu().numpy()
    idx = np.stack([kernels.knn_indices(f.astype(np.float64), k) for f in flat])
    return torch.from_numpy(idx)


class VNDGCNN(nn.Module):
    """Dynamic-graph edge convolutions over VN features.

    Each layer rebuilds the k-NN graph from the current (rotation-invariant)
    feature distances, forms edge features ``[x_j - x_i, x_i]``, applies a VN
    leaky-ReLU and mean-pools over neighbours. The outputs of all layers are
    concatenated and mixed down to ``out_channels``.
    """

    def __init__(self, hidden: int = 128, out_channels: int = 32, n_layers: int = 4, k: int = 20):
        super().__init__()
        self.k = k
        dims = [1] + [hidden] * n_layers
        self.convs = nn.ModuleList(VNLeakyReLU(2 * a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = VNLinear(hidden * n_layers, out_channels)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        single = points.dim() == 2
        if single:
            points = points.unsqueeze(0)
        B, n, _ = points.shape
        if n <= self.k:
            raise ValueError(f"need more than k={self.k} points, got {n}")
        X = points.unsqueeze(-2)  # (B, n, 1, 3)
        batch = torch.arange(B).view(B, 1, 1)
        outs = []
        for conv in self.convs:
            nbr = _batched_knn(X, self.k)  # (B, n, k)
            Xj = X[batch, nbr]  # (B, n, k, C, 3)
            Xi = X.unsqueeze(2).expand_as(Xj)
            edge = torch.cat([Xj - Xi, Xi], dim=-2)
            X = conv(edge).mean(dim=2)
            outs.append(X)
        out = self.head(torch.cat(outs, dim=-2))
        return out[0] if single else out


def vn_dgcnn(points: torch.Tensor, net: VNDGCNN) -> torch.Tensor:
    return net(points)
