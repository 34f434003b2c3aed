"""Variance schedules for the position (sigmoid) and feature (cosine) chains.

All arrays are 1-based in ``t``: index 0 holds ``alpha_bar = 1`` and a
placeholder ``beta = 0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

BETA_V_MAX = 0.999


def sigmoid_beta_schedule(T: int, w1: float = 6.0, w2: float = 1e-7, w3: float = 0.01) -> np.ndarray:
    """Per-step position variances for t = 1..T (length-T array)."""
    if T < 2:
        raise ValueError("T must be at least 2")
    t = np.arange(1, T + 1, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-w1 * (2.0 * t / T - 1.0)))
    beta = sig * (w2 - w3) + w3
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("sigmoid schedule parameters give beta outside (0, 1)")
    return beta


def cosine_beta_schedule(T: int, s: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Feature variances (length T) and cumulative products (length T + 1).

    The last cumulative product is exactly zero; betas are clipped at 0.999,
    so only the final step deviates from the running product.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    abar = f / f[0]
    abar[0] = 1.0
    abar[T] = 0.0
    beta = np.minimum(1.0 - abar[1:] / abar[:-1], BETA_V_MAX)
    return beta, abar


def alpha_bar(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("beta values must lie in (0, 1)")
    return np.concatenate([[1.0], np.cumprod(1.0 - beta)])


@dataclass(frozen=True)
class Schedule:
    T: int
    beta_x: np.ndarray
    beta_v: np.ndarray
    alpha_bar_x: np.ndarray
    alpha_bar_v: np.ndarray

    @classmethod
    def build(cls, T: int = 1000, *, w1=6.0, w2=1e-7, w3=0.01, s=0.01) -> "Schedule":
        beta_x = sigmoid_beta_schedule(T, w1, w2, w3)
        beta_v, abar_v = cosine_beta_schedule(T, s)
        pad = np.zeros(1)
        return cls(
            T=T,
            beta_x=np.concatenate([pad, beta_x]),
            beta_v=np.concatenate([pad, beta_v]),
            alpha_bar_x=alpha_bar(beta_x),
            alpha_bar_v=abar_v,
        )

    @property
    def alpha_x(self) -> np.ndarray:
        return 1.0 - self.beta_x

    @property
    def alpha_v(self) -> np.ndarray:
        return 1.0 - self.beta_v

    def check_step(self, t):
        if isinstance(t, (int, np.integer)):
            lo = hi = int(t)
        else:
            t = torch.as_tensor(t)
            lo, hi = int(t.min()), int(t.max())
        if lo < 1 or hi > self.T:
            raise ValueError(f"step must lie in [1, {self.T}]")

    def at(self, name: str, t, like: torch.Tensor | None = None):
        """Look up a schedule array at step(s) ``t``.

        Integer ``t`` gives a float; tensor ``t`` gives a tensor of the dtype
        of ``like`` (float64 by default).
        """
        arr = getattr(self, name)
        if isinstance(t, (int, np.integer)):
            return float(arr[t])
        dtype = like.dtype if like is not None else torch.float64
        return torch.as_tensor(arr, dtype=dtype)[torch.as_tensor(t, dtype=torch.long)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta_x", "beta_v", "alpha_bar_x", "alpha_bar_v"])
            for t in range(1, self.T + 1):
                w.writerow(
                    [
                        t,
                        repr(float(self.beta_x[t])),
                        repr(float(self.beta_v[t])),
                        repr(float(self.alpha_bar_x[t])),
                        repr(float(self.alpha_bar_v[t])),
                    ]
                )
