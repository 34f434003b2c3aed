"""Directional experiments on the toy dataset: loss weighting and guidance strength.

Both run at desk scale with small networks. Conditions are held-out toy
molecules; sampling uses the beta-tilde posterior variance.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import generate_toy_dataset
from .metrics import connectivity, js_divergence_bond_lengths, shape_similarity
from .predictor import Predictor, PredictorConfig
from .sampling import GuidanceConfig, generate_batch, sample_atom_counts
from .schedule import Schedule
from .shape_autoencoder import AutoencoderConfig, ShapeAutoencoder, fit_autoencoder
from .training import DiffusionTrainer, TrainConfig, prepare_items, split_items

log = logging.getLogger(__name__)

GAMMAS = (0.2, 0.4, 0.6)
STOP_STEPS = (50, 100, 300)


@dataclass
class ExperimentConfig:
    n_molecules: int = 500
    data_seed: int = 0
    train_steps: int = 2000
    batch_size: int = 8
    eval_interval: int = 200
    n_points: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_conditions: int = 4
    samples_per_condition: int = 10
    posterior_variance: str = "beta_tilde"
    autoencoder: dict = field(
        default_factory=lambda: dict(hidden=16, latent=8, n_layers=2, k=8, n_points=64, n_queries=64, steps=150)
    )
    predictor: dict = field(default_factory=lambda: dict(hidden=32, n_layers=3, n_heads=4, n_neighbors=6))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Workbench:
    """Dataset, frozen autoencoder and prepared training items shared by every run."""

    config: ExperimentConfig
    molecules: list
    autoencoder: ShapeAutoencoder
    train_items: list
    val_items: list
    schedule: Schedule

    @property
    def n_val(self) -> int:
        return len(self.val_items)

    @property
    def train_molecules(self) -> list:
        return self.molecules[self.n_val :]

    @property
    def val_molecules(self) -> list:
        return self.molecules[: self.n_val]


def build_workbench(cfg: ExperimentConfig) -> Workbench:
    molecules = generate_toy_dataset(cfg.n_molecules, cfg.data_seed)
    ae_cfg = AutoencoderConfig.from_dict(cfg.autoencoder)
    ae = fit_autoencoder(molecules, ae_cfg, cfg.data_seed).model
    ae.eval()
    items = prepare_items(molecules, ae, cfg.n_points, cfg.data_seed)
    train_items, val_items = split_items(items, 0.1)
    return Workbench(cfg, molecules, ae, train_items, val_items, Schedule.build(1000))


def train_model(bench: Workbench, weighting: str, seed: int) -> Predictor:
    cfg = bench.config
    tcfg = TrainConfig(
        weighting=weighting,
        steps=cfg.train_steps,
        batch_size=cfg.batch_size,
        eval_interval=cfg.eval_interval,
        n_points=cfg.n_points,
        seed=seed,
    )
    pcfg = PredictorConfig(**{**cfg.predictor, "latent": bench.autoencoder.config.latent})
    trainer = DiffusionTrainer(bench.train_items, bench.val_items, tcfg, pcfg, bench.schedule)
    trainer.run(tcfg.steps)
    trainer.model.eval()
    return trainer.model


def sample_for_conditions(bench: Workbench, model: Predictor, seed: int) -> list:
    """``samples_per_condition`` molecules for each of the first held-out conditions."""
    cfg = bench.config
    counts = [len(m) for m in bench.train_molecules]
    out = []
    for c, cond in enumerate(bench.val_molecules[: cfg.n_conditions]):
        sizes = sample_atom_counts(counts, cfg.samples_per_condition, torch.Generator().manual_seed(seed * 1000 + c))
        gen = generate_batch(
            cond,
            bench.autoencoder,
            model,
            bench.schedule,
            sizes,
            None,
            seed * 1000 + c,
            n_points=cfg.n_points,
            posterior_variance=cfg.posterior_variance,
        )
        out.extend(gen.molecules)
    return out


def sample_quality(bench: Workbench, molecules) -> dict:
    return {
        "js": js_divergence_bond_lengths(bench.train_molecules, molecules),
        "connected": float(np.mean([connectivity(m) for m in molecules])),
    }


@dataclass
class AblationResult:
    rows: list[dict]
    js_wins: int
    connected_wins: int
    seconds: float

    @property
    def passed(self) -> bool:
        n = len(self.rows)
        need = n - 1 if n > 1 else n
        return self.js_wins >= need and self.connected_wins >= need


def weighting_ablation(cfg: ExperimentConfig | None = None, bench: Workbench | None = None) -> AblationResult:
    """Train SNR- and uniform-weighted models per seed and compare sample quality.

    A seed counts as a win when the SNR model's JS divergence is no larger,
    or its connectivity no smaller, than the uniform model's.
    """
    start = time.perf_counter()
    cfg = cfg or ExperimentConfig()
    bench = bench or build_workbench(cfg)
    rows = []
    for seed in cfg.seeds:
        row = {"seed": seed}
        for weighting in ("snr", "uniform"):
            model = train_model(bench, weighting, seed)
            q = sample_quality(bench, sample_for_conditions(bench, model, seed))
            row[f"{weighting}_js"] = q["js"]
            row[f"{weighting}_connected"] = q["connected"]
        log.info("ablation %s", row)
        rows.append(row)
    js_wins = sum(r["snr_js"] <= r["uniform_js"] for r in rows)
    conn_wins = sum(r["snr_connected"] >= r["uniform_connected"] for r in rows)
    return AblationResult(rows, js_wins, conn_wins, time.perf_counter() - start)


@dataclass
class SweepResult:
    # table[c][(gamma, stop_step)] = mean shape similarity for condition c
    table: list[dict]
    gamma_monotone: int
    stop_monotone: int
    seconds: float

    @property
    def passed(self) -> bool:
        n = len(self.table)
        need = n - 1 if n > 1 else n
        return self.gamma_monotone >= need and self.stop_monotone >= need


def _nonincreasing(values) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def guidance_sweep(
    cfg: ExperimentConfig | None = None,
    bench: Workbench | None = None,
    model: Predictor | None = None,
    n_conditions: int = 5,
    n_samples: int = 20,
    seed: int = 0,
) -> SweepResult:
    """Mean shape similarity per condition over a grid of gamma and stop step.

    Every setting reuses the same seed per condition, so settings differ only
    in the guidance they apply.
    """
    start = time.perf_counter()
    cfg = cfg or ExperimentConfig()
    bench = bench or build_workbench(cfg)
    model = model or train_model(bench, "snr", seed)
    settings = sorted({(g, 300) for g in GAMMAS} | {(0.2, s) for s in STOP_STEPS})
    table = []
    for c, cond in enumerate(bench.val_molecules[:n_conditions]):
        row = {}
        for gamma, stop in settings:
            gen = generate_batch(
                cond,
                bench.autoencoder,
                model,
                bench.schedule,
                [len(cond)] * n_samples,
                GuidanceConfig(gamma=gamma, stop_step=stop),
                seed * 1000 + c,
                n_points=cfg.n_points,
                posterior_variance=cfg.posterior_variance,
            )
            row[(gamma, stop)] = float(np.mean([shape_similarity(cond, m) for m in gen.molecules]))
        log.info("sweep condition %d %s", c, row)
        table.append(row)
    gamma_ok = sum(_nonincreasing([r[(g, 300)] for g in GAMMAS]) for r in table)
    stop_ok = sum(_nonincreasing([r[(0.2, s)] for s in STOP_STEPS]) for r in table)
    return SweepResult(table, gamma_ok, stop_ok, time.perf_counter() - start)
