"""Command-line entry point: ``shapediff <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import load_model_state, save_model
from .data import export_xyz, generate_toy_dataset, load_dataset, save_dataset
from .metrics import js_divergence_bond_lengths, score_molecules, summarize
from .predictor import Predictor, PredictorConfig
from .sampling import POSTERIOR_VARIANCES, GuidanceConfig, generate_batch, sample_atom_counts
from .schedule import Schedule
from .shape_autoencoder import AutoencoderConfig, ShapeAutoencoder, fit_autoencoder
from .training import DiffusionTrainer, TrainConfig, prepare_items, split_items

log = logging.getLogger("shapediff")


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Flat JSON object from ``path``, then ``KEY=VALUE`` overrides on top."""
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = json.loads(p.read_text())
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        cfg[key] = _parse_value(value)
    return cfg


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_autoencoder(path: str) -> ShapeAutoencoder:
    state, meta, _ = load_model_state(_require_file(path, "shape checkpoint"))
    if meta.get("kind") != "shape":
        raise UsageError(f"{path} is not a shape-autoencoder checkpoint")
    model = ShapeAutoencoder(AutoencoderConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def _write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "train_loss", "val_loss", "lr"])
        w.writeheader()
        w.writerows(history)


def cmd_pretrain_shape(args) -> int:
    molecules = load_dataset(_require_file(args.data, "dataset"))
    cfg = AutoencoderConfig.from_dict(load_config(args.config, args.set))
    result = fit_autoencoder(molecules, cfg, args.seed)
    save_model(args.out, result.model, "shape", cfg.to_dict(), {"seed": args.seed, "history": result.history})
    if args.log:
        _write_history(result.history, args.log)
    print(f"val_loss {result.history[0]['val_loss']:.4f} -> {result.history[-1]['val_loss']:.4f}")
    return 0


def cmd_train(args) -> int:
    molecules = load_dataset(_require_file(args.data, "dataset"))
    ae = _load_autoencoder(args.shape_ckpt)
    flat = load_config(args.config, args.set)
    flat["seed"] = args.seed
    flat["latent"] = ae.config.latent
    tcfg = TrainConfig.from_dict(flat)
    pcfg = PredictorConfig.from_dict({**flat, "T": tcfg.T})
    items = prepare_items(molecules, ae, tcfg.n_points, tcfg.seed)
    train_items, val_items = split_items(items, tcfg.val_fraction)
    trainer = DiffusionTrainer(train_items, val_items, tcfg, pcfg)
    if args.resume:
        state, meta, training = load_model_state(_require_file(args.resume, "resume checkpoint"))
        if training is None:
            raise UsageError(f"{args.resume} holds no training state")
        trainer.model.load_state_dict(state)
        trainer.load_training_state(training)
    remaining = tcfg.steps - trainer.step_count
    trainer.run(max(remaining, 0))
    extra = {"seed": args.seed, "atom_counts": [len(m) for m in molecules], "shape_config": ae.config.to_dict()}
    save_model(args.out, trainer.model, "diffusion", {**tcfg.to_dict(), **pcfg.to_dict()}, extra, trainer.training_state())
    if args.log:
        _write_history(trainer.history, args.log)
    print(f"val_loss {trainer.history[0]['val_loss']:.4f} -> {trainer.history[-1]['val_loss']:.4f}")
    return 0


def cmd_sample(args) -> int:
    conditions = load_dataset(_require_file(args.condition, "condition file"))
    if not 0 <= args.index < len(conditions):
        raise UsageError(f"--index {args.index} out of range for {len(conditions)} molecules")
    condition = conditions[args.index]
    ae = _load_autoencoder(args.shape_ckpt)
    state, meta, _ = load_model_state(_require_file(args.diff_ckpt, "diffusion checkpoint"))
    if meta.get("kind") != "diffusion":
        raise UsageError(f"{args.diff_ckpt} is not a diffusion checkpoint")
    flat = meta["config"]
    model = Predictor(PredictorConfig.from_dict(flat))
    model.load_state_dict(state)
    model.eval()
    schedule = Schedule.build(flat["T"])
    guidance = None
    if args.guide:
        guidance = GuidanceConfig(gamma=args.gamma, stop_step=args.stop_step, n_neighbors=args.neighbors)
    counts = sample_atom_counts(meta["atom_counts"], args.n, torch.Generator().manual_seed(args.seed))
    gen = generate_batch(
        condition,
        ae,
        model,
        schedule,
        counts,
        guidance,
        args.seed,
        n_points=flat.get("n_points", 128),
        posterior_variance=args.posterior_variance,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, mol in enumerate(gen.molecules):
        save_dataset([mol], out / f"sample_{i:04d}.jsonl")
        export_xyz(mol, out / f"sample_{i:04d}.xyz", f"seed={args.seed} index={i}")
    print(f"wrote {len(gen.molecules)} molecules to {out}")
    return 0


def cmd_eval(args) -> int:
    conditions = load_dataset(_require_file(args.condition, "condition file"))
    if not 0 <= args.index < len(conditions):
        raise UsageError(f"--index {args.index} out of range for {len(conditions)} molecules")
    condition = conditions[args.index]
    gen_dir = _require_file(args.generated, "generated directory")
    files = sorted(gen_dir.glob("*.jsonl")) if gen_dir.is_dir() else [gen_dir]
    generated = [m for f in files for m in load_dataset(f)]
    if not generated:
        raise UsageError(f"no molecules found in {args.generated}")
    reference = load_dataset(_require_file(args.reference, "reference set")) if args.reference else [condition]
    scores = score_molecules(condition, generated)
    summary = summarize(scores, generated)
    try:
        summary["js_bond_length"] = js_divergence_bond_lengths(reference, generated)
    except ValueError:
        summary["js_bond_length"] = float("nan")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule", "connected", "shape_sim", "graph_sim"])
        for i, s in enumerate(scores):
            w.writerow([i, int(s.connected), repr(s.shape_sim), repr(s.graph_sim)])
        w.writerow([])
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v)])
    print(json.dumps(summary))
    return 0


def cmd_dump_schedule(args) -> int:
    Schedule.build(args.T).write_csv(args.out)
    return 0


def cmd_make_toy(args) -> int:
    save_dataset(generate_toy_dataset(args.n, args.seed), args.out)
    return 0


def cmd_verify(args) -> int:
    from .checks import run_suite

    results = run_suite(quick=args.quick)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapediff", description="Shape-conditioned molecule diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=0)
        if config:
            p.add_argument("--config", help="flat JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("pretrain-shape", help="fit the shape autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training-curve CSV")
    common(p)
    p.set_defaults(func=cmd_pretrain_shape)

    p = sub.add_parser("train", help="train the diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a diffusion checkpoint")
    p.add_argument("--log", help="training-curve CSV")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate molecules for a condition")
    p.add_argument("--condition", required=True)
    p.add_argument("--index", type=int, default=0, help="which molecule of the condition file")
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--diff-ckpt", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--guide", action="store_true")
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--stop-step", type=int, default=300)
    p.add_argument("--neighbors", type=int, default=5)
    p.add_argument("--posterior-variance", choices=POSTERIOR_VARIANCES, default="as_printed")
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated molecules against a condition")
    p.add_argument("--condition", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", help="dataset used as the bond-length reference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-schedule", help="write the noise schedules as CSV")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser("make-toy", help="write a toy dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--quick", action="store_true", help="fewer samples and rotations")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shapediff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
