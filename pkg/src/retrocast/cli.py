"""Command-line entry points: generate, train, evaluate, ablate, gradcheck."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .config import ExperimentConfig, load_config, save_config, with_overrides


def _load(config_path, seed):
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = with_overrides(cfg, {"seed": int(seed)})
    return cfg


config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                          default=None, help="Experiment config file (YAML).")
seed_opt = click.option("--seed", type=int, default=None,
                        help="Override the config seed.")
out_opt = click.option("--out", "out_dir", type=click.Path(), default="runs/out",
                       help="Output directory.")
workers_opt = click.option("--workers", type=int, default=1,
                           help="Worker processes for generation/evaluation.")


@click.group()
def main():
    """Joint detection and forecasting on synthetic bird's-eye-view scenes."""


@main.command()
@config_opt
@seed_opt
@out_opt
@workers_opt
@click.option("--split", type=click.Choice(["train", "eval"]), default="train")
def generate(config_path, seed, out_dir, workers, split):
    """Write a dataset manifest (scenes are regenerated from seeds on load)."""
    cfg = _load(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{split}.rcds"
    seeds = harness.generate_dataset(cfg, path, split=split, workers=workers)
    click.echo(f"wrote {len(seeds)} scene records to {path}")


@main.command()
@config_opt
@seed_opt
@out_opt
@workers_opt
def train(config_path, seed, out_dir, workers):
    """Train a model and write checkpoints plus a run report."""
    cfg = _load(config_path, seed)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(out_dir) / "config.yaml")
    model, report = harness.train(cfg, out_dir=out_dir, workers=workers,
                                  progress=True)
    click.echo(f"final loss {report.final_loss:.4f} "
               f"({report.wall_clock_s:.1f}s, {report.n_params} params)")
    click.echo(f"checkpoint: {Path(out_dir) / 'checkpoint.ckpt'}")


@main.command()
@config_opt
@seed_opt
@out_opt
@workers_opt
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              required=True, help="Trained checkpoint to evaluate.")
def evaluate(config_path, seed, out_dir, workers, checkpoint_path):
    """Score a checkpoint on the held-out seed range."""
    cfg = _load(config_path, seed)
    model = harness.Model(cfg)
    model.load(checkpoint_path)
    report = harness.evaluate(cfg, model, out_dir=out_dir, workers=workers)
    click.echo(harness.summarize(report))
    click.echo(f"outputs in {out_dir}")


@main.command()
@config_opt
@seed_opt
@out_opt
@workers_opt
@click.option("--suite", type=click.Choice(["components", "past-motion", "history"]),
              default="past-motion",
              help="Which ablation table to run.")
def ablate(config_path, seed, out_dir, workers, suite):
    """Train and evaluate a family of config variants with shared seeds."""
    cfg = _load(config_path, seed)
    variants = {
        "past-motion": [
            ("no_guidance", {"model.past_motion_mode": "no_guidance"}),
            ("constant_velocity", {"model.past_motion_mode": "constant_velocity"}),
        ],
        "components": [
            ("no_past_attn", {"model.past_cross_attention": False}),
            ("no_weight_init", {"model.query_init_weights": False}),
            ("no_object_init", {"model.query_init_object": False}),
        ],
        "history": [
            ("history_4", {"scene.t_history": 4}),
            ("history_6", {"scene.t_history": 6}),
        ],
    }[suite]
    table = harness.ablate(cfg, variants, out_dir=out_dir, workers=workers,
                           progress=True)
    click.echo(table)


@main.command()
@config_opt
@seed_opt
def gradcheck(config_path, seed):
    """Finite-difference checks for every primitive and the full model graph."""
    from .gradchecks import run_all_gradchecks
    cfg = _load(config_path, seed)
    results = run_all_gradchecks(seed=cfg.seed)
    worst = 0.0
    for name, err in results:
        click.echo(f"{name:<40} {err:.3e}")
        worst = max(worst, err)
    click.echo(f"{'worst':<40} {worst:.3e}")
    if worst > 1e-4:
        sys.exit(1)


if __name__ == "__main__":
    main()
