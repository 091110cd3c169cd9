"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(trace divergence, training or optimization divergence), 4 I/O error.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from . import experiments
from .dataio import ConfigError, RunConfig
from .optimize import OptimizationDivergedError
from .solver import TraceDivergenceError
from .surrogate import ModelFileError, TrainingDivergedError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _build_config(config, seed, preset, backend, deterministic) -> RunConfig:
    cfg = RunConfig.load(config) if config else RunConfig()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if preset is not None:
        overrides["preset"] = preset
    if backend is not None:
        overrides["backend"] = backend
    if deterministic:
        overrides["deterministic"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.apply_preset()


def _run(ctx, name: str, fn):
    """Execute one experiment with the shared error-to-exit-code mapping."""
    cfg = dataclasses.replace(ctx.obj["cfg"], experiment=name)
    if cfg.deterministic:
        # Pin BLAS to one thread so reduction order is fixed.
        import threadpoolctl

        with threadpoolctl.threadpool_limits(1):
            results = fn(cfg, ctx.obj["out"])
    else:
        results = fn(cfg, ctx.obj["out"])
    click.echo(json.dumps({k: v for k, v in results.items() if k != "rows"},
                          indent=2, sort_keys=True, default=str))
    return results


def _fail(code: int, exc: BaseException):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(ctx, name, fn):
    try:
        return _run(ctx, name, fn)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    except (TraceDivergenceError, TrainingDivergedError,
            OptimizationDivergedError, FloatingPointError) as exc:
        _fail(EXIT_NUMERICAL, exc)
    except (OSError, ModelFileError) as exc:
        _fail(EXIT_IO, exc)


@click.group()
@click.option("--config", type=click.Path(), help="JSON run configuration.")
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option("--out", type=click.Path(), default="out", show_default=True,
              help="Output directory.")
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--backend", type=click.Choice(["surrogate", "rk4"]), default=None)
@click.option("--deterministic", is_flag=True,
              help="Single-threaded BLAS for bitwise reproducibility.")
@click.pass_context
def main(ctx, config, seed, out, preset, backend, deterministic):
    """Surrogate-assisted optimal control of a driven two-level system."""
    try:
        cfg = _build_config(config, seed, preset, backend, deterministic)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    except OSError as exc:
        _fail(EXIT_IO, exc)
    ctx.ensure_object(dict)
    ctx.obj["cfg"] = cfg
    ctx.obj["out"] = Path(out)


@main.command("gen-data")
@click.option("--n-samples", type=int, default=None, help="Override sample count.")
@click.pass_context
def gen_data(ctx, n_samples):
    """Generate the RFS ground-truth training dataset (resumable)."""
    if n_samples is not None:
        ctx.obj["cfg"] = dataclasses.replace(ctx.obj["cfg"], n_samples=n_samples)
    _guarded(ctx, "gen-data", lambda cfg, out: experiments.gen_data(cfg, out))


def _progress_echo(entry):
    click.echo(f"epoch {entry['epoch']:4d}  train {entry['train_loss']:.6f}  "
               f"val {entry['val_loss']:.6f}")


@main.command("train")
@click.option("--dataset", type=click.Path(), default=None,
              help="Dataset path (default: <out>/dataset.jsonl).")
@click.option("--epochs", type=int, default=None, help="Override epoch count.")
@click.option("--quiet", is_flag=True, help="Suppress per-epoch progress lines.")
@click.pass_context
def train_cmd(ctx, dataset, epochs, quiet):
    """Train the LSTM surrogate on a generated dataset."""
    if epochs is not None:
        ctx.obj["cfg"] = dataclasses.replace(ctx.obj["cfg"], epochs=epochs)
    progress = None if quiet else _progress_echo
    _guarded(ctx, "train", lambda cfg, out: experiments.train_command(
        cfg, dataset or Path(out) / "dataset.jsonl", out, progress=progress))


@main.command("verify")
@click.option("--model", type=click.Path(), default=None,
              help="Model path (default: <out>/model.qclstm).")
@click.option("--scenario", "scenarios", multiple=True,
              type=click.Choice(experiments.SCENARIOS))
@click.pass_context
def verify(ctx, model, scenarios):
    """Compare surrogate rollouts against exact integration."""
    _guarded(ctx, "verify", lambda cfg, out: experiments.verify(
        cfg, model or Path(out) / "model.qclstm", out,
        scenarios=scenarios or experiments.SCENARIOS))


@main.command("scan-ttot")
@click.option("--model", type=click.Path(), default=None,
              help="Surrogate model (required for --backend surrogate).")
@click.pass_context
def scan_ttot(ctx, model):
    """Final-fidelity curves of the linear ramp over total times and couplings."""
    cfg = ctx.obj["cfg"]
    if cfg.backend == "surrogate" and model is None:
        model = Path(ctx.obj["out"]) / "model.qclstm"
    _guarded(ctx, "scan-ttot", lambda cfg, out: experiments.scan_ttot(
        cfg, out, model_path=model))


def _optimize(ctx, which, model):
    cfg = ctx.obj["cfg"]
    if cfg.backend == "surrogate" and model is None:
        model = Path(ctx.obj["out"]) / "model.qclstm"
    _guarded(ctx, f"optimize-{which}", lambda cfg, out: experiments.optimize_command(
        cfg, which, out, model_path=model))


@main.command("optimize-trajectory")
@click.option("--model", type=click.Path(), default=None)
@click.pass_context
def optimize_trajectory(ctx, model):
    """Step one: optimize the driving trajectory s(t) with c = 0."""
    _optimize(ctx, "trajectory", model)


@main.command("optimize-pulse")
@click.option("--model", type=click.Path(), default=None)
@click.pass_context
def optimize_pulse(ctx, model):
    """Step two: optimize the zero-area pulse c(t) along the linear ramp."""
    _optimize(ctx, "pulse", model)


@main.command("scan-improvement")
@click.option("--which", type=click.Choice(["trajectory", "pulse"]),
              default="pulse", show_default=True)
@click.option("--param", type=click.Choice(["coupling", "cutoff", "temperature"]),
              default="coupling", show_default=True)
@click.option("--values", default="0.01,0.03,0.05", show_default=True,
              help="Comma-separated parameter values.")
@click.option("--model", type=click.Path(), default=None)
@click.pass_context
def scan_improvement(ctx, which, param, values, model):
    """Fidelity improvement of optimized controls over one bath parameter."""
    cfg = ctx.obj["cfg"]
    if cfg.backend == "surrogate" and model is None:
        model = Path(ctx.obj["out"]) / "model.qclstm"
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        _fail(EXIT_CONFIG, ConfigError(f"bad --values: {exc}"))
    if not parsed:
        _fail(EXIT_CONFIG, ConfigError("--values must not be empty"))
    _guarded(ctx, "scan-improvement", lambda cfg, out: experiments.scan_improvement(
        cfg, which, param, parsed, out, model_path=model))


@main.command("bench")
@click.option("--model", type=click.Path(), default=None,
              help="Model path (default: <out>/model.qclstm).")
@click.option("--iterations", type=int, default=200, show_default=True)
@click.pass_context
def bench(ctx, model, iterations):
    """Wall-clock benchmark: surrogate vs RK4 trajectory optimization."""
    if iterations < 0:
        _fail(EXIT_CONFIG, ConfigError("--iterations must be >= 0"))
    _guarded(ctx, "bench", lambda cfg, out: experiments.bench(
        cfg, model or Path(out) / "model.qclstm", out, iterations=iterations))


if __name__ == "__main__":  # pragma: no cover
    main()
