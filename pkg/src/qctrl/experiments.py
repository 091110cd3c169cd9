"""Experiment implementations behind the CLI subcommands.

Each function is a pure-ish pipeline: it reads a RunConfig, produces files in
an output directory and returns a results dict that is also written to
``<command>_summary.json`` with the full config embedded.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import optimize as opt
from .dataio import (
    DatasetRecord,
    RunConfig,
    read_dataset,
    worker_count,
    write_csv,
    write_dataset,
    write_summary,
)
from .pulses import (
    RFSConfig,
    ideal_sine_intensity,
    named_trajectory,
    rect_pulse,
    rfs_sample,
    sine_pulse,
)
from .solver import (
    ControlGrid,
    TraceDivergenceError,
    auto_substeps,
    evolve,
    evolve_batch,
)
from .surrogate import (
    SurrogateModel,
    TrainingConfig,
    TrajectoryDataset,
    default_scaler,
    load_model,
    per_step_mse,
    save_model,
    train,
)
from .twolevel import BathParams, fidelity_from_bloch, ground_bloch, rho_from_bloch

MAX_RETRIES = 3
GEN_BATCH = 256


def _sample_rng(master_seed: int, sample_id: int, retry: int = 0) -> np.random.Generator:
    # Counter-based fan-out: each (seed, id, retry) triple owns an independent
    # stream, so generation order and batching cannot change the data.
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(sample_id, retry))
    return np.random.default_rng(ss)


def _rfs_config(cfg: RunConfig, t_total=None) -> RFSConfig:
    return RFSConfig(t_total=t_total if t_total is not None else cfg.train_window,
                     dt=cfg.dt, c_max=cfg.c_max)


def _draw_sample(cfg: RunConfig, sample_id: int, retry: int = 0):
    """Bath parameters and control grid for one dataset sample."""
    rng = _sample_rng(cfg.seed, sample_id, retry)
    coupling = rng.uniform(*cfg.box_coupling)
    cutoff = rng.uniform(*cfg.box_cutoff)
    temperature = rng.uniform(*cfg.box_temperature)
    grid = rfs_sample(_rfs_config(cfg), rng)
    return BathParams(coupling, cutoff, temperature), grid


def generate_record(cfg: RunConfig, sample_id: int, retry: int = 0) -> DatasetRecord:
    """Integrate one sample from its seed; used for retries and round-trips."""
    bath, grid = _draw_sample(cfg, sample_id, retry)
    rho0 = rho_from_bloch(ground_bloch(grid.s_values[0]))
    traj = evolve(rho0, grid, bath)
    rec = DatasetRecord(
        id=sample_id, gamma_coupling=bath.coupling, gamma_cutoff=bath.cutoff,
        temperature=bath.temperature, dt=grid.dt, n_steps=grid.n_steps,
        s=grid.s_values, c=grid.c_values, bloch=traj.bloch,
        seed=[cfg.seed, sample_id, retry],
    )
    rec.validate()
    return rec


def gen_data(cfg: RunConfig, out_dir, progress=None):
    """Generate the RFS training dataset; resumable by sample id."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dataset.jsonl"

    t_start = time.perf_counter()
    existing = {}
    if path.exists():
        existing = {rec.id: rec for rec in read_dataset(path)}
    missing = [i for i in range(cfg.n_samples) if i not in existing]

    drawn = {i: _draw_sample(cfg, i) for i in missing}
    groups: dict[int, list[int]] = {}
    for i in missing:
        groups.setdefault(auto_substeps(cfg.dt, drawn[i][1].c_values), []).append(i)

    new_records = {}
    for substeps in sorted(groups):
        ids = groups[substeps]
        for start in range(0, len(ids), GEN_BATCH):
            batch = ids[start : start + GEN_BATCH]
            baths = [drawn[i][0] for i in batch]
            grids = [drawn[i][1] for i in batch]
            s = np.stack([g.s_values for g in grids])
            c = np.stack([g.c_values for g in grids])
            rho0 = rho_from_bloch(ground_bloch(s[:, 0]))
            try:
                bloch, *_ = evolve_batch(
                    rho0, s, c,
                    np.array([b.coupling for b in baths]),
                    np.array([b.cutoff for b in baths]),
                    np.array([b.temperature for b in baths]),
                    cfg.dt, substeps=substeps,
                )
                for j, i in enumerate(batch):
                    rec = DatasetRecord(
                        id=i, gamma_coupling=baths[j].coupling,
                        gamma_cutoff=baths[j].cutoff, temperature=baths[j].temperature,
                        dt=cfg.dt, n_steps=grids[j].n_steps,
                        s=grids[j].s_values, c=grids[j].c_values, bloch=bloch[j],
                        seed=[cfg.seed, i, 0],
                    )
                    rec.validate()
                    new_records[i] = rec
            except TraceDivergenceError:
                for i in batch:
                    new_records[i] = _generate_with_retries(cfg, i)
            if progress is not None:
                progress(len(new_records), len(missing))

    merged = dict(existing)
    merged.update(new_records)
    write_dataset((merged[i] for i in sorted(merged)), path)
    results = {"dataset": str(path), "n_samples": len(merged),
               "n_new": len(new_records),
               "elapsed_seconds": time.perf_counter() - t_start}
    write_summary(out_dir, "gen_data", cfg, results)
    return results


def _generate_with_retries(cfg: RunConfig, sample_id: int) -> DatasetRecord:
    last = None
    for retry in range(MAX_RETRIES + 1):
        try:
            return generate_record(cfg, sample_id, retry)
        except TraceDivergenceError as exc:
            last = exc
    raise TraceDivergenceError(
        f"sample {sample_id} diverged after {MAX_RETRIES} control redraws"
    ) from last


def load_training_dataset(path, stride: int) -> TrajectoryDataset:
    """Subsample stored solver-grid records to the surrogate step."""
    s, c, bath, bloch = [], [], [], []
    for rec in read_dataset(path):
        s.append(rec.s[::stride])
        c.append(rec.c[::stride])
        bath.append([rec.gamma_coupling, rec.gamma_cutoff, rec.temperature])
        bloch.append(rec.bloch[::stride])
    if not s:
        raise ValueError(f"{path}: empty dataset")
    return TrajectoryDataset(np.stack(s), np.stack(c), np.array(bath), np.stack(bloch))


def train_command(cfg: RunConfig, dataset_path, out_dir, progress=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    dataset = load_training_dataset(dataset_path, cfg.stride)
    tcfg = TrainingConfig(
        learning_rate=cfg.learning_rate, epochs=cfg.epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, grad_clip=cfg.grad_clip, n_layers=cfg.n_layers,
        hidden_size=cfg.hidden_size, encoder_hidden=cfg.encoder_hidden,
    )
    scaler = default_scaler(t_window=cfg.train_window, c_max=cfg.c_max)
    model, history = train(dataset, tcfg, dt=cfg.surrogate_dt, scaler=scaler,
                           progress=progress)
    model.metadata["train_window"] = cfg.train_window
    model_path = out_dir / "model.qclstm"
    save_model(model, model_path)
    write_csv(out_dir / "loss_curve.csv",
              ["epoch", "train_loss", "val_loss", "learning_rate"], history)
    results = {
        "model": str(model_path),
        "loss_curve": str(out_dir / "loss_curve.csv"),
        "epochs": cfg.epochs,
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "best_val_loss": model.metadata.get("best_val_loss"),
        "elapsed_seconds": time.perf_counter() - t_start,
    }
    write_summary(out_dir, "train", cfg, results)
    return results


# ---------------------------------------------------------------------------
# Fig.-2 style verification.

SCENARIOS = ("rfs", "linear-sine", "sine-quench")


def scenario_grid(cfg: RunConfig, name: str) -> ControlGrid:
    """Dense control grid over [0, t_total] for one verification scenario."""
    t_total = cfg.t_total
    if name == "rfs":
        # Held-out draw: ids >= 10**6 never occur in dataset generation.  The
        # benchmark signal's sampler ranges are pinned here (a strict subset
        # of the training sampler's) so the reference scenario stays the same
        # signal even if the training-sampler defaults widen.
        rng = _sample_rng(cfg.seed, 10**6)
        scenario_cfg = replace(_rfs_config(cfg, t_total=t_total),
                               n_components=(3, 8), frequency=(0.1, 2.0))
        return rfs_sample(scenario_cfg, rng)
    if name == "linear-sine":
        intensity = ideal_sine_intensity(3, 0.5)
        return ControlGrid.from_callables(
            lambda t: named_trajectory("linear", t, t_total),
            lambda t: sine_pulse(t, intensity, 0.5), t_total, cfg.dt)
    if name == "sine-quench":
        return ControlGrid.from_callables(
            lambda t: named_trajectory("sine", t, t_total),
            lambda t: rect_pulse(t, cfg.quench_amplitude, cfg.quench_tau),
            t_total, cfg.dt)
    raise ValueError(f"unknown scenario {name!r}")


def verify(cfg: RunConfig, model_path, out_dir, scenarios=SCENARIOS):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(model_path)
    bath = cfg.bath()
    stride = cfg.stride
    results = {}
    for name in scenarios:
        grid = scenario_grid(cfg, name)
        rho0 = rho_from_bloch(ground_bloch(grid.s_values[0]))
        truth = evolve(rho0, grid, bath)
        sub = grid.subsample(stride)
        truth_sub = truth.bloch[::stride]
        preds = model.rollout(truth_sub[0], sub.s_values, sub.c_values,
                              [bath.coupling, bath.cutoff, bath.temperature])
        errors = per_step_mse(preds, truth_sub[1:], weights=np.array(cfg.mse_weights))
        times = sub.times[1:]
        trained = times <= cfg.train_window + 1e-9
        rows = [
            {"time": times[j], "s": sub.s_values[j + 1], "c": sub.c_values[j + 1],
             "truth_x": truth_sub[j + 1, 0], "truth_y": truth_sub[j + 1, 1],
             "truth_z": truth_sub[j + 1, 2], "pred_x": preds[j, 0],
             "pred_y": preds[j, 1], "pred_z": preds[j, 2],
             "mse": errors[j], "in_trained_window": int(trained[j])}
            for j in range(len(times))
        ]
        key = name.replace("-", "_")
        csv_path = out_dir / f"verify_{key}.csv"
        write_csv(csv_path, list(rows[0].keys()), rows)
        results[name] = {
            "table": str(csv_path),
            "mse_trained_mean": float(np.mean(errors[trained])),
            "mse_trained_max": float(np.max(errors[trained])),
            "mse_extrapolation_mean": float(np.mean(errors[~trained])) if np.any(~trained) else None,
            "mse_extrapolation_max": float(np.max(errors[~trained])) if np.any(~trained) else None,
        }
    write_summary(out_dir, "verify", cfg, results)
    return results


# ---------------------------------------------------------------------------
# T_tot scan (Fig.-3 style curves).


def scan_ttot(cfg: RunConfig, out_dir, model_path=None,
              couplings=(0.0, 0.03), t_totals=(3.0, 7.0, 10.0)):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(model_path) if cfg.backend == "surrogate" else None
    rows, finals = [], {}
    for coupling in couplings:
        bath = BathParams(coupling, 2.0, 10.0)  # cutoff 2, temperature 10
        for t_total in t_totals:
            if model is not None:
                step = model.dt
                n = int(round(t_total / step))
                times = step * np.arange(n + 1)
                s = times / t_total
                c = np.zeros_like(s)
                backend = opt.SurrogateBackend(model, bath, t_total)
                traj = backend.trajectory(s, c)
            else:
                grid = ControlGrid.from_callables(
                    lambda t: named_trajectory("linear", t, t_total),
                    lambda t: np.zeros_like(t), t_total, cfg.dt)
                rho0 = rho_from_bloch(ground_bloch(grid.s_values[0]))
                traj = evolve(rho0, grid, bath)
            for j in range(len(traj.times)):
                rows.append({
                    "gamma_coupling": coupling, "t_total": t_total,
                    "time": traj.times[j], "t_over_ttot": traj.times[j] / t_total,
                    "fidelity": traj.fidelity[j],
                })
            finals[f"coupling={coupling},t_total={t_total}"] = float(traj.fidelity[-1])
    csv_path = out_dir / "scan_ttot.csv"
    write_csv(csv_path, ["gamma_coupling", "t_total", "time", "t_over_ttot", "fidelity"], rows)
    results = {"table": str(csv_path), "final_fidelity": finals, "backend": cfg.backend}
    write_summary(out_dir, "scan_ttot", cfg, results)
    return results


# ---------------------------------------------------------------------------
# Two-step optimization.


def _make_backend(cfg: RunConfig, model_path=None, bath=None, model=None):
    bath = bath if bath is not None else cfg.bath()
    if cfg.backend == "surrogate":
        if model is None:
            if model_path is None:
                raise ValueError("surrogate backend requires a model")
            model = load_model(model_path)
        return opt.SurrogateBackend(model, bath, cfg.t_total)
    return opt.Rk4Backend(bath, cfg.t_total, dt=cfg.surrogate_dt)


def _settings(cfg: RunConfig, gradient="auto", fd_batched=True) -> opt.OptimizerSettings:
    return opt.OptimizerSettings(alpha=cfg.adam_alpha, k_max=cfg.k_max, lam=cfg.lam,
                                 n_coeff=cfg.n_coeff, gradient=gradient,
                                 fd_batched=fd_batched)


def optimize_command(cfg: RunConfig, which: str, out_dir, model_path=None):
    """Run trajectory or pulse optimization; always cross-check with RK4."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bath = cfg.bath()
    backend = _make_backend(cfg, model_path, bath)
    settings = _settings(cfg)
    if which == "trajectory":
        result = opt.optimize_trajectory(backend, settings)
        other = None
        baselines = {
            "linear": opt.exact_final_fidelity(
                lambda t: named_trajectory("linear", t, cfg.t_total),
                lambda t: np.zeros_like(t), bath, cfg.t_total, cfg.dt),
            "sine": opt.exact_final_fidelity(
                lambda t: named_trajectory("sine", t, cfg.t_total),
                lambda t: np.zeros_like(t), bath, cfg.t_total, cfg.dt),
        }
    elif which == "pulse":
        result = opt.optimize_pulse(backend, settings)
        other = "linear"
        baselines = {
            "ideal": opt.baseline_fidelity("pulse", bath, cfg.t_total, cfg.dt),
            "free": opt.baseline_fidelity("trajectory", bath, cfg.t_total, cfg.dt),
        }
    else:
        raise ValueError(f"unknown optimization target {which!r}")

    f_exact = opt.reevaluate_exact(result, bath, cfg.t_total, other=other, dt=cfg.dt)
    write_csv(out_dir / f"optimize_{which}_history.csv",
              ["iteration", "loss", "fidelity", "dr_max"], result.history)

    fine = opt.Rk4Backend(bath, cfg.t_total, dt=cfg.dt)
    s, c, _ = opt._control_grids(result.control, other, fine.times, cfg.t_total)
    traj = fine.trajectory(s, c)
    write_csv(out_dir / f"optimize_{which}_trajectory.csv",
              ["time", "s", "c", "fidelity"],
              [{"time": traj.times[j], "s": s[j], "c": c[j], "fidelity": traj.fidelity[j]}
               for j in range(0, len(traj.times), max(1, cfg.stride))])

    results = {
        "which": which,
        "backend": backend.name,
        "coefficients": result.control.coefficients.tolist(),
        "n_min": result.control.n_min,
        "fundamental": result.control.fundamental,
        "fidelity_backend": result.report.fidelity,
        "fidelity_rk4": f_exact,
        "backend_rk4_gap": abs(result.report.fidelity - f_exact),
        "dr_max": result.report.dr_max,
        "loss": result.report.loss,
        "baselines": baselines,
        "history": str(out_dir / f"optimize_{which}_history.csv"),
    }
    write_summary(out_dir, f"optimize_{which}", cfg, results)
    return results


# ---------------------------------------------------------------------------
# Fidelity-improvement scans (Figs. 5 / 7(b) analogs).

SCAN_DEFAULTS = {
    "trajectory": {"base": (0.03, 4.0, 5.0)},   # Fig. 5 fixed values
    "pulse": {"base": (0.03, 4.0, 10.0)},       # Fig. 7(b) fixed values
}


class _BackendFactory:
    """Picklable backend builder for worker processes."""

    def __init__(self, cfg: RunConfig, model_path):
        self.cfg = cfg
        self.model_path = str(model_path) if model_path else None
        self._model = None

    def __call__(self, bath: BathParams):
        cfg = self.cfg
        if cfg.backend == "surrogate":
            if self._model is None:
                self._model = load_model(self.model_path)
            return opt.SurrogateBackend(self._model, bath, cfg.t_total)
        return opt.Rk4Backend(bath, cfg.t_total, dt=cfg.surrogate_dt)

    def __getstate__(self):
        return {"cfg": self.cfg, "model_path": self.model_path}

    def __setstate__(self, state):
        self.__dict__.update(state, _model=None)


def _improvement_row(args):
    which, param, value, base, factory, settings, t_total = args
    return opt.fidelity_improvement_scan(which, param, [value], BathParams(*base),
                                         factory, settings, t_total)[0]


def scan_improvement(cfg: RunConfig, which: str, param: str, values, out_dir,
                     model_path=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = SCAN_DEFAULTS[which]["base"]
    factory = _BackendFactory(cfg, model_path)
    settings = _settings(cfg)
    jobs = [(which, param, float(v), base, factory, settings, cfg.t_total)
            for v in values]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_improvement_row, jobs))
    else:
        rows = [_improvement_row(job) for job in jobs]
    csv_path = out_dir / f"scan_improvement_{which}_{param}.csv"
    write_csv(csv_path, list(rows[0].keys()), rows)
    results = {"table": str(csv_path), "rows": rows, "which": which, "param": param}
    write_summary(out_dir, "scan_improvement", cfg, results)
    return results


# ---------------------------------------------------------------------------
# Runtime benchmark.


def bench(cfg: RunConfig, model_path, out_dir, couplings=(0.01, 0.03, 0.05),
          iterations=200):
    """Wall-clock comparison of 200-iteration trajectory optimizations.

    Both backends work on the same surrogate time step.  The benchmark runs
    strictly sequentially: the RK4 backend uses its finite-difference gradient
    one coefficient at a time, the surrogate its reverse-mode gradient.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(model_path)
    rows = []
    for coupling in couplings:
        bath = BathParams(coupling, cfg.bath_cutoff, cfg.bath_temperature)
        surrogate = opt.SurrogateBackend(model, bath, cfg.t_total)
        rk4 = opt.Rk4Backend(bath, cfg.t_total, dt=cfg.surrogate_dt)
        s_settings = _settings(cfg, gradient="bptt")
        r_settings = _settings(cfg, gradient="fd", fd_batched=False)
        s_settings.k_max = r_settings.k_max = iterations

        t0 = time.perf_counter()
        opt.optimize_trajectory(surrogate, s_settings)
        t_surrogate = time.perf_counter() - t0
        t0 = time.perf_counter()
        opt.optimize_trajectory(rk4, r_settings)
        t_rk4 = time.perf_counter() - t0

        ratio = t_rk4 / t_surrogate if iterations > 0 else None
        rows.append({"gamma_coupling": coupling, "iterations": iterations,
                     "seconds_surrogate": t_surrogate, "seconds_rk4": t_rk4,
                     "ratio_rk4_over_surrogate": ratio})
    csv_path = out_dir / "bench.csv"
    write_csv(csv_path, list(rows[0].keys()), rows)
    results = {"table": str(csv_path), "rows": rows}
    write_summary(out_dir, "bench", cfg, results)
    return results
