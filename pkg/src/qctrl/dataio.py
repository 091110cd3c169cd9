"""Run configuration, dataset records and file formats.

Every experiment output embeds the full RunConfig and the package version so
a result can be regenerated from its own header.  Datasets are JSON-Lines
(one trajectory record per line); tabular results are RFC-4180 CSV with a
JSON summary next to them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


@dataclass
class RunConfig:
    """Declarative settings for every experiment command."""

    experiment: str = ""
    seed: int = 0
    preset: str = "desk"
    backend: str = "rk4"
    deterministic: bool = False

    # physics / grids
    t_total: float = 5.0
    train_window: float = 2.5
    dt: float = 0.005
    surrogate_dt: float = 0.05
    bath_coupling: float = 0.03
    bath_cutoff: float = 4.0
    bath_temperature: float = 10.0

    # dataset generation
    box_coupling: tuple = (0.0, 0.05)
    box_cutoff: tuple = (1.0, 30.0)
    box_temperature: tuple = (5.0, 15.0)
    n_samples: int = 5000
    c_max: float = 60.0

    # surrogate training
    epochs: int = 50
    # desk-scale batch: 5,000 samples at batch 128 would give only ~30
    # gradient updates per epoch; 8 keeps the update count meaningful
    batch_size: int = 8
    learning_rate: float = 0.002
    n_layers: int = 4
    hidden_size: int = 128
    encoder_hidden: int = 256
    grad_clip: float = 5.0

    # control optimization
    adam_alpha: float = 0.1
    k_max: int = 200
    lam: float = 1e-4
    n_coeff: int = 8

    # Fig.-2 style verification scenarios
    quench_k: int = 12
    quench_tau: float = 2.0
    quench_intensity: float | None = None  # None: 2 k pi / tau
    mse_weights: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.preset not in ("desk", "paper"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.backend not in ("rk4", "surrogate"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        for name in ("t_total", "train_window", "dt", "surrogate_dt", "c_max",
                     "learning_rate", "adam_alpha", "quench_tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_samples", "epochs", "batch_size", "n_coeff", "quench_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k_max < 0 or self.lam < 0:
            raise ConfigError("k_max and lam must be >= 0")
        ratio = self.surrogate_dt / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("dt must divide surrogate_dt")
        for name in ("box_coupling", "box_cutoff", "box_temperature"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} range inverted")

    def apply_preset(self) -> "RunConfig":
        if self.preset == "paper":
            return dataclasses.replace(self, n_samples=50000, epochs=200,
                                       batch_size=128, learning_rate=0.001)
        return dataclasses.replace(self, n_samples=min(self.n_samples, 50000))

    @property
    def stride(self) -> int:
        return int(round(self.surrogate_dt / self.dt))

    @property
    def quench_amplitude(self) -> float:
        if self.quench_intensity is not None:
            return float(self.quench_intensity)
        return 2.0 * self.quench_k * np.pi / self.quench_tau

    def bath(self):
        from .twolevel import BathParams
        return BathParams(self.bath_coupling, self.bath_cutoff, self.bath_temperature)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("box_coupling", "box_cutoff", "box_temperature", "mse_weights"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        # Allow loading a summary.json straight back in.
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        return cls.from_dict(data)


def worker_count() -> int:
    """Worker cap from QCTRL_THREADS (default 1)."""
    raw = os.environ.get("QCTRL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"QCTRL_THREADS must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# Dataset records.


@dataclass
class DatasetRecord:
    """One RFS-driven ground-truth trajectory at the solver grid."""

    id: int
    gamma_coupling: float
    gamma_cutoff: float
    temperature: float
    dt: float
    n_steps: int
    s: np.ndarray
    c: np.ndarray
    bloch: np.ndarray
    seed: list = field(default_factory=list)

    def validate(self):
        n = self.n_steps + 1
        if not (self.s.shape == self.c.shape == (n,) and self.bloch.shape == (n, 3)):
            raise ValueError(f"record {self.id}: inconsistent array lengths")
        # The time-local master equation leaves the Bloch ball by up to a few
        # percent for strongly driven samples with fast baths; only a gross
        # violation marks a broken record (trace divergence is caught earlier).
        norms = np.linalg.norm(self.bloch, axis=1)
        if np.any(norms > 1.5):
            raise ValueError(f"record {self.id}: Bloch norm exceeds 1.5")

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "gamma_coupling": self.gamma_coupling,
            "gamma_cutoff": self.gamma_cutoff,
            "temperature": self.temperature,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "s": self.s.tolist(),
            "c": self.c.tolist(),
            "bloch": self.bloch.tolist(),
            "seed": list(self.seed),
        })

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        rec = cls(
            id=d["id"], gamma_coupling=d["gamma_coupling"],
            gamma_cutoff=d["gamma_cutoff"], temperature=d["temperature"],
            dt=d["dt"], n_steps=d["n_steps"],
            s=np.array(d["s"], float), c=np.array(d["c"], float),
            bloch=np.array(d["bloch"], float), seed=d.get("seed", []),
        )
        rec.validate()
        return rec


def write_dataset(records, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
    tmp.replace(path)


def read_dataset(path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield DatasetRecord.from_json(line)


# ---------------------------------------------------------------------------
# Tabular / summary outputs.


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_summary(out_dir, command: str, cfg: RunConfig, results: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}_summary.json"
    payload = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "results": results,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
