"""LSTM surrogate for the open-system dynamics, implemented in plain numpy.

A stack of LSTM layers with an MLP that encodes the initial Bloch vector into
every layer's initial hidden/memory state.  The network rolls out
autoregressively: each predicted Bloch vector is fed back as the next step's
input alongside the control values at the current and next grid point, the
bath parameters and the time.  Training backpropagates through the entire
rollout (including the feedback path and the encoder).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 11  # [sx, sy, sz, s_t, s_t+1, c_t, c_t+1, coupling, cutoff, temperature, t]

MAGIC = b"QCLSTM"
FORMAT_VERSION = 1


class GridMismatchError(ValueError):
    """Control grid step or length incompatible with the model."""


class ModelFileError(ValueError):
    """Model file is corrupt or truncated."""


class ModelVersionError(ModelFileError):
    """Model file has an unsupported format version."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature affine normalization x -> (x - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", np.asarray(self.shift, float))
        object.__setattr__(self, "scale", np.asarray(self.scale, float))
        if self.shift.shape != self.scale.shape:
            raise ValueError("shift and scale must have equal shape")
        if np.any(self.scale == 0.0):
            raise ValueError("scale entries must be nonzero")

    def transform(self, x):
        return (np.asarray(x, float) - self.shift) / self.scale

    def inverse(self, x):
        return np.asarray(x, float) * self.scale + self.shift

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"]), np.array(d["scale"]))


def default_scaler(t_window: float = 2.5, c_max: float = 60.0) -> FeatureScaler:
    """Scaling matched to the training ranges of each feature."""
    shift = np.zeros(FEATURE_DIM)
    scale = np.ones(FEATURE_DIM)
    scale[5] = scale[6] = c_max       # control amplitudes
    scale[7] = 0.05                   # coupling box [0, 0.05]
    shift[8], scale[8] = 1.0, 29.0    # cutoff box [1, 30]
    shift[9], scale[9] = 5.0, 10.0    # temperature box [5, 15]
    scale[10] = t_window              # physical time, trained window
    return FeatureScaler(shift, scale)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def lstm_cell(x, h, c, weights, bias):
    """One LSTM cell update; returns (h', c').

    Gate blocks in ``weights``/``bias`` are ordered [forget, input, output,
    candidate] along the last axis; the candidate uses tanh, the gates
    sigmoid; c' = f*c + i*g and h' = o*tanh(c').
    """
    hidden = h.shape[-1]
    if weights.shape != (x.shape[-1] + hidden, 4 * hidden):
        raise ValueError(
            f"weight shape {weights.shape} incompatible with input {x.shape} and hidden {h.shape}"
        )
    z = np.concatenate([x, h], axis=-1) @ weights + bias
    f = _sigmoid(z[..., :hidden])
    i = _sigmoid(z[..., hidden : 2 * hidden])
    o = _sigmoid(z[..., 2 * hidden : 3 * hidden])
    g = np.tanh(z[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


class SurrogateModel:
    """LSTM stack + initial-state encoder + linear output head.

    All parameters live in one flat float64 vector (``params``); named views
    are exposed through ``arrays``.  The serialized layout is the order of
    ``param_layout``.
    """

    def __init__(self, n_layers=4, hidden_size=128, encoder_hidden=256, dt=0.05,
                 scaler: FeatureScaler | None = None, metadata: dict | None = None):
        self.n_layers = n_layers
        self.hidden_size = hidden_size
        self.encoder_hidden = encoder_hidden
        self.dt = float(dt)
        self.scaler = scaler if scaler is not None else default_scaler()
        self.metadata = dict(metadata or {})

        h = hidden_size
        layout: list[tuple[str, tuple[int, ...]]] = [
            ("enc_w1", (3, encoder_hidden)),
            ("enc_b1", (encoder_hidden,)),
            ("enc_w2", (encoder_hidden, 2 * n_layers * h)),
            ("enc_b2", (2 * n_layers * h,)),
        ]
        for layer in range(n_layers):
            in_dim = FEATURE_DIM if layer == 0 else h
            layout.append((f"lstm_w{layer}", (in_dim + h, 4 * h)))
            layout.append((f"lstm_b{layer}", (4 * h,)))
        layout.append(("head_w", (h, 3)))
        layout.append(("head_b", (3,)))
        self.param_layout = layout

        total = sum(int(np.prod(shape)) for _, shape in layout)
        self.params = np.zeros(total)
        self.arrays: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            self.arrays[name] = self.params[offset : offset + size].reshape(shape)
            offset += size

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, seed: int = 0, **kwargs) -> "SurrogateModel":
        """Random init: U(+-1/sqrt(fan_in)) weights, +1 forget-gate bias."""
        model = cls(**kwargs)
        rng = np.random.default_rng(seed)
        for name, shape in model.param_layout:
            arr = model.arrays[name]
            if name.endswith(("w1", "w2")) or "_w" in name:
                bound = 1.0 / np.sqrt(shape[0])
                arr[...] = rng.uniform(-bound, bound, size=shape)
        for layer in range(model.n_layers):
            model.arrays[f"lstm_b{layer}"][: model.hidden_size] = 1.0
        model.metadata.setdefault("init_seed", seed)
        return model

    def copy_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat: np.ndarray):
        self.params[...] = flat

    @property
    def n_params(self) -> int:
        return self.params.size

    # -- forward ------------------------------------------------------------

    def encode_initial(self, sigma0):
        """Map initial Bloch vectors (B, 3) to per-layer (h0, c0) lists."""
        sigma0 = np.atleast_2d(np.asarray(sigma0, float))
        x = (sigma0 - self.scaler.shift[:3]) / self.scaler.scale[:3]
        hidden = np.tanh(x @ self.arrays["enc_w1"] + self.arrays["enc_b1"])
        out = hidden @ self.arrays["enc_w2"] + self.arrays["enc_b2"]
        h = self.hidden_size
        h0 = [out[:, l * h : (l + 1) * h] for l in range(self.n_layers)]
        c0 = [out[:, (self.n_layers + l) * h : (self.n_layers + l + 1) * h]
              for l in range(self.n_layers)]
        return h0, c0

    def _static_features(self, s_grid, c_grid, bath, n_steps):
        """Scaled per-step features 3..10, shape (B, N, 8)."""
        b = s_grid.shape[0]
        feats = np.empty((b, n_steps, 8))
        feats[:, :, 0] = s_grid[:, :-1]
        feats[:, :, 1] = s_grid[:, 1:]
        feats[:, :, 2] = c_grid[:, :-1]
        feats[:, :, 3] = c_grid[:, 1:]
        feats[:, :, 4:7] = bath[:, None, :]
        feats[:, :, 7] = self.dt * np.arange(n_steps)[None, :]
        shift, scale = self.scaler.shift[3:], self.scaler.scale[3:]
        feats -= shift
        feats /= scale
        return feats

    def rollout(self, sigma0, s_grid, c_grid, bath, cache: bool = False):
        """Autoregressive Bloch prediction.

        sigma0 (B, 3); s_grid, c_grid (B, N+1) sampled at the model step; bath
        (B, 3) as (coupling, cutoff, temperature).  Returns predictions
        (B, N, 3); with ``cache=True`` also the intermediates needed by
        ``rollout_backward``.  Inputs of shape (3,) / (N+1,) are promoted to a
        batch of one (and the output squeezed back).
        """
        sigma0 = np.asarray(sigma0, float)
        squeeze = sigma0.ndim == 1
        sigma0 = np.atleast_2d(sigma0)
        s_grid = np.atleast_2d(np.asarray(s_grid, float))
        c_grid = np.atleast_2d(np.asarray(c_grid, float))
        bath = np.atleast_2d(np.asarray(bath, float))
        if s_grid.shape != c_grid.shape:
            raise GridMismatchError("s_grid and c_grid shapes differ")
        if s_grid.shape[1] < 2:
            raise GridMismatchError("grid needs at least two samples")

        b, n = s_grid.shape[0], s_grid.shape[1] - 1
        nl, hdim = self.n_layers, self.hidden_size
        feats = self._static_features(s_grid, c_grid, bath, n)
        bloch_shift = self.scaler.shift[:3]
        bloch_scale = self.scaler.scale[:3]

        x0 = (sigma0 - bloch_shift) / bloch_scale
        enc_hidden = np.tanh(x0 @ self.arrays["enc_w1"] + self.arrays["enc_b1"])
        enc_out = enc_hidden @ self.arrays["enc_w2"] + self.arrays["enc_b2"]
        h = [enc_out[:, l * hdim : (l + 1) * hdim].copy() for l in range(nl)]
        cell = [enc_out[:, (nl + l) * hdim : (nl + l + 1) * hdim].copy() for l in range(nl)]

        preds = np.empty((b, n, 3))
        concat0 = np.empty((n, b, FEATURE_DIM + hdim)) if cache else None
        concats = np.empty((n, nl - 1, b, 2 * hdim)) if cache and nl > 1 else None
        gates = np.empty((n, nl, b, 4 * hdim)) if cache else None
        cells = np.empty((n, nl, b, hdim)) if cache else None
        tops = np.empty((n, b, hdim)) if cache else None

        prev_scaled = x0
        for t in range(n):
            inp = np.concatenate([prev_scaled, feats[:, t]], axis=1)
            for layer in range(nl):
                w = self.arrays[f"lstm_w{layer}"]
                bias = self.arrays[f"lstm_b{layer}"]
                cat = np.concatenate([inp, h[layer]], axis=1)
                z = cat @ w + bias
                fio = _sigmoid(z[:, : 3 * hdim])
                g = np.tanh(z[:, 3 * hdim :])
                f = fio[:, :hdim]
                i = fio[:, hdim : 2 * hdim]
                o = fio[:, 2 * hdim :]
                c_new = f * cell[layer] + i * g
                h_new = o * np.tanh(c_new)
                if cache:
                    if layer == 0:
                        concat0[t] = cat
                    else:
                        concats[t, layer - 1] = cat
                    gates[t, layer, :, : 3 * hdim] = fio
                    gates[t, layer, :, 3 * hdim :] = g
                    cells[t, layer] = c_new
                cell[layer] = c_new
                h[layer] = h_new
                inp = h_new
            if cache:
                tops[t] = h[-1]
            pred = h[-1] @ self.arrays["head_w"] + self.arrays["head_b"]
            preds[:, t] = pred
            prev_scaled = (pred - bloch_shift) / bloch_scale

        if not cache:
            return preds[0] if squeeze else preds
        cache_data = {
            "x0": x0, "enc_hidden": enc_hidden, "enc_out": enc_out,
            "concat0": concat0, "concats": concats, "gates": gates,
            "cells": cells, "tops": tops, "preds": preds, "n": n, "b": b,
        }
        return (preds[0] if squeeze else preds), cache_data

    # -- backward -----------------------------------------------------------

    def rollout_backward(self, cache, dpreds, param_grads: bool = True):
        """Backprop through a cached rollout.

        dpreds (B, N, 3) is dLoss/dprediction at every step.  Returns
        (grad_flat, dsigma0 (B,3), ds_grid (B,N+1), dc_grid (B,N+1)).  The
        feedback path (prediction t re-entering the input at t+1) and the
        encoder are both included.  With ``param_grads=False`` the parameter
        gradient (the expensive part — one outer product per layer and step)
        is skipped and ``grad_flat`` is None; input gradients are unaffected.
        This is the mode control optimization runs in, where the weights are
        frozen and only ds_grid/dc_grid are needed.
        """
        n, b = cache["n"], cache["b"]
        nl, hdim = self.n_layers, self.hidden_size
        dpreds = np.asarray(dpreds, float).reshape(b, n, 3)
        grad = np.zeros_like(self.params) if param_grads else None
        gview = {}
        if param_grads:
            offset = 0
            for name, shape in self.param_layout:
                size = int(np.prod(shape))
                gview[name] = grad[offset : offset + size].reshape(shape)
                offset += size

        bloch_scale = self.scaler.scale[:3]
        head_w = self.arrays["head_w"]

        dh_rec = [np.zeros((b, hdim)) for _ in range(nl)]
        dc_rec = [np.zeros((b, hdim)) for _ in range(nl)]
        dprev_scaled = np.zeros((b, 3))
        dfeats = np.empty((b, n, 8))

        gates, cells = cache["gates"], cache["cells"]
        enc_out = cache["enc_out"]
        for t in reversed(range(n)):
            dpred = dpreds[:, t] + dprev_scaled / bloch_scale
            if param_grads:
                gview["head_w"] += cache["tops"][t].T @ dpred
                gview["head_b"] += dpred.sum(axis=0)
            dh_from_above = dpred @ head_w.T
            for layer in reversed(range(nl)):
                dh = dh_rec[layer] + dh_from_above
                c_new = cells[t, layer]
                tanh_c = np.tanh(c_new)
                f = gates[t, layer, :, :hdim]
                i = gates[t, layer, :, hdim : 2 * hdim]
                o = gates[t, layer, :, 2 * hdim : 3 * hdim]
                g = gates[t, layer, :, 3 * hdim :]
                dc = dh * o * (1.0 - tanh_c**2) + dc_rec[layer]
                c_prev = cells[t - 1, layer] if t > 0 else \
                    enc_out[:, (nl + layer) * hdim : (nl + layer + 1) * hdim]
                dz = np.empty((b, 4 * hdim))
                dz[:, :hdim] = dc * c_prev * f * (1.0 - f)
                dz[:, hdim : 2 * hdim] = dc * g * i * (1.0 - i)
                dz[:, 2 * hdim : 3 * hdim] = dh * tanh_c * o * (1.0 - o)
                dz[:, 3 * hdim :] = dc * i * (1.0 - g**2)
                dc_rec[layer] = dc * f
                w = self.arrays[f"lstm_w{layer}"]
                if param_grads:
                    cat = cache["concat0"][t] if layer == 0 else cache["concats"][t, layer - 1]
                    gview[f"lstm_w{layer}"] += cat.T @ dz
                    gview[f"lstm_b{layer}"] += dz.sum(axis=0)
                dcat = dz @ w.T
                in_dim = FEATURE_DIM if layer == 0 else hdim
                dh_rec[layer] = dcat[:, in_dim:]
                dh_from_above = dcat[:, :in_dim]
            dprev_scaled = dh_from_above[:, :3]
            dfeats[:, t] = dh_from_above[:, 3:]

        # Into the encoder: recurrent gradients at t = 0 plus (for the cell
        # states) nothing extra; the feedback gradient at t = 0 targets sigma0.
        denc_out = np.concatenate(dh_rec + dc_rec, axis=1)
        dhid = (denc_out @ self.arrays["enc_w2"].T) * (1.0 - cache["enc_hidden"] ** 2)
        if param_grads:
            gview["enc_w2"] += cache["enc_hidden"].T @ denc_out
            gview["enc_b2"] += denc_out.sum(axis=0)
            gview["enc_w1"] += cache["x0"].T @ dhid
            gview["enc_b1"] += dhid.sum(axis=0)
        dx0 = dhid @ self.arrays["enc_w1"].T + dprev_scaled
        dsigma0 = dx0 / bloch_scale

        feat_scale = self.scaler.scale[3:]
        dfeats = dfeats / feat_scale
        ds_grid = np.zeros((b, n + 1))
        dc_grid = np.zeros((b, n + 1))
        ds_grid[:, :-1] += dfeats[:, :, 0]
        ds_grid[:, 1:] += dfeats[:, :, 1]
        dc_grid[:, :-1] += dfeats[:, :, 2]
        dc_grid[:, 1:] += dfeats[:, :, 3]
        return grad, dsigma0, ds_grid, dc_grid


def mse(predicted, truth) -> float:
    """Trajectory loss: mean over steps of the squared Bloch-vector error."""
    predicted = np.asarray(predicted, float)
    truth = np.asarray(truth, float)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
    n = predicted.shape[-2]
    per_sample = np.sum((predicted - truth) ** 2, axis=(-1, -2)) / n
    return float(np.mean(per_sample))


def per_step_mse(predicted, truth, weights=None) -> np.ndarray:
    """Weighted per-step squared error of the three observables (uniform default)."""
    predicted = np.asarray(predicted, float)
    truth = np.asarray(truth, float)
    if weights is None:
        weights = np.full(3, 1.0 / 3.0)
    return ((predicted - truth) ** 2) @ np.asarray(weights, float)


# ---------------------------------------------------------------------------
# Training.


@dataclass
class TrajectoryDataset:
    """Arrays for supervised rollout training, one row per trajectory."""

    s_grid: np.ndarray      # (n, N+1)
    c_grid: np.ndarray      # (n, N+1)
    bath: np.ndarray        # (n, 3): coupling, cutoff, temperature
    bloch: np.ndarray       # (n, N+1, 3) ground truth

    def __post_init__(self):
        if not (self.s_grid.shape == self.c_grid.shape == self.bloch.shape[:2]):
            raise ValueError("inconsistent dataset array shapes")

    def __len__(self):
        return self.s_grid.shape[0]

    @property
    def sigma0(self):
        return self.bloch[:, 0]

    @property
    def targets(self):
        return self.bloch[:, 1:]

    def subset(self, idx):
        return TrajectoryDataset(self.s_grid[idx], self.c_grid[idx],
                                 self.bath[idx], self.bloch[idx])


@dataclass
class TrainingConfig:
    learning_rate: float = 0.002
    epochs: int = 200
    batch_size: int = 128
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    grad_clip: float = 5.0
    n_layers: int = 4
    hidden_size: int = 128
    encoder_hidden: int = 256
    # multi-step decay: learning rate multiplied by lr_decay_factor at each
    # milestone, given as a fraction of the epoch budget
    lr_decay_milestones: tuple[float, ...] = (0.5, 0.8)
    lr_decay_factor: float = 0.25
    # average the weights of the final fraction of epochs (SWA); the averaged
    # model is adopted only when it beats the best single epoch on validation
    swa_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training hyperparameters")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if not 0.0 <= self.swa_fraction <= 1.0:
            raise ValueError("swa_fraction must lie in [0, 1]")

    def epoch_learning_rate(self, epoch: int) -> float:
        passed = sum(1 for frac in self.lr_decay_milestones
                     if epoch >= frac * self.epochs)
        return self.learning_rate * self.lr_decay_factor**passed


def split_dataset(n: int, split, seed: int):
    """Deterministic shuffled train/val/test index split by sample id."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def evaluate_loss(model: SurrogateModel, dataset: TrajectoryDataset, chunk: int = 256) -> float:
    """Eq.-style rollout MSE averaged over a dataset (no gradients)."""
    if len(dataset) == 0:
        return float("nan")
    total = 0.0
    n_steps = dataset.s_grid.shape[1] - 1
    for start in range(0, len(dataset), chunk):
        sl = slice(start, min(start + chunk, len(dataset)))
        preds = model.rollout(dataset.sigma0[sl], dataset.s_grid[sl],
                              dataset.c_grid[sl], dataset.bath[sl])
        total += float(np.sum((preds - dataset.targets[sl]) ** 2)) / n_steps
    return total / len(dataset)


def train(dataset: TrajectoryDataset, cfg: TrainingConfig, dt: float = 0.05,
          scaler: FeatureScaler | None = None, progress=None):
    """Train a surrogate with Adam + BPTT; returns (model, history).

    history rows: dict(epoch, train_loss, val_loss, learning_rate).  The
    returned model carries the best-validation-loss weights.  Deterministic
    for a fixed cfg.seed and single-threaded BLAS.
    """
    from .optimize import AdamState, adam_step  # shared Adam implementation

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = SurrogateModel.initialize(
        seed=cfg.seed, n_layers=cfg.n_layers, hidden_size=cfg.hidden_size,
        encoder_hidden=cfg.encoder_hidden, dt=dt,
        scaler=scaler if scaler is not None else default_scaler(),
    )
    train_idx, val_idx, _ = split_dataset(len(dataset), cfg.split, cfg.seed)
    train_set = dataset.subset(train_idx)
    val_set = dataset.subset(val_idx)
    n_steps = dataset.s_grid.shape[1] - 1

    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState.zeros(model.n_params, alpha=cfg.learning_rate)
    history = []
    best_val = np.inf
    best_params = model.copy_params()
    swa_start = cfg.epochs - int(round(cfg.swa_fraction * cfg.epochs))
    swa_sum, swa_count = None, 0

    for epoch in range(cfg.epochs):
        lr = cfg.epoch_learning_rate(epoch)
        if lr != state.alpha:
            state = dataclasses.replace(state, alpha=lr)
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for batch_id, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            nb = idx.size
            preds, cache = model.rollout(
                train_set.sigma0[idx], train_set.s_grid[idx],
                train_set.c_grid[idx], train_set.bath[idx], cache=True,
            )
            diff = preds - train_set.targets[idx]
            loss = float(np.sum(diff**2)) / (n_steps * nb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_id)
            epoch_loss += loss * nb
            grad, *_ = model.rollout_backward(cache, 2.0 * diff / (n_steps * nb))
            gnorm = float(np.linalg.norm(grad))
            if cfg.grad_clip > 0.0 and gnorm > cfg.grad_clip:
                grad *= cfg.grad_clip / gnorm
            new_params, state = adam_step(model.params, grad, state)
            model.set_params(new_params)
        train_loss = epoch_loss / len(train_set)
        val_loss = evaluate_loss(model, val_set) if len(val_set) else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "learning_rate": lr})
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.copy_params()
        if epoch >= swa_start:
            if swa_sum is None:
                swa_sum = model.copy_params()
            else:
                swa_sum += model.params
            swa_count += 1
        if progress is not None:
            progress(history[-1])

    selected = "best-val"
    if swa_count > 0:
        averaged = swa_sum / swa_count
        model.set_params(averaged)
        swa_val = evaluate_loss(model, val_set) if len(val_set) else np.inf
        if swa_val < best_val:
            best_val, best_params, selected = swa_val, averaged, "swa"

    model.set_params(best_params)
    model.metadata.update({
        "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate, "seed": cfg.seed,
        "n_samples": len(dataset), "best_val_loss": best_val,
        "selected_weights": selected,
    })
    return model, history


# ---------------------------------------------------------------------------
# Serialization: magic + version + JSON header + little-endian float64 block.


def save_model(model: SurrogateModel, path):
    header = {
        "n_layers": model.n_layers,
        "hidden_size": model.hidden_size,
        "encoder_hidden": model.encoder_hidden,
        "feature_dim": FEATURE_DIM,
        "dt": model.dt,
        "scaler": model.scaler.to_dict(),
        "metadata": model.metadata,
        "param_layout": [[name, list(shape)] for name, shape in model.param_layout],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.params, dtype="<f8").tobytes())


def load_model(path) -> SurrogateModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ModelFileError(f"{path}: not a surrogate model file")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise ModelFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt header") from exc
    model = SurrogateModel(
        n_layers=header["n_layers"], hidden_size=header["hidden_size"],
        encoder_hidden=header["encoder_hidden"], dt=header["dt"],
        scaler=FeatureScaler.from_dict(header["scaler"]), metadata=header["metadata"],
    )
    body = data[start + hlen :]
    expected = model.n_params * 8
    if len(body) != expected:
        raise ModelFileError(f"{path}: expected {expected} weight bytes, found {len(body)}")
    model.set_params(np.frombuffer(body, dtype="<f8"))
    return model
