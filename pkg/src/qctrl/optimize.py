"""Adam-driven optimization of Fourier-parameterized controls.

The loss is 1 - F + lam * dr_max, where F is the adiabatic fidelity at the
final time produced by a dynamics backend (exact RK4 integration or the LSTM
surrogate) and dr_max is the maximum amplitude of the control being
optimized.  Gradients come either from reverse-mode differentiation through
the surrogate rollout or from central finite differences over the backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .pulses import (
    PULSE,
    TRAJECTORY,
    FourierControl,
    eval_pulse,
    eval_trajectory,
    eval_trajectory_raw,
    fit_pulse_coefficients,
    ideal_sine_intensity,
    named_trajectory,
    sine_pulse,
)
from .solver import ControlGrid, Trajectory, auto_substeps, evolve, evolve_batch
from .surrogate import SurrogateModel
from .twolevel import BathParams, fidelity_from_bloch, ground_bloch, rho_from_bloch


class OptimizationDivergedError(RuntimeError):
    """The control loss became non-finite during optimization."""


# ---------------------------------------------------------------------------
# Adam (bias-corrected moment estimates).


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("decay rates must lie in (0, 1)")
        if self.m.shape != self.v.shape:
            raise ValueError("moment vectors must have equal shape")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState):
    """One Adam update; returns (new_params, new_state).

    m and v are the exponential moving averages of the gradient and its
    square; both are bias-corrected by 1/(1 - beta^t) before the update.
    """
    grad = np.asarray(grad, float)
    if grad.shape != np.shape(params):
        raise ValueError("params and grad must have equal shape")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    t = state.count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, count=t)


# ---------------------------------------------------------------------------
# Dynamics backends.

TARGET_BLOCH = ground_bloch(1.0)  # ground state at s = 1


def final_fidelity_from_bloch(bloch) -> float:
    """Fidelity vs the s=1 ground state, renormalizing if |b| > 1."""
    f, _ = _fidelity_and_grad(np.asarray(bloch, float))
    return f


def _fidelity_and_grad(b: np.ndarray):
    norm = float(np.linalg.norm(b))
    if norm > 1.0:
        b_used = b / norm
        jac = (np.eye(3) - np.outer(b, b) / norm**2) / norm
    else:
        b_used = b
        jac = np.eye(3)
    overlap = 0.5 * (1.0 + float(b_used @ TARGET_BLOCH))
    if overlap <= 0.0:
        return 0.0, np.zeros(3)
    f = float(np.sqrt(overlap))
    df_dbused = TARGET_BLOCH / (4.0 * max(f, 1e-8))
    return f, jac.T @ df_dbused


class Rk4Backend:
    """Exact master-equation integration on a fixed evaluation grid.

    Controls are sampled at ``dt``; the integrator refines internally when the
    pulse amplitude requires it.  The initial state is the ground-state
    projector at s(0).
    """

    name = "exact-rk4"

    def __init__(self, bath: BathParams, t_total: float, dt: float = 0.05,
                 substeps: int | None = None):
        self.bath = bath
        self.t_total = float(t_total)
        self.dt = float(dt)
        n = int(round(t_total / dt))
        if abs(n * dt - t_total) > 1e-9:
            raise ValueError(f"dt={dt} does not divide t_total={t_total}")
        self.times = dt * np.arange(n + 1)
        self.substeps = substeps

    def final_bloch_batch(self, s_grids, c_grids) -> np.ndarray:
        s_grids = np.atleast_2d(np.asarray(s_grids, float))
        c_grids = np.atleast_2d(np.asarray(c_grids, float))
        n = s_grids.shape[0]
        rho0 = rho_from_bloch(ground_bloch(s_grids[:, 0]))
        bloch, *_ = evolve_batch(
            rho0, s_grids, c_grids,
            np.full(n, self.bath.coupling), np.full(n, self.bath.cutoff),
            np.full(n, self.bath.temperature), self.dt, substeps=self.substeps,
        )
        return bloch[:, -1, :]

    def final_bloch(self, s_grid, c_grid) -> np.ndarray:
        return self.final_bloch_batch(s_grid[None], c_grid[None])[0]

    def trajectory(self, s_grid, c_grid) -> Trajectory:
        grid = ControlGrid(self.t_total, self.dt, s_grid, c_grid)
        rho0 = rho_from_bloch(ground_bloch(s_grid[0]))
        return evolve(rho0, grid, self.bath, substeps=self.substeps)


class SurrogateBackend:
    """LSTM-surrogate dynamics on the model's native time step."""

    name = "surrogate"

    def __init__(self, model: SurrogateModel, bath: BathParams, t_total: float):
        self.model = model
        self.bath = bath
        self.t_total = float(t_total)
        self.dt = model.dt
        n = int(round(t_total / model.dt))
        if abs(n * model.dt - t_total) > 1e-9:
            raise ValueError(f"model step {model.dt} does not divide t_total={t_total}")
        self.times = model.dt * np.arange(n + 1)
        self._bath_row = np.array([bath.coupling, bath.cutoff, bath.temperature])

    def _sigma0(self, s_grids):
        return ground_bloch(s_grids[:, 0])

    def final_bloch_batch(self, s_grids, c_grids) -> np.ndarray:
        s_grids = np.atleast_2d(np.asarray(s_grids, float))
        c_grids = np.atleast_2d(np.asarray(c_grids, float))
        bath = np.broadcast_to(self._bath_row, (s_grids.shape[0], 3))
        preds = self.model.rollout(self._sigma0(s_grids), s_grids, c_grids, bath)
        return preds[:, -1, :]

    def final_bloch(self, s_grid, c_grid) -> np.ndarray:
        return self.final_bloch_batch(s_grid[None], c_grid[None])[0]

    def final_bloch_with_backward(self, s_grid, c_grid):
        """Returns (final bloch, closure mapping dLoss/dbloch -> grid grads)."""
        s2, c2 = s_grid[None], c_grid[None]
        bath = self._bath_row[None]
        preds, cache = self.model.rollout(self._sigma0(s2), s2, c2, bath, cache=True)
        n = preds.shape[1]

        def backward(dbloch_final):
            dpreds = np.zeros((1, n, 3))
            dpreds[0, -1] = dbloch_final
            _, _, ds_grid, dc_grid = self.model.rollout_backward(
                cache, dpreds, param_grads=False)
            return ds_grid[0], dc_grid[0]

        return preds[0, -1], backward

    def trajectory(self, s_grid, c_grid) -> Trajectory:
        preds = self.model.rollout(ground_bloch(s_grid[0]), s_grid, c_grid, self._bath_row)
        bloch = np.vstack([ground_bloch(s_grid[0])[None], preds])
        fid = fidelity_from_bloch(bloch, s_grid)
        zeros = np.zeros(len(s_grid))
        return Trajectory(self.times.copy(), bloch, fid, zeros, zeros)


# ---------------------------------------------------------------------------
# Loss and gradients over Fourier coefficients.


@dataclass(frozen=True)
class ControlLossReport:
    loss: float
    fidelity: float
    dr_max: float
    lam: float
    backend: str


def _fixed_signal(other, times, t_total):
    """Evaluate the non-optimized control on the grid."""
    if other is None:
        return np.zeros_like(times)
    if isinstance(other, FourierControl):
        if other.kind == TRAJECTORY:
            return eval_trajectory(other, times)
        return eval_pulse(other, times)
    if isinstance(other, str):
        return named_trajectory(other, times, t_total)
    if callable(other):
        return np.asarray(other(times), float)
    raise TypeError(f"unsupported fixed control {other!r}")


def _control_grids(fc: FourierControl, other, times, t_total):
    """Returns (s, c, dr_signal) on the grid for the candidate control.

    The amplitude penalty uses the *unclamped* trajectory so that the
    optimizer is pushed away from the clamp rather than blinded by it.
    """
    if fc.kind == TRAJECTORY:
        raw = eval_trajectory_raw(fc, times)
        s = np.clip(raw, 0.0, 1.0)
        c = _fixed_signal(other, times, t_total)
        return s, c, raw
    s = _fixed_signal(other if other is not None else "linear", times, t_total)
    c = eval_pulse(fc, times)
    return s, c, c


def control_loss(fc: FourierControl, backend, lam: float, other=None) -> ControlLossReport:
    """Evaluate 1 - F + lam * dr_max for a candidate control."""
    s, c, dr = _control_grids(fc, other, backend.times, backend.t_total)
    f = final_fidelity_from_bloch(backend.final_bloch(s, c))
    dr_max = float(np.max(np.abs(dr)))
    return ControlLossReport(1.0 - f + lam * dr_max, f, dr_max, lam, backend.name)


def loss_gradient(fc: FourierControl, backend, lam: float, other=None,
                  method: str = "auto", fd_step: float = 1e-4,
                  fd_batched: bool = True) -> np.ndarray:
    """Gradient of the control loss w.r.t. the Fourier coefficients.

    method "bptt" differentiates through the surrogate rollout (surrogate
    backend only); "fd" uses central finite differences and works with any
    backend; "auto" picks bptt when available.
    """
    if method == "auto":
        method = "bptt" if hasattr(backend, "final_bloch_with_backward") else "fd"
    if method == "bptt":
        return _gradient_bptt(fc, backend, lam, other)
    if method == "fd":
        return _gradient_fd(fc, backend, lam, other, fd_step, fd_batched)
    raise ValueError(f"unknown gradient method {method!r}")


def _penalty_subgradient(fc, dr, basis, lam):
    j = int(np.argmax(np.abs(dr)))
    return lam * np.sign(dr[j]) * basis[j]


def _gradient_bptt(fc, backend, lam, other):
    times = backend.times
    s, c, dr = _control_grids(fc, other, times, backend.t_total)
    bloch, backward = backend.final_bloch_with_backward(s, c)
    _, df_db = _fidelity_and_grad(bloch)
    ds_grid, dc_grid = backward(-df_db)  # gradient of (1 - F)
    basis = fc.basis(times)
    if fc.kind == TRAJECTORY:
        unclamped = (dr > 0.0) & (dr < 1.0)
        grad = (ds_grid * unclamped) @ basis
    else:
        grad = dc_grid @ basis
    grad += _penalty_subgradient(fc, dr, basis, lam)
    if not np.all(np.isfinite(grad)):
        raise OptimizationDivergedError("non-finite surrogate gradient")
    return grad


def _gradient_fd(fc, backend, lam, other, step, batched):
    times = backend.times
    k = fc.n_coeff
    coeff_sets = np.repeat(fc.coefficients[None], 2 * k, axis=0)
    for j in range(k):
        coeff_sets[2 * j, j] += step
        coeff_sets[2 * j + 1, j] -= step

    losses = np.empty(2 * k)
    if batched and hasattr(backend, "final_bloch_batch"):
        s_all = np.empty((2 * k, times.size))
        c_all = np.empty((2 * k, times.size))
        dr_all = np.empty((2 * k, times.size))
        for j in range(2 * k):
            cand = fc.with_coefficients(coeff_sets[j])
            s_all[j], c_all[j], dr_all[j] = _control_grids(cand, other, times, backend.t_total)
        finals = backend.final_bloch_batch(s_all, c_all)
        for j in range(2 * k):
            f = final_fidelity_from_bloch(finals[j])
            losses[j] = 1.0 - f + lam * float(np.max(np.abs(dr_all[j])))
    else:
        for j in range(2 * k):
            cand = fc.with_coefficients(coeff_sets[j])
            losses[j] = control_loss(cand, backend, lam, other).loss
    grad = (losses[0::2] - losses[1::2]) / (2.0 * step)
    if not np.all(np.isfinite(grad)):
        raise OptimizationDivergedError("non-finite finite-difference gradient")
    return grad


# ---------------------------------------------------------------------------
# Optimization workflows.


@dataclass
class OptimizerSettings:
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_max: int = 200
    lam: float = 1e-3
    n_min: int = 1
    n_coeff: int = 8
    gradient: str = "auto"
    fd_step: float = 1e-4
    fd_batched: bool = True


@dataclass
class OptimizationResult:
    control: FourierControl
    report: ControlLossReport
    history: list = field(default_factory=list)

    @property
    def final_fidelity(self) -> float:
        return self.report.fidelity


def optimize_control(fc0: FourierControl, backend, settings: OptimizerSettings,
                     other=None) -> OptimizationResult:
    """Run Adam for k_max iterations; returns the best-loss iterate."""
    params = fc0.coefficients.copy()
    state = AdamState.zeros(params.size, alpha=settings.alpha, beta1=settings.beta1,
                            beta2=settings.beta2, eps=settings.eps)
    best_params = params.copy()
    report0 = control_loss(fc0, backend, settings.lam, other)
    best_report = report0
    history = [{"iteration": 0, "loss": report0.loss, "fidelity": report0.fidelity,
                "dr_max": report0.dr_max}]
    for it in range(settings.k_max):
        fc = fc0.with_coefficients(params)
        grad = loss_gradient(fc, backend, settings.lam, other,
                             method=settings.gradient, fd_step=settings.fd_step,
                             fd_batched=settings.fd_batched)
        params, state = adam_step(params, grad, state)
        fc = fc0.with_coefficients(params)
        report = control_loss(fc, backend, settings.lam, other)
        if not np.isfinite(report.loss):
            raise OptimizationDivergedError(f"loss diverged at iteration {it + 1}")
        history.append({"iteration": it + 1, "loss": report.loss,
                        "fidelity": report.fidelity, "dr_max": report.dr_max})
        if report.loss < best_report.loss:
            best_report = report
            best_params = params.copy()
    return OptimizationResult(fc0.with_coefficients(best_params), best_report, history)


def optimize_trajectory(backend, settings: OptimizerSettings, pulse=None) -> OptimizationResult:
    """Step one: optimize s(t) from the linear baseline (all coefficients 0)."""
    fc0 = FourierControl(TRAJECTORY, np.zeros(settings.n_coeff), backend.t_total,
                         n_min=settings.n_min)
    return optimize_control(fc0, backend, settings, other=pulse)


def default_ideal_pulse():
    """Ideal sine pulse c(t) = I sin(2 pi t), third J0 zero, half period 0.5."""
    intensity = ideal_sine_intensity(3, 0.5)
    return lambda t: sine_pulse(t, intensity, 0.5)


def optimize_pulse(backend, settings: OptimizerSettings, trajectory="linear",
                   initial_pulse=None) -> OptimizationResult:
    """Step two: optimize the zero-area pulse c(t) with s(t) held fixed.

    Starts from the Fourier projection of the ideal sine pulse (closed-system
    optimum) unless another initial pulse is supplied.
    """
    pulse_fn = initial_pulse if initial_pulse is not None else default_ideal_pulse()
    fc0 = fit_pulse_coefficients(pulse_fn, backend.t_total, n_min=settings.n_min,
                                 n_coeff=settings.n_coeff, dt=backend.dt)
    return optimize_control(fc0, backend, settings, other=trajectory)


# ---------------------------------------------------------------------------
# Baselines and parameter scans.


def exact_final_fidelity(s_fn, c_fn, bath: BathParams, t_total: float,
                         dt: float = 0.005) -> float:
    """Ground-truth final fidelity for arbitrary control callables."""
    grid = ControlGrid.from_callables(s_fn, c_fn, t_total, dt)
    rho0 = rho_from_bloch(ground_bloch(grid.s_values[0]))
    return evolve(rho0, grid, bath).final_fidelity


def baseline_fidelity(which: str, bath: BathParams, t_total: float,
                      dt: float = 0.005) -> float:
    """F_lin (linear s, no pulse) or F_ideal (linear s, ideal sine pulse)."""
    s_fn = lambda t: named_trajectory("linear", t, t_total)
    if which == TRAJECTORY:
        return exact_final_fidelity(s_fn, lambda t: np.zeros_like(t), bath, t_total, dt)
    if which == PULSE:
        return exact_final_fidelity(s_fn, default_ideal_pulse(), bath, t_total, dt)
    raise ValueError(f"unknown baseline {which!r}")


def reevaluate_exact(result: OptimizationResult, bath: BathParams, t_total: float,
                     other=None, dt: float = 0.005) -> float:
    """Re-simulate an optimized control with the exact RK4 solver."""
    fine = Rk4Backend(bath, t_total, dt=dt)
    s, c, _ = _control_grids(result.control, other, fine.times, t_total)
    return final_fidelity_from_bloch(fine.final_bloch(s, c))


def fidelity_improvement_scan(which: str, param: str, values, base_bath: BathParams,
                              backend_factory, settings: OptimizerSettings,
                              t_total: float = 5.0) -> list[dict]:
    """F_im rows over one bath parameter, the others held fixed.

    which "trajectory": F_im = F_opt - F_lin; which "pulse": F_im =
    F_opt - F_ideal.  Every row re-evaluates the optimized control with exact
    RK4 alongside the backend's own fidelity.
    """
    field_name = {"coupling": "coupling", "cutoff": "cutoff",
                  "temperature": "temperature"}[param]
    rows = []
    for value in values:
        bath = replace(base_bath, **{field_name: float(value)})
        backend = backend_factory(bath)
        if which == TRAJECTORY:
            result = optimize_trajectory(backend, settings)
            other = None
        elif which == PULSE:
            result = optimize_pulse(backend, settings)
            other = "linear"
        else:
            raise ValueError(f"unknown scan target {which!r}")
        f_base = baseline_fidelity(which, bath, t_total)
        f_opt_exact = reevaluate_exact(result, bath, t_total, other=other)
        rows.append({
            "param": param, "value": float(value),
            "baseline_fidelity": f_base,
            "optimized_fidelity_backend": result.report.fidelity,
            "optimized_fidelity_rk4": f_opt_exact,
            "improvement": f_opt_exact - f_base,
            "dr_max": result.report.dr_max,
            "backend": backend.name,
        })
    return rows
