"""Non-Markovian master-equation integrator (classical RK4).

Integrates the coupled equations for the reduced density matrix rho and the
auxiliary bath operators Obar_z, Obar_w of a driven two-level system:

    drho/dt = -i[H, rho] + ([L, rho Oz^dag] - [L^dag, Oz rho])
                         + ([L^dag, rho Ow^dag] - [L, Ow rho])

which in the Markov limit reduces to Lindblad damping (channel L) plus
thermal excitation (channel L^dag).  The right-hand side is a sum of
commutators, so the trace is conserved exactly; Hermiticity of rho is *not*
enforced (it is tracked as a diagnostic, with an optional symmetrize mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .twolevel import (
    LOWERING,
    BathParams,
    bloch_from_rho,
    build_hamiltonian,
    fidelity_from_bloch,
)

_L = LOWERING
_LDAG = LOWERING.conj().T

#: Target bound on (max eigenfrequency) * (internal sub-step).  Keeps the RK4
#: amplitude error negligible even for pulse amplitudes |c| ~ 60.
PHASE_PER_SUBSTEP = 0.1

DEFAULT_DT = 0.005


class TraceDivergenceError(RuntimeError):
    """Integration left the physical manifold: |Tr rho - 1| exceeded 1e-4."""

    def __init__(self, message, sample_indices=()):
        super().__init__(message)
        self.sample_indices = tuple(sample_indices)


@dataclass
class ControlGrid:
    """Driving s(t) and control c(t) sampled on a uniform time grid."""

    t_total: float
    dt: float
    s_values: np.ndarray
    c_values: np.ndarray

    def __post_init__(self):
        self.s_values = np.asarray(self.s_values, dtype=float)
        self.c_values = np.asarray(self.c_values, dtype=float)
        if self.s_values.shape != self.c_values.shape or self.s_values.ndim != 1:
            raise ValueError("s_values and c_values must be equal-length 1-D arrays")
        n = self.s_values.size - 1
        if n < 1:
            raise ValueError("grid needs at least two samples")
        if abs(self.dt * n - self.t_total) > 1e-12 * max(1.0, self.t_total):
            raise ValueError(f"dt * n_steps = {self.dt * n} != t_total = {self.t_total}")

    @property
    def n_steps(self) -> int:
        return self.s_values.size - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.s_values.size)

    @classmethod
    def from_callables(cls, s_fn, c_fn, t_total, dt):
        n = int(round(t_total / dt))
        if abs(n * dt - t_total) > 1e-9:
            raise ValueError(f"dt={dt} does not divide t_total={t_total}")
        t = dt * np.arange(n + 1)
        return cls(t_total, dt, np.asarray(s_fn(t), float), np.asarray(c_fn(t), float))

    def subsample(self, stride: int) -> "ControlGrid":
        if self.n_steps % stride != 0:
            raise ValueError("stride must divide n_steps")
        return ControlGrid(
            self.t_total, self.dt * stride, self.s_values[::stride], self.c_values[::stride]
        )


@dataclass
class SolverState:
    """Coupled ODE state: density matrix plus the two auxiliary operators."""

    rho: np.ndarray
    obar_z: np.ndarray
    obar_w: np.ndarray

    @classmethod
    def initial(cls, rho0: np.ndarray) -> "SolverState":
        # Obar_z(0) = Obar_w(0) = 0: both are integrals from 0 to t.
        return cls(np.array(rho0, dtype=complex), np.zeros((2, 2), complex), np.zeros((2, 2), complex))


@dataclass
class Trajectory:
    """Time series of Bloch vectors with fidelity and integrator diagnostics."""

    times: np.ndarray
    bloch: np.ndarray
    fidelity: np.ndarray
    trace_error: np.ndarray
    herm_error: np.ndarray
    grid: ControlGrid | None = field(default=None, repr=False)

    @property
    def final_fidelity(self) -> float:
        return float(self.fidelity[-1])


def _rhs(rho, oz, ow, h, coup, cut, temp):
    """Right-hand side of the coupled master equation; broadcasts over (...,2,2)."""
    ozd = np.conj(np.swapaxes(oz, -1, -2))
    owd = np.conj(np.swapaxes(ow, -1, -2))
    # Channel pairing per the finite-temperature NMQSD convolutionless form:
    # z-noise rides the L channel, thermal w-noise the L^dag channel.  In the
    # Markov limit this reduces to Lindblad damping plus thermal excitation.
    rzd, zr = rho @ ozd, oz @ rho
    rwd, wr = rho @ owd, ow @ rho
    drho = -1j * (h @ rho - rho @ h)
    drho += (_L @ rzd - rzd @ _L) - (_LDAG @ zr - zr @ _LDAG)
    drho += (_LDAG @ rwd - rwd @ _LDAG) - (_L @ wr - wr @ _L)
    m = h + _LDAG @ oz + _L @ ow
    doz = (0.5 * coup * temp * cut - 0.5j * coup * cut**2) * _L - cut * oz
    doz += -1j * (m @ oz - oz @ m)
    dow = (0.5 * coup * temp * cut) * _LDAG - cut * ow
    dow += -1j * (m @ ow - ow @ m)
    return drho, doz, dow


def master_rhs(state: SolverState, s: float, c: float, bath: BathParams) -> SolverState:
    """Time derivative of the solver state at control values (s, c)."""
    h = build_hamiltonian(s, c)
    drho, doz, dow = _rhs(
        state.rho, state.obar_z, state.obar_w, h, bath.coupling, bath.cutoff, bath.temperature
    )
    return SolverState(drho, doz, dow)


def _rk4_kernel(rho, oz, ow, h0, h1, hm, dt, coup, cut, temp):
    k1 = _rhs(rho, oz, ow, h0, coup, cut, temp)
    k2 = _rhs(rho + 0.5 * dt * k1[0], oz + 0.5 * dt * k1[1], ow + 0.5 * dt * k1[2], hm, coup, cut, temp)
    k3 = _rhs(rho + 0.5 * dt * k2[0], oz + 0.5 * dt * k2[1], ow + 0.5 * dt * k2[2], hm, coup, cut, temp)
    k4 = _rhs(rho + dt * k3[0], oz + dt * k3[1], ow + dt * k3[2], h1, coup, cut, temp)
    sixth = dt / 6.0
    return (
        rho + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        oz + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ow + sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    )


def rk4_step(state: SolverState, t_index: int, controls: ControlGrid, bath: BathParams, dt=None):
    """One classical RK4 step from grid index t_index to t_index + 1.

    Control values at the half step are the average of the adjacent samples
    (linear interpolation).  ``dt`` defaults to the grid step; dt = 0 returns
    the input state unchanged.
    """
    if t_index + 1 >= controls.s_values.size:
        raise IndexError("t_index + 1 beyond control grid")
    if dt is None:
        dt = controls.dt
    if dt == 0.0:
        return SolverState(state.rho.copy(), state.obar_z.copy(), state.obar_w.copy())
    s0, s1 = controls.s_values[t_index], controls.s_values[t_index + 1]
    c0, c1 = controls.c_values[t_index], controls.c_values[t_index + 1]
    h0 = build_hamiltonian(s0, c0)
    h1 = build_hamiltonian(s1, c1)
    hm = build_hamiltonian(0.5 * (s0 + s1), 0.5 * (c0 + c1))
    rho, oz, ow = _rk4_kernel(
        state.rho, state.obar_z, state.obar_w, h0, h1, hm, dt,
        bath.coupling, bath.cutoff, bath.temperature,
    )
    return SolverState(rho, oz, ow)


def auto_substeps(dt: float, c_values) -> int:
    """Sub-steps per grid interval keeping 2|1+c|_max * h below PHASE_PER_SUBSTEP.

    The Liouvillian eigenfrequencies are bounded by twice the Hamiltonian norm,
    and |H| <= |1+c| sqrt((1-s)^2+s^2) <= |1+c| for s in [0,1].
    """
    amp = float(np.max(np.abs(1.0 + np.asarray(c_values, float))))
    return max(1, math.ceil(dt * 2.0 * max(1.0, amp) / PHASE_PER_SUBSTEP))


def evolve_batch(
    rho0: np.ndarray,
    s_values: np.ndarray,
    c_values: np.ndarray,
    coupling: np.ndarray,
    cutoff: np.ndarray,
    temperature: np.ndarray,
    dt: float,
    substeps: int | None = None,
    symmetrize: bool = False,
    trace_tol: float = 1e-4,
):
    """Integrate a batch of independent evolutions sharing one time grid.

    rho0: (n, 2, 2); s_values, c_values: (n, n_steps+1); bath arrays: (n,).
    Returns (bloch (n, n_steps+1, 3), trace_error (n, n_steps+1),
    herm_error (n, n_steps+1)).  ``substeps`` subdivides each grid interval
    with linearly interpolated controls; None selects it from the largest
    control amplitude in the batch.
    """
    s_values = np.asarray(s_values, float)
    c_values = np.asarray(c_values, float)
    n, npts = s_values.shape
    if substeps is None:
        substeps = auto_substeps(dt, c_values)
    coup = np.asarray(coupling, float).reshape(n, 1, 1)
    cut = np.asarray(cutoff, float).reshape(n, 1, 1)
    temp = np.asarray(temperature, float).reshape(n, 1, 1)

    rho = np.array(rho0, dtype=complex).reshape(n, 2, 2)
    oz = np.zeros((n, 2, 2), complex)
    ow = np.zeros((n, 2, 2), complex)

    bloch = np.empty((n, npts, 3))
    trace_err = np.empty((n, npts))
    herm_err = np.empty((n, npts))

    def record(j):
        bloch[:, j] = bloch_from_rho(rho)
        trace_err[:, j] = np.abs(np.real(rho[:, 0, 0] + rho[:, 1, 1]) - 1.0)
        herm_err[:, j] = np.linalg.norm(rho - rho.conj().swapaxes(-1, -2), axis=(-2, -1))

    record(0)
    h_sub = dt / substeps
    for j in range(npts - 1):
        s0, s1 = s_values[:, j], s_values[:, j + 1]
        c0, c1 = c_values[:, j], c_values[:, j + 1]
        for m in range(substeps):
            fa = m / substeps
            fb = (m + 1) / substeps
            fm = (m + 0.5) / substeps
            ha = build_hamiltonian(s0 + fa * (s1 - s0), c0 + fa * (c1 - c0))
            hb = build_hamiltonian(s0 + fb * (s1 - s0), c0 + fb * (c1 - c0))
            hm = build_hamiltonian(s0 + fm * (s1 - s0), c0 + fm * (c1 - c0))
            rho, oz, ow = _rk4_kernel(rho, oz, ow, ha, hb, hm, h_sub, coup, cut, temp)
        if symmetrize:
            rho = 0.5 * (rho + rho.conj().swapaxes(-1, -2))
        record(j + 1)
        if np.any(trace_err[:, j + 1] > trace_tol):
            bad = np.nonzero(trace_err[:, j + 1] > trace_tol)[0]
            raise TraceDivergenceError(
                f"|Tr rho - 1| > {trace_tol} at step {j + 1} "
                f"(dt too large for the given bath/pulse magnitudes)",
                sample_indices=bad,
            )
    return bloch, trace_err, herm_err


def evolve(
    initial_rho: np.ndarray,
    controls: ControlGrid,
    bath: BathParams,
    substeps: int | None = None,
    symmetrize: bool = False,
) -> Trajectory:
    """Full trajectory of Bloch vectors and fidelities for one evolution.

    The fidelity at each step is taken against the instantaneous ground state
    at the sampled s(t).  Auxiliary operators start at zero.
    """
    bloch, trace_err, herm_err = evolve_batch(
        initial_rho[None],
        controls.s_values[None],
        controls.c_values[None],
        np.array([bath.coupling]),
        np.array([bath.cutoff]),
        np.array([bath.temperature]),
        controls.dt,
        substeps=substeps,
        symmetrize=symmetrize,
    )
    fid = fidelity_from_bloch(bloch[0], controls.s_values)
    return Trajectory(
        times=controls.times,
        bloch=bloch[0],
        fidelity=fid,
        trace_error=trace_err[0],
        herm_error=herm_err[0],
        grid=controls,
    )


def spectral_density(omega, bath: BathParams):
    """Lorentz-Drude spectrum (coupling/pi) w / (1 + (w/cutoff)^2).

    Diagnostic only: the bath parameters enter the auxiliary-operator
    equations directly.
    """
    w = np.asarray(omega, dtype=float)
    return bath.coupling / np.pi * w / (1.0 + (w / bath.cutoff) ** 2)
