"""Two-level system primitives: Pauli algebra, Hamiltonians, states, fidelity.

Convention: basis order (|0>, |1>) with sigma_z = diag(-1, +1), so |0> is
literally the lowest-eigenvalue state of sigma_z and the lowering operator
L = sigma_minus = |0><1| maps |1> -> |0>.  All quantities are dimensionless
(hbar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[-1.0, 0.0], [0.0, 1.0]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)
LOWERING = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)  # |0><1|


class InvalidDensityMatrixError(ValueError):
    """Raised when a density matrix violates trace or Hermiticity tolerances."""


@dataclass(frozen=True)
class BathParams:
    """Lorentz-Drude bath: coupling strength, cutoff frequency, temperature.

    ``cutoff`` is the characteristic frequency; 1/cutoff sets the memory time.
    """

    coupling: float
    cutoff: float
    temperature: float

    def __post_init__(self):
        if not (self.coupling >= 0.0):
            raise ValueError(f"coupling must be >= 0, got {self.coupling}")
        if not (self.cutoff > 0.0):
            raise ValueError(f"cutoff must be > 0, got {self.cutoff}")
        if not (self.temperature >= 0.0):
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


def bare_hamiltonian(s):
    """Interpolating Hamiltonian (1-s) sigma_z + s sigma_x (no control)."""
    s = np.asarray(s, dtype=float)
    return (1.0 - s)[..., None, None] * SIGMA_Z + s[..., None, None] * SIGMA_X


def build_hamiltonian(s, c):
    """Controlled Hamiltonian (1+c) [(1-s) sigma_z + s sigma_x].

    Broadcasts over leading axes of ``s`` and ``c``; c = 0 recovers the bare
    interpolating Hamiltonian.
    """
    c = np.asarray(c, dtype=float)
    return (1.0 + c)[..., None, None] * bare_hamiltonian(s)


def energy_gap(s):
    """Spectral gap 2 sqrt((1-s)^2 + s^2) of the bare Hamiltonian."""
    return 2.0 * np.hypot(1.0 - np.asarray(s, float), s)


def instantaneous_ground_state(s: float) -> np.ndarray:
    """Normalized ground state of (1-s) sigma_z + s sigma_x.

    The eigenvalue is -sqrt((1-s)^2 + s^2).  The first amplitude is fixed
    real nonnegative; global phase carries no physical meaning.
    """
    a = 1.0 - s
    e = np.hypot(a, s)
    # (a + e, -s) is the -e eigenvector; a + e > 0 for every real s except
    # the unreachable a = s = 0.
    v = np.array([a + e, -s], dtype=complex)
    return v / np.linalg.norm(v)


def ground_bloch(s):
    """Bloch vector of the instantaneous ground-state projector.

    Equals -(s, 0, 1-s)/sqrt((1-s)^2 + s^2); broadcasts over ``s``.
    """
    s = np.asarray(s, dtype=float)
    a = 1.0 - s
    e = np.hypot(a, s)
    out = np.stack([-s / e, np.zeros_like(s), -a / e], axis=-1)
    return out


def fidelity(rho: np.ndarray, ground: np.ndarray, trace_tol: float = 1e-6) -> float:
    """Adiabatic fidelity sqrt(<E0| rho |E0>), clipped at zero.

    Raises InvalidDensityMatrixError if Tr(rho) deviates from 1 beyond
    ``trace_tol``.  Invariant under the global phase of ``ground``.
    """
    tr = float(np.real(np.trace(rho)))
    if abs(tr - 1.0) > trace_tol:
        raise InvalidDensityMatrixError(f"trace deviates from 1 by {abs(tr - 1.0):.3e}")
    val = float(np.real(np.conj(ground) @ rho @ ground))
    return float(np.sqrt(max(0.0, val)))


def fidelity_from_bloch(bloch, s):
    """Fidelity of a Bloch-vector state against the ground state at ``s``.

    sqrt(max(0, (1 + b.n)/2)) with n the ground-state Bloch vector;
    broadcasts over leading axes.
    """
    b = np.asarray(bloch, dtype=float)
    n = ground_bloch(s)
    overlap = 0.5 * (1.0 + np.sum(b * n, axis=-1))
    return np.sqrt(np.clip(overlap, 0.0, None))


def bloch_from_rho(rho):
    """Pauli expectation values (x, y, z) of ``rho``; broadcasts over (...,2,2)."""
    rho = np.asarray(rho)
    x = np.real(rho[..., 0, 1] + rho[..., 1, 0])
    y = np.real(1j * (rho[..., 0, 1] - rho[..., 1, 0]))
    z = np.real(rho[..., 1, 1] - rho[..., 0, 0])
    return np.stack([x, y, z], axis=-1)


def rho_from_bloch(bloch):
    """Density matrix (I + x sigma_x + y sigma_y + z sigma_z) / 2."""
    b = np.asarray(bloch, dtype=float)
    x, y, z = b[..., 0], b[..., 1], b[..., 2]
    rho = np.empty(b.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 0.5 * (1.0 - z)
    rho[..., 1, 1] = 0.5 * (1.0 + z)
    rho[..., 0, 1] = 0.5 * (x - 1j * y)
    rho[..., 1, 0] = 0.5 * (x + 1j * y)
    return rho


def is_hermitian(mat: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.linalg.norm(mat - mat.conj().swapaxes(-1, -2)) <= tol)
