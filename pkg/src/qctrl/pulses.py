"""Control-signal constructions.

Named driving trajectories, ideal zero-area pulses and their closed-form
intensity conditions, Fourier-basis parameterizations used by the optimizer,
and the Random Fourier Synthesis sampler that generates training signals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .solver import ControlGrid

TRAJECTORY = "trajectory"
PULSE = "pulse"

#: Fundamental frequency for trajectories: sin((k+1) pi t/T) vanishes at both
#: endpoints, so s(0)=0 and s(T)=1 hold for any coefficients.
OMEGA_TRAJECTORY = math.pi
#: Fundamental frequency for pulses: every term completes k+1 full periods
#: over [0, T], so the pulse area is structurally zero.
OMEGA_PULSE = 2.0 * math.pi


@dataclass(frozen=True)
class FourierControl:
    """Sine-series control with coefficients indexed k = n_min .. n_min+len-1.

    kind "trajectory": s(t) = t/T + sum_k I_k sin((k+1) w t / T), clamped to
    [0, 1] at evaluation.  kind "pulse": c(t) = sum_k I_k sin((k+1) w t / T),
    unclamped.
    """

    kind: str
    coefficients: np.ndarray
    t_total: float
    n_min: int = 1
    fundamental: float | None = None

    def __post_init__(self):
        if self.kind not in (TRAJECTORY, PULSE):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        coeffs = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)
        if self.fundamental is None:
            w = OMEGA_TRAJECTORY if self.kind == TRAJECTORY else OMEGA_PULSE
            object.__setattr__(self, "fundamental", w)

    @property
    def n_coeff(self) -> int:
        return self.coefficients.size

    def basis(self, t) -> np.ndarray:
        """Basis matrix sin((k+1) w t / T), shape t.shape + (n_coeff,)."""
        t = np.asarray(t, dtype=float)
        k = np.arange(self.n_min, self.n_min + self.n_coeff)
        return np.sin((k + 1) * self.fundamental * t[..., None] / self.t_total)

    def with_coefficients(self, coefficients) -> "FourierControl":
        return replace(self, coefficients=np.asarray(coefficients, float))


def eval_trajectory_raw(fc: FourierControl, t):
    """Unclamped trajectory value t/T + sum of sine terms."""
    if fc.kind != TRAJECTORY:
        raise ValueError(f"expected kind 'trajectory', got {fc.kind!r}")
    t = np.asarray(t, dtype=float)
    return t / fc.t_total + fc.basis(t) @ fc.coefficients


def eval_trajectory(fc: FourierControl, t):
    """Trajectory value clamped into [0, 1]."""
    return np.clip(eval_trajectory_raw(fc, t), 0.0, 1.0)


def eval_pulse(fc: FourierControl, t):
    """Pulse value sum_k I_k sin((k+1) w t / T)."""
    if fc.kind != PULSE:
        raise ValueError(f"expected kind 'pulse', got {fc.kind!r}")
    return fc.basis(np.asarray(t, dtype=float)) @ fc.coefficients


def named_trajectory(name: str, t, t_total: float):
    """Reference driving trajectories: 'linear' or 'sine'."""
    t = np.asarray(t, dtype=float)
    if name == "linear":
        return t / t_total
    if name == "sine":
        return 0.5 * np.sin(np.pi * t / t_total - 0.5 * np.pi) + 0.5
    raise ValueError(f"unknown trajectory {name!r}")


def sine_pulse(t, intensity: float, tau: float):
    """Sine pulse I sin(pi t / tau) with half period tau."""
    return intensity * np.sin(np.pi * np.asarray(t, float) / tau)


def rect_pulse(t, intensity: float, tau: float):
    """Zero-area rectangular pulse alternating +/-I every half period tau."""
    half = np.floor(np.asarray(t, float) / tau).astype(int)
    return intensity * np.where(half % 2 == 0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# Bessel J0 and the ideal-pulse intensity conditions.

_J0_SERIES_CUTOFF = 8.0


def _j0_series(x: float) -> float:
    # Power series sum_m (-1)^m (x/2)^(2m) / (m!)^2; converges quickly and
    # without damaging cancellation for |x| <= 8.
    q = 0.25 * x * x
    term = 1.0
    total = 1.0
    m = 0
    while abs(term) > 1e-18:
        m += 1
        term *= -q / (m * m)
        total += term
    return total


def _j0_integral(x: float) -> float:
    # J0(x) = (1/pi) int_0^pi cos(x sin u) du.  The integrand extends to a
    # periodic entire function, so the midpoint rule converges geometrically;
    # node count grows linearly with |x|.
    n = 64 + 2 * int(math.ceil(abs(x)))
    u = (np.arange(n) + 0.5) * (math.pi / n)
    return float(np.mean(np.cos(x * np.sin(u))))


def bessel_j0(x: float) -> float:
    """Zero-order Bessel function of the first kind, |x| <= 100, ~1e-12 accurate."""
    if abs(x) > 100.0:
        raise ValueError(f"|x| <= 100 supported, got {x}")
    if abs(x) < _J0_SERIES_CUTOFF:
        return _j0_series(x)
    return _j0_integral(x)


def bessel_j0_zero(k: int) -> float:
    """k-th positive root of J0, by bracketed bisection to 1e-12."""
    if k < 1:
        raise ValueError("zero index must be >= 1")
    # McMahon expansion gives a starting guess well within half a period.
    beta = (k - 0.25) * math.pi
    guess = beta + 1.0 / (8.0 * beta)
    lo, hi = guess - 1.0, guess + 1.0
    flo, fhi = bessel_j0(lo), bessel_j0(hi)
    if flo * fhi > 0.0:
        raise RuntimeError(f"failed to bracket J0 zero {k}")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        fmid = bessel_j0(mid)
        if flo * fmid <= 0.0:
            hi, fhi = mid, fmid
        else:
            lo, flo = mid, fmid
    return 0.5 * (lo + hi)


def ideal_sine_intensity(zero_index: int, tau: float) -> float:
    """Intensity satisfying J0(I tau / pi) = 0 at the given positive root."""
    if tau <= 0.0:
        raise ValueError("tau must be > 0")
    return math.pi * bessel_j0_zero(zero_index) / tau


def ideal_rect_intensity(k: int, tau: float) -> float:
    """Intensity satisfying the rectangular-pulse condition I tau = 2 k pi."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if tau <= 0.0:
        raise ValueError("tau must be > 0")
    return 2.0 * k * math.pi / tau


# ---------------------------------------------------------------------------
# Random Fourier Synthesis.


@dataclass(frozen=True)
class RFSConfig:
    """Sampler settings for random sums of sinusoids.

    Draws K in n_components, then per component an amplitude, frequency and
    phase uniformly from the given ranges.  The s-signal is affinely rescaled
    onto [0, 1]; the c-signal is peak-normalized to a random amplitude drawn
    uniformly from [0, c_max], so weak and strong pulses are both covered.
    """

    t_total: float = 2.5
    dt: float = 0.005
    # include 1- and 2-component draws: near-pure sinusoids at full amplitude
    # are exactly the shape of ideal control pulses and must be represented
    n_components: tuple[int, int] = (1, 8)
    amplitude: tuple[float, float] = (0.2, 1.0)
    # the low end reaches well below 1/t_total so draws include quasi-constant
    # components: sustained plateaus at large |c| occur in real control pulses
    # (e.g. rectangular quenches) and must be covered by the training data
    frequency: tuple[float, float] = (0.05, 2.0)
    phase: tuple[float, float] = (0.0, 2.0 * math.pi)
    c_max: float = 60.0
    seed: int | None = None

    def __post_init__(self):
        if self.n_components[0] < 1 or self.n_components[1] < self.n_components[0]:
            raise ValueError("n_components range must satisfy 1 <= lo <= hi")
        for lo, hi in (self.amplitude, self.frequency, self.phase):
            if hi <= lo:
                raise ValueError("ranges must be non-degenerate")
        if self.c_max < 0.0:
            raise ValueError("c_max must be >= 0")


def _rfs_signal(cfg: RFSConfig, rng: np.random.Generator, times: np.ndarray) -> np.ndarray:
    k = int(rng.integers(cfg.n_components[0], cfg.n_components[1] + 1))
    amp = rng.uniform(*cfg.amplitude, size=k)
    freq = rng.uniform(*cfg.frequency, size=k)
    phase = rng.uniform(*cfg.phase, size=k)
    return np.sin(2.0 * np.pi * freq * times[:, None] + phase) @ amp


def rfs_sample(cfg: RFSConfig, rng: np.random.Generator | None = None) -> ControlGrid:
    """Draw one (s, c) control pair on the configured grid.

    Deterministic given the generator state (or cfg.seed when no generator is
    passed): the draw order is fixed as s-signal, c-signal, c-amplitude.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.t_total / cfg.dt))
    times = cfg.dt * np.arange(n + 1)

    raw_s = _rfs_signal(cfg, rng, times)
    lo, hi = raw_s.min(), raw_s.max()
    if hi - lo < 1e-12:
        s = times / cfg.t_total  # degenerate draw: fall back to the linear ramp
    else:
        s = (raw_s - lo) / (hi - lo)

    raw_c = _rfs_signal(cfg, rng, times)
    target = rng.uniform(0.0, cfg.c_max)
    peak = np.max(np.abs(raw_c))
    c = np.zeros_like(raw_c) if peak < 1e-12 else raw_c * (target / peak)

    return ControlGrid(cfg.t_total, cfg.dt, s, c)


def fit_pulse_coefficients(values_fn, t_total: float, n_min: int = 1, n_coeff: int = 8,
                           dt: float = 0.005) -> FourierControl:
    """Least-squares projection of an arbitrary pulse onto the sine basis."""
    n = int(round(t_total / dt))
    t = dt * np.arange(n + 1)
    fc = FourierControl(PULSE, np.zeros(n_coeff), t_total, n_min=n_min)
    basis = fc.basis(t)
    coeffs, *_ = np.linalg.lstsq(basis, np.asarray(values_fn(t), float), rcond=None)
    return fc.with_coefficients(coeffs)
