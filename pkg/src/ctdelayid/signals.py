"""Benchmark excitation, sampling schedules, and synthetic dataset generation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .engine import Drive, simulate_output
from .models import CtModel, ModelError, SampledDataset

__all__ = [
    "SignalError",
    "ExcitationSpec",
    "SamplingSpec",
    "PrbsSignal",
    "prbs",
    "sample_schedule",
    "make_dataset",
]


class SignalError(ValueError):
    """Invalid excitation or sampling request."""


# Feedback taps producing maximum-length sequences, one set per register length.
_MAX_LENGTH_TAPS = {
    2: (2, 1), 3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6),
    8: (8, 6, 5, 4), 9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 6, 4, 1),
    13: (13, 4, 3, 1), 14: (14, 5, 3, 1), 15: (15, 14), 16: (16, 15, 13, 4),
    17: (17, 14), 18: (18, 11), 19: (19, 6, 2, 1), 20: (20, 17), 21: (21, 19),
    22: (22, 21), 23: (23, 18), 24: (24, 23, 22, 17), 25: (25, 22),
    26: (26, 6, 2, 1), 27: (27, 5, 2, 1), 28: (28, 25), 29: (29, 27),
    30: (30, 6, 4, 1), 31: (31, 28), 32: (32, 22, 2, 1),
}


@dataclass(frozen=True)
class ExcitationSpec:
    """Maximum-length binary sequence: register length, chip period, level."""

    stages: int
    clock_period: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not (2 <= self.stages <= 32):
            raise SignalError(f"stages must be in [2, 32], got {self.stages}")
        if self.clock_period <= 0:
            raise SignalError("clock_period must be positive")
        if self.stages not in _MAX_LENGTH_TAPS:
            raise SignalError(f"no maximum-length tap set for {self.stages} stages")


@dataclass(frozen=True)
class SamplingSpec:
    """Sampling schedule: regular period h, or i.i.d. uniform intervals."""

    kind: str  # 'regular' | 'irregular_uniform'
    n_samples: int
    h: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise SignalError("n_samples must be at least 2")
        if self.kind == "regular":
            if self.h is None or self.h <= 0:
                raise SignalError("regular sampling needs h > 0")
        elif self.kind == "irregular_uniform":
            if self.lo is None or self.hi is None or not (0 < self.lo < self.hi):
                raise SignalError("irregular sampling needs 0 < lo < hi")
        else:
            raise SignalError(f"unknown sampling kind {self.kind!r}")


@dataclass(frozen=True)
class PrbsSignal:
    """One period of a maximum-length +-amplitude sequence with its clock grid."""

    levels: np.ndarray  # one full period of chip levels
    clock_period: float
    amplitude: float

    def __post_init__(self):
        lv = np.ascontiguousarray(self.levels, dtype=float)
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)

    @property
    def period_ticks(self) -> int:
        return len(self.levels)

    @property
    def edges(self) -> np.ndarray:
        """Chip boundary instants of the first period, 0, T_clk, 2 T_clk, ..."""
        return np.arange(self.period_ticks + 1) * self.clock_period

    def level_at(self, x) -> np.ndarray:
        """Chip level at time x >= 0, extending the sequence periodically."""
        x = np.asarray(x, dtype=float)
        # nudge guards against x/T landing one ulp below an exact chip boundary
        k = np.floor(x / self.clock_period + 1e-9).astype(np.int64) % self.period_ticks
        return self.levels[k]

    def drive(self, t_end: float) -> Drive:
        """Zero-order-hold drive covering [0, t_end] (periodic extension)."""
        ticks = int(math.floor(t_end / self.clock_period)) + 1
        times = np.arange(ticks) * self.clock_period
        reps = int(math.ceil(ticks / self.period_ticks))
        vals = np.tile(self.levels, reps)[:ticks]
        return Drive("zoh", times, vals)


def prbs(spec: ExcitationSpec) -> PrbsSignal:
    """Generate one full period (2^stages - 1 chips) of the maximum-length PRBS.

    Fibonacci shift register with an all-ones initial state; output levels are
    +-amplitude (bit 1 maps to +amplitude).
    """
    taps = _MAX_LENGTH_TAPS[spec.stages]
    n = spec.stages
    period = (1 << n) - 1
    mask = period
    state = mask  # all ones
    bits = np.empty(period, dtype=np.int64)
    for i in range(period):
        bits[i] = state & 1
        fb = 0
        for tap in taps:
            fb ^= (state >> (tap - 1)) & 1
        state = ((state << 1) | fb) & mask
    levels = spec.amplitude * (2.0 * bits - 1.0)
    return PrbsSignal(levels, spec.clock_period, spec.amplitude)


def sample_schedule(spec: SamplingSpec) -> np.ndarray:
    """Timestamps: regular t_k = (k-1) h, or t_1 = 0 with h_k ~ U[lo, hi]."""
    if spec.kind == "regular":
        return np.arange(spec.n_samples) * spec.h
    rng = np.random.default_rng(spec.seed)
    gaps = rng.uniform(spec.lo, spec.hi, size=spec.n_samples - 1)
    return np.concatenate(([0.0], np.cumsum(gaps)))


def make_dataset(
    model: CtModel,
    exc: ExcitationSpec,
    samp: SamplingSpec,
    snr_db: Optional[float],
    noise_seed: int = 0,
) -> Tuple[SampledDataset, np.ndarray]:
    """Simulate the model against a PRBS input and add output noise at the
    requested SNR.  Returns the dataset and the stored noise-free output.

    Noise variance is P_x / 10^(snr/10) with P_x the mean square of the
    realized noise-free output after mean removal.  ``snr_db=None`` (or +inf)
    disables noise.
    """
    if not model.is_stable():
        raise ModelError("dataset generation requires a stable model")
    t = sample_schedule(samp)
    sig = prbs(exc)
    drive = sig.drive(float(t[-1]))
    x = simulate_output(model, t, drive)
    u = sig.level_at(t)
    if snr_db is None or math.isinf(snr_db):
        e = np.zeros_like(x)
    else:
        px = float(np.mean((x - x.mean()) ** 2))
        sigma = math.sqrt(px * 10.0 ** (-snr_db / 10.0))
        e = np.random.default_rng(noise_seed).standard_normal(len(t)) * sigma
    y = x + e
    n_edges = int(math.floor(t[-1] / exc.clock_period)) + 2
    edges = np.arange(n_edges) * exc.clock_period
    data = SampledDataset(t, u, y, intersample="zoh", u_clock_edges=edges)
    return data, x
