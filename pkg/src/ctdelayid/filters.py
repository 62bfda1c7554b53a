"""Butterworth low-pass banks with linearly spaced cut-off periods, plus the
closed-form cost landscape analytics that justify the bank design."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .models import CtModel, ModelError

__all__ = [
    "FilterBank",
    "butterworth",
    "design_bank",
    "beta_lower_bound",
    "min_filter_count",
    "extrema_locations",
    "convergence_radius",
    "ideal_cost_curve",
    "predicted_basin_minimum",
]


def butterworth(order: int, omega_c: float) -> CtModel:
    """Unit-DC-gain Butterworth low-pass: poles on the circle of radius omega_c."""
    if order < 1:
        raise ModelError("Butterworth order must be >= 1")
    if omega_c <= 0:
        raise ModelError("cut-off frequency must be positive")
    den = np.array([1.0])
    if order % 2:
        den = np.convolve(den, [1.0, omega_c])
    for k in range(order // 2):
        theta = math.pi * (2 * k + 1) / (2 * order)
        den = np.convolve(den, [1.0, 2.0 * omega_c * math.sin(theta), omega_c ** 2])
    return CtModel([den[-1]], den)


@dataclass(frozen=True)
class FilterBank:
    """Ordered low-pass filters with linearly spaced cut-off periods.

    Index 0 has the longest period (lowest cut-off); the last filter sits at
    the system bandwidth.
    """

    filters: Tuple[CtModel, ...]
    cutoffs: np.ndarray
    beta: float
    order: int

    def __post_init__(self):
        c = np.ascontiguousarray(self.cutoffs, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "cutoffs", c)
        object.__setattr__(self, "filters", tuple(self.filters))
        if len(self.filters) != len(self.cutoffs) or len(self.filters) == 0:
            raise ModelError("bank must pair one cut-off per filter")

    @property
    def periods(self) -> np.ndarray:
        return 2.0 * np.pi / self.cutoffs

    @property
    def n_f(self) -> int:
        return len(self.filters)

    def __iter__(self):
        return iter(self.filters)

    def __len__(self):
        return len(self.filters)


def design_bank(
    bw: float,
    beta: float,
    n_f: int,
    order: int = 10,
    theorem_mode: bool = False,
) -> FilterBank:
    """Bank with periods T_k = beta*T_bw - (k-1)(beta-1)T_bw/(n_f-1), k=1..n_f.

    Cut-offs span bw/beta up to bw.  In theorem mode, beta below the proven
    lower bound is rejected.
    """
    if bw <= 0:
        raise ModelError("bandwidth must be positive")
    if n_f < 2:
        raise ModelError("bank needs at least two filters")
    if not (1.0 < beta <= 10.0):
        raise ModelError(f"beta must satisfy 1 < beta <= 10, got {beta}")
    if theorem_mode and beta < beta_lower_bound():
        raise ModelError(
            f"theorem mode requires beta >= {beta_lower_bound():.6f}, got {beta}"
        )
    t_bw = 2.0 * math.pi / bw
    k = np.arange(n_f)
    periods = beta * t_bw - k * (beta - 1.0) * t_bw / (n_f - 1)
    cutoffs = 2.0 * math.pi / periods
    filts = tuple(butterworth(order, wc) for wc in cutoffs)
    return FilterBank(filts, cutoffs, float(beta), int(order))


def beta_lower_bound() -> float:
    """Smallest period ratio for which a descent path is guaranteed to exist."""
    return (5.0 / 4.0 - 1.0 / (5.0 * math.pi ** 2)) / (3.0 / 4.0 - 1.0 / (3.0 * math.pi ** 2))


def _m_ratio(i0: int) -> float:
    num = 4 * i0 - 3 - 4.0 / ((4 * i0 - 3) * math.pi ** 2)
    den = 4 * i0 - 1 - 4.0 / ((4 * i0 - 1) * math.pi ** 2)
    return num / den


def min_filter_count(beta: float, i0: int) -> int:
    """Smallest filter count guaranteeing a descent path out to the i0-th
    extremum of the widest filter."""
    if i0 < 2:
        raise ModelError("i0 must be at least 2")
    if beta < beta_lower_bound():
        raise ModelError(f"beta must be >= {beta_lower_bound():.6f}")
    m = _m_ratio(i0)
    assert m < 1.0, "ratio must be below one for i0 >= 2"
    inv = 1.0 / m
    bound = (inv + beta - 2.0) / (inv - 1.0)
    return int(math.ceil(bound - 1e-12))


def extrema_locations(omega_c: float, i_max: int) -> List[Tuple[float, str]]:
    """Positive extrema of the filtered delay cost: the i-th sits near
    (2i+1)/4 T_c - T_c/((2i+1) pi^2); odd i are maxima, even i minima."""
    if omega_c <= 0 or i_max < 1:
        raise ModelError("need omega_c > 0 and i_max >= 1")
    t_c = 2.0 * math.pi / omega_c
    out = []
    for i in range(1, i_max + 1):
        pos = (2 * i + 1) / 4.0 * t_c - t_c / ((2 * i + 1) * math.pi ** 2)
        out.append((pos, "max" if i % 2 == 1 else "min"))
    return out


def convergence_radius(omega_c: float) -> float:
    """Half-width of the delay-error interval from which descent reaches the
    global minimum: 3 pi/(2 w_c) - 2/(3 pi w_c)."""
    if omega_c <= 0:
        raise ModelError("omega_c must be positive")
    return 3.0 * math.pi / (2.0 * omega_c) - 2.0 / (3.0 * math.pi * omega_c)


def ideal_cost_curve(omega_c: float, noise_term: float, dtau_grid) -> np.ndarray:
    """Brick-wall-filter delay cost 2 w_c/pi - 2 sin(w_c dt)/(pi dt) + C,
    with the dt -> 0 limit handled exactly."""
    dt = np.asarray(dtau_grid, dtype=float)
    out = np.full(dt.shape, 2.0 * omega_c / math.pi + noise_term)
    nz = dt != 0.0
    out[nz] -= 2.0 * np.sin(omega_c * dt[nz]) / (math.pi * dt[nz])
    out[~nz] = noise_term
    return out


def predicted_basin_minimum(omega_c: float, dtau0: float) -> float:
    """Local minimum reached by descent on the ideal filtered cost from dtau0.

    Basin boundaries are the predicted maxima; starting inside the first basin
    returns 0 (the global minimum), otherwise the enclosed local minimum.
    """
    if dtau0 < 0:
        return -predicted_basin_minimum(omega_c, -dtau0)
    t_c = 2.0 * math.pi / omega_c
    i = 1
    prev_max = (3.0 / 4.0 - 1.0 / (3.0 * math.pi ** 2)) * t_c
    if dtau0 <= prev_max:
        return 0.0
    while True:
        i += 1
        if i % 2 == 1:  # maxima occur at odd indices
            nxt = (2 * i + 1) / 4.0 * t_c - t_c / ((2 * i + 1) * math.pi ** 2)
            if dtau0 <= nxt:
                j = i - 1  # enclosed even-index extremum is the minimum
                return (2 * j + 1) / 4.0 * t_c - t_c / ((2 * j + 1) * math.pi ** 2)
            prev_max = nxt
        if i > 10_000:  # pragma: no cover - defensive
            raise ModelError("basin search exceeded practical range")
