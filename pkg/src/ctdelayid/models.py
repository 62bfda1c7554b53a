"""Core model types: transfer functions, state space, sampled data, parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ModelError",
    "CtModel",
    "StateSpace",
    "SampledDataset",
    "ParamVector",
    "EstimationResult",
    "tf_to_ss",
    "reflect_unstable",
    "bandwidth",
]

ROOT_TOL = 1e-9


class ModelError(ValueError):
    """Invalid model construction or analysis request."""


def _poly(c) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(c, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ModelError("polynomial coefficients must be a non-empty 1-D sequence")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CtModel:
    """Rational transfer function B(s)/A(s) with input dead time, A monic.

    Coefficients are in descending powers of s.  A non-monic denominator is
    normalized on construction.  Strict properness (deg A > deg B) is required.
    """

    num: np.ndarray
    den: np.ndarray
    delay: float = 0.0
    check_coprime: bool = False

    def __post_init__(self):
        num = _poly(self.num)
        den = _poly(self.den)
        if den[0] == 0.0:
            raise ModelError("denominator leading coefficient must be nonzero")
        num = num / den[0]
        den = den / den[0]
        # strip leading zeros of the numerator so deg comparisons are honest
        nz = np.flatnonzero(num)
        if nz.size and nz[0] > 0:
            num = num[nz[0]:]
        if len(den) < 2:
            raise ModelError("denominator degree must be at least 1")
        if len(num) >= len(den):
            raise ModelError("model must be strictly proper (deg num < deg den)")
        if not (self.delay >= 0.0):
            raise ModelError(f"delay must be >= 0, got {self.delay}")
        object.__setattr__(self, "num", _readonly(num))
        object.__setattr__(self, "den", _readonly(den))
        object.__setattr__(self, "delay", float(self.delay))
        if self.check_coprime and np.any(self.num != 0.0):
            zr = np.roots(self.num) if len(self.num) > 1 else np.array([])
            pr = np.roots(self.den)
            if zr.size and pr.size:
                dist = np.abs(zr[:, None] - pr[None, :])
                if dist.min() < ROOT_TOL:
                    raise ModelError("numerator and denominator share a root")

    @property
    def n(self) -> int:
        return len(self.den) - 1

    @property
    def m(self) -> int:
        return len(self.num) - 1

    def freq_response(self, w) -> np.ndarray:
        """B(jw)/A(jw) without the delay factor."""
        s = 1j * np.atleast_1d(np.asarray(w, dtype=float))
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def dc_gain(self) -> float:
        return float(self.num[-1] / self.den[-1])

    def poles(self) -> np.ndarray:
        return np.roots(self.den)

    def is_stable(self, tol: float = ROOT_TOL) -> bool:
        return bool(np.all(self.poles().real < tol))


@dataclass(frozen=True)
class StateSpace:
    """Controllable-canonical realization of a strictly proper transfer function."""

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        G = np.asarray(self.G, dtype=float).reshape(-1, 1)
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = F.shape[0]
        if F.shape != (d, d) or G.shape != (d, 1) or H.shape[1] != d:
            raise ModelError(
                f"inconsistent state-space dimensions F{F.shape} G{G.shape} H{H.shape}"
            )
        object.__setattr__(self, "F", _readonly(F))
        object.__setattr__(self, "G", _readonly(G))
        object.__setattr__(self, "H", _readonly(H))

    @property
    def order(self) -> int:
        return self.F.shape[0]

    def freq_response(self, w) -> np.ndarray:
        """H (jwI - F)^-1 G, one complex value per frequency."""
        w = np.atleast_1d(np.asarray(w, dtype=float))
        d = self.order
        out = np.empty(w.shape, dtype=complex)
        eye = np.eye(d)
        for i, wi in enumerate(w):
            x = np.linalg.solve(1j * wi * eye - self.F, self.G)
            out[i] = (self.H[0] @ x)[0]
        return out


def tf_to_ss(model: CtModel) -> StateSpace:
    """Companion-form realization of B(s)/A(s); the delay is not realized.

    First row of F carries the negated denominator coefficients, H the
    numerator zero-padded to length n in descending powers, so that
    H (sI - F)^-1 G == B(s)/A(s).
    """
    n = model.n
    F = np.zeros((n, n))
    F[0, :] = -model.den[1:]
    if n > 1:
        F[1:, :-1] = np.eye(n - 1)
    G = np.zeros((n, 1))
    G[0, 0] = 1.0
    H = np.zeros((1, n))
    H[0, n - 1 - model.m:] = model.num
    return StateSpace(F, G, H)


def reflect_unstable(den) -> np.ndarray:
    """Mirror every root with Re > tol into the left half plane; keep the rest.

    Returns monic real coefficients.  |A(jw)| is preserved for all w.
    """
    den = _poly(den)
    if den[0] == 0.0:
        raise ModelError("polynomial must have nonzero leading coefficient")
    den = den / den[0]
    if len(den) == 1:
        return den
    try:
        roots = np.roots(den)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eig failure is exotic
        raise ModelError(f"root finding failed for {den}: {exc}") from exc
    flip = roots.real > ROOT_TOL
    if not np.any(flip):
        return den
    roots = np.where(flip, roots - 2 * roots.real, roots)
    out = np.poly(roots)
    if np.abs(out.imag).max() > 1e-6 * max(np.abs(out.real).max(), 1.0):
        raise ModelError("reflection produced non-real coefficients")
    return out.real


def bandwidth(model: CtModel, lo: float = 1e-4, hi: float = 1e6, tol: float = 1e-6) -> float:
    """Smallest w where |G(jw)| first drops to |G(0)|/sqrt(2), by bisection.

    Searches a log-spaced grid on [lo, hi] for the first crossing, then
    bisects to absolute tolerance ``tol`` rad/s.
    """
    if not model.is_stable():
        raise ModelError("bandwidth requires a stable model")
    g0 = abs(model.dc_gain())
    if g0 == 0.0:
        raise ModelError("bandwidth requires nonzero DC gain")
    level = g0 / np.sqrt(2.0)
    grid = np.logspace(np.log10(lo), np.log10(hi), 4000)
    mags = np.abs(model.freq_response(grid))
    below = np.flatnonzero(mags <= level)
    if below.size == 0:
        raise ModelError("|G(jw)| never falls below the -3 dB level on the search range")
    k = below[0]
    if k == 0:
        return float(grid[0])
    a, b = grid[k - 1], grid[k]
    while b - a > tol:
        mid = 0.5 * (a + b)
        if abs(model.freq_response(mid)[0]) <= level:
            b = mid
        else:
            a = mid
    return float(0.5 * (a + b))


@dataclass(frozen=True)
class SampledDataset:
    """Timestamped input/output record, possibly irregularly sampled.

    ``intersample`` declares how the input was held between samples.  When the
    input is a logic-clocked signal, ``u_clock_edges`` lists the instants where
    it may switch; reconstruction then steps at the edges instead of at the
    sample times.
    """

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    intersample: str = "zoh"
    u_clock_edges: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        u = np.asarray(self.u, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if not (len(t) == len(u) == len(y)) or len(t) < 2:
            raise ModelError("t, u, y must have equal length N >= 2")
        if np.any(np.diff(t) <= 0):
            raise ModelError("timestamps must be strictly increasing")
        if self.intersample not in ("zoh", "foh"):
            raise ModelError(f"intersample must be 'zoh' or 'foh', got {self.intersample!r}")
        object.__setattr__(self, "t", _readonly(t))
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "y", _readonly(y))
        if self.u_clock_edges is not None:
            e = np.asarray(self.u_clock_edges, dtype=float).ravel()
            if e.size < 1 or np.any(np.diff(e) <= 0):
                raise ModelError("u_clock_edges must be strictly increasing")
            if e[0] > t[0] or e[-1] < t[-1]:
                raise ModelError("u_clock_edges must cover [t_1, t_N]")
            object.__setattr__(self, "u_clock_edges", _readonly(e))

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def span(self) -> float:
        return float(self.t[-1] - self.t[0])


@dataclass(frozen=True)
class ParamVector:
    """Rational-part parameters ordered [a_1..a_n, b_0..b_m] for monic A."""

    theta: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        if self.n < 1 or self.m < 0 or self.m >= self.n:
            raise ModelError(f"invalid orders n={self.n}, m={self.m}")
        if len(theta) != self.n + self.m + 1:
            raise ModelError(
                f"theta length {len(theta)} does not match n+m+1={self.n + self.m + 1}"
            )
        object.__setattr__(self, "theta", _readonly(theta))

    @property
    def a(self) -> np.ndarray:
        return self.theta[: self.n]

    @property
    def b(self) -> np.ndarray:
        return self.theta[self.n:]

    @property
    def den(self) -> np.ndarray:
        return np.concatenate(([1.0], self.a))

    @property
    def num(self) -> np.ndarray:
        return self.b.copy()

    @classmethod
    def from_model(cls, model: CtModel) -> "ParamVector":
        return cls(np.concatenate((model.den[1:], model.num)), model.n, model.m)

    def to_model(self, delay: float = 0.0) -> CtModel:
        num = self.num
        if np.all(num == 0.0):
            # degenerate zero model; keep one explicit zero coefficient
            num = np.zeros(self.m + 1)
        return CtModel(num, self.den, delay)


@dataclass(frozen=True)
class EstimationResult:
    """Final estimate plus the per-candidate search trace.

    ``trace`` rows are (outer_iteration, filter_index, tau_hat, j0); the
    unfiltered refinement stage is logged with filter_index -1.
    """

    model: CtModel
    j0: float
    trace: Tuple[Tuple[int, int, float, float], ...]
    converged: bool
    iterations: int

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple(tuple(row) for row in self.trace))
        if self.converged and len(self.trace) == 0:
            raise ModelError("a converged result must carry a non-empty trace")
