"""Iterative instrumental-variable estimation of the rational part at a fixed
input delay, with optional extra low-pass prefiltering of the regression."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .engine import PlanCache, StepPlan, drive_from_samples, prepare_steps, run_filter_plan
from .models import CtModel, ParamVector, SampledDataset, reflect_unstable

__all__ = [
    "EstimationError",
    "RegressionMatrices",
    "default_skip_time",
    "ls_init",
    "srivc_iterate",
    "srivc_estimate",
]


class EstimationError(RuntimeError):
    """Estimation could not proceed (rank deficiency, divergence, bad input)."""


def default_skip_time(tau_max: float, n: int, omega_svf: float) -> float:
    """Initial stretch excluded from every regression and cost: the largest
    admissible delay plus five state-variable-filter time constants."""
    return tau_max + 5.0 * n / omega_svf


def retained_mask(t: np.ndarray, skip_time: float) -> np.ndarray:
    return (t - t[0]) >= skip_time


@dataclass(frozen=True)
class RegressionMatrices:
    """Row-major regressors, instruments, and target over the retained samples."""

    phi: np.ndarray  # (N_s, n+m+1)
    psi: np.ndarray  # (N_s, n+m+1)
    y: np.ndarray  # (N_s,)

    def __post_init__(self):
        if not (self.phi.shape == self.psi.shape and len(self.y) == len(self.phi)):
            raise EstimationError("regression blocks must agree in shape")


def _pshift(poly: np.ndarray, i: int) -> np.ndarray:
    """Multiply a descending-coefficient polynomial by p^i."""
    return np.concatenate((np.asarray(poly, dtype=float), np.zeros(i)))


def _default_plans(data: SampledDataset, tau: float) -> Tuple[StepPlan, StepPlan]:
    u_drive = drive_from_samples(data.t, data.u, data.intersample, data.u_clock_edges)
    y_drive = drive_from_samples(data.t, data.y, "foh")
    return prepare_steps(data.t, u_drive, tau), prepare_steps(data.t, y_drive, 0.0)


def stage_plans(
    data: SampledDataset, tau: float, prefilter: Optional[CtModel]
) -> Tuple[StepPlan, StepPlan]:
    """Step plans for the instrumental-variable stage.

    Without a prefilter these carry the raw input (delayed by tau) and output.
    With one, both records are first passed through the prefilter (the delay
    baked into the input pass) and the filtered samples become the stage data.
    """
    u_plan, y_plan = _default_plans(data, tau)
    if prefilter is None:
        return u_plan, y_plan
    lnum, lden = prefilter.num, prefilter.den
    ubar = run_filter_plan(lden, [lnum], u_plan)[0]
    ybar = run_filter_plan(lden, [lnum], y_plan)[0]
    t = data.t
    u2 = prepare_steps(t, drive_from_samples(t, ubar, "foh"), 0.0)
    y2 = prepare_steps(t, drive_from_samples(t, ybar, "foh"), 0.0)
    return u2, y2


def _solve_scaled(M: np.ndarray, rhs: np.ndarray, scale: np.ndarray) -> np.ndarray:
    Ms = M / scale[None, :]
    try:
        x = np.linalg.solve(Ms, rhs)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"singular normal equations: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise EstimationError("non-finite solution of the regression system")
    return x / scale


def ls_init(
    data: SampledDataset,
    tau: float,
    n: int,
    m: int,
    omega_svf: float,
    skip_time: Optional[float] = None,
    plans: Optional[Tuple[StepPlan, StepPlan]] = None,
) -> ParamVector:
    """Least-squares seed using state-variable-filtered derivatives.

    Both signals are passed through 1/(p + omega_svf)^n; the input side is
    delayed by tau before filtering.
    """
    if omega_svf <= 0:
        raise EstimationError("omega_svf must be positive")
    if skip_time is None:
        skip_time = default_skip_time(tau, n, omega_svf)
    t = data.t
    svf = np.array([1.0])
    for _ in range(n):
        svf = np.convolve(svf, [1.0, omega_svf])
    y_polys = [_pshift([1.0], i) for i in range(n, -1, -1)]
    u_polys = [_pshift([1.0], i) for i in range(m, -1, -1)]
    u_plan, y_plan = plans if plans is not None else _default_plans(data, tau)
    yf = run_filter_plan(svf, y_polys, y_plan)
    uf = run_filter_plan(svf, u_polys, u_plan)
    mask = retained_mask(t, skip_time)
    if mask.sum() <= n + m + 1:
        raise EstimationError("too few retained samples after the skip window")
    phi = np.hstack((-yf[1:, mask].T, uf[:, mask].T))
    target = yf[0, mask]
    scale = np.sqrt(np.mean(phi ** 2, axis=0))
    if np.any(scale == 0.0) or not np.all(np.isfinite(scale)):
        raise EstimationError("rank-deficient regressor: insufficient excitation")
    sol, _, rank, _ = np.linalg.lstsq(phi / scale[None, :], target, rcond=None)
    if rank < n + m + 1:
        raise EstimationError("rank-deficient regressor: insufficient excitation")
    return ParamVector(sol / scale, n, m)


def _iv_regression(
    data: SampledDataset,
    tau: float,
    theta: ParamVector,
    prefilter: Optional[CtModel],
    skip_time: float,
    plans: Optional[Tuple[StepPlan, StepPlan]] = None,
) -> RegressionMatrices:
    """Regressor/instrument/target blocks for one update.

    ``plans`` carry (possibly prefiltered) input and output records with the
    delay already applied; the adaptive 1/A_hat chains run on top of them.
    """
    t = data.t
    n, m = theta.n, theta.m
    a_poly = reflect_unstable(theta.den)
    b_poly = theta.num
    if plans is None:
        plans = stage_plans(data, tau, prefilter)
    u_plan, y_plan = plans

    den_u = np.convolve(a_poly, a_poly)
    u_polys = [_pshift(a_poly, i) for i in range(m, -1, -1)]
    x_polys = [_pshift(b_poly, i) for i in range(n - 1, -1, -1)]
    rows_u = run_filter_plan(den_u, u_polys + x_polys, u_plan)

    y_polys = [_pshift([1.0], i) for i in range(n, -1, -1)]
    rows_y = run_filter_plan(a_poly, y_polys, y_plan)

    mask = retained_mask(t, skip_time)
    n_s = int(mask.sum())
    p_dim = n + m + 1
    phi = np.empty((n_s, p_dim))
    psi = np.empty((n_s, p_dim))
    phi[:, :n] = -rows_y[1:, mask].T
    phi[:, n:] = rows_u[: m + 1, mask].T
    psi[:, :n] = -rows_u[m + 1:, mask].T
    psi[:, n:] = phi[:, n:]
    return RegressionMatrices(phi, psi, rows_y[0, mask])


def srivc_iterate(
    data: SampledDataset,
    tau: float,
    theta_prev: ParamVector,
    prefilter: Optional[CtModel] = None,
    skip_time: Optional[float] = None,
    plans: Optional[Tuple[StepPlan, StepPlan]] = None,
) -> ParamVector:
    """One instrumental-variable update with 1/A_hat prefiltering.

    An unstable previous denominator is mirrored into the left half plane
    before instruments are generated.
    """
    if skip_time is None:
        skip_time = default_skip_time(tau, theta_prev.n, 1.0)
    reg = _iv_regression(data, tau, theta_prev, prefilter, skip_time, plans)
    if not (np.all(np.isfinite(reg.phi)) and np.all(np.isfinite(reg.psi))):
        raise EstimationError("filtered regressors diverged (unstable model?)")
    scale = np.sqrt(np.mean(reg.phi ** 2, axis=0))
    scale[scale == 0.0] = 1.0
    M = reg.psi.T @ reg.phi
    rhs = reg.psi.T @ reg.y
    theta = _solve_scaled(M, rhs, scale)
    return ParamVector(theta, theta_prev.n, theta_prev.m)


def srivc_estimate(
    data: SampledDataset,
    tau: float,
    n: int,
    m: int,
    omega_svf: float,
    prefilter: Optional[CtModel] = None,
    eps: float = 1e-3,
    max_iter: int = 50,
    theta0: Optional[ParamVector] = None,
    skip_time: Optional[float] = None,
    full_output: bool = False,
    plans: Optional[Tuple[StepPlan, StepPlan]] = None,
):
    """Iterate the instrumental-variable update until the relative parameter
    change drops below eps.  Returns the final estimate (flagged via
    ``full_output`` when the iteration cap was hit first)."""
    if skip_time is None:
        skip_time = default_skip_time(tau, n, omega_svf)
    if plans is None:
        plans = stage_plans(data, tau, prefilter)
    theta = (
        theta0 if theta0 is not None
        else ls_init(data, tau, n, m, omega_svf, skip_time, plans)
    )
    converged = False
    iterations = 0
    for _ in range(max_iter):
        new = srivc_iterate(data, tau, theta, prefilter, skip_time, plans)
        iterations += 1
        denom = max(float(np.linalg.norm(theta.theta)), 1e-12)
        rel = float(np.linalg.norm(new.theta - theta.theta)) / denom
        theta = new
        if rel < eps:
            converged = True
            break
    a_final = reflect_unstable(theta.den)  # keep the returned model simulable
    theta = ParamVector(np.concatenate((a_final[1:], theta.b)), n, m)
    if full_output:
        return theta, {"converged": converged, "iterations": iterations}
    return theta
