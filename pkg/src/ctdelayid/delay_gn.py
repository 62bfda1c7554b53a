"""Filtered delay cost, its Gauss-Newton refinement at a fixed low-pass
filter, and the interleaved rational-part updates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .engine import PlanCache, drive_from_samples, prepare_steps, run_filter_plan
from .models import CtModel, ParamVector, SampledDataset
from .srivc import (
    EstimationError,
    default_skip_time,
    ls_init,
    retained_mask,
    srivc_estimate,
)

__all__ = [
    "GnConfig",
    "Workspace",
    "filtered_cost",
    "gn_gradient_hessian",
    "estimate_with_filter",
]


@dataclass(frozen=True)
class GnConfig:
    """Bounds and stopping rules for the delay search.

    ``dtau_max=None`` clamps steps to a quarter of the active filter period
    (no clamp beyond the [tau_min, tau_max] box when unfiltered).  ``eps`` is
    a relative cost-decrease threshold.
    """

    tau_min: float = 0.0
    tau_max: float = 15.0
    dtau_min: float = 1e-3
    dtau_max: Optional[float] = None
    mu_halvings_max: int = 20
    max_iter: int = 10
    eps: float = 1e-3

    def __post_init__(self):
        if not (0 <= self.tau_min < self.tau_max):
            raise ValueError("need 0 <= tau_min < tau_max")
        if self.dtau_min <= 0:
            raise ValueError("dtau_min must be positive")
        if self.dtau_max is not None and self.dtau_max <= self.dtau_min:
            raise ValueError("dtau_max must exceed dtau_min")
        if self.max_iter < 1 or self.mu_halvings_max < 1:
            raise ValueError("iteration limits must be positive")


def _l_key(L: Optional[CtModel]):
    return None if L is None else (tuple(L.num.tolist()), tuple(L.den.tolist()))


def _l_polys(L: Optional[CtModel]) -> Tuple[np.ndarray, np.ndarray]:
    if L is None:
        return np.array([1.0]), np.array([1.0])
    return np.asarray(L.num, float), np.asarray(L.den, float)


class Workspace:
    """Per-dataset scratch shared across delay-search paths.

    Caches the low-pass-filtered input/output records (the expensive passes
    that do not depend on the model iterate), keyed by filter and delay.
    """

    def __init__(self, data: SampledDataset, skip_time: float):
        self.data = data
        self.skip_time = float(skip_time)
        self.mask = retained_mask(data.t, skip_time)
        if self.mask.sum() < 8:
            raise EstimationError("skip window leaves too few samples")
        self.n_s = int(self.mask.sum())
        self.u_drive = drive_from_samples(
            data.t, data.u, data.intersample, data.u_clock_edges
        )
        self.u_plans = PlanCache(data.t, self.u_drive)
        y_drive = drive_from_samples(data.t, data.y, "foh")
        self.y_plan = prepare_steps(data.t, y_drive, 0.0)
        self._ybar = {}
        self._ybar_plan = {}
        self._ynorm = {}
        self._ubar_plans = {}
        self._resid_slot = (None, None, None)
        self._theta_memo = {}

    def theta_update(
        self,
        tau: float,
        theta_warm: Optional[ParamVector],
        n: int,
        m: int,
        omega_svf: float,
        eps: float,
        max_iter: int,
    ) -> ParamVector:
        """Memoized rational-part update; identical calls are frequent because
        every filter path revisits the same (tau, warm start) pairs."""
        warm_key = None if theta_warm is None else theta_warm.theta.tobytes()
        key = (float(tau), warm_key, max_iter)
        hit = self._theta_memo.get(key)
        if hit is None:
            if len(self._theta_memo) >= 256:
                self._theta_memo.pop(next(iter(self._theta_memo)))
            try:
                if theta_warm is None:
                    theta_warm = ls_init(
                        self.data, tau, n, m, omega_svf, self.skip_time,
                        self.plans(tau),
                    )
                hit = srivc_estimate(
                    self.data, tau, n, m, omega_svf, eps=eps,
                    max_iter=max_iter, theta0=theta_warm,
                    skip_time=self.skip_time, plans=self.plans(tau),
                )
            except EstimationError as exc:
                hit = exc
            self._theta_memo[key] = hit
        if isinstance(hit, EstimationError):
            raise hit
        return hit

    def plans(self, tau: float):
        """Raw (input-delayed, output) plans, for the unfiltered stages."""
        return self.u_plans.plan(tau), self.y_plan

    def ybar(self, L: Optional[CtModel]) -> np.ndarray:
        key = _l_key(L)
        if key not in self._ybar:
            if L is None:
                self._ybar[key] = np.asarray(self.data.y, dtype=float)
            else:
                self._ybar[key] = run_filter_plan(L.den, [L.num], self.y_plan)[0]
        return self._ybar[key]

    def _ybar_stage_plan(self, L: Optional[CtModel]):
        if L is None:
            return self.y_plan
        key = _l_key(L)
        if key not in self._ybar_plan:
            drive = drive_from_samples(self.data.t, self.ybar(L), "foh")
            self._ybar_plan[key] = prepare_steps(self.data.t, drive, 0.0)
        return self._ybar_plan[key]

    def _ubar_stage_plan(self, L: Optional[CtModel], tau: float):
        if L is None:
            return self.u_plans.plan(tau)
        key = (_l_key(L), float(tau))
        hit = self._ubar_plans.get(key)
        if hit is None:
            if len(self._ubar_plans) >= 64:
                self._ubar_plans.pop(next(iter(self._ubar_plans)))
            ubar = run_filter_plan(L.den, [L.num], self.u_plans.plan(tau))[0]
            drive = drive_from_samples(self.data.t, ubar, "foh")
            hit = prepare_steps(self.data.t, drive, 0.0)
            self._ubar_plans[key] = hit
        return hit

    def stage_plans(self, L: Optional[CtModel], tau: float):
        """Prefiltered input/output plans feeding the IV stage for filter L."""
        return self._ubar_stage_plan(L, tau), self._ybar_stage_plan(L)

    def ynorm(self, L: Optional[CtModel]) -> float:
        """||ybar - mean(ybar)|| over the retained samples."""
        key = _l_key(L)
        if key not in self._ynorm:
            yb = self.ybar(L)[self.mask]
            self._ynorm[key] = float(np.linalg.norm(yb - yb.mean()))
        return self._ynorm[key]

    def residual_filtered(
        self, theta: ParamVector, tau: float, L: Optional[CtModel]
    ) -> np.ndarray:
        """(y - G(theta) u(.-tau)) passed through L, over all samples."""
        key = (theta.theta.tobytes(), float(tau))
        slot_key, _, plan = self._resid_slot
        if slot_key != key:
            xhat = run_filter_plan(theta.den, [theta.num], self.u_plans.plan(tau))[0]
            resid = np.asarray(self.data.y, dtype=float) - xhat
            plan = prepare_steps(
                self.data.t, drive_from_samples(self.data.t, resid, "foh"), 0.0
            )
            self._resid_slot = (key, resid, plan)
        else:
            resid = self._resid_slot[1]
        if L is None:
            return resid
        return run_filter_plan(L.den, [L.num], plan)[0]

    def cost(self, theta: ParamVector, tau: float, L: Optional[CtModel]) -> float:
        """Filtered output-error cost on the prefiltered records."""
        xbar = run_filter_plan(
            theta.den, [theta.num], self._ubar_stage_plan(L, tau)
        )[0]
        eps = (self.ybar(L) - xbar)[self.mask]
        val = 0.5 * float(eps @ eps) / self.n_s
        return val if math.isfinite(val) else math.inf

    def gradient_hessian(
        self, theta: ParamVector, tau: float, L: Optional[CtModel]
    ) -> Tuple[float, float]:
        n, m = theta.n, theta.m
        a_poly = np.asarray(theta.den)
        b_poly = np.asarray(theta.num)
        den = np.convolve(a_poly, a_poly)
        ba = np.convolve(b_poly, a_poly)
        polys = [ba, _p_shift(ba, 1)]
        polys += [_p_shift(a_poly, i) for i in range(m, -1, -1)]
        polys += [_p_shift(b_poly, i) for i in range(n - 1, -1, -1)]
        u_plan = self._ubar_stage_plan(L, tau)
        rows = run_filter_plan(den, polys, u_plan)[:, self.mask]
        eps = self.ybar(L)[self.mask] - rows[0]
        eps_tau = rows[1]
        psi = rows[2:].T
        if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(eps))):
            raise EstimationError("gradient evaluation diverged")
        grad = float(eps_tau @ eps) / self.n_s
        scale = np.sqrt(np.mean(psi ** 2, axis=0))
        scale[scale == 0.0] = 1.0
        psi_s = psi / scale[None, :]
        gram = psi_s.T @ psi_s
        rhs = psi_s.T @ eps_tau
        try:
            coef = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            coef, *_ = np.linalg.lstsq(psi_s, eps_tau, rcond=None)
        proj = float(rhs @ coef)
        hess = (float(eps_tau @ eps_tau) - proj) / self.n_s
        return grad, max(hess, 0.0)


def _p_shift(poly: np.ndarray, i: int) -> np.ndarray:
    return np.concatenate((np.asarray(poly, dtype=float), np.zeros(i)))


def filtered_cost(
    data: SampledDataset,
    theta: ParamVector,
    tau: float,
    L: Optional[CtModel],
    skip_time: float,
) -> float:
    """Normalized sum of squares of the L-filtered output-error residual."""
    return Workspace(data, skip_time).cost(theta, tau, L)


def gn_gradient_hessian(
    data: SampledDataset,
    theta: ParamVector,
    tau: float,
    L: Optional[CtModel],
    skip_time: float,
) -> Tuple[float, float]:
    """Delay gradient and projected Gauss-Newton curvature of the filtered cost.

    The delay sensitivity is the derivative-augmented response p G(p) L(p)
    applied to the delayed input; rational-part sensitivities are projected
    out through the instrumental regressor block.
    """
    return Workspace(data, skip_time).gradient_hessian(theta, tau, L)


def _effective_dtau_max(cfg: GnConfig, L: Optional[CtModel]) -> float:
    # Half the admissible range: near-flat stretches of the cost produce huge
    # Newton proposals, and the step halving (not the clamp) is what enforces
    # actual descent.  Short clamps (e.g. a quarter filter period) immobilize
    # the search whenever the filter periods are much shorter than the range.
    if cfg.dtau_max is not None:
        return cfg.dtau_max
    return 0.5 * (cfg.tau_max - cfg.tau_min)


def estimate_with_filter(
    data: SampledDataset,
    L: Optional[CtModel],
    tau0: float,
    theta0: Optional[ParamVector],
    cfg: GnConfig,
    orders: Tuple[int, int],
    omega_svf: float,
    skip_time: Optional[float] = None,
    workspace: Optional[Workspace] = None,
    srivc_eps: float = 1e-3,
    warm_iters: int = 2,
    probe_reflected: bool = False,
) -> Tuple[ParamVector, float, List[Tuple[int, float, float]]]:
    """Alternate Gauss-Newton delay steps with warm instrumental-variable
    updates of the rational part; the delay cost is filtered by L.

    Each proposed delay step is halved while it leaves the bounds or fails to
    decrease the filtered cost; the path stops when the step or the relative
    cost decrease falls below the configured thresholds.  With
    ``probe_reflected`` the mirrored direction is tried before giving up,
    which rescues starts where a degenerate rational fit makes the local
    gradient meaningless.  Returns the final (theta, tau) and the
    (iteration, tau, cost) trace.
    """
    n, m = orders
    if not (cfg.tau_min <= tau0 <= cfg.tau_max):
        raise EstimationError(f"tau0={tau0} outside [{cfg.tau_min}, {cfg.tau_max}]")
    if skip_time is None:
        skip_time = default_skip_time(cfg.tau_max, n, omega_svf)
    ws = workspace if workspace is not None else Workspace(data, skip_time)
    dmax = _effective_dtau_max(cfg, L)

    # The rational part is always re-estimated on the unfiltered record: the
    # low-pass filter enters the delay cost and its derivatives only.  Running
    # the instrumental-variable iteration on heavily low-passed data loses
    # identifiability of the fast dynamics and can lock onto useless fixed
    # points, which starves the delay search of exactly the wide filters it
    # needs for long-range moves.
    tau_c = float(tau0)
    if theta0 is None:
        theta_c = ws.theta_update(tau_c, None, n, m, omega_svf, srivc_eps, 15)
    else:
        theta_c = ws.theta_update(
            tau_c, theta0, n, m, omega_svf, srivc_eps, warm_iters
        )
    cost_c = ws.cost(theta_c, tau_c, L)
    trace: List[Tuple[int, float, float]] = [(0, tau_c, cost_c)]

    def try_tau(tau_t: float, theta_warm: ParamVector):
        try:
            theta_t = ws.theta_update(
                tau_t, theta_warm, n, m, omega_svf, srivc_eps, warm_iters
            )
            cost_t = ws.cost(theta_t, tau_t, L)
            if math.isfinite(cost_t):
                return theta_t, cost_t
        except EstimationError:
            pass
        # warm continuation can blow up across large delay moves; reseed once
        try:
            theta_t = ws.theta_update(tau_t, None, n, m, omega_svf, srivc_eps, 10)
            return theta_t, ws.cost(theta_t, tau_t, L)
        except EstimationError:
            return theta_warm, math.inf

    def halving_search(step0: float):
        step = step0
        for _ in range(cfg.mu_halvings_max + 1):
            tau_t = tau_c + step
            if cfg.tau_min <= tau_t <= cfg.tau_max:
                theta_t, cost_t = try_tau(tau_t, theta_c)
                if cost_t < cost_c:
                    return tau_t, theta_t, cost_t
                if abs(step0) <= cfg.dtau_min:
                    return None
            step *= 0.5
            if abs(step) <= cfg.dtau_min:
                return None
        return None

    for it in range(1, cfg.max_iter + 1):
        try:
            grad, hess = ws.gradient_hessian(theta_c, tau_c, L)
        except EstimationError:
            break
        if hess > 1e-14 * max(abs(grad), 1.0):
            step = -grad / hess
        else:
            step = -math.copysign(dmax, grad) if grad != 0.0 else 0.0
        step = float(np.clip(step, -dmax, dmax))
        if step == 0.0:
            break
        # a proposal already below the step floor is applied once, then stops
        last_step = abs(step) <= cfg.dtau_min

        hit = halving_search(step)
        if hit is None and probe_reflected and not last_step:
            hit = halving_search(-step)
        if probe_reflected and not last_step and (it == 1 or hit is None):
            # On long noise plateaus or in model-error dents the local
            # quadratic model takes small, confident, useless steps; a ladder
            # of long-range probes lets the path cross them.  Probing is
            # confined to the first move (and to dead ends) to keep the
            # well-behaved descent unchanged.
            marginal = hit is None or (cost_c - hit[2]) < 0.05 * cost_c
            if marginal:
                best = hit
                for scale in (1.0, 0.5, 0.25, 0.125):
                    for sign in (1.0, -1.0):
                        tau_p = tau_c + sign * scale * dmax
                        if not (cfg.tau_min <= tau_p <= cfg.tau_max):
                            continue
                        theta_p, cost_p = try_tau(tau_p, theta_c)
                        if cost_p < cost_c and (best is None or cost_p < best[2]):
                            best = (tau_p, theta_p, cost_p)
                hit = best
        if hit is None:
            break
        tau_t, theta_t, cost_t = hit
        decrease = cost_c - cost_t
        rel_floor = cfg.eps * cost_c
        tau_c, theta_c, cost_c = tau_t, theta_t, cost_t
        trace.append((it, tau_c, cost_c))
        if last_step or decrease < rel_floor:
            break
    return theta_c, tau_c, trace
