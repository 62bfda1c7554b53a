"""Multi-filter redundant delay search: run one Gauss-Newton path per bank
filter, rank candidates by the bank-averaged normalized cost, and switch
paths until the delay estimate settles; finish with an unfiltered pass."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .delay_gn import GnConfig, Workspace, estimate_with_filter
from .filters import FilterBank
from .models import CtModel, EstimationResult, ParamVector, SampledDataset
from .srivc import EstimationError, default_skip_time, srivc_estimate

__all__ = [
    "RedundancyConfig",
    "normalized_fit",
    "j0",
    "redundant_minimize_generic",
    "estimate",
]


@dataclass(frozen=True)
class RedundancyConfig:
    """Bank, Gauss-Newton settings, model orders, and outer-loop stopping."""

    bank: FilterBank
    gn: GnConfig
    n: int
    m: int
    omega_svf: float
    eps_outer: float = 1e-3
    max_outer: int = 20
    srivc_eps: float = 1e-3

    def __post_init__(self):
        if len(self.bank) == 0:
            raise ValueError("bank must not be empty")
        if self.eps_outer <= 0:
            raise ValueError("eps_outer must be positive")
        if self.n < 1 or self.m < 0 or self.m >= self.n:
            raise ValueError(f"invalid orders n={self.n}, m={self.m}")


def _fit_percent(ws: Workspace, theta: ParamVector, tau: float, L) -> float:
    res = ws.residual_filtered(theta, tau, L)[ws.mask]
    denom = ws.ynorm(L)
    if denom == 0.0:
        raise EstimationError("output record has zero variance after filtering")
    val = 100.0 * float(np.linalg.norm(res)) / denom
    return val if math.isfinite(val) else math.inf


def normalized_fit(
    data: SampledDataset,
    theta: ParamVector,
    tau: float,
    L: Optional[CtModel],
    skip_time: float,
) -> float:
    """100 ||L (y - G u(.-tau))|| / ||L y - mean(L y)|| over retained samples."""
    return _fit_percent(Workspace(data, skip_time), theta, tau, L)


def j0(
    data: SampledDataset,
    theta: ParamVector,
    tau: float,
    bank: FilterBank,
    skip_time: float,
) -> float:
    """Arithmetic mean of the normalized filtered fits over the whole bank."""
    ws = Workspace(data, skip_time)
    return _j0_ws(ws, theta, tau, bank)


def _j0_ws(ws: Workspace, theta: ParamVector, tau: float, bank: FilterBank) -> float:
    return float(np.mean([_fit_percent(ws, theta, tau, L) for L in bank]))


def redundant_minimize_generic(
    paths: Sequence[Callable],
    j0_eval: Callable,
    rho0,
    eps: float = 1e-3,
    max_rounds: int = 50,
):
    """Generic redundant descent over a family of solver paths.

    Each path maps a current point to a candidate minimum of its own cost.
    A candidate is accepted when it drops the reference cost by the factor
    (1 - eps); otherwise the next path is tried.  The loop ends when a full
    cycle of paths fails or ``max_rounds`` acceptances happened.  Returns the
    final point and the (round, path_index, accepted, j0) log.
    """
    if len(paths) == 0:
        raise ValueError("need at least one path")
    rho = rho0
    log: List[Tuple[int, int, bool, float]] = []
    j_cur = float(j0_eval(rho))
    for k in range(max_rounds):
        advanced = False
        for i, path in enumerate(paths):
            cand = path(rho)
            j_cand = float(j0_eval(cand))
            ok = j_cand <= (1.0 - eps) * j_cur
            log.append((k, i, ok, j_cand))
            if ok:
                rho, j_cur = cand, j_cand
                advanced = True
                break
        if not advanced:
            break
    return rho, log


def estimate(
    data: SampledDataset,
    tau0: float,
    cfg: RedundancyConfig,
) -> EstimationResult:
    """Full redundant estimation of the rational part and the delay.

    Outer rounds run one filtered Gauss-Newton path per bank filter from the
    current delay, score every candidate with the bank-averaged cost, and
    keep the best one while it does not degrade the score.  A final unfiltered
    pass refines both the delay and the rational part.
    """
    gn = cfg.gn
    if not (gn.tau_min <= tau0 <= gn.tau_max):
        raise EstimationError(f"tau0={tau0} outside [{gn.tau_min}, {gn.tau_max}]")
    skip_time = default_skip_time(gn.tau_max, cfg.n, cfg.omega_svf)
    ws = Workspace(data, skip_time)

    tau_prev = float(tau0)
    theta_prev: Optional[ParamVector] = None
    j_prev = math.inf
    trace: List[Tuple[int, int, float, float]] = []
    converged = False
    iterations = 0
    failures: List[str] = []

    for it in range(1, cfg.max_outer + 1):
        iterations = it
        best = None
        for k, L in enumerate(cfg.bank):
            try:
                theta_k, tau_k, _ = estimate_with_filter(
                    data, L, tau_prev, theta_prev, gn, (cfg.n, cfg.m),
                    cfg.omega_svf, skip_time=skip_time, workspace=ws,
                    srivc_eps=cfg.srivc_eps, probe_reflected=True,
                )
                score = _j0_ws(ws, theta_k, tau_k, cfg.bank)
            except EstimationError as exc:
                failures.append(f"round {it} filter {k}: {exc}")
                continue
            trace.append((it, k, tau_k, score))
            if best is None or score < best[0]:
                best = (score, k, theta_k, tau_k)
        if best is None:
            raise EstimationError(
                "every filter path failed: " + "; ".join(failures[-len(cfg.bank):])
            )
        score, _, theta_b, tau_b = best
        if score > j_prev:
            converged = True  # no candidate improves the reference cost
            break
        rel = abs(tau_b - tau_prev) / max(abs(tau_b), 1e-9)
        theta_prev, tau_prev, j_prev = theta_b, tau_b, score
        if rel < cfg.eps_outer:
            converged = True
            break

    if theta_prev is None:
        raise EstimationError("no accepted candidate before termination")

    # unfiltered refinement of both the delay and the rational part
    theta_f, tau_f, _ = estimate_with_filter(
        data, None, tau_prev, theta_prev, gn, (cfg.n, cfg.m), cfg.omega_svf,
        skip_time=skip_time, workspace=ws, srivc_eps=cfg.srivc_eps,
        probe_reflected=True,
    )
    theta_f = srivc_estimate(
        data, tau_f, cfg.n, cfg.m, cfg.omega_svf, prefilter=None,
        eps=cfg.srivc_eps, max_iter=30, theta0=theta_f, skip_time=skip_time,
        plans=ws.plans(tau_f),
    )
    j_final = _j0_ws(ws, theta_f, tau_f, cfg.bank)
    trace.append((iterations + 1, -1, tau_f, j_final))
    model = theta_f.to_model(delay=tau_f)
    return EstimationResult(
        model=model,
        j0=j_final,
        trace=tuple(trace),
        converged=converged,
        iterations=iterations,
    )
