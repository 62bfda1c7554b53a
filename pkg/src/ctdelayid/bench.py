"""Experiment configuration, dataset files, Monte Carlo campaigns, and cost
sweeps.  Campaign cells are (sampling scheme x SNR x initial delay); each run
gets derived seeds so results are reproducible bit for bit."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .delay_gn import GnConfig, estimate_with_filter
from .filters import FilterBank, butterworth, design_bank
from .models import CtModel, ModelError, ParamVector, SampledDataset, bandwidth
from .redundancy import RedundancyConfig, estimate, j0, normalized_fit
from .signals import ExcitationSpec, SamplingSpec, make_dataset
from .srivc import EstimationError, default_skip_time, srivc_estimate

__all__ = [
    "BenchError",
    "ExperimentConfig",
    "RunRecord",
    "CampaignReport",
    "load_config",
    "write_dataset",
    "read_dataset",
    "generate_dataset_files",
    "estimate_from_config",
    "sweep_cost",
    "run_campaign",
    "mix_seed",
    "bank_report",
]


class BenchError(ValueError):
    """Configuration or file problem in the benchmark layer."""


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(master: int, *parts: int) -> int:
    """Derived 64-bit seed: fold each part through a splitmix64 round.

    Documented so alternate implementations can reproduce the same streams:
    s = sm64(master); for p in parts: s = sm64(s xor (p + 1)).
    """
    s = _splitmix64(master & _MASK64)
    for p in parts:
        s = _splitmix64(s ^ ((p + 1) & _MASK64))
    return s


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to generate data and run estimations."""

    system: CtModel
    excitation: ExcitationSpec
    samplings: Tuple[SamplingSpec, ...]
    snrs_db: Tuple[Optional[float], ...]
    initial_delays: Tuple[Union[float, str], ...]  # numbers or "random"
    random_delay_range: Tuple[float, float]
    bank_beta: float
    bank_n_f: int
    bank_order: int
    gn: GnConfig
    n: int
    m: int
    omega_svf: float
    runs: int
    master_seed: int
    irregular_clock: Optional[float] = None

    def __post_init__(self):
        if self.runs < 1:
            raise BenchError("runs must be >= 1")
        if self.n < 1 or not (0 <= self.m < self.n):
            raise BenchError(f"invalid orders n={self.n}, m={self.m}")

    def bank(self) -> FilterBank:
        bw = bandwidth(self.system)
        return design_bank(bw, self.bank_beta, self.bank_n_f, self.bank_order)

    def redundancy_config(self) -> RedundancyConfig:
        return RedundancyConfig(
            bank=self.bank(), gn=self.gn, n=self.n, m=self.m,
            omega_svf=self.omega_svf,
        )

    def excitation_for(self, samp: SamplingSpec) -> ExcitationSpec:
        if samp.kind == "irregular_uniform" and self.irregular_clock is not None:
            return ExcitationSpec(
                self.excitation.stages, self.irregular_clock,
                self.excitation.amplitude,
            )
        return self.excitation


def _sampling_from_json(obj: dict) -> SamplingSpec:
    kind = obj.get("kind")
    if kind == "regular":
        return SamplingSpec("regular", int(obj["n_samples"]), h=float(obj["h"]))
    if kind in ("irregular_uniform", "irregular"):
        return SamplingSpec(
            "irregular_uniform", int(obj["n_samples"]),
            lo=float(obj["lo"]), hi=float(obj["hi"]),
            seed=int(obj.get("seed", 0)),
        )
    raise BenchError(f"unknown sampling kind {kind!r}")


def load_config(path) -> ExperimentConfig:
    """Parse a JSON experiment description; see the repository README for the
    schema and demos/configs for complete examples."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    try:
        sysobj = raw["system"]
        system = CtModel(sysobj["num"], sysobj["den"], float(sysobj["delay"]))
        exc = ExcitationSpec(
            int(raw["excitation"]["stages"]),
            float(raw["excitation"]["clock_period"]),
            float(raw["excitation"].get("amplitude", 1.0)),
        )
        samp_raw = raw["sampling"]
        if isinstance(samp_raw, dict):
            samp_raw = [samp_raw]
        samplings = tuple(_sampling_from_json(s) for s in samp_raw)
        snr_raw = raw.get("snr_db", None)
        if not isinstance(snr_raw, list):
            snr_raw = [snr_raw]
        snrs = tuple(None if s is None else float(s) for s in snr_raw)
        delays_raw = raw.get("initial_delays", [0.0])
        rng_lo, rng_hi = 0.0, 9.0
        delays: List[Union[float, str]] = []
        for d in delays_raw:
            if isinstance(d, dict):
                rng_lo = float(d.get("lo", 0.0))
                rng_hi = float(d.get("hi", 9.0))
                delays.append("random")
            elif isinstance(d, str):
                delays.append("random")
            else:
                delays.append(float(d))
        bank = raw.get("bank", {})
        gnr = raw.get("gn", {})
        gn = GnConfig(
            tau_min=float(gnr.get("tau_min", 0.0)),
            tau_max=float(gnr.get("tau_max", 15.0)),
            dtau_min=float(gnr.get("dtau_min", 1e-3)),
            dtau_max=gnr.get("dtau_max", None),
            mu_halvings_max=int(gnr.get("mu_halvings_max", 20)),
            max_iter=int(gnr.get("max_iter", 10)),
            eps=float(gnr.get("eps", 1e-3)),
        )
        orders = raw.get("orders", {})
        cfg = ExperimentConfig(
            system=system,
            excitation=exc,
            samplings=samplings,
            snrs_db=snrs,
            initial_delays=tuple(delays),
            random_delay_range=(rng_lo, rng_hi),
            bank_beta=float(bank.get("beta", 10.0)),
            bank_n_f=int(bank.get("n_f", 10)),
            bank_order=int(bank.get("order", 10)),
            gn=gn,
            n=int(orders["n"]),
            m=int(orders["m"]),
            omega_svf=float(raw["omega_svf"]),
            runs=int(raw.get("runs", 20)),
            master_seed=int(raw.get("master_seed", 0)),
            irregular_clock=(
                float(raw["irregular_clock"]) if "irregular_clock" in raw else None
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BenchError(f"invalid experiment config {path}: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_dataset(path, data: SampledDataset, meta: dict) -> None:
    """CSV with header t,u,y (17 significant digits, lossless for float64)
    plus a JSON metadata sidecar at <path>.meta.json."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("t,u,y\n")
        for t, u, y in zip(data.t, data.u, data.y):
            f.write(f"{t:.17g},{u:.17g},{y:.17g}\n")
    meta = dict(meta)
    meta["intersample"] = data.intersample
    if data.u_clock_edges is not None:
        meta["u_clock_edges"] = [float(e) for e in data.u_clock_edges]
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def read_dataset(path) -> Tuple[SampledDataset, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr = np.loadtxt(path, delimiter=",", skiprows=1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise BenchError(f"{path}: expected three columns t,u,y")
    meta_path = Path(str(path) + ".meta.json")
    meta: dict = {}
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    edges = meta.get("u_clock_edges")
    data = SampledDataset(
        arr[:, 0], arr[:, 1], arr[:, 2],
        intersample=meta.get("intersample", "zoh"),
        u_clock_edges=None if edges is None else np.asarray(edges, float),
    )
    return data, meta


def _dataset_for_cell(
    cfg: ExperimentConfig,
    samp: SamplingSpec,
    snr: Optional[float],
    schedule_seed: int,
    noise_seed: int,
):
    samp_seeded = samp
    if samp.kind == "irregular_uniform":
        samp_seeded = SamplingSpec(
            samp.kind, samp.n_samples, lo=samp.lo, hi=samp.hi, seed=schedule_seed
        )
    exc = cfg.excitation_for(samp)
    data, x = make_dataset(cfg.system, exc, samp_seeded, snr, noise_seed)
    return data, x


def generate_dataset_files(cfg: ExperimentConfig, out_path) -> List[Path]:
    """One dataset file per (sampling, SNR) combination of the config."""
    out_path = Path(out_path)
    written = []
    multi = len(cfg.samplings) * len(cfg.snrs_db) > 1
    for i, samp in enumerate(cfg.samplings):
        for j, snr in enumerate(cfg.snrs_db):
            sched_seed = mix_seed(cfg.master_seed, i, j, 0, 1)
            noise_seed = mix_seed(cfg.master_seed, i, j, 0, 2)
            data, x = _dataset_for_cell(cfg, samp, snr, sched_seed, noise_seed)
            if multi:
                p = out_path.with_name(
                    f"{out_path.stem}_{samp.kind}_{_snr_label(snr)}{out_path.suffix or '.csv'}"
                )
            else:
                p = out_path
            e = data.y - x
            pe = float(np.mean(e ** 2))
            px = float(np.mean((x - x.mean()) ** 2))
            meta = {
                "system": {
                    "num": list(map(float, cfg.system.num)),
                    "den": list(map(float, cfg.system.den)),
                    "delay": cfg.system.delay,
                },
                "excitation": {
                    "stages": cfg.excitation_for(samp).stages,
                    "clock_period": cfg.excitation_for(samp).clock_period,
                    "amplitude": cfg.excitation_for(samp).amplitude,
                },
                "sampling": {"kind": samp.kind, "n_samples": samp.n_samples},
                "snr_db": snr,
                "target_snr_db": snr,
                "empirical_snr_db": (
                    None if pe == 0.0 else 10.0 * math.log10(px / pe)
                ),
                "seeds": {"schedule": sched_seed, "noise": noise_seed},
                "master_seed": cfg.master_seed,
            }
            write_dataset(p, data, meta)
            written.append(p)
    return written


def _snr_label(snr: Optional[float]) -> str:
    return "clean" if snr is None else f"{snr:g}dB"


# ---------------------------------------------------------------------------
# single estimation entry point
# ---------------------------------------------------------------------------


def estimate_from_config(
    data: SampledDataset,
    cfg: ExperimentConfig,
    method: str = "redundant",
    tau0: float = 0.0,
    filter_index: Optional[int] = None,
):
    """Run one estimation: the redundant multi-filter method, a single bank
    filter path, or the plain single-filter two-stage baseline."""
    if method == "redundant":
        return estimate(data, tau0, cfg.redundancy_config())
    skip = default_skip_time(cfg.gn.tau_max, cfg.n, cfg.omega_svf)
    bank = cfg.bank()
    if method == "single-filter":
        L = bank.filters[filter_index if filter_index is not None else -1]
    elif method == "baseline-alg2":
        L = butterworth(cfg.bank_order, bandwidth(cfg.system) / 10.0)
    else:
        raise BenchError(f"unknown method {method!r}")
    theta, tau, trace = estimate_with_filter(
        data, L, tau0, None, cfg.gn, (cfg.n, cfg.m), cfg.omega_svf,
        skip_time=skip,
    )
    # final unfiltered polish stage of the two-stage baseline
    theta, tau, trace2 = estimate_with_filter(
        data, None, tau, theta, cfg.gn, (cfg.n, cfg.m), cfg.omega_svf,
        skip_time=skip,
    )
    score = j0(data, theta, tau, bank, skip)
    from .models import EstimationResult

    rows = [(1, 0, t, c) for _, t, c in trace] + [(2, -1, t, c) for _, t, c in trace2]
    rows.append((3, -1, tau, score))
    return EstimationResult(
        model=theta.to_model(delay=tau),
        j0=score,
        trace=tuple(rows),
        converged=True,
        iterations=len(trace) + len(trace2),
    )


# ---------------------------------------------------------------------------
# cost sweep
# ---------------------------------------------------------------------------


def sweep_cost(
    data: SampledDataset,
    cfg: ExperimentConfig,
    tau_grid: Sequence[float],
) -> Dict[str, np.ndarray]:
    """Per-filter normalized costs and their average over a delay grid, with
    the rational part re-estimated (warm-started) at every grid point."""
    from .delay_gn import Workspace
    from .redundancy import _fit_percent

    bank = cfg.bank()
    skip = default_skip_time(cfg.gn.tau_max, cfg.n, cfg.omega_svf)
    ws = Workspace(data, skip)
    grid = np.asarray(tau_grid, dtype=float)
    per_filter = np.full((len(bank), len(grid)), np.nan)
    theta = None
    for i, tau in enumerate(grid):
        try:
            theta = ws.theta_update(
                float(tau), theta, cfg.n, cfg.m, cfg.omega_svf, 1e-3, 8
            )
        except EstimationError:
            theta = None
            continue
        for k, L in enumerate(bank):
            try:
                per_filter[k, i] = _fit_percent(ws, theta, float(tau), L)
            except EstimationError:
                pass
    return {"tau": grid, "per_filter": per_filter, "j0": per_filter.mean(axis=0)}


def write_sweep_csv(path, sweep: Dict[str, np.ndarray]) -> None:
    per = sweep["per_filter"]
    with open(path, "w", encoding="utf-8") as f:
        cols = ",".join(f"J{k + 1}" for k in range(per.shape[0]))
        f.write(f"tau,{cols},J0\n")
        for i, tau in enumerate(sweep["tau"]):
            vals = ",".join(f"{per[k, i]:.10g}" for k in range(per.shape[0]))
            f.write(f"{tau:.10g},{vals},{sweep['j0'][i]:.10g}\n")


# ---------------------------------------------------------------------------
# Monte Carlo campaign
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    cell: str
    run: int
    seed: int
    tau0: float
    tau_hat: float
    theta_hat: Tuple[float, ...]
    eps_r: float
    j0: float
    wall_time: float
    converged: bool
    error: str = ""


@dataclass(frozen=True)
class CampaignReport:
    cells: Tuple[str, ...]
    percentages: Dict[str, float]
    records: Tuple[RunRecord, ...]

    def recompute_percentages(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for cell in self.cells:
            rec = [r for r in self.records if r.cell == cell]
            out[cell] = 100.0 * sum(r.eps_r < 1.0 for r in rec) / len(rec)
        return out


def _cell_label(samp: SamplingSpec, snr: Optional[float], delay) -> str:
    d = "random" if delay == "random" else f"{delay:g}s"
    return f"{samp.kind}|{_snr_label(snr)}|{d}"


def _run_one(args) -> RunRecord:
    (cfg, samp, snr, delay, cell_idx, run_idx, method) = args
    label = _cell_label(samp, snr, delay)
    seed = mix_seed(cfg.master_seed, cell_idx, run_idx)
    sched_seed = mix_seed(cfg.master_seed, cell_idx, run_idx, 1)
    noise_seed = mix_seed(cfg.master_seed, cell_idx, run_idx, 2)
    if delay == "random":
        lo, hi = cfg.random_delay_range
        tau0 = float(np.random.default_rng(mix_seed(cfg.master_seed, cell_idx, run_idx, 3)).uniform(lo, hi))
    else:
        tau0 = float(delay)
    t0 = time.perf_counter()
    try:
        data, _ = _dataset_for_cell(cfg, samp, snr, sched_seed, noise_seed)
        result = estimate_from_config(data, cfg, method, tau0)
        tau_hat = result.model.delay
        eps_r = abs(tau_hat - cfg.system.delay) / cfg.system.delay * 100.0
        theta_hat = tuple(
            float(v)
            for v in np.concatenate((result.model.den[1:], result.model.num))
        )
        return RunRecord(
            label, run_idx, seed, tau0, tau_hat, theta_hat, eps_r,
            result.j0, time.perf_counter() - t0, result.converged,
        )
    except Exception as exc:  # a failed run counts as non-converged
        return RunRecord(
            label, run_idx, seed, tau0, math.nan, (), math.inf, math.nan,
            time.perf_counter() - t0, False, error=str(exc)[:200],
        )


def run_campaign(
    cfg: ExperimentConfig,
    workers: int = 1,
    runs: Optional[int] = None,
    method: str = "redundant",
    progress: bool = False,
) -> CampaignReport:
    """Monte Carlo campaign over every (sampling, SNR, initial delay) cell."""
    n_runs = runs if runs is not None else cfg.runs
    jobs = []
    cells: List[str] = []
    cell_idx = 0
    for samp in cfg.samplings:
        for snr in cfg.snrs_db:
            for delay in cfg.initial_delays:
                cells.append(_cell_label(samp, snr, delay))
                for run_idx in range(n_runs):
                    jobs.append((cfg, samp, snr, delay, cell_idx, run_idx, method))
                cell_idx += 1
    if workers > 1:
        import multiprocessing as mp

        method_name = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        ctx = get_context(method_name)
        with ctx.Pool(processes=workers) as pool:
            records = pool.map(_run_one, jobs, chunksize=1)
    else:
        records = []
        for i, job in enumerate(jobs):
            records.append(_run_one(job))
            if progress:
                print(f"  run {i + 1}/{len(jobs)} done", flush=True)
    percentages = {}
    for cell in cells:
        rec = [r for r in records if r.cell == cell]
        percentages[cell] = 100.0 * sum(r.eps_r < 1.0 for r in rec) / len(rec)
    return CampaignReport(tuple(cells), percentages, tuple(records))


def write_report(report: CampaignReport, out_dir) -> List[Path]:
    """Machine (CSV) and aligned-text tables plus per-run records.

    The table files are deterministic for a fixed master seed; wall time is
    confined to the per-run records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_csv = out_dir / "report.csv"
    with open(table_csv, "w", encoding="utf-8") as f:
        f.write("sampling,snr,initial_delay,percent_converged\n")
        for cell in report.cells:
            samp, snr, delay = cell.split("|")
            f.write(f"{samp},{snr},{delay},{report.percentages[cell]:.10g}\n")
    table_txt = out_dir / "report.txt"
    with open(table_txt, "w", encoding="utf-8") as f:
        w = max(len(c) for c in report.cells)
        f.write(f"{'cell':<{w}}  converged\n")
        for cell in report.cells:
            f.write(f"{cell:<{w}}  {report.percentages[cell]:6.1f}%\n")
    runs_csv = out_dir / "runs.csv"
    with open(runs_csv, "w", encoding="utf-8") as f:
        f.write("cell,run,seed,tau0,tau_hat,eps_r,j0,converged,wall_time,theta_hat,error\n")
        for r in report.records:
            th = " ".join(f"{v:.12g}" for v in r.theta_hat)
            f.write(
                f"{r.cell},{r.run},{r.seed},{r.tau0:.12g},{r.tau_hat:.12g},"
                f"{r.eps_r:.12g},{r.j0:.12g},{int(r.converged)},"
                f"{r.wall_time:.3f},{th},{r.error}\n"
            )
    return [table_csv, table_txt, runs_csv]


def bank_report(cfg: ExperimentConfig) -> str:
    """Human-readable summary of the bank spacing and landscape analytics."""
    from .filters import (
        beta_lower_bound,
        convergence_radius,
        extrema_locations,
        min_filter_count,
    )

    bw = bandwidth(cfg.system)
    bank = cfg.bank()
    lines = [
        f"system bandwidth: {bw:.6g} rad/s",
        f"bank: {bank.n_f} Butterworth filters of order {bank.order}, "
        f"beta={bank.beta:g}",
        f"beta lower bound for guaranteed descent paths: {beta_lower_bound():.6f}",
    ]
    try:
        nf_needed = min_filter_count(bank.beta, 2)
        lines.append(f"filter count bound at i0=2: n_f >= {nf_needed}")
    except ModelError as exc:
        lines.append(f"filter count bound: not applicable ({exc})")
    lines.append("  k   cutoff rad/s   period s   convergence radius s   first extrema s")
    for k, wc in enumerate(bank.cutoffs):
        ext = extrema_locations(wc, 2)
        lines.append(
            f"  {k:<3d} {wc:12.5g}   {2 * math.pi / wc:8.4g}   "
            f"{convergence_radius(wc):18.5g}   "
            f"max@{ext[0][0]:.4g}, min@{ext[1][0]:.4g}"
        )
    return "\n".join(lines)
