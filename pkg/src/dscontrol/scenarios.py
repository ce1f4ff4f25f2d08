"""Fault scenario sampling, batch simulation, instability labels, resilience
metrics and the 270 x 250 feature window."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .grid import GridError, PowerSystem, scale_loading
from .sim import FEATURES, Disturbance, SimConfig, SimTrace, simulate

WINDOW_SAMPLES = 250
FEATURES_PER_GEN = 27
N_LINES = 46


@dataclass(frozen=True)
class Ranges:
    duration: tuple[float, float] = (0.06, 0.4)
    location: tuple[float, float] = (0.0, 100.0)
    loading: tuple[float, float] = (0.75, 1.5)
    n_lines: int = N_LINES

    def __post_init__(self):
        for lo, hi in (self.duration, self.location, self.loading):
            if not lo <= hi:
                raise ValueError("range lower bound exceeds upper bound")
        if self.duration[0] <= 0 or self.loading[0] <= 0 or self.n_lines < 1:
            raise ValueError("durations and loadings must be positive")


DEFAULT_RANGES = Ranges()


@dataclass(frozen=True)
class FaultScenario:
    line: int | None
    location: float
    duration: float
    k: float
    uid: int = 0
    seed: int | None = None
    t_start: float = 2.0

    def disturbance(self) -> Disturbance:
        return Disturbance(self.line, self.location, self.duration if self.line is not None else 0.0)


def sample_scenario(seed, ranges: Ranges = DEFAULT_RANGES, uid: int = 0,
                    line: int | None = None) -> FaultScenario:
    """Draw (line, x, tau, k) uniformly; the line may be pinned for stratification."""
    g = np.random.default_rng(seed)
    tau = g.uniform(*ranges.duration)
    x = g.uniform(*ranges.location)
    k = g.uniform(*ranges.loading)
    drawn = int(g.integers(1, ranges.n_lines + 1))
    return FaultScenario(line=drawn if line is None else line, location=float(x),
                         duration=float(tau), k=float(k), uid=uid,
                         seed=None if seed is None else int(seed) if np.isscalar(seed) else None)


def scenario_for(master: int, uid: int, ranges: Ranges = DEFAULT_RANGES,
                 stratified: bool = False) -> FaultScenario:
    """Scenario ``uid`` of a batch; stratified batches cycle through the lines."""
    seed = seeding.child_seed(master, "scenario", uid)
    line = 1 + uid % ranges.n_lines if stratified else None
    return replace(sample_scenario(seed, ranges, uid, line=line), seed=seed)


# --------------------------------------------------------------------------
# Labels and metrics


@dataclass(frozen=True)
class TisLabel:
    tis: int
    lambda_max: float  # deg
    boundary: bool = False


def label_tis(trace: SimTrace) -> TisLabel:
    """Out-of-step label from the largest rotor-angle separation (deg)."""
    return tis_from_angles(trace.delta_deg)


def tis_from_angles(delta_deg) -> TisLabel:
    d = np.asarray(delta_deg, dtype=float)
    lam = float(np.max(d.max(axis=1) - d.min(axis=1)))
    crit = (360.0 - lam) / (360.0 + lam)
    if crit == 0:
        return TisLabel(0, lam, boundary=True)
    return TisLabel(int(crit < 0), lam)


@dataclass
class ResilienceRecord:
    uid: int
    r: float  # integral of normalized load power over the fault window (pu s)
    r_hat: float  # k * tau
    tis: int = 0
    dr_label: int = -1


def resilience(trace: SimTrace, sc: FaultScenario) -> ResilienceRecord:
    t_end = sc.t_start + sc.duration
    r_hat = sc.k * sc.duration
    if sc.line is None or sc.duration <= 0:
        return ResilienceRecord(sc.uid, 0.0, sc.k * 0.0)
    sel = trace.fault_status.astype(bool)
    ts, ss = trace.time[sel], trace.s_load[sel]
    if ts.size == 0:
        return ResilienceRecord(sc.uid, 0.0, r_hat)
    # trapezoid over faulted samples, held flat to the exact clearance instant
    r = float(np.trapezoid(ss, ts)) + float(ss[-1]) * max(0.0, t_end - ts[-1])
    return ResilienceRecord(sc.uid, max(r, 0.0), r_hat)


def resilience_from_series(times, s_load, t_start, duration, k) -> ResilienceRecord:
    """Same quadrature for a bare S(t) series (used by tests and reports)."""
    times = np.asarray(times)
    sel = (times >= t_start - 1e-9) & (times <= t_start + duration + 1e-9)
    ts, ss = times[sel], np.asarray(s_load)[sel]
    r = float(np.trapezoid(ss, ts)) + float(ss[-1]) * max(0.0, t_start + duration - ts[-1])
    return ResilienceRecord(0, r, k * duration)


# --------------------------------------------------------------------------
# Feature window


@dataclass
class TabularWindow:
    matrix: np.ndarray  # (270, 250)
    prefault: int
    tis: int
    lambda_max: float
    r: float
    r_hat: float
    scenario: FaultScenario | None = None
    diverged: bool = False


def window_columns(n_samples: int, t_clear: float, period: float) -> np.ndarray:
    """Indices of the 250 samples strictly before clearance."""
    last = math.ceil(t_clear / period - 1e-6) - 1
    first = last - WINDOW_SAMPLES + 1
    if first < 0 or last >= n_samples:
        raise ValueError("trace does not cover the feature window")
    return np.arange(first, last + 1)


def build_matrix(primary: np.ndarray) -> np.ndarray:
    """Rows per generator: 9 measurements, their first differences, and the
    absolute angle gaps to the other generators. ``primary`` is
    (n_gen, 9, n_cols)."""
    ng, nf, nc = primary.shape
    delta = primary[:, FEATURES.index("delta"), :]
    blocks = []
    for i in range(ng):
        prim = primary[i]
        sec = np.zeros_like(prim)
        sec[:, 1:] = np.diff(prim, axis=1)
        others = [j for j in range(ng) if j != i]
        ter = np.abs(delta[i][None, :] - delta[others])
        blocks += [prim, sec, ter]
    return np.concatenate(blocks, axis=0)


def extract_window(trace: SimTrace, sc: FaultScenario, cfg: SimConfig | None = None,
                   ranges: Ranges = DEFAULT_RANGES) -> TabularWindow:
    cfg = cfg or SimConfig()
    if sc.line is not None:
        lo, hi = ranges.duration
        if not lo - 1e-12 <= sc.duration <= hi + 1e-12:
            raise ValueError(f"fault duration {sc.duration} outside [{lo}, {hi}] s")
    t_clear = sc.t_start + (sc.duration if sc.line is not None else 0.0)
    cols = window_columns(trace.time.size, t_clear, cfg.sample_period)
    mat = build_matrix(trace.primary()[:, :, cols])
    prefault = int(np.sum(trace.time[cols] < sc.t_start - 1e-9))
    lab = label_tis(trace)
    res = resilience(trace, sc)
    return TabularWindow(matrix=mat, prefault=prefault, tis=lab.tis, lambda_max=lab.lambda_max,
                         r=res.r, r_hat=res.r_hat, scenario=sc, diverged=trace.diverged)


# --------------------------------------------------------------------------
# Batches


@dataclass
class BatchItem:
    scenario: FaultScenario
    window: TabularWindow | None
    record: ResilienceRecord | None
    error: str | None = None
    trace: SimTrace | None = field(default=None, repr=False)


def run_scenario(sys: PowerSystem, sc: FaultScenario, cfg: SimConfig | None = None,
                 keep_trace: bool = False) -> BatchItem:
    cfg = cfg or SimConfig()
    try:
        sysk = scale_loading(sys, sc.k)
        trace = simulate(sysk, sc.disturbance(), cfg)
        win = extract_window(trace, sc, cfg)
        rec = ResilienceRecord(sc.uid, win.r, win.r_hat, win.tis)
    except (GridError, ValueError, np.linalg.LinAlgError) as exc:
        return BatchItem(sc, None, None, error=f"{type(exc).__name__}: {exc}")
    return BatchItem(sc, win, rec, trace=trace if keep_trace else None)


def _worker(args):
    sys, sc, cfg = args
    return run_scenario(sys, sc, cfg)


def run_batch(sys: PowerSystem, n: int, seed: int, cfg: SimConfig | None = None,
              ranges: Ranges = DEFAULT_RANGES, no_fault: bool = False,
              stratified: bool = False, workers: int | None = None) -> list[BatchItem]:
    """Simulate ``n`` scenarios; scenario v draws from child seed (seed, 'scenario', v)."""
    if n < 1:
        raise ValueError("scenario count must be at least 1")
    cfg = cfg or SimConfig()
    scs = []
    for v in range(n):
        sc = scenario_for(seed, v, ranges, stratified)
        if no_fault:
            sc = replace(sc, line=None, duration=0.0)
        scs.append(sc)
    workers = workers or int(os.environ.get("DSC_THREADS", "1") or 1)
    if workers > 1 and n > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            items = pool.map(_worker, [(sys, sc, cfg) for sc in scs])
    else:
        items = [run_scenario(sys, sc, cfg) for sc in scs]
    return sorted(items, key=lambda it: it.scenario.uid)
