"""Critical line/load screening, demand-response labeling and dispatch, and
policy evaluation against the failure index."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import PowerSystem
from .risk import BASE_BOUNDS, DEFAULT_ASR, LoadingBounds, sfi
from .scenarios import FaultScenario, run_scenario
from .sim import SimConfig

SHED_GRID = tuple(i / 100 for i in range(1, 11))
DEFAULT_CRITICAL = 30


@dataclass(frozen=True)
class LineScreen:
    line: int
    tis: int
    lambda_max: float
    error: str | None = None


@dataclass
class Screening:
    results: list
    critical_lines: list
    critical_loads: list
    empty: bool = False


def critical_loads_for(sys: PowerSystem, lines) -> list[int]:
    """Load buses at either terminal of the given lines."""
    terminals = set()
    for lid in lines:
        ln = sys.line(lid)
        terminals.update((ln.from_bus, ln.to_bus))
    return sorted(b for b in terminals if b in set(sys.load_buses))


def screen_critical(sys: PowerSystem, cfg: SimConfig | None = None, top: int = DEFAULT_CRITICAL,
                    duration: float = 0.4, k: float = 1.5, location: float = 50.0) -> Screening:
    """N-1 fault screening at maximum loading and duration, one run per line.

    Unstable lines are ranked by peak angle separation (ties by line id);
    the first ``top`` of them are critical.
    """
    cfg = cfg or SimConfig()
    results = []
    for ln in sys.lines:
        sc = FaultScenario(ln.id, location, duration, k, uid=ln.id)
        item = run_scenario(sys, sc, cfg)
        if item.error:
            results.append(LineScreen(ln.id, 0, float("nan"), item.error))
        else:
            results.append(LineScreen(ln.id, item.window.tis, item.window.lambda_max))
    unstable = sorted((r for r in results if r.tis == 1), key=lambda r: (-r.lambda_max, r.line))
    critical = sorted(r.line for r in unstable[:top])
    return Screening(results, critical, critical_loads_for(sys, critical), empty=not critical)


def label_dr_class(r_hat, asr: float = DEFAULT_ASR) -> int:
    """Class 1 (critical-load shedding) when the normalized resilience is at or below ASR."""
    value = getattr(r_hat, "r_hat", r_hat)
    return int(value <= asr)


def participation_target(r_hat: float, asr: float, tis: int) -> float:
    """Shed fraction used as the regressor's training target.

    Stable scenarios need none. Unstable ones get a fraction on the 1..10 %
    grid, larger the further the scenario sits from the ASR threshold on its
    side of it.
    """
    if not tis:
        return 0.0
    if r_hat <= asr:
        steps = math.ceil(10 * r_hat / asr - 1e-9)
    else:
        steps = math.ceil(100 * (1 - asr / r_hat) - 1e-9)
    return min(0.10, max(0.01, 0.01 * steps))


@dataclass
class CdrPolicy:
    critical_lines: list
    critical_loads: list
    load_mw: dict  # bus -> active base load (MW, k = 1)
    shed_fraction: float = 0.05
    asr: float = DEFAULT_ASR
    nearest_gen: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = self.shed_fraction * 100
        if not (0 <= self.shed_fraction <= 0.10 and abs(steps - round(steps)) < 1e-9):
            raise ValueError("shed fraction must lie on the 0..10 % grid in 1 % steps")

    @property
    def noncritical_loads(self) -> list[int]:
        crit = set(self.critical_loads)
        return sorted(b for b, p in self.load_mw.items() if b not in crit and p > 0)

    @classmethod
    def from_system(cls, sys: PowerSystem, critical_lines, shed_fraction=0.05, asr=DEFAULT_ASR):
        load_mw = {b.id: b.pd * sys.base_mva for b in sys.buses if b.pd > 0}
        return cls(sorted(critical_lines), critical_loads_for(sys, critical_lines), load_mw,
                   shed_fraction, asr, nearest_generators(sys))


def nearest_generators(sys: PowerSystem) -> dict[int, int]:
    """Generator id reached in the fewest line hops from each bus (ties: lowest id)."""
    adj = {b.id: [] for b in sys.buses}
    for ln in sys.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    gen_at = {g.bus: g.id for g in sorted(sys.generators, key=lambda g: g.id)}
    out = {}
    for b in adj:
        seen, q = {b}, deque([b])
        best = None
        while q and best is None:
            level = list(q)
            q.clear()
            hits = sorted(gen_at[u] for u in level if u in gen_at)
            if hits:
                best = hits[0]
                break
            for u in level:
                for v in sorted(adj[u]):
                    if v not in seen:
                        seen.add(v)
                        q.append(v)
        out[b] = best
    return out


@dataclass
class DrDispatch:
    uid: int
    label: int
    x1: int
    x2: int
    dr1: float
    dr2: float
    dr_effective: float
    affected_mw: float
    shed_mw: dict
    redistribution: dict

    @property
    def total_shed_mw(self) -> float:
        return float(sum(self.shed_mw.values()))


def dispatch_dr(record, policy: CdrPolicy, dr1: float | None = None, dr2: float | None = None,
                k: float = 1.0) -> DrDispatch:
    """Apply the shed fraction to critical loads (class 1) or noncritical loads (class 0)."""
    dr1 = policy.shed_fraction if dr1 is None else dr1
    dr2 = policy.shed_fraction if dr2 is None else dr2
    for v in (dr1, dr2):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"participation fraction {v} outside [0, 1]")
    lab = getattr(record, "dr_label", -1)
    label = lab if lab in (0, 1) else label_dr_class(record, policy.asr)
    x1, x2 = (1, 0) if label == 1 else (0, 1)
    frac = x1 * dr1 + x2 * dr2
    buses = policy.critical_loads if label == 1 else policy.noncritical_loads
    mw = {b: k * policy.load_mw.get(b, 0.0) for b in buses}
    affected = float(sum(mw.values()))
    shed = {b: frac * p for b, p in mw.items()} if frac > 0 else {}
    redistribution = {}
    if label == 1:
        for b, p in shed.items():
            g = policy.nearest_gen.get(b)
            if g is not None:
                redistribution[g] = redistribution.get(g, 0.0) + p
    return DrDispatch(getattr(record, "uid", 0), label, x1, x2, dr1, dr2, frac, affected, shed,
                      redistribution)


def aggregate_cdr(dispatches) -> float:
    dispatches = list(dispatches)
    if not dispatches:
        raise ValueError("no dispatches to aggregate")
    return float(np.mean([d.dr_effective for d in dispatches]))


@dataclass(frozen=True)
class PolicyPoint:
    shed_fraction: float
    alpha: float
    beta: float
    sfi: float


def evaluate_policy(asr: float = DEFAULT_ASR, bounds: LoadingBounds = BASE_BOUNDS,
                    fractions=(0.0,) + SHED_GRID) -> list[PolicyPoint]:
    """Failure index after scaling both loading bounds by (1 - s)."""
    out = []
    for s in fractions:
        b = bounds.scaled(1 - s)
        out.append(PolicyPoint(float(s), b.alpha, b.beta, sfi(asr, b)))
    return out
