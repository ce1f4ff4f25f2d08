"""System Failure Index: density of the product k * tau of two independent
uniforms, evaluated at the average system resilience."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeding

DEFAULT_ASR = 0.48


@dataclass(frozen=True)
class LoadingBounds:
    alpha: float = 0.75
    beta: float = 1.5
    tau_min: float = 0.06
    tau_max: float = 0.4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.beta > self.alpha:
            raise ValueError("beta must exceed alpha")
        if not 0 < self.tau_min < self.tau_max:
            raise ValueError("need 0 < tau_min < tau_max")

    def scaled(self, factor: float) -> "LoadingBounds":
        return LoadingBounds(self.alpha * factor, self.beta * factor, self.tau_min, self.tau_max)

    @property
    def support(self) -> tuple[float, float]:
        return self.alpha * self.tau_min, self.beta * self.tau_max


BASE_BOUNDS = LoadingBounds()


@dataclass(frozen=True)
class RiskProfile:
    asr: float
    sfi: float
    bounds: LoadingBounds
    n_samples: int = 0


def product_density(r: float, bounds: LoadingBounds = BASE_BOUNDS) -> float:
    """Closed-form density of k * tau at r for k ~ U[alpha, beta], tau ~ U[tau_min, tau_max].

    Integrates 1/tau over the tau interval where r/tau stays inside [alpha, beta].
    """
    if not r > 0:
        raise ValueError("r must be positive")
    b = bounds
    hi = min(b.tau_max, r / b.alpha)
    lo = max(b.tau_min, r / b.beta)
    if hi <= lo:
        return 0.0
    return math.log(hi / lo) / ((b.tau_max - b.tau_min) * (b.beta - b.alpha))


def sfi(asr: float, bounds: LoadingBounds = BASE_BOUNDS) -> float:
    return product_density(asr, bounds)


def risk_profile(asr: float, bounds: LoadingBounds = BASE_BOUNDS, n_samples: int = 0) -> RiskProfile:
    return RiskProfile(asr, sfi(asr, bounds), bounds, n_samples)


def estimate_asr(records) -> tuple[float, int]:
    """Mean normalized resilience over records (objects with ``r_hat`` or bare numbers)."""
    vals = [getattr(r, "r_hat", r) for r in records]
    if not vals:
        raise ValueError("cannot estimate ASR from an empty record set")
    return float(np.mean(np.asarray(vals, dtype=float))), len(vals)


def sample_r_hat(n: int, seed: int, ranges=None, n_lines: int = 46) -> np.ndarray:
    """k * tau for ``n`` scenarios allocated equally across lines.

    The normalized resilience does not depend on the line or location, so
    no simulation is needed; each line stratum draws from its own stream.
    """
    from .scenarios import DEFAULT_RANGES

    ranges = ranges or DEFAULT_RANGES
    counts = np.full(n_lines, n // n_lines)
    counts[: n % n_lines] += 1
    parts = []
    for line, c in enumerate(counts, start=1):
        g = seeding.rng(seed, "mc", line)
        parts.append(g.uniform(*ranges.loading, c) * g.uniform(*ranges.duration, c))
    return np.concatenate(parts)


@dataclass(frozen=True)
class DensityEstimate:
    r: float
    density: float
    stderr: float
    n_samples: int


def mc_density_estimate(n_samples: int, r: float, bounds: LoadingBounds = BASE_BOUNDS,
                        seed: int = 0, bin_width: float = 0.01,
                        shard: int = 1 << 18) -> DensityEstimate:
    """Histogram estimate of the k * tau density in a bin centred on r."""
    if n_samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    lo, hi = r - bin_width / 2, r + bin_width / 2
    hits = 0
    done = 0
    i = 0
    while done < n_samples:
        m = min(shard, n_samples - done)
        g = seeding.rng(seed, "mc", 1000, i)
        prod = g.uniform(bounds.alpha, bounds.beta, m) * g.uniform(bounds.tau_min, bounds.tau_max, m)
        hits += int(np.count_nonzero((prod >= lo) & (prod < hi)))
        done += m
        i += 1
    p = hits / n_samples
    return DensityEstimate(r, p / bin_width, math.sqrt(p * (1 - p) / n_samples) / bin_width, n_samples)


def shed_curve(asr: float = DEFAULT_ASR, fractions=None, bounds: LoadingBounds = BASE_BOUNDS):
    """SFI when shedding fraction s scales both loading bounds by (1 - s)."""
    if fractions is None:
        fractions = [i / 100 for i in range(11)]
    return [(s, bounds.scaled(1 - s), sfi(asr, bounds.scaled(1 - s))) for s in fractions]
