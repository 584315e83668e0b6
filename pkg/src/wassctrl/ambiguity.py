"""Wasserstein-ball radius calibration via the Brownian-bridge statistic.

The per-step ball radius is the (1-alpha)-quantile of a simulated bridge
functional of the current order-statistic gaps, scaled by 1/sqrt(sample size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .empirical import EmpiricalDistribution, empirical_quantile

__all__ = [
    "AmbiguityRadius",
    "bridge_functional",
    "simulate_bridge",
    "simulate_bridge_batch",
    "radius",
]


@dataclass(frozen=True)
class AmbiguityRadius:
    """Confidence level, simulated quantile, and the resulting ball radius."""

    alpha: float
    quantile_value: float
    radius: float
    n_bridge_sims: int
    t0_plus_t: int

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.quantile_value < 0.0:
            raise ValueError("quantile_value must be nonnegative")
        if self.n_bridge_sims < 1 or self.t0_plus_t < 1:
            raise ValueError("n_bridge_sims and t0_plus_t must be positive")
        expected = self.quantile_value / math.sqrt(self.t0_plus_t)
        if abs(self.radius - expected) > 1e-12 * max(1.0, expected):
            raise ValueError(
                f"radius {self.radius} != quantile/sqrt(n) = {expected}"
            )


def bridge_functional(F: EmpiricalDistribution, bridge_values) -> float:
    """Sum of |B(i/n)| times the i-th order-statistic gap, i = 1..n-1."""
    bv = np.asarray(bridge_values, dtype=float)
    if bv.ndim != 1 or bv.size != F.count - 1:
        raise ValueError(
            f"expected {F.count - 1} bridge values for {F.count} samples, got {bv.size}"
        )
    gaps = np.diff(F.samples)
    return float(np.abs(bv) @ gaps)


def simulate_bridge_batch(n_points: int, n_sims: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Brownian bridge values B(i/(n_points+1)), i = 1..n_points, per row.

    Realized as B(s) = W(s) - s W(1) with W built from i.i.d. Gaussian
    increments of variance 1/(n_points+1).
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    if n_sims < 1:
        raise ValueError(f"n_sims must be >= 1, got {n_sims}")
    m = n_points + 1
    incr = rng.standard_normal((n_sims, m)) * math.sqrt(1.0 / m)
    w = np.cumsum(incr, axis=1)
    s = np.arange(1, m + 1) / m
    b = w - s[None, :] * w[:, -1:]
    return b[:, :n_points]


def simulate_bridge(n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Single bridge path on the interior grid i/(n_points+1)."""
    return simulate_bridge_batch(n_points, 1, rng)[0]


def radius(F: EmpiricalDistribution, alpha: float, n_bridge_sims: int,
           rng: np.random.Generator | None = None,
           bridge_values: np.ndarray | None = None) -> AmbiguityRadius:
    """Simulated (1-alpha)-quantile radius of the W1 confidence ball.

    Pass `bridge_values` (an (n_sims, count-1) matrix) to reuse one batch of
    bridge draws across states — the common-random-numbers scheme; otherwise
    fresh paths are drawn from `rng`.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if F.count < 2:
        raise ValueError("need at least 2 samples to form order-statistic gaps")
    if n_bridge_sims < 1:
        raise ValueError(f"n_bridge_sims must be >= 1, got {n_bridge_sims}")
    if bridge_values is None:
        if rng is None:
            raise ValueError("provide either rng or precomputed bridge_values")
        bridge_values = simulate_bridge_batch(F.count - 1, n_bridge_sims, rng)
    bv = np.asarray(bridge_values, dtype=float)
    if bv.shape != (n_bridge_sims, F.count - 1):
        raise ValueError(
            f"bridge_values must have shape {(n_bridge_sims, F.count - 1)}, got {bv.shape}"
        )
    gaps = np.diff(F.samples)
    h = np.abs(bv) @ gaps
    q = empirical_quantile(np.sort(h), 1.0 - alpha)
    return AmbiguityRadius(
        alpha=alpha,
        quantile_value=q,
        radius=q / math.sqrt(F.count),
        n_bridge_sims=n_bridge_sims,
        t0_plus_t=F.count,
    )
