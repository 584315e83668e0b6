"""Empirical distributions as first-class state.

Construction and online update of empirical distributions, CDF/quantile
evaluation, exact Wasserstein-1 distance between empirical measures, and
raw-moment feature vectors used by the surrogate regressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmpiricalDistribution",
    "FeatureVector",
    "empirical_quantile",
    "update_empirical",
    "wasserstein1",
    "w1_cdf_integral",
    "feature_vector",
    "samples_to_csv",
    "samples_from_csv",
]

# Slack for p*n sitting a hair above an integer due to binary rounding of p.
_QUANTILE_EPS = 1e-9


def empirical_quantile(sorted_values: np.ndarray, p: float) -> float:
    """Generalized inverse inf{z : F(z) >= p} of the empirical CDF.

    This is the single quantile convention used project-wide: the
    ceil(p*n)-th order statistic (1-based). `sorted_values` must already be
    sorted nondecreasing.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"quantile level p must be in (0, 1], got {p}")
    n = len(sorted_values)
    k = int(math.ceil(p * n - _QUANTILE_EPS))
    k = min(max(k, 1), n)
    return float(sorted_values[k - 1])


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """Sorted sample vector with multiset semantics (duplicates kept).

    CDF(z) = #{samples <= z} / count, right-continuous.
    """

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("samples must be a nonempty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        if np.any(np.diff(arr) < 0.0):
            raise ValueError("samples must be sorted nondecreasing")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_samples(cls, values) -> "EmpiricalDistribution":
        arr = np.asarray(values, dtype=float).ravel()
        return cls(np.sort(arr))

    @property
    def count(self) -> int:
        return int(self.samples.size)

    def cdf(self, z):
        """Right-continuous step CDF; accepts scalars or arrays."""
        idx = np.searchsorted(self.samples, z, side="right")
        out = idx / self.count
        if np.isscalar(z) or np.ndim(z) == 0:
            return float(out)
        return out

    def quantile(self, p: float) -> float:
        return empirical_quantile(self.samples, p)

    def moments(self, d: int) -> np.ndarray:
        """Raw moments (1/n) sum_i samples_i^k for k = 1..d.

        Accumulation runs left-to-right over the sorted samples so results
        are bit-reproducible.
        """
        if d < 1:
            raise ValueError(f"moment count d must be >= 1, got {d}")
        powers = self.samples[None, :] ** np.arange(1, d + 1)[:, None]
        sums = np.add.accumulate(powers, axis=1)[:, -1]
        return sums / self.count

    def std(self) -> float:
        """Population standard deviation of the sample (ddof=0)."""
        return float(self.samples.std())


def update_empirical(F: EmpiricalDistribution, z: float) -> EmpiricalDistribution:
    """One-step online update: insert a new observation, keeping order.

    The resulting CDF satisfies (n*F(w) + 1{z < w}) / (n+1) for all w.
    """
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"new observation must be finite, got {z}")
    idx = int(np.searchsorted(F.samples, z))
    return EmpiricalDistribution(np.insert(F.samples, idx, z))


def w1_cdf_integral(F: EmpiricalDistribution, G: EmpiricalDistribution) -> float:
    """Exact integral of |F.cdf - G.cdf| over the merged breakpoints.

    The CDF difference is piecewise constant between breakpoints, so the
    integral is a finite sum.
    """
    grid = np.sort(np.concatenate([F.samples, G.samples]))
    widths = np.diff(grid)
    diffs = np.abs(F.cdf(grid[:-1]) - G.cdf(grid[:-1]))
    return float(diffs @ widths)


def wasserstein1(F: EmpiricalDistribution, G: EmpiricalDistribution) -> float:
    """Wasserstein-1 distance between two empirical distributions.

    Equal-count pairs use the sorted-matching form (1/n) sum |x_(i) - y_(i)|;
    the general case integrates the CDF difference exactly.
    """
    if F.count == G.count:
        return float(np.abs(F.samples - G.samples).mean())
    return w1_cdf_integral(F, G)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Wealth plus the first d raw moments of the running distribution."""

    wealth: float
    moments: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.wealth], self.moments])


def feature_vector(wealth: float, dist: EmpiricalDistribution, d: int) -> FeatureVector:
    return FeatureVector(float(wealth), dist.moments(d))


def samples_to_csv(dist: EmpiricalDistribution, path) -> None:
    """One float per line (the CLI state-dump format)."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in dist.samples:
            fh.write(f"{float(v)!r}\n")


def samples_from_csv(path) -> EmpiricalDistribution:
    with open(path, "r", encoding="utf-8") as fh:
        values = [float(line) for line in fh if line.strip()]
    return EmpiricalDistribution.from_samples(values)
