"""Controlled wealth dynamics, the Gaussian-mixture return model, and utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .empirical import EmpiricalDistribution, update_empirical

__all__ = [
    "MarketParams",
    "AugmentedState",
    "MixtureModel",
    "wealth_step",
    "transition",
    "sample_mixture",
    "utility",
]

UTILITY_KINDS = ("exponential", "power")


@dataclass(frozen=True)
class MarketParams:
    """Per-step rate, risk aversion, horizon, and initial wealth."""

    r: float
    eta: float
    horizon: int
    x0: float
    utility_kind: str = "exponential"

    def __post_init__(self):
        if self.r <= -1.0:
            raise ValueError(f"interest rate must exceed -1, got {self.r}")
        if self.eta <= 0.0:
            raise ValueError(f"risk aversion eta must be positive, got {self.eta}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.x0 <= 0.0:
            raise ValueError(f"initial wealth must be positive, got {self.x0}")
        if self.utility_kind not in UTILITY_KINDS:
            raise ValueError(f"utility_kind must be one of {UTILITY_KINDS}")
        if self.utility_kind == "power" and self.eta <= 1.0:
            raise ValueError("power utility requires eta > 1")


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """Wealth paired with the running empirical distribution."""

    wealth: float
    dist: EmpiricalDistribution

    def __post_init__(self):
        if not (self.wealth > 0.0 and math.isfinite(self.wealth)):
            raise ValueError(f"wealth must be positive and finite, got {self.wealth}")


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Gaussian mixture of log-returns; weights strictly positive, sum to 1."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.stds, dtype=float)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, means and stds must be equal-length 1-D vectors")
        if np.any(w <= 0.0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {w.sum()}")
        if np.any(s <= 0.0):
            raise ValueError("mixture stds must be strictly positive")
        for name, arr in (("weights", w), ("means", m), ("stds", s)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        second = float(self.weights @ (self.stds**2 + self.means**2))
        return second - self.mean() ** 2

    def sample(self, rng: np.random.Generator, size=None):
        scalar = size is None
        n = 1 if scalar else int(np.prod(size))
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal(n) * self.stds[comp] + self.means[comp]
        if scalar:
            return float(z[0])
        return z.reshape(size)


def wealth_step(x: float, a: float, z, r: float):
    """Self-financing one-period update x * ((1-a)(1+r) + a e^z).

    Vectorized over z; stays positive for a in [0,1], r > -1.
    """
    if not (0.0 <= a <= 1.0):
        raise ValueError(f"action must lie in [0, 1], got {a}")
    return x * ((1.0 - a) * (1.0 + r) + a * np.exp(z))


def transition(t: int, y: AugmentedState, a: float, z: float,
               params: MarketParams) -> AugmentedState:
    """Augmented-state update: wealth step plus online distribution update.

    The dynamics are time-homogeneous; t is carried for stage-indexed callers.
    """
    return AugmentedState(
        wealth=float(wealth_step(y.wealth, a, z, params.r)),
        dist=update_empirical(y.dist, z),
    )


def sample_mixture(model: MixtureModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size=size)


def utility(x, eta: float, kind: str = "exponential"):
    """Terminal utility in maximization form; vectorized over x."""
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    xv = np.asarray(x, dtype=float)
    if kind == "exponential":
        out = (1.0 - np.exp(-eta * xv)) / eta
    elif kind == "power":
        if eta <= 1.0:
            raise ValueError("power utility requires eta > 1")
        out = (xv ** (1.0 - eta) - 1.0) / (1.0 - eta)
    else:
        raise ValueError(f"unknown utility kind {kind!r}")
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out
