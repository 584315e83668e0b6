"""Forward Monte Carlo policy evaluation and the TR/SR baseline solvers.

TR re-solves with a zero-radius ball around a fixed large-sample stand-in for
the true model; SR freezes the time-0 ball (center and radius) for all stages.
Both regress on the wealth feature only, so their policies ignore the evolving
moment features by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ambiguity import AmbiguityRadius, radius as ball_radius
from .empirical import EmpiricalDistribution, empirical_quantile
from .gp import GPSurrogate
from .market import MarketParams, MixtureModel, utility
from .solver import SolverConfig, StagePolicy, solve

__all__ = [
    "EvaluationReport",
    "report_stats",
    "forward_evaluate",
    "solve_tr",
    "solve_sr",
]


def report_stats(utilities) -> dict:
    """Mean, unbiased variance, 20%/90% empirical quantiles, min, max.

    Statistics are computed on the sorted vector, so they are exactly
    permutation invariant.
    """
    arr = np.asarray(utilities, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("utilities must be nonempty")
    s = np.sort(arr)
    return {
        "mean": float(s.mean()),
        "variance": float(s.var(ddof=1)) if s.size > 1 else 0.0,
        "q20": empirical_quantile(s, 0.2),
        "q90": empirical_quantile(s, 0.9),
        "min": float(s[0]),
        "max": float(s[-1]),
    }


@dataclass(eq=False)
class EvaluationReport:
    """Terminal-utility sample with its summary statistics."""

    method: str
    n_paths: int
    terminal_utilities: np.ndarray
    mean: float
    variance: float
    q20: float
    q90: float
    minimum: float
    maximum: float

    @classmethod
    def from_utilities(cls, method: str, utilities) -> "EvaluationReport":
        arr = np.asarray(utilities, dtype=float).ravel()
        stats = report_stats(arr)
        return cls(
            method=method, n_paths=int(arr.size), terminal_utilities=arr,
            mean=stats["mean"], variance=stats["variance"],
            q20=stats["q20"], q90=stats["q90"],
            minimum=stats["min"], maximum=stats["max"],
        )


def _policy_dim(surrogate) -> int:
    if isinstance(surrogate, GPSurrogate):
        return surrogate.train_inputs.shape[1]
    return 0


def forward_evaluate(policies: list[StagePolicy], params: MarketParams,
                     mixture: MixtureModel, initial_dist: EmpiricalDistribution,
                     n_paths: int, rng: np.random.Generator, *,
                     method: str = "AR") -> EvaluationReport:
    """Out-of-sample evaluation on n_paths forward paths from the shared start.

    The full noise matrix is drawn up front from rng, so results depend only
    on the rng state, never on execution order; methods evaluated with the
    same seed therefore see identical noise (common random numbers). Policy
    predictions are clamped to [0, 1].
    """
    T = params.horizon
    if len(policies) != T:
        raise ValueError(f"need {T} stage policies, got {len(policies)}")
    for t, pol in enumerate(policies):
        if pol.t != t:
            raise ValueError(f"policies out of order at index {t} (got t={pol.t})")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")

    zs = mixture.sample(rng, size=(n_paths, T))
    d_track = max((_policy_dim(p.policy_surrogate) - 1 for p in policies), default=0)
    d_track = max(d_track, 0)

    x = np.full(n_paths, params.x0, dtype=float)
    if d_track > 0:
        ks = np.arange(1, d_track + 1)
        moments = np.tile(initial_dist.moments(d_track), (n_paths, 1))
    count = initial_dist.count

    for t in range(T):
        surr = policies[t].policy_surrogate
        dim = _policy_dim(surr)
        if dim == 0:
            a = np.full(n_paths, float(surr.predict(np.zeros(1))))
        elif dim == 1:
            a = surr.predict(x[:, None])
        else:
            a = surr.predict(np.hstack([x[:, None], moments[:, : dim - 1]]))
        a = np.clip(a, 0.0, 1.0)
        z = zs[:, t]
        x = x * ((1.0 - a) * (1.0 + params.r) + a * np.exp(z))
        if d_track > 0:
            moments = (count * moments + z[:, None] ** ks[None, :]) / (count + 1)
        count += 1

    utils = utility(x, params.eta, params.utility_kind)
    return EvaluationReport.from_utilities(method, utils)


def solve_tr(params: MarketParams, config: SolverConfig, mixture: MixtureModel,
             rng: np.random.Generator, *, tr_sample_size: int = 10_000,
             threads: int = 1, diag_dir=None) -> list[StagePolicy]:
    """True-model baseline: zero-radius ball around a fixed F* sample.

    The empirical state component is frozen at the sample (learning disabled)
    and the surrogates regress on wealth only.
    """
    if tr_sample_size < 2:
        raise ValueError("tr_sample_size must be at least 2")
    sample_rng, solve_rng = rng.spawn(2)
    f_star = EmpiricalDistribution.from_samples(
        mixture.sample(sample_rng, size=tr_sample_size))
    return solve(
        params, config, mixture, f_star, solve_rng,
        radius_mode="zero", feature_mode="wealth", update_dist=False,
        threads=threads, diag_dir=diag_dir,
    )


def solve_sr(params: MarketParams, config: SolverConfig, mixture: MixtureModel,
             initial_dist: EmpiricalDistribution, rng: np.random.Generator, *,
             q0_pin: float | None = None, threads: int = 1,
             diag_dir=None) -> list[StagePolicy]:
    """Static-robust baseline: the time-0 ball frozen for every stage.

    Center (the historical empirical distribution) and radius are both fixed
    at their t=0 values; no learning, no shrinkage.
    """
    bridge_rng, solve_rng = rng.spawn(2)
    t0 = initial_dist.count
    if q0_pin is not None:
        frozen = AmbiguityRadius(config.alpha, float(q0_pin),
                                 float(q0_pin) / math.sqrt(t0),
                                 config.n_bridge_sims, t0)
    else:
        frozen = ball_radius(initial_dist, config.alpha, config.n_bridge_sims,
                             rng=bridge_rng)
    return solve(
        params, config, mixture, initial_dist, solve_rng,
        radius_mode="frozen", frozen_radius=frozen,
        feature_mode="wealth", update_dist=False,
        threads=threads, diag_dir=diag_dir,
    )
