"""Built-in oracle-backed checks behind the CLI `selftest` subcommand.

A fast subset of the property suite: every check recomputes its expectation
from an independent construction (closed forms, hand arithmetic, dense grids)
rather than from the code under test.
"""

from __future__ import annotations

import math

import numpy as np

from .ambiguity import simulate_bridge_batch
from .empirical import EmpiricalDistribution, update_empirical, wasserstein1
from .gp import GPFitConfig, fit, matern52
from .market import MarketParams, utility, wealth_step
from .solver import moreau_envelope, scalar_minimize, worst_case_value

__all__ = ["run_selftest"]


def _check_w1_metric(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        a = EmpiricalDistribution.from_samples(rng.normal(size=n))
        b = EmpiricalDistribution.from_samples(rng.normal(size=int(rng.integers(1, 9))))
        c = EmpiricalDistribution.from_samples(rng.normal(size=int(rng.integers(1, 9))))
        dab, dba = wasserstein1(a, b), wasserstein1(b, a)
        if dab < 0 or abs(dab - dba) > 1e-12:
            return False, "symmetry/nonnegativity failed"
        if dab > wasserstein1(a, c) + wasserstein1(c, b) + 1e-10:
            return False, "triangle inequality failed"
    same = EmpiricalDistribution.from_samples([0.3, -1.2, 0.3])
    if wasserstein1(same, EmpiricalDistribution.from_samples([-1.2, 0.3, 0.3])) != 0.0:
        return False, "identical multisets not at distance 0"
    return True, "metric axioms on 200 random triples"


def _check_contraction(rng):
    for _ in range(200):
        n = int(rng.integers(1, 12))
        f = EmpiricalDistribution.from_samples(rng.normal(size=n))
        g = EmpiricalDistribution.from_samples(rng.normal(size=n))
        z, w = rng.normal(size=2)
        lhs = wasserstein1(update_empirical(f, z), update_empirical(g, w))
        rhs = n / (n + 1) * wasserstein1(f, g) + abs(z - w) / (n + 1)
        if lhs > rhs + 1e-12:
            return False, f"contraction violated: {lhs} > {rhs}"
    return True, "update map contraction bound on 200 tuples"


def _check_quantiles(rng):
    d = EmpiricalDistribution.from_samples([1.0, 2.0, 3.0])
    ok = d.quantile(1.0) == 3.0 and d.quantile(0.34) == 2.0
    ok = ok and EmpiricalDistribution.from_samples([5.0]).quantile(0.5) == 5.0
    return ok, "generalized-inverse quantile hand cases"


def _check_update_recursion(rng):
    for _ in range(50):
        n = int(rng.integers(1, 10))
        f = EmpiricalDistribution.from_samples(rng.normal(size=n))
        z = float(rng.normal())
        g = update_empirical(f, z)
        for w in rng.normal(size=5):
            expect = (n * f.cdf(w) + (1.0 if z < w else 0.0)) / (n + 1)
            if abs(g.cdf(w) - expect) > 1e-12:
                return False, "CDF recursion identity failed"
    return True, "one-step CDF recursion identity on 50 updates"


def _check_bridge_moments(rng):
    b = simulate_bridge_batch(9, 20_000, rng)
    var_mid = float(b[:, 4].var())
    if abs(var_mid - 0.25) > 0.02:
        return False, f"Var[B(1/2)]={var_mid}, expected 0.25"
    mean_max = float(np.abs(b.mean(axis=0)).max())
    if mean_max > 0.02:
        return False, f"bridge mean off zero by {mean_max}"
    return True, "bridge marginal variance and mean (20k paths)"


def _check_gp(rng):
    ref = (1.0 + math.sqrt(5) + 5.0 / 3.0) * math.exp(-math.sqrt(5))
    if abs(matern52([0.0], [1.0], [1.0], 1.0) - ref) > 1e-12:
        return False, "Matern-5/2 closed form mismatch"
    x = np.linspace(0, 1, 8)[:, None]
    y = np.sin(3 * x[:, 0])
    surr = fit(x, y, GPFitConfig(lengthscales=np.array([0.5]),
                                 signal_variance=1.0, nugget=0.0,
                                 normalize_inputs=False, normalize_targets=False))
    err = max(abs(surr.predict(x[i]) - y[i]) for i in range(8))
    if err > 1e-6:
        return False, f"GP interpolation error {err}"
    return True, "kernel value and zero-nugget interpolation"


def _check_dual_degenerate(rng):
    params = MarketParams(r=0.002, eta=0.01, horizon=1, x0=100.0)
    for _ in range(20):
        atoms = rng.normal(0.01, 0.1, size=int(rng.integers(3, 12)))
        a = float(rng.uniform())
        value_fn = lambda z: utility(wealth_step(100.0, a, z, params.r), params.eta)
        val, _ = worst_case_value(value_fn, atoms, 0.0)
        direct = float(np.mean([value_fn(z) for z in atoms]))
        if abs(val - direct) > 1e-10:
            return False, "zero-radius dual != empirical mean"
    return True, "zero-radius worst case equals plain mean (20 cases)"


def _check_envelope(rng):
    env = moreau_envelope(lambda z: z, 2.0, 0.0, (-1.0, 1.0))
    if abs(env - 0.0) > 1e-6:
        return False, f"envelope hand case gave {env}"
    x, v = scalar_minimize(lambda t: (t - 2.0) ** 2, 0.0, 5.0, 1e-6)
    if abs(x - 2.0) > 1e-4:
        return False, f"quadratic argmin {x}"
    return True, "Moreau envelope and scalar search hand cases"


_CHECKS = [
    ("w1-metric-axioms", _check_w1_metric),
    ("update-contraction", _check_contraction),
    ("quantile-convention", _check_quantiles),
    ("update-recursion", _check_update_recursion),
    ("bridge-moments", _check_bridge_moments),
    ("gp-kernel-interpolation", _check_gp),
    ("dual-degenerate-ball", _check_dual_degenerate),
    ("envelope-and-search", _check_envelope),
]


def run_selftest(verbose: bool = True) -> int:
    rng = np.random.default_rng(20240817)
    failures = 0
    for name, check in _CHECKS:
        ok, detail = check(rng)
        if verbose:
            print(f"[selftest] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    if verbose:
        print(f"[selftest] {len(_CHECKS) - failures}/{len(_CHECKS)} checks passed")
    return 0 if failures == 0 else 1
