"""Backward adaptive-robust Bellman recursion.

Design-path generation, the scalar dual reformulation of the worst-case
expectation over a W1 ball (a concave maximization over the transport
multiplier, with a Moreau-type inner envelope), bounded action search, and
per-stage surrogate training.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar
from scipy.spatial.distance import cdist

from .ambiguity import AmbiguityRadius, radius as ball_radius, simulate_bridge_batch
from .empirical import EmpiricalDistribution
from .gp import ConstantSurrogate, GPFitConfig, GPSurrogate, fit as gp_fit
from .market import AugmentedState, MarketParams, MixtureModel, transition, utility, wealth_step

__all__ = [
    "ScalarSearchError",
    "SolverConfig",
    "StagePolicy",
    "scalar_minimize",
    "moreau_envelope",
    "worst_case_value",
    "inner_robust_value",
    "compose_value_fn",
    "generate_design_points",
    "bellman_step",
    "solve",
]

logger = logging.getLogger(__name__)


class ScalarSearchError(RuntimeError):
    """Non-finite objective value during a bounded scalar search."""

    def __init__(self, abscissa: float, value: float):
        super().__init__(f"objective returned non-finite value {value} at x={abscissa}")
        self.abscissa = abscissa


def scalar_minimize(f, lo: float, hi: float, tol: float = 1e-4,
                    presample: int = 0) -> tuple[float, float]:
    """Bounded golden-section/parabolic minimization on [lo, hi].

    The result never exceeds min(f(lo), f(hi), f(midpoint)); an optional
    deterministic presample grid narrows the search bracket first, which
    guards against multimodal objectives. Returns (argmin, min value).
    """
    if not (lo < hi):
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    evals: list[tuple[float, float]] = []

    def fe(x):
        x = float(x)
        v = float(f(x))
        if not math.isfinite(v):
            raise ScalarSearchError(x, v)
        evals.append((v, x))
        return v

    for x in (lo, hi, 0.5 * (lo + hi)):
        fe(x)
    blo, bhi = lo, hi
    if presample >= 4:
        grid = np.linspace(lo, hi, presample)
        vals = [fe(x) for x in grid]
        j = int(np.argmin(vals))
        blo = float(grid[max(j - 1, 0)])
        bhi = float(grid[min(j + 1, presample - 1)])
    minimize_scalar(fe, bounds=(blo, bhi), method="bounded",
                    options={"xatol": tol})
    best_v, best_x = min(evals)
    return best_x, best_v


def moreau_envelope(value_fn, gamma: float, z_center: float,
                    bracket: tuple[float, float], tol: float = 1e-4,
                    presample: int = 16) -> float:
    """inf over z in the bracket of value_fn(z) + gamma*|z - z_center|.

    The objective is non-smooth at z_center, so the search runs separately on
    [z_lo, z_center] and [z_center, z_hi] and keeps the smaller minimum.
    """
    if gamma < 0.0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    z_lo, z_hi = float(bracket[0]), float(bracket[1])
    if not (math.isfinite(z_lo) and math.isfinite(z_hi) and z_lo < z_hi):
        raise ValueError(f"bracket must be a finite interval, got {bracket}")

    def obj(z):
        return value_fn(z) + gamma * abs(z - z_center)

    zc = min(max(z_center, z_lo), z_hi)
    best = math.inf
    for a, b in ((z_lo, zc), (zc, z_hi)):
        if b - a <= 1e-14 * max(1.0, abs(a)):
            v = float(obj(a))
            if not math.isfinite(v):
                raise ScalarSearchError(a, v)
            best = min(best, v)
        else:
            best = min(best, scalar_minimize(obj, a, b, tol, presample)[1])
    return best


def _lipschitz_estimate(values: np.ndarray, grid: np.ndarray) -> float:
    dz = np.diff(grid)
    keep = dz > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(np.diff(values))[keep] / dz[keep]))


# Hot inner kernels, jitted. Loops run in fixed order so results are
# bit-reproducible and independent of worker count.

@njit(cache=True)
def _dual_objective(values, dist_jk, g, radius_value):
    n, k = dist_jk.shape
    acc = 0.0
    for j in range(n):
        m = values[0] + g * dist_jk[j, 0]
        for i in range(1, k):
            v = values[i] + g * dist_jk[j, i]
            if v < m:
                m = v
        acc += m
    return acc / n - g * radius_value


@njit(cache=True)
def _dual_golden(values, dist_jk, radius_value, cap, tol):
    """Golden-section maximization of the concave dual over [0, cap]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, cap
    fa = _dual_objective(values, dist_jk, a, radius_value)
    fb = _dual_objective(values, dist_jk, b, radius_value)
    if fa >= fb:
        best_g, best_d = a, fa
    else:
        best_g, best_d = b, fb
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _dual_objective(values, dist_jk, c, radius_value)
    fd = _dual_objective(values, dist_jk, d, radius_value)
    if fc > best_d:
        best_g, best_d = c, fc
    if fd > best_d:
        best_g, best_d = d, fd
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _dual_objective(values, dist_jk, c, radius_value)
            if fc > best_d:
                best_g, best_d = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _dual_objective(values, dist_jk, d, radius_value)
            if fd > best_d:
                best_g, best_d = d, fd
    return best_g, best_d


@njit(cache=True)
def _kernel_predict(xq_scaled, distm2, train_x_scaled, w_eff, t_mean):
    """Matérn-5/2 mean prediction over a query grid; moment-feature part of
    the squared distance is precomputed in distm2."""
    k = xq_scaled.shape[0]
    n = train_x_scaled.shape[0]
    out = np.empty(k)
    for a in range(k):
        acc = 0.0
        xa = xq_scaled[a]
        for i in range(n):
            dx = xa - train_x_scaled[i]
            tt = 2.23606797749979 * math.sqrt(distm2[a, i] + dx * dx)
            acc += (1.0 + tt + tt * tt / 3.0) * math.exp(-tt) * w_eff[i]
        out[a] = t_mean + acc
    return out


@njit(cache=True)
def _kernel_predict_1d(xq_scaled, train_x_scaled, w_eff, t_mean):
    k = xq_scaled.shape[0]
    n = train_x_scaled.shape[0]
    out = np.empty(k)
    for a in range(k):
        acc = 0.0
        xa = xq_scaled[a]
        for i in range(n):
            dx = xa - train_x_scaled[i]
            if dx < 0.0:
                dx = -dx
            tt = 2.23606797749979 * dx
            acc += (1.0 + tt + tt * tt / 3.0) * math.exp(-tt) * w_eff[i]
        out[a] = t_mean + acc
    return out


def _dual_on_grid(values: np.ndarray, dist_jk: np.ndarray, radius_value: float,
                  gamma_cap: float, tol: float) -> tuple[float, float, bool]:
    """sup over gamma in [0, cap] of mean_j min_k (V_k + gamma d_jk) - gamma r."""
    if gamma_cap <= tol:
        return float(values.min()), 0.0, False
    g_star, d_star = _dual_golden(np.ascontiguousarray(values),
                                  np.ascontiguousarray(dist_jk),
                                  radius_value, gamma_cap, tol)
    cap_hit = (gamma_cap - g_star) <= 2.0 * tol
    return float(d_star), float(g_star), cap_hit


def _default_bracket(atoms: np.ndarray, spread: float) -> tuple[float, float]:
    sd = float(atoms.std())
    lo = float(atoms[0]) - spread * sd
    hi = float(atoms[-1]) + spread * sd
    if lo >= hi:
        lo -= 1e-9
        hi += 1e-9
    return lo, hi


def worst_case_value(value_fn, atoms, radius_value: float, *, tol: float = 1e-4,
                     gamma_max: float | None = None,
                     bracket: tuple[float, float] | None = None,
                     bracket_spread: float = 3.0,
                     envelope_grid: np.ndarray | None = None,
                     envelope_presample: int = 16,
                     log_cap_hit: bool = True) -> tuple[float, float]:
    """Worst-case expectation of value_fn over the W1 ball around the atoms.

    Solved through the scalar dual: sup over gamma >= 0 of the averaged Moreau
    envelope minus gamma*radius. The dual objective is concave in gamma, so
    the bounded search is global up to tolerance. With radius 0 the supremum
    is the plain empirical mean (the gamma -> infinity limit), returned
    exactly. The envelope is evaluated either by split bounded scalar searches
    or, when `envelope_grid` is given, by joint minimization over that
    explicit candidate grid (always augmented with the atoms).
    """
    atoms = np.sort(np.asarray(atoms, dtype=float).ravel())
    if atoms.size == 0:
        raise ValueError("need at least one atom")
    if radius_value < 0.0:
        raise ValueError(f"radius must be nonnegative, got {radius_value}")
    if radius_value == 0.0:
        vals = np.array([float(value_fn(z)) for z in atoms])
        return float(vals.mean()), math.inf

    if bracket is None:
        bracket = _default_bracket(atoms, bracket_spread)

    if envelope_grid is not None:
        grid = np.unique(np.concatenate([np.asarray(envelope_grid, dtype=float).ravel(), atoms]))
        values = np.array([float(value_fn(z)) for z in grid])
        if not np.all(np.isfinite(values)):
            bad = int(np.argmax(~np.isfinite(values)))
            raise ScalarSearchError(float(grid[bad]), float(values[bad]))
        cap = gamma_max if gamma_max is not None else 10.0 * _lipschitz_estimate(values, grid)
        dist_jk = np.abs(atoms[:, None] - grid[None, :])
        value, g_star, cap_hit = _dual_on_grid(values, dist_jk, radius_value, cap, tol)
        if cap_hit and log_cap_hit:
            logger.warning("dual multiplier hit the cap gamma_max=%g", cap)
        return value, g_star

    if gamma_max is None:
        coarse = np.linspace(bracket[0], bracket[1], 33)
        cvals = np.array([float(value_fn(z)) for z in coarse])
        gamma_max = 10.0 * _lipschitz_estimate(cvals, coarse)
    if gamma_max <= tol:
        vals = np.array([float(value_fn(z)) for z in atoms])
        return float(vals.mean()), 0.0

    def neg_dual(g):
        envs = [moreau_envelope(value_fn, g, z, bracket, tol, envelope_presample)
                for z in atoms]
        return g * radius_value - float(np.mean(envs))

    g_star, nd = scalar_minimize(neg_dual, 0.0, gamma_max, tol)
    if (gamma_max - g_star) <= 2.0 * tol and log_cap_hit:
        logger.warning("dual multiplier hit the cap gamma_max=%g", gamma_max)
    return -nd, g_star


def compose_value_fn(V_next, y: AugmentedState, a: float, params: MarketParams):
    """Next-stage value as a scalar function of the noise realization z."""
    x = y.wealth
    if V_next is None:
        return lambda z: utility(wealth_step(x, a, z, params.r), params.eta,
                                 params.utility_kind)
    if isinstance(V_next, ConstantSurrogate):
        return lambda z: V_next.value
    dim = V_next.train_inputs.shape[1]
    if dim == 1:
        return lambda z: V_next.predict(np.array([wealth_step(x, a, z, params.r)]))
    d = dim - 1
    n = y.dist.count
    m = y.dist.moments(d)
    ks = np.arange(1, d + 1)

    def fn(z):
        x1 = wealth_step(x, a, z, params.r)
        m1 = (n * m + z ** ks) / (n + 1)
        return V_next.predict(np.concatenate([[x1], m1]))

    return fn


@dataclass(frozen=True)
class SolverConfig:
    """Design-point counts, feature dimension, ball settings, and search knobs."""

    n_design_points: int = 1000
    n_moments: int = 4
    alpha: float = 0.1
    n_bridge_sims: int = 1000
    gamma_max: float | None = None       # None: 10x empirical Lipschitz per instance
    z_bracket_spread: float = 3.0
    tol: float = 1e-4
    n_z_grid: int = 64
    bridge_crn: bool = True
    interp_threshold: int = 512
    gp: GPFitConfig = field(default_factory=GPFitConfig)

    def __post_init__(self):
        if self.n_design_points < 1 or self.n_moments < 1 or self.n_bridge_sims < 1:
            raise ValueError("counts must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma_max is not None and self.gamma_max <= 0.0:
            raise ValueError("gamma_max must be positive when given")
        if self.z_bracket_spread <= 0.0 or self.tol <= 0.0:
            raise ValueError("z_bracket_spread and tol must be positive")
        if self.n_z_grid < 8:
            raise ValueError("n_z_grid must be at least 8")


def inner_robust_value(V_next, t: int, y: AugmentedState, a: float, radius,
                       params: MarketParams, config: SolverConfig, *,
                       envelope_grid: np.ndarray | None = None,
                       use_envelope_grid: bool = True) -> tuple[float, float]:
    """Worst-case next-stage value at state y and action a over the W1 ball.

    `radius` is an AmbiguityRadius or a plain nonnegative float. By default
    the envelope is minimized over the solver's collocation grid (uniform
    points plus the atoms); pass `use_envelope_grid=False` for the
    scalar-search envelope.
    """
    r_val = radius.radius if isinstance(radius, AmbiguityRadius) else float(radius)
    value_fn = compose_value_fn(V_next, y, a, params)
    atoms = y.dist.samples
    bracket = _default_bracket(atoms, config.z_bracket_spread)
    if envelope_grid is None and use_envelope_grid:
        envelope_grid = np.linspace(bracket[0], bracket[1], config.n_z_grid)
    return worst_case_value(
        value_fn, atoms, r_val, tol=config.tol, gamma_max=config.gamma_max,
        bracket=bracket, envelope_grid=envelope_grid,
    )


@dataclass(eq=False)
class StagePolicy:
    """Per-stage surrogates plus the design table they were trained on."""

    t: int
    value_surrogate: object
    policy_surrogate: object
    features: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    gamma_stars: np.ndarray
    radii: np.ndarray
    cap_hits: np.ndarray


def generate_design_points(params: MarketParams, config: SolverConfig,
                           mixture: MixtureModel,
                           initial_dist: EmpiricalDistribution,
                           rng: np.random.Generator, *,
                           action_sampler=None,
                           update_dist: bool = True) -> list[list[AugmentedState]]:
    """Forward design paths: shared start, uniform random actions, mixture noise.

    Returns paths[i][t] for i < n_design_points, t <= horizon. All paths share
    the identical initial state object. With update_dist=False the empirical
    component stays frozen (the fixed-model / frozen-ball baselines).
    """
    N, T = config.n_design_points, params.horizon
    y0 = AugmentedState(params.x0, initial_dist)
    if action_sampler is None:
        actions = rng.uniform(0.0, 1.0, size=(N, T))
    else:
        actions = np.asarray(action_sampler(rng, (N, T)), dtype=float)
    zs = mixture.sample(rng, size=(N, T))
    paths = []
    for i in range(N):
        states = [y0]
        for t in range(T):
            y = states[-1]
            if update_dist:
                states.append(transition(t, y, actions[i, t], zs[i, t], params))
            else:
                x1 = float(wealth_step(y.wealth, actions[i, t], zs[i, t], params.r))
                states.append(AugmentedState(x1, y.dist))
        paths.append(states)
    return paths


# ---------------------------------------------------------------------------
# Stage optimization: vectorized per design point, optionally across processes.
# All randomness (bridge draws) happens before dispatch, so results are
# independent of the worker count.
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _StageContext:
    kind: str                      # "terminal" | "gp" | "const"
    r: float
    eta: float
    utility_kind: str
    tol: float
    n_z_grid: int
    z_spread: float
    gamma_max: float | None
    interp_threshold: int
    d: int                         # moment-feature count (0 for wealth-only)
    atoms: list
    wealth: np.ndarray
    moments: np.ndarray | None     # (U, d) current-state moments
    radii: np.ndarray
    const_value: float = 0.0
    # fast-predict pieces (kind == "gp")
    in_mean: np.ndarray | None = None
    inv_scale_ell: np.ndarray | None = None
    train_x_scaled: np.ndarray | None = None
    train_m_scaled: np.ndarray | None = None
    w_eff: np.ndarray | None = None
    t_mean: float = 0.0


_CTX: _StageContext | None = None


def _init_stage_worker(ctx: _StageContext) -> None:
    global _CTX
    _CTX = ctx


def _predict_from_x(ctx: _StageContext, xq: np.ndarray, distm2) -> np.ndarray:
    """Surrogate mean at queries whose moment-feature distances are premade."""
    q0 = (xq - ctx.in_mean[0]) * ctx.inv_scale_ell[0]
    if distm2 is None:
        return _kernel_predict_1d(q0, ctx.train_x_scaled, ctx.w_eff, ctx.t_mean)
    return _kernel_predict(q0, distm2, ctx.train_x_scaled, ctx.w_eff, ctx.t_mean)


def _optimize_design_point(i: int) -> tuple[float, float, float, bool]:
    ctx = _CTX
    atoms = ctx.atoms[i]
    x = float(ctx.wealth[i])
    r_ball = float(ctx.radii[i])
    n = atoms.size
    lo, hi = _default_bracket(atoms, ctx.z_spread)

    interp_mode = (r_ball == 0.0 and ctx.kind == "gp"
                   and n > ctx.interp_threshold)
    if interp_mode:
        zgrid = np.linspace(lo, hi, 257)
        atom_idx, dist_jk = None, None
    else:
        zgrid = np.unique(np.concatenate([np.linspace(lo, hi, ctx.n_z_grid), atoms]))
        atom_idx = np.searchsorted(zgrid, atoms)
        dist_jk = np.abs(atoms[:, None] - zgrid[None, :]) if r_ball > 0.0 else None
    exp_z = np.exp(zgrid)

    distm2 = None
    if ctx.kind == "gp" and ctx.d > 0:
        powers = zgrid[:, None] ** np.arange(1, ctx.d + 1)[None, :]
        m_upd = (n * ctx.moments[i][None, :] + powers) / (n + 1)
        qscaled = (m_upd - ctx.in_mean[1:][None, :]) * ctx.inv_scale_ell[1:][None, :]
        distm2 = np.ascontiguousarray(
            cdist(qscaled, ctx.train_m_scaled, "sqeuclidean"))

    def values_on(a: float) -> np.ndarray:
        xq = x * ((1.0 - a) * (1.0 + ctx.r) + a * exp_z)
        if ctx.kind == "terminal":
            return utility(xq, ctx.eta, ctx.utility_kind)
        if ctx.kind == "const":
            return np.full(zgrid.size, ctx.const_value)
        return _predict_from_x(ctx, xq, distm2)

    def objective(a: float) -> tuple[float, float, bool]:
        V = values_on(a)
        if r_ball == 0.0:
            if interp_mode:
                val = float(np.interp(atoms, zgrid, V).mean())
            else:
                val = float(V[atom_idx].mean())
            return val, math.inf, False
        cap = ctx.gamma_max
        if cap is None:
            cap = 10.0 * _lipschitz_estimate(V, zgrid)
        return _dual_on_grid(V, dist_jk, r_ball, cap, ctx.tol)

    best = None
    for seg in ((0.0, 0.5), (0.5, 1.0)):
        a_seg, neg_v = scalar_minimize(lambda a: -objective(a)[0], seg[0], seg[1], ctx.tol)
        if best is None or -neg_v > best[1]:
            best = (a_seg, -neg_v)
    a_star = best[0]
    value, g_star, cap_hit = objective(a_star)
    return a_star, value, g_star, cap_hit


def _solve_chunk(indices) -> list[tuple[float, float, float, bool]]:
    return [_optimize_design_point(i) for i in indices]


def _make_stage_context(V_next, params, config, feature_mode, uniq_states,
                        radii_values) -> _StageContext:
    d = config.n_moments if feature_mode == "wealth_moments" else 0
    atoms = [y.dist.samples for y in uniq_states]
    wealth = np.array([y.wealth for y in uniq_states])
    moments = None
    if d > 0 and isinstance(V_next, GPSurrogate):
        moments = np.stack([y.dist.moments(d) for y in uniq_states])
    ctx = _StageContext(
        kind="terminal", r=params.r, eta=params.eta,
        utility_kind=params.utility_kind, tol=config.tol,
        n_z_grid=config.n_z_grid, z_spread=config.z_bracket_spread,
        gamma_max=config.gamma_max, interp_threshold=config.interp_threshold,
        d=0, atoms=atoms, wealth=wealth, moments=moments,
        radii=np.asarray(radii_values, dtype=float),
    )
    if V_next is None:
        return ctx
    if isinstance(V_next, ConstantSurrogate):
        ctx.kind = "const"
        ctx.const_value = V_next.value
        return ctx
    ctx.kind = "gp"
    dim = V_next.train_inputs.shape[1]
    ctx.d = dim - 1
    if ctx.d > 0 and moments is None:
        ctx.moments = np.stack([y.dist.moments(ctx.d) for y in uniq_states])
    ctx.in_mean = V_next.input_mean
    ctx.inv_scale_ell = 1.0 / (V_next.input_scale * V_next.lengthscales)
    train_scaled = (V_next.train_inputs - V_next.input_mean[None, :]) \
        * ctx.inv_scale_ell[None, :]
    ctx.train_x_scaled = np.ascontiguousarray(train_scaled[:, 0])
    ctx.train_m_scaled = np.ascontiguousarray(train_scaled[:, 1:]) if ctx.d > 0 else None
    ctx.w_eff = np.ascontiguousarray(
        V_next.signal_variance * V_next.target_scale * V_next.weights)
    ctx.t_mean = V_next.target_mean
    return ctx


def _stage_radii(uniq_states, config: SolverConfig, rng, radius_mode,
                 frozen_radius, pinned_quantile) -> list[AmbiguityRadius]:
    out = []
    crn_cache: dict[int, np.ndarray] = {}
    for y in uniq_states:
        n = y.dist.count
        if radius_mode == "zero":
            out.append(AmbiguityRadius(config.alpha, 0.0, 0.0,
                                       config.n_bridge_sims, n))
        elif radius_mode == "frozen":
            out.append(frozen_radius)
        elif pinned_quantile is not None:
            out.append(AmbiguityRadius(config.alpha, float(pinned_quantile),
                                       float(pinned_quantile) / math.sqrt(n),
                                       config.n_bridge_sims, n))
        else:
            if config.bridge_crn:
                if n not in crn_cache:
                    crn_cache[n] = simulate_bridge_batch(n - 1, config.n_bridge_sims, rng)
                out.append(ball_radius(y.dist, config.alpha, config.n_bridge_sims,
                                       bridge_values=crn_cache[n]))
            else:
                out.append(ball_radius(y.dist, config.alpha, config.n_bridge_sims,
                                       rng=rng))
    return out


def bellman_step(V_next, design_states, t: int, params: MarketParams,
                 config: SolverConfig, rng: np.random.Generator | None = None, *,
                 radius_mode: str = "adaptive",
                 frozen_radius: AmbiguityRadius | None = None,
                 pinned_quantile: float | None = None,
                 feature_mode: str = "wealth_moments",
                 threads: int = 1) -> StagePolicy:
    """One backward stage: robust optimization at each design point, then fits.

    V_next is the fitted next-stage value surrogate, or None at t = T-1 where
    the terminal utility is used in closed form. Identical design states
    (shared objects, e.g. the common start at t=0) are solved once.
    """
    if radius_mode not in ("adaptive", "zero", "frozen"):
        raise ValueError(f"unknown radius_mode {radius_mode!r}")
    if radius_mode == "frozen" and frozen_radius is None:
        raise ValueError("frozen radius_mode requires frozen_radius")
    if feature_mode not in ("wealth_moments", "wealth"):
        raise ValueError(f"unknown feature_mode {feature_mode!r}")
    if radius_mode == "adaptive" and pinned_quantile is None and rng is None:
        raise ValueError("adaptive radius_mode requires rng for bridge simulation")

    n_points = len(design_states)
    if n_points == 0:
        raise ValueError("need at least one design state")

    # Dedupe by object identity; design paths share the t=0 state exactly.
    seen: dict[int, int] = {}
    uniq_states: list[AugmentedState] = []
    to_uniq = np.empty(n_points, dtype=int)
    for i, y in enumerate(design_states):
        key = id(y)
        if key not in seen:
            seen[key] = len(uniq_states)
            uniq_states.append(y)
        to_uniq[i] = seen[key]
    n_uniq = len(uniq_states)

    radii_obj = _stage_radii(uniq_states, config, rng, radius_mode,
                             frozen_radius, pinned_quantile)
    radii_values = np.array([rb.radius for rb in radii_obj])

    ctx = _make_stage_context(V_next, params, config, feature_mode,
                              uniq_states, radii_values)
    indices = list(range(n_uniq))
    if threads > 1 and n_uniq >= 2 * threads:
        n_chunks = threads * 4
        chunks = [indices[j::n_chunks] for j in range(n_chunks)]
        chunks = [sorted(c) for c in chunks if c]
        with ProcessPoolExecutor(max_workers=threads,
                                 initializer=_init_stage_worker,
                                 initargs=(ctx,)) as ex:
            chunk_results = list(ex.map(_solve_chunk, chunks))
        results: list = [None] * n_uniq
        for chunk, res in zip(chunks, chunk_results):
            for i, r in zip(chunk, res):
                results[i] = r
    else:
        _init_stage_worker(ctx)
        results = _solve_chunk(indices)

    a_u = np.array([r[0] for r in results])
    v_u = np.array([r[1] for r in results])
    g_u = np.array([r[2] for r in results])
    c_u = np.array([r[3] for r in results], dtype=bool)
    if c_u.any():
        logger.warning("stage %d: dual cap hit at %d/%d design points",
                       t, int(c_u.sum()), n_uniq)

    actions = a_u[to_uniq]
    values = v_u[to_uniq]
    gammas = g_u[to_uniq]
    caps = c_u[to_uniq]
    radii_all = radii_values[to_uniq]

    d = config.n_moments if feature_mode == "wealth_moments" else 0
    feats_u = np.empty((n_uniq, 1 + d))
    feats_u[:, 0] = [y.wealth for y in uniq_states]
    if d > 0:
        feats_u[:, 1:] = np.stack([y.dist.moments(d) for y in uniq_states])
    features = feats_u[to_uniq]

    if n_uniq < 2:
        value_surr = ConstantSurrogate(float(v_u[0]))
        policy_surr = ConstantSurrogate(float(a_u[0]))
    else:
        value_surr = gp_fit(feats_u, v_u, config.gp)
        policy_surr = gp_fit(feats_u, a_u, config.gp)

    return StagePolicy(
        t=t, value_surrogate=value_surr, policy_surrogate=policy_surr,
        features=features, values=values, actions=actions,
        gamma_stars=gammas, radii=radii_all, cap_hits=caps,
    )


def _write_stage_diag(diag_dir, t: int, pol: StagePolicy) -> None:
    import os
    os.makedirs(diag_dir, exist_ok=True)
    d = pol.features.shape[1] - 1
    cols = ["index", "wealth"] + [f"m{k}" for k in range(1, d + 1)] + \
           ["value", "action", "gamma_star", "radius", "cap_hit"]
    path = os.path.join(diag_dir, f"stage_t{t:02d}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(pol.features.shape[0]):
            row = [str(i)] + [repr(float(v)) for v in pol.features[i]]
            row += [repr(float(pol.values[i])), repr(float(pol.actions[i])),
                    repr(float(pol.gamma_stars[i])), repr(float(pol.radii[i])),
                    str(int(pol.cap_hits[i]))]
            fh.write(",".join(row) + "\n")


def solve(params: MarketParams, config: SolverConfig, mixture: MixtureModel,
          initial_dist: EmpiricalDistribution, rng: np.random.Generator, *,
          radius_mode: str = "adaptive",
          frozen_radius: AmbiguityRadius | None = None,
          q0_pin: float | None = None,
          feature_mode: str = "wealth_moments",
          update_dist: bool = True,
          threads: int = 1,
          diag_dir=None,
          action_sampler=None) -> list[StagePolicy]:
    """Full backward pass: design paths once, then stages T-1 down to 0.

    The rng is split into independent design-path and bridge-simulation
    substreams, so changing n_bridge_sims never perturbs the design paths.
    Returns stage policies ordered t = 0..T-1.
    """
    design_rng, bridge_rng = rng.spawn(2)
    paths = generate_design_points(params, config, mixture, initial_dist,
                                   design_rng, action_sampler=action_sampler,
                                   update_dist=update_dist)
    T = params.horizon
    stage_policies: dict[int, StagePolicy] = {}
    V_next = None
    for t in reversed(range(T)):
        states_t = [paths[i][t] for i in range(len(paths))]
        pol = bellman_step(
            V_next, states_t, t, params, config, bridge_rng,
            radius_mode=radius_mode, frozen_radius=frozen_radius,
            pinned_quantile=(q0_pin if t == 0 else None),
            feature_mode=feature_mode, threads=threads,
        )
        stage_policies[t] = pol
        V_next = pol.value_surrogate
        if diag_dir is not None:
            _write_stage_diag(diag_dir, t, pol)
    return [stage_policies[t] for t in range(T)]
