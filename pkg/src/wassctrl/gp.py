"""Matérn-5/2 Gaussian-process surrogates.

Anisotropic kernel, exact log-marginal-likelihood hyperparameter fitting by
derivative-free local search with restarts, mean prediction, and a versioned
on-disk format so solved policies can be reloaded without re-solving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import Bounds, minimize
from scipy.spatial.distance import cdist

__all__ = [
    "GPFitError",
    "GPFitConfig",
    "GPSurrogate",
    "ConstantSurrogate",
    "matern52",
    "fit",
    "predict",
    "load_surrogate",
]

_SQRT5 = math.sqrt(5.0)
_SAVE_VERSION = 1


class GPFitError(RuntimeError):
    """Raised when the kernel matrix cannot be factorized at any allowed nugget."""


def _matern_from_rho(rho: np.ndarray, signal_variance: float) -> np.ndarray:
    t = _SQRT5 * rho
    return signal_variance * (1.0 + t + t * t / 3.0) * np.exp(-t)


def matern52(u, v, lengthscales, signal_variance: float) -> float:
    """Matérn-5/2 covariance with per-dimension lengthscales."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    ell = np.asarray(lengthscales, dtype=float).ravel()
    if u.shape != v.shape or ell.shape != u.shape:
        raise ValueError("u, v and lengthscales must have equal dimensions")
    if np.any(ell <= 0.0) or signal_variance <= 0.0:
        raise ValueError("lengthscales and signal_variance must be positive")
    rho = math.sqrt(float(np.sum(((u - v) / ell) ** 2)))
    return float(_matern_from_rho(np.asarray(rho), signal_variance))


@dataclass(frozen=True)
class GPFitConfig:
    """Hyperparameter search settings; fix a field to take it out of the search."""

    lengthscales: np.ndarray | None = None
    signal_variance: float | None = None
    nugget: float | None = None
    normalize_inputs: bool = True
    normalize_targets: bool = True
    n_restarts: int = 5
    max_iter: int = 200
    lengthscale_bounds: tuple[float, float] = (0.05, 20.0)
    variance_bounds: tuple[float, float] = (0.05, 20.0)
    nugget_bounds: tuple[float, float] = (1e-8, 1e-2)
    hyper_subsample: int = 256
    seed: int = 1234


@dataclass(eq=False)
class ConstantSurrogate:
    """Degenerate surrogate for stages whose design points collapse to one state."""

    value: float

    def predict(self, query):
        q = np.asarray(query, dtype=float)
        if q.ndim <= 1:
            return float(self.value)
        return np.full(q.shape[0], self.value)

    def save(self, path) -> None:
        np.savez(path, kind="constant", version=_SAVE_VERSION, value=self.value)


@dataclass(eq=False)
class GPSurrogate:
    """Fitted mean-prediction GP: training set, hyperparameters, and factors."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    lengthscales: np.ndarray
    signal_variance: float
    nugget: float
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: float
    target_scale: float
    chol_factor: np.ndarray
    weights: np.ndarray
    fit_info: dict = field(default_factory=dict)

    def _scale_inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_scale

    def predict(self, query):
        """Mean prediction; accepts one feature vector or a (Q, D) batch."""
        q = np.asarray(query, dtype=float)
        single = q.ndim == 1
        if single:
            q = q[None, :]
        qs = self._scale_inputs(q) / self.lengthscales
        xs = self._scale_inputs(self.train_inputs) / self.lengthscales
        rho = cdist(qs, xs)
        k = _matern_from_rho(rho, self.signal_variance)
        out = self.target_mean + self.target_scale * (k @ self.weights)
        if single:
            return float(out[0])
        return out

    def save(self, path) -> None:
        np.savez(
            path,
            kind="gp",
            version=_SAVE_VERSION,
            train_inputs=self.train_inputs,
            train_targets=self.train_targets,
            lengthscales=self.lengthscales,
            signal_variance=self.signal_variance,
            nugget=self.nugget,
            input_mean=self.input_mean,
            input_scale=self.input_scale,
            target_mean=self.target_mean,
            target_scale=self.target_scale,
        )


def load_surrogate(path):
    """Reload a saved surrogate; GP factors are rebuilt deterministically."""
    with np.load(path, allow_pickle=False) as data:
        kind = str(data["kind"])
        version = int(data["version"])
        if version != _SAVE_VERSION:
            raise ValueError(f"unsupported surrogate file version {version}")
        if kind == "constant":
            return ConstantSurrogate(value=float(data["value"]))
        if kind != "gp":
            raise ValueError(f"unknown surrogate kind {kind!r}")
        fields = {k: data[k] for k in data.files if k not in ("kind", "version")}
    return _assemble(
        fields["train_inputs"],
        fields["train_targets"],
        np.asarray(fields["lengthscales"], dtype=float),
        float(fields["signal_variance"]),
        float(fields["nugget"]),
        np.asarray(fields["input_mean"], dtype=float),
        np.asarray(fields["input_scale"], dtype=float),
        float(fields["target_mean"]),
        float(fields["target_scale"]),
        fit_info={"loaded": True},
    )


def _chol_with_escalation(K: np.ndarray, nugget: float, nugget_max: float):
    """Cholesky of K + nugget*I, escalating the nugget tenfold on failure."""
    n = K.shape[0]
    nug = nugget
    while True:
        try:
            c, _ = cho_factor(K + nug * np.eye(n), lower=True)
            return c, nug
        except np.linalg.LinAlgError:
            nxt = max(nug, 1e-10) * 10.0
            if nxt > nugget_max * (1.0 + 1e-12):
                raise GPFitError(
                    f"kernel matrix not positive definite up to nugget {nugget_max:g}; "
                    "training inputs are too close to duplicate"
                )
            nug = nxt


def _neg_lml(theta, xs, y, free_idx, base_log, nugget_max):
    """Negative log-marginal likelihood at log-hyperparameters theta."""
    logp = base_log.copy()
    logp[free_idx] = theta
    params = np.exp(logp)
    ell = params[:-2]
    sv = params[-2]
    nug = params[-1]
    rho = cdist(xs / ell, xs / ell)
    K = _matern_from_rho(rho, sv)
    n = K.shape[0]
    try:
        c, _ = cho_factor(K + nug * np.eye(n), lower=True)
    except np.linalg.LinAlgError:
        return 1e12
    alpha = cho_solve((c, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(c)).sum()) - 0.5 * n * math.log(2.0 * math.pi)
    if not math.isfinite(lml):
        return 1e12
    return -lml


def _restart_points(cfg: GPFitConfig, n_free: int, lo: np.ndarray, hi: np.ndarray,
                    center: np.ndarray) -> list[np.ndarray]:
    """Center start plus seeded Latin-hypercube draws in log space."""
    points = [center]
    extra = cfg.n_restarts - 1
    if extra > 0:
        rng = np.random.default_rng(cfg.seed)
        # Latin grid: one stratum per restart and dimension, shuffled per dim.
        u = (rng.permuted(np.tile(np.arange(extra), (n_free, 1)), axis=1).T
             + rng.random((extra, n_free))) / extra
        for row in u:
            points.append(lo + row * (hi - lo))
    return points


def _assemble(train_inputs, train_targets, ell, sv, nug, in_mean, in_scale,
              t_mean, t_scale, fit_info) -> GPSurrogate:
    xs = (train_inputs - in_mean) / in_scale
    y = (train_targets - t_mean) / t_scale
    rho = cdist(xs / ell, xs / ell)
    K = _matern_from_rho(rho, sv)
    c, eff_nug = _chol_with_escalation(K, nug, nugget_max=1e-2)
    weights = cho_solve((c, True), y)
    return GPSurrogate(
        train_inputs=np.asarray(train_inputs, dtype=float),
        train_targets=np.asarray(train_targets, dtype=float),
        lengthscales=ell,
        signal_variance=sv,
        nugget=eff_nug,
        input_mean=in_mean,
        input_scale=in_scale,
        target_mean=t_mean,
        target_scale=t_scale,
        chol_factor=np.tril(c),
        weights=weights,
        fit_info=fit_info,
    )


def fit(train_inputs, train_targets, config: GPFitConfig | None = None) -> GPSurrogate:
    """Fit a surrogate by maximizing the exact log-marginal likelihood.

    Inputs are normalized per-dimension to zero mean / unit variance and
    targets to zero mean (unit variance) before fitting; free hyperparameters
    are searched by Nelder-Mead restarted from a seeded log-space Latin grid.
    When the training set exceeds `hyper_subsample`, the likelihood in the
    search is evaluated on an evenly strided subsample; the returned factors
    always use the full set.
    """
    cfg = config or GPFitConfig()
    X = np.atleast_2d(np.asarray(train_inputs, dtype=float))
    y_raw = np.asarray(train_targets, dtype=float).ravel()
    if X.shape[0] != y_raw.size:
        raise ValueError("train_inputs and train_targets lengths differ")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 training points")
    n, dim = X.shape

    if cfg.normalize_inputs:
        in_mean = X.mean(axis=0)
        in_scale = X.std(axis=0)
        in_scale[in_scale == 0.0] = 1.0
    else:
        in_mean = np.zeros(dim)
        in_scale = np.ones(dim)
    if cfg.normalize_targets:
        t_mean = float(y_raw.mean())
        t_scale = float(y_raw.std())
        if t_scale == 0.0:
            t_scale = 1.0
    else:
        t_mean, t_scale = 0.0, 1.0

    xs = (X - in_mean) / in_scale
    y = (y_raw - t_mean) / t_scale

    # Assemble the log-parameter vector [lengthscales..., signal_var, nugget];
    # fixed entries come from the config, the rest are searched.
    base = np.empty(dim + 2)
    fixed = np.zeros(dim + 2, dtype=bool)
    if cfg.lengthscales is not None:
        ells = np.asarray(cfg.lengthscales, dtype=float).ravel()
        if ells.size != dim:
            raise ValueError(f"expected {dim} fixed lengthscales, got {ells.size}")
        base[:dim] = ells
        fixed[:dim] = True
    else:
        base[:dim] = 1.0
    base[dim] = cfg.signal_variance if cfg.signal_variance is not None else 1.0
    fixed[dim] = cfg.signal_variance is not None
    base[dim + 1] = cfg.nugget if cfg.nugget is not None else 1e-4
    fixed[dim + 1] = cfg.nugget is not None
    if np.any(base[:dim + 1] <= 0.0) or base[dim + 1] < 0.0:
        raise ValueError("fixed hyperparameters must be positive (nugget nonnegative)")

    free_idx = np.where(~fixed)[0]
    base_fixed = base.copy()
    degenerate_targets = float(np.abs(y).max(initial=0.0)) == 0.0
    info: dict = {"n_train": n, "dim": dim}

    if free_idx.size > 0 and not degenerate_targets:
        with np.errstate(divide="ignore"):
            base_log = np.log(np.maximum(base, 1e-300))
        lob = np.empty(dim + 2)
        hib = np.empty(dim + 2)
        lob[:dim], hib[:dim] = cfg.lengthscale_bounds
        lob[dim], hib[dim] = cfg.variance_bounds
        lob[dim + 1], hib[dim + 1] = cfg.nugget_bounds
        lo = np.log(lob[free_idx])
        hi = np.log(hib[free_idx])
        center = np.clip(base_log[free_idx], lo, hi)

        if n > cfg.hyper_subsample:
            stride_idx = np.linspace(0, n - 1, cfg.hyper_subsample).round().astype(int)
            xs_fit, y_fit = xs[stride_idx], y[stride_idx]
            info["subsampled"] = True
        else:
            xs_fit, y_fit = xs, y
            info["subsampled"] = False

        nugget_max = cfg.nugget_bounds[1]
        obj = lambda th: _neg_lml(th, xs_fit, y_fit, free_idx, base_log, nugget_max)
        starts = _restart_points(cfg, free_idx.size, lo, hi, center)
        best_theta, best_val = None, np.inf
        info["restart_start_nlml"] = []
        info["restart_final_nlml"] = []
        for x0 in starts:
            info["restart_start_nlml"].append(float(obj(x0)))
            res = minimize(
                obj, x0, method="Nelder-Mead",
                bounds=Bounds(lo, hi),
                options={"maxiter": cfg.max_iter, "xatol": 1e-3, "fatol": 1e-3},
            )
            info["restart_final_nlml"].append(float(res.fun))
            if res.fun < best_val:
                best_val, best_theta = float(res.fun), res.x
        base_log[free_idx] = best_theta
        base = np.exp(base_log)
        base[fixed] = base_fixed[fixed]
        info["best_nlml"] = best_val

    ell = base[:dim].copy()
    sv = float(base[dim])
    nug = float(base[dim + 1])
    return _assemble(X, y_raw, ell, sv, nug, in_mean, in_scale, t_mean, t_scale, info)


def predict(surrogate, query):
    """Module-level alias for surrogate.predict."""
    return surrogate.predict(query)
