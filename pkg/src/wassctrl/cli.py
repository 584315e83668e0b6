"""Experiment configuration, orchestration, deterministic seeding, and CSV reports.

Config files are flat `key = value` text with `#` comments. The master seed
fans out into named substreams (historical sample, per-method design paths,
bridge simulations, evaluation noise, ...) so changing one setting never
perturbs the draws of another stage.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import traceback
from dataclasses import dataclass, fields, replace

import numpy as np

from .ambiguity import radius as ball_radius, simulate_bridge_batch
from .empirical import (
    EmpiricalDistribution,
    empirical_quantile,
    samples_from_csv,
    samples_to_csv,
    update_empirical,
)
from .evaluate import EvaluationReport, forward_evaluate, solve_sr, solve_tr
from .gp import GPFitConfig, load_surrogate
from .market import MarketParams, MixtureModel
from .selftest import run_selftest
from .solver import SolverConfig, StagePolicy, solve

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "run_experiment", "main"]

SUMMARY_HEADER = "method,mean,variance,q20,q90,min,max,n_paths,seed"

_STREAMS = {
    "historical": 0,
    "design_ar": 1,
    "design_tr": 2,
    "design_sr": 3,
    "gp": 4,
    "evaluation": 5,
    "radius_path": 6,
    "radius_sim": 7,
}

_METHODS = ("ar", "tr", "sr")


class ConfigError(ValueError):
    """Config-file problem; the message names the offending key and line."""


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child generator of the master seed (counter-based split)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name]]))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings; see README for the key reference."""

    t0: int
    horizon: int
    r: float
    eta: float
    x0: float
    alpha: float
    mixture_weights: tuple
    mixture_means: tuple
    mixture_stds: tuple
    d: int = 4
    n_design_ar: int = 1000
    n_design_baseline: int = 200
    n_bridge_sims: int = 1000
    n_eval_paths: int = 1000
    seed: int = 0
    eval_seed: int | None = None
    methods: tuple = _METHODS
    utility_kind: str = "exponential"
    tol: float = 1e-4
    gamma_max: float | None = None
    z_bracket_spread: float = 3.0
    n_z_grid: int = 64
    bridge_crn: bool = True
    tr_sample_size: int = 10_000
    q0_pin: float | None = None
    gp_restarts: int = 5
    gp_max_iter: int = 200
    gp_hyper_subsample: int = 256
    out_dir: str = "runs"
    source_hash: str = ""

    def market_params(self) -> MarketParams:
        return MarketParams(r=self.r, eta=self.eta, horizon=self.horizon,
                            x0=self.x0, utility_kind=self.utility_kind)

    def mixture(self) -> MixtureModel:
        return MixtureModel(weights=np.array(self.mixture_weights),
                            means=np.array(self.mixture_means),
                            stds=np.array(self.mixture_stds))

    def solver_config(self, method: str) -> SolverConfig:
        n = self.n_design_ar if method == "ar" else self.n_design_baseline
        gp_seed = int(np.random.SeedSequence(
            [self.seed, _STREAMS["gp"]]).generate_state(1)[0])
        return SolverConfig(
            n_design_points=n, n_moments=self.d, alpha=self.alpha,
            n_bridge_sims=self.n_bridge_sims, gamma_max=self.gamma_max,
            z_bracket_spread=self.z_bracket_spread, tol=self.tol,
            n_z_grid=self.n_z_grid, bridge_crn=self.bridge_crn,
            gp=GPFitConfig(n_restarts=self.gp_restarts,
                           max_iter=self.gp_max_iter,
                           hyper_subsample=self.gp_hyper_subsample,
                           seed=gp_seed),
        )

    def canonical_text(self) -> str:
        items = []
        for f in fields(self):
            if f.name == "source_hash":
                continue
            items.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(items) + "\n"


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_methods(text: str) -> tuple:
    items = tuple(m.strip().lower() for m in text.split(",") if m.strip())
    for m in items:
        if m not in _METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {_METHODS}")
    if len(set(items)) != len(items):
        raise ValueError("duplicate method names")
    return items


def _optional(parser):
    def parse(text: str):
        if text.strip().lower() in ("none", "auto", ""):
            return None
        return parser(text)
    return parse


# key -> (config field, parser, required, range check description, predicate)
_SCHEMA: dict[str, tuple] = {
    "t0": ("t0", int, True, ">= 2", lambda v: v >= 2),
    "T": ("horizon", int, True, ">= 1", lambda v: v >= 1),
    "r": ("r", float, True, "> -1", lambda v: v > -1.0),
    "eta": ("eta", float, True, "> 0", lambda v: v > 0.0),
    "x0": ("x0", float, True, "> 0", lambda v: v > 0.0),
    "alpha": ("alpha", float, True, "in (0, 1)", lambda v: 0.0 < v < 1.0),
    "mixture_weights": ("mixture_weights", _parse_float_list, True,
                        "nonempty positive", lambda v: len(v) > 0 and all(w > 0 for w in v)),
    "mixture_means": ("mixture_means", _parse_float_list, True,
                      "nonempty", lambda v: len(v) > 0),
    "mixture_stds": ("mixture_stds", _parse_float_list, True,
                     "nonempty positive", lambda v: len(v) > 0 and all(s > 0 for s in v)),
    "d": ("d", int, False, ">= 1", lambda v: v >= 1),
    "n_design_ar": ("n_design_ar", int, False, ">= 1", lambda v: v >= 1),
    "n_design_baseline": ("n_design_baseline", int, False, ">= 1", lambda v: v >= 1),
    "n_bridge_sims": ("n_bridge_sims", int, False, ">= 1", lambda v: v >= 1),
    "n_eval_paths": ("n_eval_paths", int, False, ">= 1", lambda v: v >= 1),
    "seed": ("seed", int, False, ">= 0", lambda v: v >= 0),
    "eval_seed": ("eval_seed", _optional(int), False, ">= 0 or none",
                  lambda v: v is None or v >= 0),
    "methods": ("methods", _parse_methods, False, "subset of ar,tr,sr", lambda v: True),
    "utility": ("utility_kind", str.strip, False, "exponential or power",
                lambda v: v in ("exponential", "power")),
    "tol": ("tol", float, False, "> 0", lambda v: v > 0.0),
    "gamma_max": ("gamma_max", _optional(float), False, "> 0 or auto",
                  lambda v: v is None or v > 0.0),
    "z_bracket_spread": ("z_bracket_spread", float, False, "> 0", lambda v: v > 0.0),
    "n_z_grid": ("n_z_grid", int, False, ">= 8", lambda v: v >= 8),
    "bridge_crn": ("bridge_crn", _parse_bool, False, "boolean", lambda v: True),
    "tr_sample_size": ("tr_sample_size", int, False, ">= 2", lambda v: v >= 2),
    "q0_pin": ("q0_pin", _optional(float), False, "> 0 or none",
               lambda v: v is None or v > 0.0),
    "gp_restarts": ("gp_restarts", int, False, ">= 1", lambda v: v >= 1),
    "gp_max_iter": ("gp_max_iter", int, False, ">= 1", lambda v: v >= 1),
    "gp_hyper_subsample": ("gp_hyper_subsample", int, False, ">= 2", lambda v: v >= 2),
    "out_dir": ("out_dir", str.strip, False, "nonempty", lambda v: len(v) > 0),
}


def load_config(path) -> ExperimentConfig:
    """Parse and validate a flat key = value config file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    values: dict[str, object] = {}
    seen_lines: dict[str, int] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line.strip()!r}")
        key, _, val = text.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen_lines:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first on line {seen_lines[key]})")
        seen_lines[key] = lineno
        field_name, parser, _, desc, pred = _SCHEMA[key]
        try:
            parsed = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: key {key!r}: {exc}") from exc
        if not pred(parsed):
            raise ConfigError(f"line {lineno}: key {key!r} must be {desc}, got {parsed!r}")
        values[field_name] = parsed

    missing = [k for k, (_, _, req, _, _) in _SCHEMA.items()
               if req and _SCHEMA[k][0] not in values]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(sorted(missing)))

    sizes = {len(values["mixture_weights"]), len(values["mixture_means"]),
             len(values["mixture_stds"])}
    if len(sizes) != 1:
        raise ConfigError("mixture_weights/means/stds must have equal lengths")
    if abs(sum(values["mixture_weights"]) - 1.0) > 1e-9:
        raise ConfigError(
            f"key 'mixture_weights' must sum to 1, got {sum(values['mixture_weights'])}")

    cfg = ExperimentConfig(**values, source_hash=hashlib.sha256(raw.encode()).hexdigest())
    try:
        cfg.market_params()
        cfg.mixture()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _save_policies(policies: list[StagePolicy], out_dir, initial_dist) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    for pol in policies:
        for kind, surr in (("value", pol.value_surrogate),
                           ("policy", pol.policy_surrogate)):
            name = f"stage_t{pol.t:02d}_{kind}.npz"
            surr.save(os.path.join(out_dir, name))
            rows.append([pol.t, kind, name, type(surr).__name__])
            written.append(name)
    samples_to_csv(initial_dist, os.path.join(out_dir, "historical.csv"))
    written.append("historical.csv")
    _write_csv(os.path.join(out_dir, "stages.csv"), "t,kind,file,surrogate", rows)
    written.append("stages.csv")
    return written


def load_policies(policies_dir) -> tuple[list[StagePolicy], EmpiricalDistribution]:
    """Reload a saved stage-policy directory for evaluation."""
    initial = samples_from_csv(os.path.join(policies_dir, "historical.csv"))
    stage_files: dict[int, dict[str, str]] = {}
    with open(os.path.join(policies_dir, "stages.csv"), "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            t_str, kind, name, _ = line.strip().split(",")
            stage_files.setdefault(int(t_str), {})[kind] = name
    policies = []
    for t in sorted(stage_files):
        entry = stage_files[t]
        value_surr = load_surrogate(os.path.join(policies_dir, entry["value"]))
        policy_surr = load_surrogate(os.path.join(policies_dir, entry["policy"]))
        empty = np.empty(0)
        policies.append(StagePolicy(
            t=t, value_surrogate=value_surr, policy_surrogate=policy_surr,
            features=np.empty((0, 1)), values=empty, actions=empty,
            gamma_stars=empty, radii=empty, cap_hits=empty.astype(bool),
        ))
    return policies, initial


def _solve_method(method: str, config: ExperimentConfig,
                  initial_dist: EmpiricalDistribution, threads: int,
                  diag_dir) -> list[StagePolicy]:
    params = config.market_params()
    mixture = config.mixture()
    solver_cfg = config.solver_config(method)
    rng = substream(config.seed, f"design_{method}")
    if method == "ar":
        return solve(params, solver_cfg, mixture, initial_dist, rng,
                     q0_pin=config.q0_pin, threads=threads, diag_dir=diag_dir)
    if method == "tr":
        return solve_tr(params, solver_cfg, mixture, rng,
                        tr_sample_size=config.tr_sample_size,
                        threads=threads, diag_dir=diag_dir)
    if method == "sr":
        return solve_sr(params, solver_cfg, mixture, initial_dist, rng,
                        q0_pin=config.q0_pin, threads=threads, diag_dir=diag_dir)
    raise ValueError(f"unknown method {method!r}")


def _evaluation_rng(config: ExperimentConfig) -> np.random.Generator:
    seed = config.eval_seed if config.eval_seed is not None else config.seed
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS["evaluation"]]))


def _write_report(out, method: str, report: EvaluationReport, seed: int) -> list[str]:
    util_name = f"utilities_{method}.csv"
    with open(os.path.join(out, util_name), "w", encoding="utf-8") as fh:
        fh.write("utility\n")
        for u in report.terminal_utilities:
            fh.write(_fmt(u) + "\n")
    rep_name = f"report_{method}.csv"
    _write_csv(os.path.join(out, rep_name), SUMMARY_HEADER, [[
        method, _fmt(report.mean), _fmt(report.variance), _fmt(report.q20),
        _fmt(report.q90), _fmt(report.minimum), _fmt(report.maximum),
        report.n_paths, seed,
    ]])
    return [util_name, rep_name]


def _write_radius_path(config: ExperimentConfig, out,
                       initial_dist: EmpiricalDistribution) -> str:
    rng = substream(config.seed, "radius_path")
    mixture = config.mixture()
    dist = initial_dist
    rows = []
    for t in range(config.horizon + 1):
        rb = ball_radius(dist, config.alpha, config.n_bridge_sims, rng=rng)
        rows.append([t, dist.count, _fmt(rb.quantile_value), _fmt(rb.radius)])
        if t < config.horizon:
            dist = update_empirical(dist, float(mixture.sample(rng)))
    name = "radius_path.csv"
    _write_csv(os.path.join(out, name), "t,count,quantile_value,radius", rows)
    return name


def _write_manifest(out, config: ExperimentConfig, files: list[str]) -> None:
    src_hash = config.source_hash or hashlib.sha256(
        config.canonical_text().encode()).hexdigest()
    rows = [["key", "master_seed", config.seed],
            ["key", "eval_seed", config.eval_seed if config.eval_seed is not None else config.seed],
            ["key", "config_sha256", src_hash],
            ["key", "package_version", _package_version()]]
    for name in sorted(files):
        rows.append(["file", name, _sha256_file(os.path.join(out, name))])
    _write_csv(os.path.join(out, "manifest.csv"), "kind,name,value", rows)


def _package_version() -> str:
    from . import __version__
    return __version__


def run_experiment(config: ExperimentConfig, out_dir=None, threads: int = 1,
                   do_evaluate: bool = True) -> int:
    """Solve and (optionally) evaluate every requested method; emit artifacts.

    Returns 0 on success. On failure, partial artifacts are kept alongside a
    FAILED marker containing the traceback, and the exit status is nonzero.
    """
    out = str(out_dir if out_dir is not None else config.out_dir)
    os.makedirs(out, exist_ok=True)
    files: list[str] = []
    try:
        if not config.methods:
            _write_manifest(out, config, files)
            return 0

        hist_rng = substream(config.seed, "historical")
        initial_dist = EmpiricalDistribution.from_samples(
            config.mixture().sample(hist_rng, size=config.t0))
        samples_to_csv(initial_dist, os.path.join(out, "historical.csv"))
        files.append("historical.csv")
        files.append(_write_radius_path(config, out, initial_dist))

        params = config.market_params()
        mixture = config.mixture()
        summary_rows = []
        for method in config.methods:
            diag_dir = os.path.join(out, f"diag_{method}")
            policies = _solve_method(method, config, initial_dist, threads, diag_dir)
            for pol in policies:
                files.append(os.path.join(f"diag_{method}", f"stage_t{pol.t:02d}.csv"))
            pol_files = _save_policies(policies, os.path.join(out, f"policies_{method}"),
                                       initial_dist)
            files.extend(os.path.join(f"policies_{method}", name) for name in pol_files)
            if do_evaluate:
                report = forward_evaluate(
                    policies, params, mixture, initial_dist,
                    config.n_eval_paths, _evaluation_rng(config),
                    method=method.upper())
                files.extend(_write_report(out, method, report, config.seed))
                summary_rows.append([
                    method.upper(), _fmt(report.mean), _fmt(report.variance),
                    _fmt(report.q20), _fmt(report.q90), _fmt(report.minimum),
                    _fmt(report.maximum), report.n_paths, config.seed,
                ])
        if do_evaluate:
            _write_csv(os.path.join(out, "summary.csv"), SUMMARY_HEADER, summary_rows)
            files.append("summary.csv")
        _write_manifest(out, config, files)
        return 0
    except Exception:
        with open(os.path.join(out, "FAILED"), "w", encoding="utf-8") as fh:
            fh.write(traceback.format_exc())
        print(traceback.format_exc(), file=sys.stderr)
        return 1


def _cmd_radius_sim(config: ExperimentConfig, out_dir, mode: str,
                    resamples: int) -> int:
    """Simulate the calibration statistic; both histogram interpretations."""
    out = str(out_dir if out_dir is not None else config.out_dir)
    os.makedirs(out, exist_ok=True)
    rng = substream(config.seed, "radius_sim")
    mixture = config.mixture()
    if mode == "h":
        data = EmpiricalDistribution.from_samples(mixture.sample(rng, size=config.t0))
        bridges = simulate_bridge_batch(config.t0 - 1, config.n_bridge_sims, rng)
        values = np.abs(bridges) @ np.diff(data.samples)
    elif mode == "quantile":
        values = np.empty(resamples)
        for i in range(resamples):
            data = EmpiricalDistribution.from_samples(mixture.sample(rng, size=config.t0))
            values[i] = ball_radius(data, config.alpha, config.n_bridge_sims,
                                    rng=rng).quantile_value
    else:
        raise ValueError(f"unknown radius-sim mode {mode!r}")
    q = empirical_quantile(np.sort(values), 1.0 - config.alpha)
    path = os.path.join(out, "radius_sim.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("value\n")
        for v in values:
            fh.write(_fmt(v) + "\n")
        fh.write(f"summary,{_fmt(values.mean())},{_fmt(q)}\n")
    print(f"radius-sim mode={mode}: mean={values.mean():.6f} "
          f"q{100 * (1 - config.alpha):.0f}={q:.6f} -> {path}")
    return 0


def _cmd_evaluate(config: ExperimentConfig, policies_dir, method: str,
                  out_dir) -> int:
    out = str(out_dir if out_dir is not None else config.out_dir)
    os.makedirs(out, exist_ok=True)
    policies, initial_dist = load_policies(policies_dir)
    report = forward_evaluate(
        policies, config.market_params(), config.mixture(), initial_dist,
        config.n_eval_paths, _evaluation_rng(config), method=method.upper())
    _write_report(out, method, report, config.seed)
    print(f"evaluated {method.upper()}: mean={report.mean:.6f} "
          f"var={report.variance:.6f} -> {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wassctrl",
        description="Adaptive-robust control over shrinking Wasserstein balls.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker processes (1 = reference serial run)")

    p_solve = sub.add_parser("solve", help="backward solve only; save policies")
    add_common(p_solve)
    p_solve.add_argument("--methods", default=None, help="comma list from ar,tr,sr")

    p_eval = sub.add_parser("evaluate", help="forward-evaluate saved policies")
    add_common(p_eval)
    p_eval.add_argument("--policies", required=True, help="saved policies directory")
    p_eval.add_argument("--method", default="ar", choices=_METHODS)

    p_radius = sub.add_parser("radius-sim", help="simulate the radius statistic")
    add_common(p_radius)
    p_radius.add_argument("--mode", default="quantile", choices=("quantile", "h"))
    p_radius.add_argument("--resamples", type=int, default=1000)

    p_compare = sub.add_parser("compare", help="full solve + evaluate pipeline")
    add_common(p_compare)
    p_compare.add_argument("--methods", default=None, help="comma list from ar,tr,sr")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def _load_with_overrides(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        config = replace(config, seed=args.seed)
    methods = getattr(args, "methods", None)
    if methods is not None:
        config = replace(config, methods=_parse_methods(methods))
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "selftest":
        return run_selftest()
    try:
        config = _load_with_overrides(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "solve":
        return run_experiment(config, out_dir=args.out, threads=args.threads,
                              do_evaluate=False)
    if args.command == "compare":
        return run_experiment(config, out_dir=args.out, threads=args.threads,
                              do_evaluate=True)
    if args.command == "evaluate":
        return _cmd_evaluate(config, args.policies, args.method, args.out)
    if args.command == "radius-sim":
        return _cmd_radius_sim(config, args.out, args.mode, args.resamples)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    raise SystemExit(main())
