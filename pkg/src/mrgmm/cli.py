"""Command-line entry point.

Usage::

    mrgmm COMMAND [--config FILE] [--key value ...]

Commands are ``estimate``, ``ci``, ``coverage``, ``power`` and ``selftest``.
Settings come from built-in defaults, then an optional flat config file of
``key = value`` lines (``#`` starts a comment), then command-line flags;
later sources win.  Config keys are the flag names with ``_`` for ``-``.

Exit status: 0 on success, 1 on a runtime failure, 2 on a bad configuration.
"""

from __future__ import annotations

import argparse
import importlib
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import report
from .bootstrap import (
    ResamplePlan,
    bn_bootstrap_t,
    el_probabilities,
    hh_bootstrap_t,
    mr_bootstrap_t,
)
from .errors import GmmError
from .estimate import GmmFit, WeightRecipe, one_step, two_step
from .experiments import (
    J_KINDS,
    Example1Spec,
    Example2Spec,
    coverage_study,
    default_threads,
    power_study,
    pseudo_true,
    simulate,
)
from .inference import CI_KINDS, ci_asymptotic, ci_bootstrap, j_test
from .model import Dataset, MomentModel
from .models import BUILTIN_MODELS, get_model
from .selftest import run_selftest
from .variance import sigma_conventional, sigma_mr

COMMANDS = ("estimate", "ci", "coverage", "power", "selftest")
ESTIMATORS = ("auto", "one-step", "two-step", "2sls")


class ConfigError(ValueError):
    """Invalid configuration (usage error)."""


@dataclass
class RunConfig:
    command: str = "selftest"
    model: str = "example1"
    data: str | None = None
    estimator: str = "auto"
    n: tuple = (200,)
    rho: float = 0.5
    sigma: float = 1.5
    delta: tuple = (0.0,)
    lognormal: bool = True
    gamma1: float = 0.25
    gamma2: float | None = None
    r: int = 1000
    B: int = 999
    levels: tuple = (0.90, 0.95)
    alpha: float = 0.10
    seed: int = 0
    threads: int = field(default_factory=default_threads)
    out: str = "results"
    ci_kinds: tuple = CI_KINDS
    j_tests: tuple = J_KINDS
    theta_grid: tuple | None = None
    grid_points: int = 41
    grid_width: float = 4.0
    oracle_cache: str | None = None


# -- parsing and validation -------------------------------------------------------

def _as_int(key, text, lo=None):
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if lo is not None and v < lo:
        raise ConfigError(f"{key}: must be at least {lo}, got {v}")
    return v


def _as_float(key, text):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if not np.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def _as_bool(key, text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


def _split(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _as_choices(key, text, allowed):
    items = tuple(_split(text))
    bad = [t for t in items if t not in allowed]
    if bad:
        raise ConfigError(f"{key}: unknown value(s) {', '.join(bad)}; choose from {', '.join(allowed)}")
    return items


def _convert(key: str, text: str):
    if key in ("command",):
        if text not in COMMANDS:
            raise ConfigError(f"command: choose from {', '.join(COMMANDS)}")
        return text
    if key == "estimator":
        if text not in ESTIMATORS:
            raise ConfigError(f"estimator: choose from {', '.join(ESTIMATORS)}")
        return text
    if key in ("model", "data", "out", "oracle_cache"):
        return text
    if key == "n":
        return tuple(_as_int(key, t, lo=2) for t in _split(text))
    if key in ("delta", "theta_grid"):
        vals = tuple(_as_float(key, t) for t in _split(text))
        if not vals:
            raise ConfigError(f"{key}: empty list")
        return vals
    if key == "levels":
        vals = tuple(_as_float(key, t) for t in _split(text))
        if not vals or not all(0 < v < 1 for v in vals):
            raise ConfigError("levels: each level must lie in (0, 1)")
        return vals
    if key in ("r", "B", "grid_points", "threads"):
        return _as_int(key, text, lo=1)
    if key == "seed":
        return _as_int(key, text, lo=0)
    if key == "alpha":
        v = _as_float(key, text)
        if not 0 < v < 1:
            raise ConfigError("alpha: must lie in (0, 1)")
        return v
    if key == "rho":
        v = _as_float(key, text)
        if not -1 < v < 1:
            raise ConfigError("rho: must lie in (-1, 1)")
        return v
    if key in ("sigma", "grid_width"):
        v = _as_float(key, text)
        if v <= 0:
            raise ConfigError(f"{key}: must be positive")
        return v
    if key == "gamma1":
        v = _as_float(key, text)
        if v == 0:
            raise ConfigError("gamma1: must be nonzero")
        return v
    if key == "gamma2":
        return None if str(text).strip().lower() in ("", "auto", "none") else _as_float(key, text)
    if key == "lognormal":
        return _as_bool(key, text)
    if key == "ci_kinds":
        return _as_choices(key, text, CI_KINDS)
    if key == "j_tests":
        return _as_choices(key, text, J_KINDS) if str(text).strip() else ()
    raise ConfigError(f"unknown key {key!r}")


KEYS = tuple(RunConfig.__dataclass_fields__)


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` file; raises ConfigError on malformed lines or unknown keys."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mrgmm",
        description="GMM with misspecification-robust standard errors and bootstrap intervals.",
    )
    p.add_argument("command_pos", nargs="?", metavar="COMMAND", help=f"one of {', '.join(COMMANDS)}")
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--command", help="alternative to the positional COMMAND")
    p.add_argument("--model", help="example1, example2, sample_mean, exponential, or module:factory")
    p.add_argument("--data", help="CSV with a header row (estimate, ci)")
    p.add_argument("--estimator", help="auto, one-step, two-step or 2sls")
    p.add_argument("--n", help="sample size(s), comma separated for coverage sweeps")
    p.add_argument("--rho", help="Example 1 normal-scale correlation")
    p.add_argument("--sigma", help="Example 1 lognormal shape")
    p.add_argument("--delta", help="misspecification degree(s), comma separated for coverage sweeps")
    p.add_argument("--lognormal", help="Example 1: transform Z (true) or keep it normal (false)")
    p.add_argument("--gamma1", help="Example 2 first-instrument strength")
    p.add_argument("--gamma2", help="Example 2 second-instrument coefficient (auto: zero pseudo-true bias)")
    p.add_argument("--r", help="Monte Carlo replications")
    p.add_argument("--B", help="bootstrap draws")
    p.add_argument("--levels", help="nominal coverage levels, comma separated")
    p.add_argument("--alpha", help="test level for power studies")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--threads", help="worker processes (output does not depend on it)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ci-kinds", dest="ci_kinds", help=f"subset of {','.join(CI_KINDS)}")
    p.add_argument("--j-tests", dest="j_tests", help="subset of J,J* (empty for none)")
    p.add_argument("--theta-grid", dest="theta_grid", help="power grid, comma separated")
    p.add_argument("--grid-points", dest="grid_points", help="default power grid size")
    p.add_argument("--grid-width", dest="grid_width", help="default power grid half-width in robust standard errors")
    p.add_argument("--oracle-cache", dest="oracle_cache", help="pseudo-true verification cache file")
    return p


def resolve_config(argv) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    raw = read_config_file(args.config) if args.config else {}
    for key in KEYS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    if args.command_pos is not None:
        if args.command is not None and args.command != args.command_pos:
            raise ConfigError("conflicting commands")
        raw["command"] = args.command_pos
    if "command" not in raw:
        raise ConfigError(f"no command given; choose from {', '.join(COMMANDS)}")
    cfg = RunConfig()
    for key, text in raw.items():
        setattr(cfg, key, _convert(key, text))
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig) -> None:
    if cfg.command in ("coverage", "power") and cfg.model not in ("example1", "example2"):
        raise ConfigError(f"{cfg.command} needs model example1 or example2")
    if cfg.command == "power" and (len(cfg.n) > 1 or len(cfg.delta) > 1):
        raise ConfigError("power takes a single n and delta")
    if cfg.command in ("estimate", "ci") and cfg.data is None and cfg.model not in ("example1", "example2"):
        raise ConfigError(f"{cfg.command} needs --data unless the model is example1 or example2")
    if cfg.command in ("estimate", "ci") and cfg.data is None and (len(cfg.n) > 1 or len(cfg.delta) > 1):
        raise ConfigError(f"{cfg.command} takes a single n and delta")


# -- helpers ------------------------------------------------------------------------

def load_model(name: str) -> MomentModel:
    if name in BUILTIN_MODELS:
        return get_model(name)
    if ":" not in name:
        raise ConfigError(f"unknown model {name!r}; use a built-in name or module:factory")
    mod, attr = name.split(":", 1)
    try:
        factory = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load model plugin {name!r}: {exc}") from None
    model = factory()
    if not isinstance(model, MomentModel):
        raise ConfigError(f"model plugin {name!r} did not return a MomentModel")
    return model


def make_spec(cfg: RunConfig, n: int, delta: float):
    if cfg.model == "example1":
        return Example1Spec(n=n, rho=cfg.rho, sigma=cfg.sigma, delta=delta, lognormal=cfg.lognormal)
    return Example2Spec(n=n, delta=delta, gamma1=cfg.gamma1, gamma2=cfg.gamma2)


def _select_columns(model: MomentModel, data: Dataset) -> Dataset:
    if model.columns and set(model.columns) <= set(data.columns):
        return Dataset(np.column_stack([data.column(c) for c in model.columns]), tuple(model.columns))
    if model.columns and data.d != len(model.columns):
        raise ConfigError(f"data columns {data.columns} do not match model columns {model.columns}")
    return data


def load_data(cfg: RunConfig, model: MomentModel):
    """Dataset plus the pseudo-true value when the data are simulated."""
    if cfg.data is not None:
        try:
            data = Dataset.from_csv(cfg.data)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read data: {exc}") from None
        return _select_columns(model, data), None, None
    spec = make_spec(cfg, cfg.n[0], cfg.delta[0])
    return simulate(spec, cfg.seed), spec, pseudo_true(spec)


def fit_model(cfg: RunConfig, model: MomentModel, data: Dataset) -> GmmFit:
    est = cfg.estimator
    if est == "auto":
        est = "2sls" if model.weight_features is not None else "two-step"
    if est == "2sls":
        if model.weight_features is None:
            raise ConfigError("2sls needs a model with instrument features")
        return one_step(model, data, WeightRecipe.outer(model.weight_features))
    if est == "one-step":
        return one_step(model, data)
    return two_step(model, data)


def _base_row(cfg: RunConfig, spec, model: MomentModel, n: int) -> dict:
    row = {"command": cfg.command, **report.spec_fields(spec), "seed": cfg.seed, "n": n}
    row["model"] = model.name if spec is None else spec.example
    return row


# -- commands -------------------------------------------------------------------------

def cmd_estimate(cfg: RunConfig, out: Path) -> str:
    model = load_model(cfg.model)
    data, spec, _ = load_data(cfg, model)
    fit = fit_model(cfg, model, data)
    sig = {"C": sigma_conventional(model, data, fit), "MR": sigma_mr(model, data, fit)}
    base = _base_row(cfg, spec, model, data.n)
    rows = []
    lines = [f"{model.name}: step-{fit.step} GMM, n={data.n}", f"{'param':>6s}{'estimate':>14s}{'se(C)':>12s}{'se(MR)':>12s}"]
    for k in range(model.n_params):
        for kind, s in sig.items():
            rows.append({**base, "param": k, "kind": kind, "estimate": float(fit.theta[k]), "se": s.se(k),
                         "measure": "estimate", "value": float(fit.theta[k])})
        lines.append(f"{k:6d}{fit.theta[k]:14.6f}{sig['C'].se(k):12.6f}{sig['MR'].se(k):12.6f}")
    if model.n_moments > model.n_params:
        fj = fit if fit.step == 2 else two_step(model, data, first_recipe=fit.recipe if fit.recipe.kind == "outer" else None)
        jt = j_test(model, data, fj)
        rows.append({**base, "kind": "J", "level": 0.05, "measure": "statistic", "value": jt.statistic,
                     "critical": jt.critical})
        lines.append(f"J = {jt.statistic:.4f} (df {jt.df}, 5% critical {jt.critical:.4f}, reject={jt.reject})")
    report.write_results_csv(out / "results.csv", rows)
    return "\n".join(lines) + "\n"


def cmd_ci(cfg: RunConfig, out: Path) -> str:
    model = load_model(cfg.model)
    data, spec, truth = load_data(cfg, model)
    fit = fit_model(cfg, model, data)
    base = {**_base_row(cfg, spec, model, data.n), "B": cfg.B, "theta_null": truth}
    plan = ResamplePlan(cfg.B, cfg.seed, 0)
    variances, dists = {}, {}
    rows = []
    lines = [f"{model.name}: step-{fit.step} GMM, n={data.n}, B={cfg.B}",
             f"{'param':>6s}{'kind':>6s}{'level':>7s}{'lo':>15s}{'hi':>15s}"]
    for k in range(model.n_params):
        for kind in cfg.ci_kinds:
            vk = "MR" if kind in ("MR", "MR*") else "C"
            if vk not in variances:
                variances[vk] = sigma_mr(model, data, fit) if vk == "MR" else sigma_conventional(model, data, fit)
            sig = variances[vk]
            if kind.endswith("*") and (kind, k) not in dists:
                scheme = kind[:-1]
                if scheme == "MR":
                    dists[(kind, k)] = mr_bootstrap_t(model, data, fit, plan, k)
                elif scheme == "HH":
                    dists[(kind, k)] = hh_bootstrap_t(model, data, fit, plan, k)
                else:
                    dists[(kind, k)] = bn_bootstrap_t(model, data, fit, el_probabilities(model, data, fit.theta), plan, k)
            for level in cfg.levels:
                if kind.endswith("*"):
                    ci = ci_bootstrap(fit, sig, dists[(kind, k)], k, 1.0 - level)
                else:
                    ci = ci_asymptotic(fit, sig, k, 1.0 - level)
                covered = ci.covers(truth) if truth is not None and k == 0 else None
                rows.append({**base, "param": k, "kind": kind, "level": level, "estimate": ci.center,
                             "se": sig.se(k), "halfwidth": ci.halfwidth, "lo": ci.lo, "hi": ci.hi,
                             "covered": covered, "measure": "interval",
                             "degenerate_rate": 1.0 if ci.degenerate else 0.0})
                lines.append(f"{k:6d}{kind:>6s}{level:7.2f}{ci.lo:15.6f}{ci.hi:15.6f}")
    report.write_results_csv(out / "results.csv", rows)
    return "\n".join(lines) + "\n"


def cmd_coverage(cfg: RunConfig, out: Path) -> str:
    tables = []
    for delta in cfg.delta:
        for n in cfg.n:
            spec = make_spec(cfg, n, delta)
            tables.append(coverage_study(spec, cfg.r, cfg.B, cfg.levels, cfg.seed, cfg.ci_kinds,
                                         cfg.j_tests, cfg.threads, cfg.oracle_cache))
    rows = [row for t in tables for row in report.coverage_rows(t)]
    report.write_results_csv(out / "results.csv", rows)
    text = report.render_coverage_tables(tables)
    fig = report.coverage_figure(tables, cfg.levels[0]) if cfg.ci_kinds else None
    if fig is not None:
        (out / "figure.svg").write_text(fig)
    return text


def cmd_power(cfg: RunConfig, out: Path) -> str:
    spec = make_spec(cfg, cfg.n[0], cfg.delta[0])
    curve = power_study(spec, cfg.r, cfg.B, cfg.alpha, cfg.theta_grid, cfg.seed, cfg.ci_kinds,
                        cfg.threads, cfg.grid_points, cfg.grid_width, cfg.oracle_cache)
    report.write_results_csv(out / "results.csv", report.power_rows(curve))
    (out / "figure.svg").write_text(report.power_figure(curve))
    return report.render_power_table(curve)


def cmd_selftest(cfg: RunConfig, out: Path) -> tuple[str, bool]:
    checks = run_selftest(cfg.seed)
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in checks]
    ok = all(c.passed for c in checks)
    lines.append(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return "\n".join(lines) + "\n", ok


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    start = time.perf_counter()
    if cfg.command == "selftest":
        text, ok = cmd_selftest(cfg, out)
        sys.stdout.write(text)
        return 0 if ok else 1
    out.mkdir(parents=True, exist_ok=True)
    handler = {"estimate": cmd_estimate, "ci": cmd_ci, "coverage": cmd_coverage, "power": cmd_power}[cfg.command]
    text = handler(cfg, out)
    (out / "table.txt").write_text(text)
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    report.write_manifest(out / "manifest.json", config, time.perf_counter() - start)
    sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        sys.stderr.write(f"mrgmm: usage error: {exc}\n")
        return 2
    except SystemExit as exc:  # argparse reports its own usage errors
        return int(exc.code or 0)
    try:
        return run(cfg)
    except ConfigError as exc:
        sys.stderr.write(f"mrgmm: usage error: {exc}\n")
        return 2
    except (GmmError, OSError, ValueError) as exc:
        cause = f" (caused by {type(exc.__cause__).__name__}: {exc.__cause__})" if exc.__cause__ else ""
        sys.stderr.write(f"mrgmm: error: {type(exc).__name__}: {exc}{cause}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
