"""Quick internal consistency checks, each against its own oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .bootstrap import el_probabilities, quantile_index
from .estimate import two_step
from .experiments import Example1Spec, simulate_example1
from .model import Dataset, check_derivatives
from .models import BUILTIN_MODELS, combining_data, sample_mean
from .variance import omega_robust, sigma_conventional, sigma_mr

# Random123 known-answer vectors for Philox4x32-10: (counter, key, output)
PHILOX_KAT = (
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    (
        (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
        (0xA4093822, 0x299F31D0),
        (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
    ),
)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def brute_force_quantile(values, level: float) -> float:
    """Smallest sample value minimizing ``|#{V <= v}/B - level|`` by direct search."""
    v = np.asarray(values, dtype=float)
    B = v.size
    best, arg = np.inf, np.inf
    for c in np.unique(v):
        dev = abs(np.sum(v <= c) / B - level)
        if dev < best - 1e-12:
            best, arg = dev, c
    return float(arg)


def _check_philox() -> Check:
    bad = 0
    for counter, key, want in PHILOX_KAT:
        got = tuple(int(w) for w in rng.philox4x32(counter, key))
        bad += got != want
    return Check("philox known answers", bad == 0, f"{len(PHILOX_KAT) - bad}/{len(PHILOX_KAT)} vectors match")


def _builtin_data(name: str, gen: np.random.Generator) -> tuple[Dataset, np.ndarray]:
    n = 60
    if name == "example1":
        X = np.column_stack([gen.normal(size=n), gen.normal(size=n)])
        return Dataset(X), np.array([0.3])
    if name == "example2":
        return Dataset(gen.normal(size=(n, 4))), np.array([0.2])
    if name == "sample_mean":
        return Dataset(gen.normal(size=(n, 1))), np.array([0.1])
    x = gen.uniform(-1, 1, size=n)
    y = np.exp(0.2 + 0.5 * x) + 0.1 * gen.normal(size=n)
    return Dataset(np.column_stack([y, x])), np.array([0.1, 0.4])


def _check_derivatives(gen) -> Check:
    worst = 0.0
    for name, factory in BUILTIN_MODELS.items():
        data, theta = _builtin_data(name, gen)
        rep = check_derivatives(factory(), data, theta)
        worst = max(worst, rep.jacobian_error, rep.second_error)
    return Check("finite-difference derivatives", worst <= 1e-6, f"max relative error {worst:.2e}")


def _check_quantiles(gen, cases: int = 300) -> Check:
    bad = 0
    for _ in range(cases):
        B = int(gen.integers(1, 51))
        vals = np.sort(np.round(np.abs(gen.normal(size=B)), int(gen.integers(0, 3))))
        level = float(gen.uniform(0.01, 0.99))
        bad += vals[quantile_index(vals, level)] != brute_force_quantile(vals, level)
    return Check("quantile rule vs brute force", bool(bad == 0), f"{cases - bad}/{cases} cases agree")


def _example1_fit(gen):
    data = simulate_example1(Example1Spec(n=80, delta=-0.4), int(gen.integers(1 << 30)))
    model = combining_data()
    return model, data, two_step(model, data)


def _check_weight_influence(gen) -> Check:
    model, data, fit = _example1_fit(gen)
    parts = omega_robust(model, data, fit)
    ratio = float(np.max(np.abs(parts.W_terms.mean(axis=0))) / np.max(np.abs(fit.weight)))
    return Check("weight influence terms mean zero", ratio <= 1e-12, f"relative mean {ratio:.2e}")


def _check_just_identified(gen) -> Check:
    model = sample_mean()
    data = Dataset(gen.lognormal(size=(50, 1)))
    fit = two_step(model, data)
    a = sigma_mr(model, data, fit).sigma
    b = sigma_conventional(model, data, fit).sigma
    rel = float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
    return Check("just-identified robust = conventional", rel <= 1e-10, f"relative difference {rel:.2e}")


def _check_el(gen) -> Check:
    model, data, fit = _example1_fit(gen)
    w = el_probabilities(model, data, fit.theta)
    g = model.g(data.values, fit.theta)
    err = float(np.max(np.abs(w.p @ g))) if w.converged else np.inf
    return Check("EL weights satisfy the moment condition", err <= 1e-8, f"max |sum p_i g_i| {err:.2e}")


def run_selftest(seed: int = 0) -> list[Check]:
    gen = np.random.default_rng(seed)
    return [
        _check_philox(),
        _check_derivatives(gen),
        _check_quantiles(gen),
        _check_weight_influence(gen),
        _check_just_identified(gen),
        _check_el(gen),
    ]
