"""Output files: results.csv, table.txt, figure.svg and manifest.json.

``results.csv`` has one row per interval, test or estimate cell and always
the columns in :data:`COLUMNS`, in that order.  Missing values are ``NA``;
floats use Python's shortest round-trip representation, so the file is
byte-identical whenever the numbers are.

==================  ==========================================================
column              meaning
==================  ==========================================================
command             estimate | ci | coverage | power
model               model name (example1, example2, sample_mean, plugin id)
n .. lognormal      design parameters (NA for user data)
r, B, seed          replications, bootstrap draws, master seed
param               parameter index
kind                C, MR, HH*, BN*, MR* (intervals, t tests) or J, J*
level               nominal coverage (intervals) or test level
theta_null          null value (power rows) or pseudo-true value (coverage)
estimate            point estimate (mean over replications in studies)
se                  standard error of ``kind``'s variance
halfwidth           interval half-width (mean over replications in studies)
lo, hi              interval end points
covered             1/0 when the truth is known for a single interval
measure             what ``value`` holds: coverage, rejection, statistic
value               the measured frequency or statistic
mc_stderr           Monte Carlo standard error ``sqrt(p (1 - p) / m)``
critical            critical value (size-corrected for power rows)
degenerate_rate     share of zero-length (failed Brown-Newey) intervals
failures            replications excluded for this cell
==================  ==========================================================
"""

from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import asdict
from pathlib import Path

import numpy as np

COLUMNS = (
    "command", "model", "n", "rho", "sigma", "delta", "gamma1", "gamma2", "lognormal",
    "r", "B", "seed", "param", "kind", "level", "theta_null", "estimate", "se",
    "halfwidth", "lo", "hi", "covered", "measure", "value", "mc_stderr", "critical",
    "degenerate_rate", "failures",
)

_SPEC_FIELDS = ("n", "rho", "sigma", "delta", "gamma1", "gamma2", "lognormal")


def fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "NA" if math.isnan(v) else repr(v)
    return str(value)


def spec_fields(spec) -> dict:
    out = dict.fromkeys(_SPEC_FIELDS)
    if spec is None:
        return out
    fields = asdict(spec)
    for key in _SPEC_FIELDS:
        if key in fields:
            out[key] = fields[key]
    if "gamma2" in fields and fields["gamma2"] is None:
        out["gamma2"] = spec.gamma2_value
    out["model"] = spec.example
    return out


def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    unknown = {k for row in rows for k in row} - set(COLUMNS)
    if unknown:
        raise ValueError(f"unknown result columns: {sorted(unknown)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in COLUMNS])


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- row builders ---------------------------------------------------------------

def coverage_rows(table) -> list[dict]:
    base = {"command": "coverage", **spec_fields(table.spec), "r": table.r, "B": table.B,
            "seed": table.seed, "param": 0, "theta_null": table.pseudo_true}
    rows = []
    for c in table.cells:
        rows.append({**base, "kind": c.kind, "level": c.level, "estimate": table.mean_estimate,
                     "halfwidth": c.mean_halfwidth, "measure": "coverage", "value": c.coverage,
                     "mc_stderr": c.mc_stderr, "degenerate_rate": c.degenerate_rate, "failures": c.failures})
    for c in table.j_cells:
        rows.append({**base, "kind": c.kind, "level": c.level, "estimate": table.mean_estimate,
                     "measure": "rejection", "value": c.rate, "mc_stderr": c.mc_stderr, "failures": c.failures})
    return rows


def power_rows(curve) -> list[dict]:
    base = {"command": "power", **spec_fields(curve.spec), "r": curve.r, "B": curve.B,
            "seed": curve.seed, "param": 0, "level": curve.alpha}
    rows = []
    for kind, freq in curve.rejection.items():
        m = curve.r - curve.failures[kind]
        for theta, p in zip(curve.grid, freq):
            se = math.sqrt(p * (1 - p) / m) if m > 0 and np.isfinite(p) else math.nan
            rows.append({**base, "kind": kind, "theta_null": float(theta), "measure": "rejection",
                         "value": float(p), "mc_stderr": se, "critical": curve.critical[kind],
                         "failures": curve.failures[kind]})
    return rows


# -- text tables ----------------------------------------------------------------------

def _num(v: float, width: int = 7, digits: int = 3) -> str:
    return f"{v:{width}.{digits}f}" if np.isfinite(v) else f"{'NA':>{width}}"


def render_coverage_tables(tables: list) -> str:
    """Blocks per misspecification degree, columns per (n, level), rows per kind."""
    if not tables:
        return ""
    by_delta: dict = {}
    for t in tables:
        by_delta.setdefault(t.spec.delta, []).append(t)
    levels = [c.level for c in tables[0].cells if c.kind == tables[0].cells[0].kind] if tables[0].cells else []
    lines = [f"{tables[0].spec.example}: coverage of nominal intervals (r={tables[0].r}, B={tables[0].B}, seed={tables[0].seed})"]
    for delta, group in by_delta.items():
        group = sorted(group, key=lambda t: t.spec.n)
        header = f"{'':10s}" + "".join(f"{'n=' + str(t.spec.n):>{8 * max(1, len(levels))}s}" for t in group)
        sub = f"{'kind':10s}" + "".join(f"{lv:8.2f}" for _ in group for lv in levels)
        lines += ["", f"delta = {delta:g}  (pseudo-true {group[0].pseudo_true:.4f})", header, sub]
        kinds = list(dict.fromkeys(c.kind for c in group[0].cells))
        for kind in kinds:
            vals = "".join(" " + _num(t.cell(kind, lv).coverage) for t in group for lv in levels)
            lines.append(f"{kind:10s}{vals}")
        for jc in group[0].j_cells:
            vals = "".join(f"{_num(100 * t.j_cell(jc.kind).rate, 7, 1)}%" + " " * (8 * max(1, len(levels)) - 8)
                           for t in group)
            lines.append(f"{jc.kind + ' 5%':10s}{vals}")
    return "\n".join(lines) + "\n"


def render_power_table(curve) -> str:
    kinds = list(curve.rejection)
    lines = [f"{curve.spec.example}: size-corrected power at level {curve.alpha:g} (r={curve.r}, B={curve.B}, seed={curve.seed})",
             "critical: " + ", ".join(f"{k}={curve.critical[k]:.4f}" for k in kinds),
             f"{'theta':>10s}" + "".join(f"{k:>8s}" for k in kinds)]
    for i, theta in enumerate(curve.grid):
        lines.append(f"{theta:10.4f}" + "".join(" " + _num(curve.rejection[k][i]) for k in kinds))
    return "\n".join(lines) + "\n"


# -- SVG ----------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 420, ylim=(0.0, 1.0)) -> str:
    """Polyline chart; ``series`` maps a label to ``(x, y)`` sequences."""
    left, right, top, bottom = 60, 130, 40, 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    y0, y1 = ylim
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for frac in np.linspace(0, 1, 6):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(f'<line x1="{left - 4}" y1="{py(yv):.1f}" x2="{left}" y2="{py(yv):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
        out.append(f'<line x1="{px(xv):.1f}" y1="{top + ph}" x2="{px(xv):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 18}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{pts}"/>')
        ly = top + 16 * (i + 1)
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def coverage_figure(tables: list, level: float) -> str | None:
    """Coverage against delta, one series per kind; None unless several deltas share an n."""
    by_n: dict = {}
    for t in tables:
        by_n.setdefault(t.spec.n, []).append(t)
    n, group = max(by_n.items(), key=lambda kv: len(kv[1]))
    if len(group) < 2:
        return None
    group = sorted(group, key=lambda t: t.spec.delta)
    kinds = list(dict.fromkeys(c.kind for c in group[0].cells))
    series = {k: ([t.spec.delta for t in group], [t.cell(k, level).coverage for t in group]) for k in kinds}
    return svg_line_chart(series, f"Coverage of {level:.0%} intervals, n={n}", "delta", "coverage")


def power_figure(curve) -> str:
    series = {k: (curve.grid, v) for k, v in curve.rejection.items()}
    return svg_line_chart(series, f"Size-corrected power, n={curve.spec.n}", "theta under the null", "rejection frequency")


def write_manifest(path: str | Path, config: dict, wall_time: float) -> None:
    import scipy

    from . import __version__

    info = {
        "config": config,
        "seed": config.get("seed"),
        "versions": {"mrgmm": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_seconds": wall_time,
    }
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
