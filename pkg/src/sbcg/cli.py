"""Benchmark harness CLI: generate data, compute references, run solver
grids over seeds, aggregate traces onto a common query grid, and render
static SVG plots plus a text report."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .core import ConfigurationError, KtSchedule, ReferenceValues
from .problems import (
    DictionaryProblem,
    IngestionError,
    ReferenceFailureError,
    gen_dictionary_data,
    gen_synthetic_regression,
    load_regression_csv,
    make_dictionary_bilevel,
    make_regression_bilevel,
    recovery_rate,
    reference_values,
)
from .solvers import (
    Schedule,
    SolverConfig,
    aripseg_run,
    dbgd_sto_run,
    fw_single_level_run,
    iterations_for_budget,
    sbcg_m_run,
    sbcgf_run,
    sbcgi_run,
    warm_start_x0,
)

TRACE_HEADER = "iter,queries,wall_ms,g_gap,f_gap,fw_gap,task_metric,fallbacks"
CG_ALGS = ("sbcgi", "sbcgf", "sbcgi-m", "sbcgf-m", "storm-fw", "spider-fw")
ALL_ALGS = CG_ALGS + ("aripseg", "dbgd")

# Benchmark default hyperparameters for the two experiment families.
DEFAULTS = {
    "regression": {
        "problem": {"kind": "regression-synth", "rows": "20", "dim": "100",
                    "noise": "0.01", "lam": "10.0", "data_seed": "0"},
        "run": {"budget": "900000", "seeds": "0,1,2,3,4,5,6,7,8,9",
                "algorithms": "sbcgi,sbcgf,aripseg,dbgd",
                "warm_start_budget": "100000", "out": "out/regression"},
        "sbcgi": {"gamma_coeff": "0.01", "gamma_power": "1.0",
                  "kt_mode": "manual", "kt_kappa": "1e-4", "kt_power": "0.5",
                  "batch": "1", "omega": "1.0"},
        "sbcgf": {"gamma_coeff": "1e-5", "gamma_power": "0",
                  "kt_mode": "manual", "kt_kappa": "1e-4", "kt_power": "0.5"},
        "aripseg": {"gamma0": "1e-7", "rho0": "1e3", "r": "1.0", "batch": "1"},
        "dbgd": {"alpha": "1.0", "beta": "1.0", "gamma": "1e-6", "batch": "1"},
    },
    "dictionary": {
        "problem": {"kind": "dictionary", "scale": "desk", "delta": "3.0",
                    "data_seed": "0"},
        "run": {"budget": "200000", "seeds": "0,1,2,3,4,5,6,7,8,9",
                "algorithms": "sbcgi,sbcgf,aripseg,dbgd",
                "out": "out/dictionary"},
        "sbcgi": {"gamma_coeff": "0.1", "gamma_power": "0.6666666666666666",
                  "kt_mode": "manual", "kt_kappa": "0.01",
                  "kt_power": "0.3333333333333333", "batch": "8",
                  "omega": "0.6666666666666666"},
        "sbcgf": {"gamma_coeff": "1e-3", "gamma_power": "0",
                  "kt_mode": "manual", "kt_kappa": "0.01",
                  "kt_power": "0.3333333333333333"},
        "aripseg": {"gamma0": "1e-4", "rho0": "1.0", "r": "1.0", "batch": "8"},
        "dbgd": {"alpha": "100.0", "beta": "100.0", "gamma": "5e-3",
                 "batch": "8"},
    },
}


def git_style_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fmt(x) -> str:
    return format(float(x), ".17g")


def out_root() -> Path:
    return Path(os.environ.get("SBCG_OUT_ROOT", "."))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config(path: Optional[str], overrides: Optional[Dict] = None
                ) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
    for section, values in (overrides or {}).items():
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in values.items():
            cp.set(section, k, str(v))
    if not cp.has_section("problem"):
        raise ConfigurationError("config needs a [problem] section")
    return cp


def default_config_text(problem: str) -> str:
    if problem not in DEFAULTS:
        raise ConfigurationError(f"no defaults for problem {problem!r}")
    cp = configparser.ConfigParser()
    for section, values in DEFAULTS[problem].items():
        cp.add_section(section)
        for k, v in values.items():
            cp.set(section, k, v)
    import io
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


@dataclass
class ProblemBundle:
    """Problem data shared by all runs of one comparison grid."""

    kind: str
    regression: Optional[object] = None
    dictionary: Optional[DictionaryProblem] = None
    descriptor: dict = field(default_factory=dict)

    def content_key(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.descriptor, sort_keys=True).encode())
        if self.regression is not None:
            for arr in (self.regression.A_tr, self.regression.b_tr,
                        self.regression.A_val, self.regression.b_val,
                        self.regression.A_test, self.regression.b_test):
                h.update(np.ascontiguousarray(arr).tobytes())
        if self.dictionary is not None:
            for arr in (self.dictionary.A, self.dictionary.A_new,
                        self.dictionary.D_true):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def build_problem(cp: configparser.ConfigParser) -> ProblemBundle:
    sec = cp["problem"]
    kind = sec.get("kind", "regression-synth")
    if kind == "regression-synth":
        prob = gen_synthetic_regression(
            rows_per_split=sec.getint("rows", 20),
            dim=sec.getint("dim", 100),
            noise_std=sec.getfloat("noise", 0.01),
            seed=sec.getint("data_seed", 0),
            lam=sec.getfloat("lam", 10.0))
        return ProblemBundle(kind="regression", regression=prob,
                             descriptor=dict(sec))
    if kind == "regression-csv":
        prob = load_regression_csv(sec.get("path"),
                                   sec.getint("target_column", 0),
                                   sec.getint("data_seed", 0),
                                   sec.getfloat("lam", 10.0))
        return ProblemBundle(kind="regression", regression=prob,
                             descriptor=dict(sec))
    if kind == "dictionary":
        dims = {}
        if sec.get("scale", "desk") == "full":
            dims = dict(m=25, q=50, p=40, p_new=20, n=250, n_new=250)
        prob = gen_dictionary_data(sec.getint("data_seed", 0),
                                   delta=sec.getfloat("delta", 3.0), **dims)
        return ProblemBundle(kind="dictionary", dictionary=prob,
                             descriptor=dict(sec))
    raise ConfigurationError(f"unknown problem kind {kind!r}")


def _schedule_from(sec, prefix="gamma") -> Schedule:
    return Schedule(coeff=sec.getfloat(f"{prefix}_coeff", 1.0),
                    power=sec.getfloat(f"{prefix}_power", 1.0))


def _kt_from(sec) -> KtSchedule:
    mode = sec.get("kt_mode", "theorem")
    return KtSchedule(mode=mode, kappa=sec.getfloat("kt_kappa", 0.0),
                      power=sec.getfloat("kt_power", 0.5),
                      abs_const=sec.getfloat("kt_abs_const", 1.0))


def _alg_section(cp, algorithm):
    base = algorithm.replace("-m", "").replace("storm-fw", "sbcgi").replace(
        "spider-fw", "sbcgf")
    if cp.has_section(algorithm):
        return cp[algorithm]
    if cp.has_section(base):
        return cp[base]
    cp.add_section(algorithm)
    return cp[algorithm]


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

def write_trace_csv(path: Path, trace, meta: dict):
    lines = [TRACE_HEADER]
    for r in trace.records:
        lines.append(",".join([
            str(r.iteration), str(r.oracle_queries), _fmt(r.wall_ms),
            _fmt(r.g_gap), _fmt(r.f_gap), _fmt(r.fw_gap),
            _fmt(r.task_metric), str(r.cut_fallback_count)]))
    data = ("\n".join(lines) + "\n").encode()
    path.write_bytes(data)
    meta = dict(meta)
    meta["content_hash"] = git_style_hash(data)
    meta["status"] = trace.status
    meta["cut_fallbacks"] = trace.cut_fallbacks
    meta["probe_violations"] = trace.probe_violations
    path.with_suffix(".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_trace_csv(path: Path) -> List[dict]:
    lines = path.read_text().strip().split("\n")
    if lines[0] != TRACE_HEADER:
        raise ConfigurationError(f"{path}: unexpected trace header")
    cols = TRACE_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append({c: float(v) for c, v in zip(cols, vals)})
    return rows


# ---------------------------------------------------------------------------
# reference cache
# ---------------------------------------------------------------------------

def _refs_cache_path(out_dir: Path) -> Path:
    return out_dir / "references.txt"


def load_cached_refs(out_dir: Path, key: str) -> Optional[dict]:
    path = _refs_cache_path(out_dir)
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        if line.startswith(key + " "):
            return json.loads(line[len(key) + 1:])
    return None


def store_cached_refs(out_dir: Path, key: str, payload: dict):
    path = _refs_cache_path(out_dir)
    existing = path.read_text() if path.exists() else ""
    lines = [ln for ln in existing.splitlines() if not ln.startswith(key + " ")]
    lines.append(key + " " + json.dumps(payload, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def compute_references(bundle: ProblemBundle, out_dir: Path, seed: int = 0,
                       log=print):
    """Reference optima for the bundle, via the cache when possible.

    Dictionary references depend on the seeded initialization, so the cache
    key includes the seed; regression references are data-only.
    """
    if bundle.kind == "regression":
        key = f"regression-{bundle.content_key()}"
    else:
        key = f"dictionary-{bundle.content_key()}-s{seed}"
    cached = load_cached_refs(out_dir, key)
    if cached is not None:
        log(f"reference cache hit: {key}")
        return cached, key
    if bundle.kind == "regression":
        bilevel, _ = make_regression_bilevel(bundle.regression)
        refs = reference_values(bilevel)
        payload = {"g_star": refs.g_star, "f_star": refs.f_star,
                   "tolerance": refs.tolerance,
                   "f_star_tolerance": refs.f_star_tolerance}
    else:
        inst = make_dictionary_bilevel(bundle.dictionary, seed)
        refs = reference_values(inst.bilevel)
        payload = {"g_star": refs.g_star, "f_star": refs.f_star,
                   "tolerance": refs.tolerance,
                   "f_star_tolerance": refs.f_star_tolerance}
    store_cached_refs(out_dir, key, payload)
    log(f"reference computed: {key} g*={payload['g_star']:.6e} "
        f"f*={payload['f_star']:.6e}")
    return payload, key


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

def run_single(cp: configparser.ConfigParser, bundle: ProblemBundle,
               algorithm: str, seed: int, out_dir: Path, refs_payload: dict,
               timing: bool = False) -> Path:
    """Execute one (algorithm, seed) cell and write its trace CSV."""
    if algorithm not in ALL_ALGS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}")
    run_sec = cp["run"] if cp.has_section("run") else {}
    budget = int(run_sec.get("budget", 100000))
    warm_budget = int(run_sec.get("warm_start_budget", 100000))
    log_points = int(run_sec.get("log_points", 400))
    eps_g = float(run_sec.get("eps_g", 1e-2))
    delta = float(run_sec.get("delta", 0.1))
    sec = _alg_section(cp, algorithm)
    batch = sec.getint("batch", 1)

    if bundle.kind == "regression":
        bilevel, task = make_regression_bilevel(bundle.regression)
        base = SolverConfig(horizon=1, eps_g=eps_g, delta=delta, seed=seed,
                            warm_start_budget=warm_budget,
                            log_points=log_points, measure_time=timing)
        x0, g_x0 = warm_start_x0(bilevel, base)
        query_offset = warm_budget
    else:
        inst = make_dictionary_bilevel(bundle.dictionary, seed)
        bilevel, task = inst.bilevel, inst.task_metric
        x0 = inst.x0
        g_x0 = bilevel.lower.full_value(x0)
        query_offset = 0

    refs = ReferenceValues(g_star=refs_payload["g_star"],
                           f_star=refs_payload["f_star"],
                           tolerance=refs_payload["tolerance"],
                           g_x0=g_x0,
                           f_star_tolerance=refs_payload.get("f_star_tolerance"))

    n_u = bilevel.upper.n_components or 0
    n_l = bilevel.lower.n_components or 0
    horizon = iterations_for_budget(algorithm, budget, batch=batch,
                                    n_upper=n_u, n_lower=n_l)
    gamma = _schedule_from(sec) if algorithm not in ("aripseg", "dbgd") else \
        Schedule(coeff=sec.getfloat("gamma", 1e-6), power=0.0)
    config = SolverConfig(
        horizon=horizon, eps_g=eps_g, delta=delta,
        omega=sec.getfloat("omega", 1.0), gamma=gamma, batch=batch,
        kt=_kt_from(sec), seed=seed, warm_start_budget=warm_budget,
        log_points=log_points, measure_time=timing)

    if algorithm == "sbcgi":
        trace = sbcgi_run(bilevel, config, x0, refs, task=task)
    elif algorithm == "sbcgf":
        trace = sbcgf_run(bilevel, config, x0, refs, task=task)
    elif algorithm in ("sbcgi-m", "sbcgf-m"):
        trace = sbcg_m_run(bilevel, config, x0, refs,
                           variant=algorithm[:-2], task=task)
    elif algorithm in ("storm-fw", "spider-fw"):
        estimator = "storm" if algorithm == "storm-fw" else "spider"
        trace = fw_single_level_run(bilevel.lower, bilevel.set, config,
                                    estimator=estimator, x_init=x0,
                                    budget=budget,
                                    objective_ref=refs.g_star)
        # single-level runs track only the lower objective; refill metrics
        trace = _refill_metrics(trace, bilevel, refs, task, config)
    elif algorithm == "aripseg":
        trace = aripseg_run(bilevel, config, refs,
                            gamma0=sec.getfloat("gamma0", 1e-7),
                            rho0=sec.getfloat("rho0", 1e3),
                            avg_exponent=sec.getfloat("r", 1.0),
                            x_init=x0, task=task)
    else:
        trace = dbgd_sto_run(bilevel, config, refs,
                             alpha=sec.getfloat("alpha", 1.0),
                             beta=sec.getfloat("beta", 1.0),
                             g_floor=sec.getfloat("g_floor", 0.0),
                             x_init=x0, task=task)

    if query_offset and algorithm in CG_ALGS:
        for r in trace.records:
            r.oracle_queries += query_offset

    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"trace_{algorithm}_seed{seed}.csv"
    meta = {"algorithm": algorithm, "seed": seed, "budget": budget,
            "problem": bundle.descriptor, "refs": refs_payload,
            "g_x0": g_x0, "query_offset": query_offset,
            "config": {k: sec.get(k) for k in sec.keys()} if sec else {},
            "fw_gap_kind": config.track_fw_gap,
            "final_x": [float(v) for v in trace.final_x]}
    write_trace_csv(path, trace, meta)
    return path


def _refill_metrics(trace, bilevel, refs, task, config):
    """Recompute full bilevel metrics along a single-level trace."""
    from .core import evaluate_metrics
    # The single-level loop logged only its own objective; final_x walks are
    # not retained, so refill only the endpoints that matter for reports.
    for rec in trace.records:
        rec.f_gap = math.nan
        rec.task_metric = math.nan
    final = trace.records[-1]
    metrics = evaluate_metrics(trace.final_x, bilevel, refs, task,
                               iteration=final.iteration,
                               oracle_queries=final.oracle_queries)
    metrics.wall_ms = final.wall_ms
    trace.records[-1] = metrics
    return trace


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

AGG_METRICS = ("g_gap", "f_gap", "abs_f_gap", "fw_gap", "task_metric",
               "fallbacks")


def aggregate_runs(paths: List[Path], grid_points: int = 120):
    """Median/min/max of each metric per algorithm on a shared query grid.

    Runs are stepped onto the grid by last observation carried forward
    (backfilling with the first record below it), which makes aggregation
    independent of per-algorithm logging cadence.
    """
    by_alg: Dict[str, List[List[dict]]] = {}
    for path in sorted(paths):
        name = path.stem  # trace_<alg>_seed<k>
        alg = name.split("_")[1]
        by_alg.setdefault(alg, []).append(read_trace_csv(path))
    all_q = [r["queries"] for runs in by_alg.values() for run in runs
             for r in run]
    lo = max(1.0, min(q for q in all_q if q > 0) if any(q > 0 for q in all_q)
             else 1.0)
    hi = max(all_q + [lo + 1])
    grid = np.unique(np.round(np.geomspace(lo, hi, grid_points)))
    rows = []
    for alg in sorted(by_alg):
        runs = by_alg[alg]
        for q in grid:
            per_metric = {m: [] for m in AGG_METRICS}
            for run in runs:
                rec = run[0]
                for r in run:
                    if r["queries"] <= q:
                        rec = r
                    else:
                        break
                per_metric["g_gap"].append(rec["g_gap"])
                per_metric["f_gap"].append(rec["f_gap"])
                per_metric["abs_f_gap"].append(abs(rec["f_gap"]))
                per_metric["fw_gap"].append(rec["fw_gap"])
                per_metric["task_metric"].append(rec["task_metric"])
                per_metric["fallbacks"].append(rec["fallbacks"])
            row = {"algorithm": alg, "queries": float(q)}
            for m in AGG_METRICS:
                vals = np.asarray(per_metric[m])
                row[f"{m}_median"] = float(np.nanmedian(vals)) if not np.all(
                    np.isnan(vals)) else math.nan
                row[f"{m}_min"] = float(np.nanmin(vals)) if not np.all(
                    np.isnan(vals)) else math.nan
                row[f"{m}_max"] = float(np.nanmax(vals)) if not np.all(
                    np.isnan(vals)) else math.nan
            rows.append(row)
    return rows


def write_aggregate_csv(path: Path, rows: List[dict]):
    cols = ["algorithm", "queries"] + [f"{m}_{s}" for m in AGG_METRICS
                                       for s in ("median", "min", "max")]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(
            row["algorithm"] if c == "algorithm" else _fmt(row[c])
            for c in cols))
    path.write_text("\n".join(lines) + "\n")


def read_aggregate_csv(path: Path) -> List[dict]:
    lines = path.read_text().strip().split("\n")
    cols = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for c, v in zip(cols, vals):
            row[c] = v if c == "algorithm" else float(v)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# SVG plots
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#7f7f7f")


def write_svg_plot(path: Path, title: str, series: Dict[str, tuple],
                   ylabel: str, logy: bool = True):
    """Static log-x line plot with min/max bands.

    ``series`` maps a label to (x, y_median, y_min, y_max) arrays.
    """
    width, height = 640, 420
    ml, mr, mt, mb = 70, 20, 40, 50
    finite = []
    for xs, ys, y0, y1 in series.values():
        for arr in (ys, y0, y1):
            finite.extend(v for v in arr if np.isfinite(v) and (not logy or v > 0))
    xs_all = [x for xs, *_ in series.values() for x in xs if x > 0]
    if not finite or not xs_all:
        path.write_text("<svg xmlns='http://www.w3.org/2000/svg'/>\n")
        return
    x_lo, x_hi = math.log10(min(xs_all)), math.log10(max(xs_all))
    if logy:
        y_lo, y_hi = math.log10(min(finite)), math.log10(max(finite))
    else:
        y_lo, y_hi = min(finite), max(finite)
    if x_hi - x_lo < 1e-9:
        x_hi = x_lo + 1
    if y_hi - y_lo < 1e-9:
        y_hi = y_lo + 1

    def px(x):
        return ml + (math.log10(max(x, 1e-300)) - x_lo) / (x_hi - x_lo) * (
            width - ml - mr)

    def py(y):
        v = math.log10(max(y, 1e-300)) if logy else y
        return height - mb - (v - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' "
             f"height='{height}' font-family='sans-serif' font-size='12'>",
             f"<rect x='{ml}' y='{mt}' width='{width-ml-mr}' "
             f"height='{height-mt-mb}' fill='none' stroke='#333'/>",
             f"<text x='{width/2:.0f}' y='20' text-anchor='middle' "
             f"font-size='14'>{title}</text>",
             f"<text x='{width/2:.0f}' y='{height-12}' "
             f"text-anchor='middle'>oracle queries</text>",
             f"<text x='16' y='{height/2:.0f}' text-anchor='middle' "
             f"transform='rotate(-90 16 {height/2:.0f})'>{ylabel}</text>"]
    for decade in range(math.floor(x_lo), math.ceil(x_hi) + 1):
        x = px(10.0 ** decade)
        if ml <= x <= width - mr:
            parts.append(f"<line x1='{x:.1f}' y1='{mt}' x2='{x:.1f}' "
                         f"y2='{height-mb}' stroke='#ddd'/>")
            parts.append(f"<text x='{x:.1f}' y='{height-mb+16}' "
                         f"text-anchor='middle'>1e{decade}</text>")
    if logy:
        for decade in range(math.floor(y_lo), math.ceil(y_hi) + 1):
            y = py(10.0 ** decade)
            if mt <= y <= height - mb:
                parts.append(f"<line x1='{ml}' y1='{y:.1f}' x2='{width-mr}' "
                             f"y2='{y:.1f}' stroke='#ddd'/>")
                parts.append(f"<text x='{ml-6}' y='{y+4:.1f}' "
                             f"text-anchor='end'>1e{decade}</text>")
    for idx, (label, (xs, ys, y0, y1)) in enumerate(sorted(series.items())):
        color = PALETTE[idx % len(PALETTE)]
        pts = [(x, lo, hi) for x, lo, hi in zip(xs, y0, y1)
               if x > 0 and np.isfinite(lo) and np.isfinite(hi)
               and (not logy or (lo > 0 and hi > 0))]
        if pts:
            band = " ".join(f"{px(x):.1f},{py(hi):.1f}" for x, _, hi in pts)
            band += " " + " ".join(f"{px(x):.1f},{py(lo):.1f}"
                                   for x, lo, _ in reversed(pts))
            parts.append(f"<polygon points='{band}' fill='{color}' "
                         f"opacity='0.15' stroke='none'/>")
        line = [(x, y) for x, y in zip(xs, ys)
                if x > 0 and np.isfinite(y) and (not logy or y > 0)]
        if line:
            pl = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in line)
            parts.append(f"<polyline points='{pl}' fill='none' "
                         f"stroke='{color}' stroke-width='1.5'/>")
        ly = mt + 16 + 16 * idx
        parts.append(f"<line x1='{width-mr-110}' y1='{ly-4}' "
                     f"x2='{width-mr-86}' y2='{ly-4}' stroke='{color}' "
                     f"stroke-width='2'/>")
        parts.append(f"<text x='{width-mr-80}' y='{ly}'>{label}</text>")
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def render_plots(out_dir: Path, rows: List[dict], kind: str):
    by_alg: Dict[str, List[dict]] = {}
    for row in rows:
        by_alg.setdefault(row["algorithm"], []).append(row)
    jobs = [("g_gap", "lower-level gap", True),
            ("abs_f_gap", "upper-level gap", True),
            ("task_metric",
             "test error" if kind == "regression" else "recovery rate",
             kind == "regression")]
    for metric, label, logy in jobs:
        series = {}
        for alg, rs in by_alg.items():
            xs = [r["queries"] for r in rs]
            series[alg] = (xs, [r[f"{metric}_median"] for r in rs],
                           [r[f"{metric}_min"] for r in rs],
                           [r[f"{metric}_max"] for r in rs])
        write_svg_plot(out_dir / f"plot_{metric}.svg", label, series, label,
                       logy=logy)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = out_root() / args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.problem == "regression":
        prob = gen_synthetic_regression(args.rows, args.dim, args.noise,
                                        args.seed, lam=args.lam)
        for name, A, b in (("train", prob.A_tr, prob.b_tr),
                           ("val", prob.A_val, prob.b_val),
                           ("test", prob.A_test, prob.b_test)):
            data = np.hstack([A, b[:, None]])
            lines = [",".join(_fmt(v) for v in row) for row in data]
            (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote 3 splits to {out}")
        return 0
    if args.problem == "dict":
        dims = dict(m=25, q=50, p=40, p_new=20, n=250, n_new=250) \
            if args.full else {}
        prob = gen_dictionary_data(args.seed, delta=args.delta, **dims)
        save_dictionary_dir(out, prob)
        print(f"wrote dictionary data to {out}")
        return 0
    raise ConfigurationError(f"unknown problem {args.problem!r}")


def save_dictionary_dir(out: Path, prob: DictionaryProblem):
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "A.npy", prob.A)
    np.save(out / "A_new.npy", prob.A_new)
    np.save(out / "D_true.npy", prob.D_true)
    meta = {"delta": prob.delta, "m": prob.m, "p": prob.p,
            "p_new": prob.p_new, "q": prob.q,
            "shared_atoms": prob.shared_atoms}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_dictionary_dir(path: Path) -> DictionaryProblem:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    return DictionaryProblem(A=np.load(path / "A.npy"),
                             A_new=np.load(path / "A_new.npy"),
                             D_true=np.load(path / "D_true.npy"), **meta)


def cmd_reference(args) -> int:
    cp = load_config(args.config)
    bundle = build_problem(cp)
    out = out_root() / (args.out or cp["run"].get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    payload, key = compute_references(bundle, out, seed=args.seed)
    print(f"{key}: g_star={payload['g_star']:.9e} "
          f"f_star={payload['f_star']:.9e} tol={payload['tolerance']:.1e}")
    return 0


def cmd_run(args) -> int:
    cp = load_config(args.config)
    bundle = build_problem(cp)
    out = out_root() / (args.out or cp["run"].get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    payload, _ = compute_references(bundle, out, seed=args.seed)
    path = run_single(cp, bundle, args.algorithm, args.seed, out, payload,
                      timing=args.timing)
    print(f"wrote {path}")
    return 0


def _grid_cell(cfg_path, overrides, algorithm, seed, out_str, payload,
               timing):
    cp = load_config(cfg_path, overrides)
    bundle = build_problem(cp)
    return str(run_single(cp, bundle, algorithm, seed, Path(out_str),
                          payload, timing=timing))


def cmd_compare(args) -> int:
    cp = load_config(args.config)
    bundle = build_problem(cp)
    run_sec = cp["run"]
    out = out_root() / (args.out or run_sec.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in run_sec.get("seeds", "0").replace(",", " ").split()]
    algorithms = run_sec.get("algorithms", "sbcgi").replace(",", " ").split()

    ref_payloads = {}
    for seed in (seeds if bundle.kind == "dictionary" else [0]):
        payload, _ = compute_references(bundle, out, seed=seed)
        ref_payloads[seed] = payload

    t0 = time.perf_counter()
    cells = [(alg, seed) for alg in algorithms for seed in seeds]
    paths, failures = [], []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = {
                pool.submit(_grid_cell, args.config, {}, alg, seed, str(out),
                            ref_payloads[seed if bundle.kind == "dictionary"
                                         else 0], args.timing): (alg, seed)
                for alg, seed in cells}
            for fut, cell in futures.items():
                try:
                    paths.append(Path(fut.result()))
                except Exception as exc:  # noqa: BLE001 - recorded per policy
                    failures.append((cell, str(exc)))
    else:
        for alg, seed in cells:
            try:
                paths.append(Path(_grid_cell(
                    args.config, {}, alg, seed, str(out),
                    ref_payloads[seed if bundle.kind == "dictionary" else 0],
                    args.timing)))
            except Exception as exc:  # noqa: BLE001
                failures.append(((alg, seed), str(exc)))

    per_alg_ok = {}
    for p in paths:
        per_alg_ok.setdefault(p.stem.split("_")[1], 0)
        per_alg_ok[p.stem.split("_")[1]] += 1
    for alg in algorithms:
        if per_alg_ok.get(alg, 0) * 2 < len(seeds):
            print(f"warning: {alg} succeeded on {per_alg_ok.get(alg, 0)}"
                  f"/{len(seeds)} seeds; aggregation skips it", file=sys.stderr)

    keep = [p for p in paths
            if per_alg_ok.get(p.stem.split("_")[1], 0) * 2 >= len(seeds)]
    rows = aggregate_runs(keep)
    write_aggregate_csv(out / "aggregate.csv", rows)
    render_plots(out, rows, bundle.kind)

    initial_task = math.nan
    if bundle.kind == "dictionary":
        vals = []
        for seed in seeds:
            inst = make_dictionary_bilevel(bundle.dictionary, seed)
            vals.append(inst.task_metric(inst.x0))
        initial_task = float(np.median(vals))
    manifest = {"kind": bundle.kind, "algorithms": algorithms,
                "seeds": seeds, "budget": run_sec.get("budget"),
                "failures": failures, "initial_task_metric": initial_task,
                "references": ref_payloads,
                "elapsed_s": round(time.perf_counter() - t0, 3)}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"aggregated {len(keep)} runs -> {out/'aggregate.csv'}")
    return 0


def final_rows(rows: List[dict]) -> Dict[str, dict]:
    out = {}
    for row in rows:
        cur = out.get(row["algorithm"])
        if cur is None or row["queries"] > cur["queries"]:
            out[row["algorithm"]] = row
    return out


def cmd_report(args) -> int:
    out = out_root() / args.dir
    agg = out / "aggregate.csv"
    if not agg.exists():
        print(f"no runs found under {out}")
        return 0
    rows = read_aggregate_csv(agg)
    manifest = json.loads((out / "manifest.json").read_text()) \
        if (out / "manifest.json").exists() else {}
    finals = final_rows(rows)
    kind = manifest.get("kind", "regression")
    task_name = "test_error" if kind == "regression" else "recovery"
    print(f"{'algorithm':<10} {'g_gap(med)':>13} {'|f_gap|(med)':>13} "
          f"{task_name + '(med)':>15} {'fallbacks':>10}")
    for alg in sorted(finals):
        row = finals[alg]
        print(f"{alg:<10} {row['g_gap_median']:>13.4e} "
              f"{row['abs_f_gap_median']:>13.4e} "
              f"{row['task_metric_median']:>15.4e} "
              f"{row['fallbacks_max']:>10.0f}")

    checks = []
    if kind == "regression":
        need = {"sbcgi", "sbcgf", "aripseg", "dbgd"}
        if need <= set(finals):
            g = {a: finals[a]["g_gap_median"] for a in need}
            checks.append(("g_gap ordering sbcgf < sbcgi < baselines",
                           g["sbcgf"] < g["sbcgi"] < min(g["aripseg"],
                                                         g["dbgd"])))
            te = {a: finals[a]["task_metric_median"] for a in need}
            trio = [te["sbcgi"], te["sbcgf"], te["dbgd"]]
            checks.append(("test errors of sbcgi/sbcgf/dbgd within 5%",
                           max(trio) <= 1.05 * min(trio)))
            checks.append(("all test errors below aripseg",
                           max(trio) < te["aripseg"]))
    elif kind == "dictionary":
        if {"sbcgi", "sbcgf", "aripseg", "dbgd"} <= set(finals):
            g = {a: finals[a]["g_gap_median"] for a in
                 ("sbcgi", "sbcgf", "aripseg", "dbgd")}
            checks.append(("sbcgf has the smallest g_gap",
                           g["sbcgf"] <= min(g.values())))
            rec = {a: finals[a]["task_metric_median"] for a in g}
            init = manifest.get("initial_task_metric", math.nan)
            ok = all(rec[a] >= rec["aripseg"] and
                     (math.isnan(init) or rec[a] >= init)
                     for a in ("sbcgi", "sbcgf", "dbgd"))
            checks.append(("recovery of sbcgi/sbcgf/dbgd >= aripseg and "
                           ">= initial", ok))
    for label, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {label}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sbcg",
        description="stochastic simple-bilevel conditional-gradient benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic datasets")
    g.add_argument("--problem", required=True, choices=["regression", "dict"])
    g.add_argument("--rows", type=int, default=20)
    g.add_argument("--dim", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--lam", type=float, default=10.0)
    g.add_argument("--delta", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--full", action="store_true",
                   help="full-size dictionary dimensions")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("reference", help="compute and cache reference optima")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_reference)

    one = sub.add_parser("run", help="one (algorithm, seed) trace")
    one.add_argument("--config", required=True)
    one.add_argument("--algorithm", required=True)
    one.add_argument("--seed", type=int, default=0)
    one.add_argument("--out", default=None)
    one.add_argument("--timing", action="store_true",
                     help="record wall time (breaks byte determinism)")
    one.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run the algorithm x seed grid")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--workers", type=int, default=1)
    cmp_.add_argument("--out", default=None)
    cmp_.add_argument("--timing", action="store_true")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="final-gap table and ordering checks")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=cmd_report)

    pd = sub.add_parser("print-defaults", help="dump benchmark parameter sets")
    pd.add_argument("--problem", required=True,
                    choices=["regression", "dictionary"])
    pd.set_defaults(func=lambda a: (print(default_config_text(a.problem)), 0)[1])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ReferenceFailureError as exc:
        print(f"reference failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
