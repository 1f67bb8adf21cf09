"""Experiment orchestration: JSON configs, seeded ensembles, report files.

A run is fully determined by its config document. Replicates are the only
parallel unit: workers receive primitive tuples, rebuild their sequence spec
locally, and return plain numbers that the parent merges in submission
order, so report.json is byte-identical whatever the worker count. Wall
clock facts (timestamps, worker count, output directory) live in a separate
run_meta.json and never touch the report.

Exit codes: 0 every verdict consistent, 2 at least one flagged, 1 error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import datetime
import io
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .asclt import (
    EXACT_DELTA_MAX_N,
    CriteriaReport,
    DeltaRow,
    IlDiagnostic,
    KsRow,
    criteria_diagnostic,
    criteria_report_to_json,
    delta_rows_to_csv,
    delta_stat,
    exact_gaussian_delta_sq,
    harmonic_weighted_mean,
    il_series_diagnostic,
    ks_distance,
    ks_rows_to_csv,
    log_average_measure,
)
from .covariance import fgn
from .gaussian_sim import GaussianPath, sample_fbm_grid, sample_stationary
from .hermite import expand, resolve_test_function
from .kernels import contraction_norm_sq
from .malliavin import (
    cf_gap_bound,
    cf_rows_to_csv,
    co1_check,
    co2_check,
    gebelein_check,
    malliavin_sample,
)
from .sequences import (
    FbmScaled,
    GeneralF,
    HermiteVariation,
    build_gseries,
    regime_for,
    sigma_limit,
    sigma_n_squared,
    spec_to_json,
    zn_dyadic,
    zn_limit_second_moment,
    zn_second_moment,
)

SCHEMA_VERSION = 1

# Cap for the condition-series diagnostic; beyond this the fits stop moving
# but the contraction grids get expensive.
_CRITERIA_N_CAP = 1 << 12
# Dense il grids below this point are dominated by small-n transients.
_MIN_IL_N = 4
# Derived seed offsets, one disjoint stream per diagnostic within a run.
_SEED_KS = 0
_SEED_IL = 1
_SEED_ZN = 2
_SEED_SEP_SUP = 3
_SEED_SEP_SUB = 4
_SEED_PATHS = 5
_SEED_GEBELEIN = 6
# Subcritical twin used as the contrast in the supercritical experiment.
_SEP_TWIN_H = 0.3
_GEBELEIN_H = 0.7
_GEBELEIN_MAX_LAG = 20
_KERNEL_BOUNDED_RATIO = 2.0
# Largest grid size for the critical boundedness scan; one contraction at
# 2^16 alone costs minutes, far past the desk budget.
_KERNEL_BOUNDED_MAX_N = 1 << 14


class ConfigError(ValueError):
    """A single bad config field; `field` identifies it dot-separated."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config error at '{field}': {message}")
        self.field = field
        self.reason = message


class ConfigValidationError(ValueError):
    """Everything wrong with one config document, collected."""

    def __init__(self, errors: list[ConfigError]):
        super().__init__("; ".join(str(e) for e in errors))
        self.errors = errors


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict
    n_max: int
    n_grid: tuple[int, ...]
    master_seed: int
    replicates: int
    t_grid: tuple[float, ...]
    tolerances: dict
    out_dir: str
    workers: int

    def canonical(self) -> dict:
        """Config echo for report.json; excludes out_dir and workers so the
        report stays byte-identical across relocations and worker counts."""
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "model": dict(self.model),
            "n_max": self.n_max,
            "n_grid": list(self.n_grid),
            "seeds": {"master_seed": self.master_seed, "replicates": self.replicates},
            "t_grid": list(self.t_grid),
            "tolerances": dict(self.tolerances),
        }


@dataclass(frozen=True)
class RunArtifacts:
    report: dict
    csvs: dict[str, str]
    summary: list[str]
    verdict: str
    failures: list[str]


# ---------------------------------------------------------------------------
# Experiment registry. Tuple order is the stable `list` order.

_GRID_DEFAULT = [256, 1024, 4096, 16384, 65536]

_EXPERIMENTS: dict[str, dict] = {
    "asclt_fbm": {
        "description": "log-averaged CLT check for scaled fractional Brownian values",
        "defaults": {
            "model": {"H": 0.5},
            "n_max": 4096,
            "n_grid": [256, 1024, 4096],
            "seeds": {"master_seed": 20240821, "replicates": 100},
            "t_grid": [0.5, 1.0, 2.0],
            "tolerances": {"ks_final_max": 0.35},
        },
    },
    "asclt_hermite_sub": {
        "description": "log-averaged CLT check for subcritical Hermite variations",
        "defaults": {
            "model": {"H": 0.3, "q": 2},
            "n_max": 65536,
            "n_grid": _GRID_DEFAULT,
            "seeds": {"master_seed": 20240821, "replicates": 120},
            "t_grid": [0.5, 1.0],
            "tolerances": {"ks_final_max": 0.35},
        },
    },
    "asclt_hermite_crit": {
        "description": "log-averaged CLT check at the critical Hurst boundary",
        "defaults": {
            "model": {"H": 0.75, "q": 2},
            "n_max": 65536,
            "n_grid": _GRID_DEFAULT,
            "seeds": {"master_seed": 20240821, "replicates": 120},
            "t_grid": [1.0],
            "tolerances": {"ks_final_max": 0.40},
        },
    },
    "asclt_general_f": {
        "description": "log-averaged CLT check for a nonlinear functional of fGn",
        "defaults": {
            "model": {"H": 0.3, "f": "arctan", "expansion_order": 9},
            "n_max": 65536,
            "n_grid": _GRID_DEFAULT,
            "seeds": {"master_seed": 20240821, "replicates": 120},
            "t_grid": [0.5, 1.0],
            "tolerances": {"ks_final_max": 0.35},
        },
    },
    "non_gaussian": {
        "description": "supercritical contrast where the limit stays random",
        "defaults": {
            "model": {"H": 0.9, "q": 2},
            "n_max": 16384,
            "n_grid": _GRID_DEFAULT,
            "seeds": {"master_seed": 20240821, "replicates": 50},
            "t_grid": [1.0],
            "tolerances": {"rel_zn": 0.02},
        },
    },
    "kernels_decay": {
        "description": "contraction-norm decay fits across grid sizes",
        "defaults": {
            "model": {"H": 0.3, "q": 2},
            "n_max": 16384,
            "n_grid": [64, 256, 1024, 4096, 16384],
            "seeds": {"master_seed": 20240821, "replicates": 0},
            "t_grid": [],
            "tolerances": {},
        },
    },
    "delta_exactness": {
        "description": "Monte Carlo vs closed-form averaged characteristic-function gap",
        "defaults": {
            "model": {"H": 0.8},
            "n_max": 1024,
            "n_grid": [1024],
            "seeds": {"master_seed": 20240821, "replicates": 5000},
            "t_grid": [0.5, 1.0, 2.0],
            "tolerances": {"z_max": 4.0},
        },
    },
    "malliavin_bounds": {
        "description": "derivative-norm, characteristic-function, and correlation-bound checks",
        "defaults": {
            "model": {"H": 0.3, "q": 2},
            "n_max": 4096,
            "n_grid": [4096],
            "seeds": {"master_seed": 20240821, "replicates": 200},
            "t_grid": [0.5, 1.0, 2.0],
            "tolerances": {"z_max": 4.0},
        },
    },
    "sigma_limits": {
        "description": "variance normalizer convergence to its certified limit",
        "defaults": {
            "model": {"H": 0.75, "q": 2},
            "n_max": 1000000,
            "n_grid": [10000, 100000, 1000000],
            "seeds": {"master_seed": 20240821, "replicates": 0},
            "t_grid": [],
            "tolerances": {"rel_sigma": 0.10},
        },
    },
}

_TOLERANCE_KEYS = {"ks_final_max", "z_max", "rel_sigma", "rel_zn"}
# Experiments whose KS/il loops need a multi-point grid of usable sizes.
_ASCLT_FAMILY = ("asclt_fbm", "asclt_hermite_sub", "asclt_hermite_crit", "asclt_general_f")


# ---------------------------------------------------------------------------
# Config loading and validation.


def _type_name(v) -> str:
    return type(v).__name__


def _check_int(doc, key, field, errors, minimum=None, maximum=None):
    v = doc.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        errors.append(ConfigError(field, f"expected an integer, got {_type_name(v)}"))
        return None
    if minimum is not None and v < minimum:
        errors.append(ConfigError(field, f"must be >= {minimum}, got {v}"))
        return None
    if maximum is not None and v > maximum:
        errors.append(ConfigError(field, f"must be <= {maximum}, got {v}"))
        return None
    return v


def _check_float(doc, key, field, errors, low=None, high=None, open_ends=False):
    v = doc.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(ConfigError(field, f"expected a number, got {_type_name(v)}"))
        return None
    v = float(v)
    if not math.isfinite(v):
        errors.append(ConfigError(field, "must be finite"))
        return None
    if low is not None and (v <= low if open_ends else v < low):
        errors.append(ConfigError(field, f"must be {'>' if open_ends else '>='} {low}"))
        return None
    if high is not None and (v >= high if open_ends else v > high):
        errors.append(ConfigError(field, f"must be {'<' if open_ends else '<='} {high}"))
        return None
    return v


def _merged_defaults(experiment: str, doc: dict) -> dict:
    base = _EXPERIMENTS[experiment]["defaults"]
    merged = {
        "schema_version": SCHEMA_VERSION,
        "experiment": experiment,
        "model": dict(base["model"]),
        "n_max": base["n_max"],
        "n_grid": list(base["n_grid"]),
        "seeds": dict(base["seeds"]),
        "t_grid": list(base["t_grid"]),
        "tolerances": dict(base["tolerances"]),
        "out_dir": f"runs/{experiment}",
        "workers": 1,
    }
    for key, value in doc.items():
        if key in ("model", "seeds", "tolerances") and isinstance(value, dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def _validate_model(experiment: str, model: dict, errors: list[ConfigError]):
    if not isinstance(model, dict):
        errors.append(ConfigError("model", f"expected an object, got {_type_name(model)}"))
        return
    allowed = {"H"}
    if experiment in (
        "asclt_hermite_sub",
        "asclt_hermite_crit",
        "non_gaussian",
        "kernels_decay",
        "malliavin_bounds",
        "sigma_limits",
    ):
        allowed = {"H", "q"}
    elif experiment == "asclt_general_f":
        allowed = {"H", "f", "expansion_order"}
    for key in model:
        if key not in allowed:
            errors.append(ConfigError(f"model.{key}", "unknown field"))
    H = _check_float(model, "H", "model.H", errors, low=0.0, high=1.0, open_ends=True)
    q = None
    if "q" in allowed:
        q = _check_int(model, "q", "model.q", errors, minimum=2, maximum=10)
    if experiment == "asclt_general_f":
        fname = model.get("f")
        if not isinstance(fname, str):
            errors.append(ConfigError("model.f", "expected a function name string"))
        else:
            try:
                resolve_test_function(fname)
            except ValueError as exc:
                errors.append(ConfigError("model.f", str(exc)))
        _check_int(model, "expansion_order", "model.expansion_order", errors,
                   minimum=1, maximum=40)
    if H is None or ("q" in allowed and q is None):
        return
    # Regime gates: each experiment only makes sense on its own side of the
    # boundary H = 1 - 1/(2q).
    if experiment == "asclt_hermite_crit":
        exact = (2 * q - 1) / (2 * q)
        if H != exact:
            errors.append(ConfigError(
                "model.H", f"critical run needs H = 1 - 1/(2q) = {exact!r} exactly, got {H!r}"
            ))
    elif experiment in ("asclt_hermite_sub", "malliavin_bounds"):
        if regime_for(fgn(H), q) != "subcritical":
            errors.append(ConfigError(
                "model.H", f"needs the subcritical regime: H < {1 - 1 / (2 * q)} for q={q}"
            ))
    elif experiment == "non_gaussian":
        if regime_for(fgn(H), q) != "supercritical":
            errors.append(ConfigError(
                "model.H", f"needs the supercritical regime: H > {1 - 1 / (2 * q)} for q={q}"
            ))
    elif experiment == "sigma_limits":
        if regime_for(fgn(H), q) == "supercritical":
            errors.append(ConfigError(
                "model.H", "no limiting variance in the supercritical regime"
            ))
    elif experiment == "asclt_general_f" and H > 0.5:
        errors.append(ConfigError(
            "model.H", "general functionals need an absolutely summable covariance (H <= 1/2)"
        ))


def validate_config(doc) -> tuple[ExperimentConfig | None, list[ConfigError]]:
    """Validate one parsed JSON document; returns (config, errors)."""
    errors: list[ConfigError] = []
    if not isinstance(doc, dict):
        return None, [ConfigError("<root>", f"expected an object, got {_type_name(doc)}")]

    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(ConfigError(
            "schema_version", f"expected {SCHEMA_VERSION}, got {version!r}"
        ))
    experiment = doc.get("experiment")
    if experiment not in _EXPERIMENTS:
        errors.append(ConfigError(
            "experiment",
            f"unknown experiment {experiment!r}; one of {', '.join(_EXPERIMENTS)}",
        ))
        return None, errors

    known = {
        "schema_version", "experiment", "model", "n_max", "n_grid", "seeds",
        "t_grid", "tolerances", "out_dir", "workers",
    }
    for key in doc:
        if key not in known:
            errors.append(ConfigError(key, "unknown field"))

    merged = _merged_defaults(experiment, doc)
    _validate_model(experiment, merged["model"], errors)

    n_max = _check_int(merged, "n_max", "n_max", errors, minimum=2)
    workers = _check_int(merged, "workers", "workers", errors, minimum=1, maximum=64)
    if not isinstance(merged["out_dir"], str) or not merged["out_dir"]:
        errors.append(ConfigError("out_dir", "expected a non-empty path string"))

    seeds = merged["seeds"]
    master_seed = replicates = None
    if not isinstance(seeds, dict):
        errors.append(ConfigError("seeds", f"expected an object, got {_type_name(seeds)}"))
    else:
        for key in seeds:
            if key not in ("master_seed", "replicates"):
                errors.append(ConfigError(f"seeds.{key}", "unknown field"))
        master_seed = _check_int(seeds, "master_seed", "seeds.master_seed", errors, minimum=0)
        replicates = _check_int(seeds, "replicates", "seeds.replicates", errors, minimum=0)

    n_grid: list[int] = []
    raw_grid = merged["n_grid"]
    if not isinstance(raw_grid, list) or not raw_grid:
        errors.append(ConfigError("n_grid", "expected a non-empty array of integers"))
    else:
        ok = True
        for i, v in enumerate(raw_grid):
            if not isinstance(v, int) or isinstance(v, bool) or v < 2:
                errors.append(ConfigError(f"n_grid[{i}]", "expected an integer >= 2"))
                ok = False
        if ok:
            n_grid = list(raw_grid)
            if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
                errors.append(ConfigError("n_grid", "must be strictly increasing"))

    t_grid: list[float] = []
    raw_t = merged["t_grid"]
    if not isinstance(raw_t, list):
        errors.append(ConfigError("t_grid", "expected an array of numbers"))
    else:
        for i, v in enumerate(raw_t):
            t = _check_float({"t": v}, "t", f"t_grid[{i}]", errors, low=0.0)
            if t is not None:
                t_grid.append(t)

    tolerances = merged["tolerances"]
    if not isinstance(tolerances, dict):
        errors.append(ConfigError("tolerances", f"expected an object, got {_type_name(tolerances)}"))
        tolerances = {}
    else:
        for key in tolerances:
            if key not in _TOLERANCE_KEYS:
                errors.append(ConfigError(f"tolerances.{key}", "unknown field"))
            else:
                _check_float(tolerances, key, f"tolerances.{key}", errors, low=0.0, open_ends=True)

    # Per-experiment coherence, once field-level errors are out of the way.
    if not errors:
        if experiment in _ASCLT_FAMILY:
            if len(n_grid) < 2:
                errors.append(ConfigError("n_grid", "trend needs at least two sizes"))
            elif n_grid[0] < _MIN_IL_N:
                errors.append(ConfigError("n_grid[0]", f"must be >= {_MIN_IL_N}"))
            elif experiment == "asclt_fbm" and sum(
                n <= EXACT_DELTA_MAX_N for n in n_grid
            ) < 2:
                errors.append(ConfigError(
                    "n_grid",
                    f"needs at least two sizes <= {EXACT_DELTA_MAX_N} "
                    "for the closed-form summability reference",
                ))
            if replicates < 2:
                errors.append(ConfigError("seeds.replicates", "needs at least 2 replicates"))
            if not t_grid:
                errors.append(ConfigError("t_grid", "needs at least one frequency"))
        if experiment == "non_gaussian":
            if n_max & (n_max - 1):
                errors.append(ConfigError("n_max", "must be a power of two (dyadic levels)"))
            if replicates < 10:
                errors.append(ConfigError("seeds.replicates", "needs at least 10 replicates"))
            if n_grid[0] < _MIN_IL_N:
                errors.append(ConfigError("n_grid[0]", f"must be >= {_MIN_IL_N}"))
        if experiment == "delta_exactness":
            if n_max > 4096:
                errors.append(ConfigError("n_max", "closed-form reference is capped at 4096"))
            if replicates < 100:
                errors.append(ConfigError("seeds.replicates", "needs at least 100 replicates"))
            if not t_grid:
                errors.append(ConfigError("t_grid", "needs at least one frequency"))
        if experiment == "malliavin_bounds":
            if replicates < 100:
                errors.append(ConfigError("seeds.replicates", "needs at least 100 replicates"))
            if not t_grid:
                errors.append(ConfigError("t_grid", "needs at least one frequency"))
        if experiment in _ASCLT_FAMILY or experiment == "non_gaussian":
            if n_grid and n_grid[-1] > n_max and experiment != "non_gaussian":
                errors.append(ConfigError("n_grid", f"entries must not exceed n_max = {n_max}"))

    if errors:
        return None, errors
    return (
        ExperimentConfig(
            experiment=experiment,
            model=dict(merged["model"]),
            n_max=n_max,
            n_grid=tuple(n_grid),
            master_seed=master_seed,
            replicates=replicates,
            t_grid=tuple(t_grid),
            tolerances=dict(tolerances),
            out_dir=merged["out_dir"],
            workers=workers,
        ),
        [],
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a config file; raises ConfigValidationError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError([ConfigError("<file>", str(exc))]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(
            [ConfigError("<json>", f"line {exc.lineno}, column {exc.colno}: {exc.msg}")]
        ) from exc
    cfg, errors = validate_config(doc)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


# ---------------------------------------------------------------------------
# Replicate workers. Primitive-tuple arguments keep them picklable; every
# worker rebuilds its spec locally and returns plain numbers.


def _build_spec(kind: str, H: float, q: int | None, fname: str | None, order: int | None):
    if kind == "fbm":
        return FbmScaled(H)
    if kind == "hermite":
        return HermiteVariation(fgn(H), q)
    if kind == "general_f":
        return GeneralF(fgn(H), expand(resolve_test_function(fname), order))
    raise ValueError(f"unknown spec kind {kind!r}")


def _spec_args(cfg: ExperimentConfig) -> tuple:
    m = cfg.model
    if cfg.experiment in ("asclt_fbm", "delta_exactness"):
        return ("fbm", m["H"], None, None, None)
    if cfg.experiment == "asclt_general_f":
        return ("general_f", m["H"], None, m["f"], m["expansion_order"])
    return ("hermite", m["H"], m["q"], None, None)


def _guard(fn, args):
    rep = args[-1]
    try:
        return ("ok", fn(args))
    except Exception as exc:  # noqa: BLE001 - reported per replicate
        return ("err", f"replicate {rep}: {type(exc).__name__}: {exc}")


def _ks_prefix_worker(args):
    kind, H, q, fname, order, n_grid, seed, rep = args
    spec = _build_spec(kind, H, q, fname, order)
    path = sample_stationary(spec.model, n_grid[-1], seed, rep)
    out = []
    for n in n_grid:
        g = build_gseries(path, spec, n=n)
        out.append(ks_distance(log_average_measure(g)))
    return tuple(out)


def _ks_guarded(args):
    return _guard(_ks_prefix_worker, args)


def _delta_worker(args):
    kind, H, q, fname, order, n, t_grid, seed, rep = args
    spec = _build_spec(kind, H, q, fname, order)
    path = sample_stationary(spec.model, n, seed, rep)
    g = build_gseries(path, spec)
    return tuple(delta_stat(g, t) for t in t_grid)


def _delta_guarded(args):
    return _guard(_delta_worker, args)


def _path_worker(args):
    H, n, seed, rep = args
    return sample_stationary(fgn(H), n, seed, rep).values


def _path_guarded(args):
    return _guard(_path_worker, args)


def _zn_worker(args):
    H, q, n_top, levels, seed, rep = args
    grid = sample_fbm_grid(H, n_top, seed, rep)
    return tuple(zn_dyadic(grid, q, levels))


def _zn_guarded(args):
    return _guard(_zn_worker, args)


def _sep_worker(args):
    H, q, n, seed, rep = args
    spec = HermiteVariation(fgn(H), q)
    path = sample_stationary(spec.model, n, seed, rep)
    g = build_gseries(path, spec)
    return harmonic_weighted_mean(np.arctan(g.values))


def _sep_guarded(args):
    return _guard(_sep_worker, args)


def _run_replicates(fn, items, workers: int) -> tuple[list, list[str]]:
    """Map a guarded worker over items; in-order merge, failures collected."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        raw = [fn(it) for it in items]
    else:
        chunk = max(1, math.ceil(len(items) / (8 * workers)))
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(fn, items, chunksize=chunk))
    results, failures = [], []
    for status, payload in raw:
        if status == "ok":
            results.append(payload)
        else:
            failures.append(payload)
    return results, failures


# ---------------------------------------------------------------------------
# Shared report pieces.


def _il_to_dict(il: IlDiagnostic) -> dict:
    return {
        "n_grid": list(il.n_grid),
        "verdict": il.verdict,
        "sup_delta_sq": [float(v) for v in il.sup_delta_sq],
        "rows": [
            {
                "t": row.t,
                "delta_sq": [float(v) for v in row.delta_sq],
                "partial_sums": [float(v) for v in row.partial_sums],
                "fitted_decay": row.fitted_decay,
                "verdict": row.verdict,
            }
            for row in il.rows
        ],
    }


def _criteria_to_dict(rep: CriteriaReport) -> dict:
    return json.loads(criteria_report_to_json(rep))


def _ks_trend(cfg: ExperimentConfig, ks_matrix: np.ndarray) -> tuple[dict, bool, list[KsRow]]:
    """Median trend over the grid; the verdict compares first to last and
    checks the final level, which tolerates mid-grid median ties."""
    medians = np.median(ks_matrix, axis=0)
    final_max = float(cfg.tolerances.get("ks_final_max", 0.35))
    decreasing_overall = bool(medians[-1] < medians[0])
    within_final = bool(medians[-1] <= final_max)
    rows = [
        KsRow(n=int(n), seed=rep, ks=float(ks_matrix[rep, i]))
        for rep in range(ks_matrix.shape[0])
        for i, n in enumerate(cfg.n_grid)
    ]
    block = {
        "n_grid": list(cfg.n_grid),
        "medians": [float(v) for v in medians],
        "strictly_decreasing": bool(np.all(np.diff(medians) < 0)),
        "decreasing_overall": decreasing_overall,
        "final_median": float(medians[-1]),
        "final_max": final_max,
        "within_final": within_final,
    }
    return block, decreasing_overall and within_final, rows


def _spec_dict(spec) -> dict:
    return json.loads(spec_to_json(spec))


# ---------------------------------------------------------------------------
# Experiment runners.


def _run_asclt_family(cfg: ExperimentConfig) -> RunArtifacts:
    spec = _build_spec(*_spec_args(cfg))
    items = [
        (*_spec_args(cfg), tuple(cfg.n_grid), cfg.master_seed + _SEED_KS, rep)
        for rep in range(cfg.replicates)
    ]
    ks_rows, failures = _run_replicates(_ks_guarded, items, cfg.workers)
    summary: list[str] = []
    report: dict = {"spec": _spec_dict(spec)}
    pieces: list[bool] = []

    if ks_rows:
        block, ok, rows = _ks_trend(cfg, np.array(ks_rows))
        report["ks"] = block
        pieces.append(ok)
        summary.append(
            f"ks medians {', '.join(f'{v:.4f}' for v in block['medians'])} "
            f"(final <= {block['final_max']}: {'yes' if block['within_final'] else 'NO'})"
        )
    else:
        rows = []
        pieces.append(False)
        summary.append("ks trend: no successful replicates")

    # FbmScaled uses the closed-form second moment, which is capped; the il
    # grid is trimmed to the cap there while KS keeps the full grid.
    exact_il = isinstance(spec, FbmScaled)
    il_grid = [n for n in cfg.n_grid if not exact_il or n <= EXACT_DELTA_MAX_N]
    il = il_series_diagnostic(
        spec,
        cfg.t_grid,
        n_grid=il_grid,
        master_seed=None if exact_il else cfg.master_seed + _SEED_IL,
        replicates=0 if exact_il else cfg.replicates,
    )
    report["il"] = _il_to_dict(il)
    # The Monte Carlo decay-slope statistic sits within about one standard
    # error of its threshold at desk scale, so only the deterministic
    # closed-form reference participates in the verdict; the condition fits
    # below carry regime detection for the sampled cases.
    il_in_verdict = exact_il
    report["il"]["in_verdict"] = il_in_verdict
    if il_in_verdict:
        pieces.append(il.verdict == "consistent")
    summary.append(
        f"il summability ({'exact' if exact_il else 'mc'}): {il.verdict}"
        + ("" if il_in_verdict else " [informational]")
    )

    crit_report = criteria_diagnostic(spec, n_max=min(cfg.n_max, _CRITERIA_N_CAP))
    report["criteria"] = _criteria_to_dict(crit_report)
    pieces.append(crit_report.verdict == "consistent")
    summary.append(f"decay-condition fits: {crit_report.verdict}")

    if cfg.experiment == "asclt_hermite_crit":
        grid = [n for n in cfg.n_grid if 64 <= n <= _KERNEL_BOUNDED_MAX_N]
        if not grid:
            grid = [min(cfg.n_grid[-1], _KERNEL_BOUNDED_MAX_N)]
        vals = [
            contraction_norm_sq(spec.model, spec.q, 1, n).value * math.log(n)
            for n in grid
        ]
        bounded = bool(max(vals) <= _KERNEL_BOUNDED_RATIO * min(vals))
        report["kernel_log_bounded"] = {
            "n_grid": grid,
            "values": [float(v) for v in vals],
            "max_over_min": float(max(vals) / min(vals)),
            "bounded": bounded,
        }
        pieces.append(bounded)
        summary.append(
            f"contraction * log n within ratio {max(vals) / min(vals):.3f} "
            f"(bounded: {'yes' if bounded else 'NO'})"
        )

    verdict = "consistent" if all(pieces) else "flagged"
    buf = io.StringIO()
    ks_rows_to_csv(rows, buf)
    return RunArtifacts(report, {"ks.csv": buf.getvalue()}, summary, verdict, failures)


def _run_non_gaussian(cfg: ExperimentConfig) -> RunArtifacts:
    H, q = cfg.model["H"], cfg.model["q"]
    spec = HermiteVariation(fgn(H), q)
    report: dict = {"spec": _spec_dict(spec)}
    summary: list[str] = []
    failures: list[str] = []

    # Deterministic second-moment convergence of the dyadic-level statistic.
    rel_zn = float(cfg.tolerances.get("rel_zn", 0.02))
    limit = zn_limit_second_moment(q, H)
    exact = zn_second_moment(q, H, cfg.n_max)
    moment_ok = abs(exact / limit - 1.0) <= rel_zn
    report["zn_moment"] = {
        "n": cfg.n_max,
        "exact": float(exact),
        "limit": float(limit),
        "rel_gap": float(abs(exact / limit - 1.0)),
        "within": bool(moment_ok),
    }
    summary.append(
        f"E[Z^2] at n={cfg.n_max}: {exact:.6f} vs limit {limit:.6f} "
        f"({'within' if moment_ok else 'OUTSIDE'} {rel_zn:.0%})"
    )

    # Pathwise Cauchy behaviour across dyadic levels, one fBm grid per seed.
    top = int(math.log2(cfg.n_max))
    levels = list(range(max(6, top - 6), top + 1, 2))
    items = [
        (H, q, cfg.n_max, tuple(levels), cfg.master_seed + _SEED_ZN, rep)
        for rep in range(cfg.replicates)
    ]
    zrows, fail = _run_replicates(_zn_guarded, items, cfg.workers)
    failures += fail
    zn_csv = "level_lo,level_hi,median_abs_diff\n"
    cauchy_ok = False
    if zrows:
        diffs = np.abs(np.diff(np.array(zrows), axis=1))
        med = np.median(diffs, axis=0)
        cauchy_ok = bool(np.all(np.diff(med) < 0))
        report["zn_cauchy"] = {
            "levels": levels,
            "median_abs_diff": [float(v) for v in med],
            "decreasing": cauchy_ok,
        }
        for i in range(len(med)):
            zn_csv += f"{levels[i]},{levels[i + 1]},{repr(float(med[i]))}\n"
        summary.append(
            f"dyadic Cauchy medians {', '.join(f'{v:.5f}' for v in med)} "
            f"(decreasing: {'yes' if cauchy_ok else 'NO'})"
        )
    else:
        summary.append("dyadic Cauchy: no successful replicates")

    # Across-seed spread of the log-averaged arctan mean, against the
    # subcritical twin; reported as evidence, not a verdict piece.
    sep_n = min(cfg.n_max, cfg.n_grid[-1])
    sup_items = [
        (H, q, sep_n, cfg.master_seed + _SEED_SEP_SUP, rep)
        for rep in range(cfg.replicates)
    ]
    sub_items = [
        (_SEP_TWIN_H, q, sep_n, cfg.master_seed + _SEED_SEP_SUB, rep)
        for rep in range(cfg.replicates)
    ]
    sup_vals, fail = _run_replicates(_sep_guarded, sup_items, cfg.workers)
    failures += fail
    sub_vals, fail = _run_replicates(_sep_guarded, sub_items, cfg.workers)
    failures += fail
    if sup_vals and sub_vals:
        sup_std = float(np.std(np.array(sup_vals), ddof=1))
        sub_std = float(np.std(np.array(sub_vals), ddof=1))
        report["separation"] = {
            "n": sep_n,
            "sup_std": sup_std,
            "sub_twin_H": _SEP_TWIN_H,
            "sub_std": sub_std,
            "ratio": sup_std / sub_std,
        }
        summary.append(
            f"across-seed std of log-averaged arctan mean: {sup_std:.4f} vs "
            f"subcritical {sub_std:.4f} (ratio {sup_std / sub_std:.2f})"
        )

    il = il_series_diagnostic(
        spec,
        cfg.t_grid,
        n_grid=list(cfg.n_grid),
        master_seed=cfg.master_seed + _SEED_IL,
        replicates=cfg.replicates,
    )
    report["il"] = _il_to_dict(il)
    report["il"]["in_verdict"] = False
    summary.append(f"il summability (mc): {il.verdict} [informational]")

    # Verdict rests on the deterministic condition fits: the contraction
    # series here has no decaying envelope, so flagged is the expected
    # outcome, and the exit code reports it honestly.
    crit_report = criteria_diagnostic(spec, n_max=min(cfg.n_max, _CRITERIA_N_CAP))
    report["criteria"] = _criteria_to_dict(crit_report)
    summary.append(f"decay-condition fits: {crit_report.verdict}")

    verdict = "consistent"
    if crit_report.verdict == "flagged" or not (moment_ok and cauchy_ok):
        verdict = "flagged"
    summary.append("expected outcome: flagged (limit law is random, not Gaussian)")
    return RunArtifacts(report, {"zn_cauchy.csv": zn_csv}, summary, verdict, failures)


def _run_kernels_decay(cfg: ExperimentConfig) -> RunArtifacts:
    H, q = cfg.model["H"], cfg.model["q"]
    model = fgn(H)
    rows = []
    csv = "n,r,contraction_norm_sq\n"
    slopes = {}
    for r in range(1, q):
        vals = [contraction_norm_sq(model, q, r, n).value for n in cfg.n_grid]
        slope = float(np.polyfit(np.log(cfg.n_grid), np.log(vals), 1)[0])
        slopes[r] = slope
        rows.append({
            "r": r,
            "n_grid": list(cfg.n_grid),
            "values": [float(v) for v in vals],
            "fitted_slope": slope,
        })
        for n, v in zip(cfg.n_grid, vals):
            csv += f"{n},{r},{repr(float(v))}\n"
    verdict = "consistent" if all(s < 0.0 for s in slopes.values()) else "flagged"
    summary = [
        f"r={r}: fitted decay slope {s:.4f} ({'negative' if s < 0 else 'NOT negative'})"
        for r, s in slopes.items()
    ]
    report = {"model": {"H": H, "q": q}, "contractions": rows}
    return RunArtifacts(report, {"contractions.csv": csv}, summary, verdict, [])


def _run_delta_exactness(cfg: ExperimentConfig) -> RunArtifacts:
    spec = FbmScaled(cfg.model["H"])
    z_max = float(cfg.tolerances.get("z_max", 4.0))
    items = [
        (*_spec_args(cfg), cfg.n_max, tuple(cfg.t_grid), cfg.master_seed, rep)
        for rep in range(cfg.replicates)
    ]
    vals, failures = _run_replicates(_delta_guarded, items, cfg.workers)
    if not vals:
        raise RuntimeError(f"all replicates failed; first: {failures[0]}")
    rows, drows, worst = [], [], 0.0
    for i, t in enumerate(cfg.t_grid):
        sq = np.abs(np.array([v[i] for v in vals])) ** 2
        mc = float(sq.mean())
        se = float(sq.std(ddof=1) / math.sqrt(len(sq)))
        exact = exact_gaussian_delta_sq(spec, cfg.n_max, t)
        z = 0.0 if se == 0.0 and mc == exact else (mc - exact) / se
        worst = max(worst, abs(z))
        rows.append({"t": t, "mc": mc, "exact": float(exact), "stderr": se, "z": float(z)})
        drows.append(DeltaRow(cfg.n_max, t, mc, float(exact), se))
    verdict = "consistent" if worst <= z_max and not failures else "flagged"
    summary = [
        f"t={r['t']}: mc {r['mc']:.6f} vs exact {r['exact']:.6f} (z = {r['z']:+.2f})"
        for r in rows
    ] + [f"max |z| = {worst:.2f} (tolerance {z_max})"]
    report = {
        "spec": _spec_dict(spec),
        "n": cfg.n_max,
        "replicates": cfg.replicates,
        "rows": rows,
        "max_abs_z": float(worst),
    }
    buf = io.StringIO()
    delta_rows_to_csv(drows, buf)
    return RunArtifacts(report, {"delta.csv": buf.getvalue()}, summary, verdict, failures)


def _run_malliavin_bounds(cfg: ExperimentConfig) -> RunArtifacts:
    H, q = cfg.model["H"], cfg.model["q"]
    spec = HermiteVariation(fgn(H), q)
    z_max = float(cfg.tolerances.get("z_max", 4.0))
    items = [
        (H, cfg.n_max, cfg.master_seed + _SEED_PATHS, rep)
        for rep in range(cfg.replicates)
    ]
    values, failures = _run_replicates(_path_guarded, items, cfg.workers)
    if not values:
        raise RuntimeError(f"all replicates failed; first: {failures[0]}")
    paths = [
        GaussianPath(spec.model, cfg.n_max, v, cfg.master_seed + _SEED_PATHS, rep)
        for rep, v in enumerate(values)
    ]
    report: dict = {"spec": _spec_dict(spec), "n": cfg.n_max, "replicates": len(paths)}
    summary: list[str] = []
    pieces: list[bool] = []

    dg = np.array([malliavin_sample(p, spec, with_d2g=False).dg_norm_sq for p in paths])
    mean = float(dg.mean() / q)
    se = float(dg.std(ddof=1) / q / math.sqrt(len(dg)))
    z = (mean - 1.0) / se
    pieces.append(abs(z) <= z_max)
    report["dg_norm"] = {"mean_over_q": mean, "stderr": se, "z": float(z)}
    summary.append(f"mean ||DG||^2 / q = {mean:.5f} (z = {z:+.2f})")

    cf_rows = [cf_gap_bound(spec, paths, t) for t in cfg.t_grid]
    holds = [r.gap_mc <= r.bound + 4.0 * r.gap_se for r in cf_rows]
    pieces.append(all(holds))
    report["cf_gap"] = [
        {
            "t": r.t, "gap_mc": float(r.gap_mc), "gap_se": float(r.gap_se),
            "bound": float(r.bound), "holds": bool(ok),
        }
        for r, ok in zip(cf_rows, holds)
    ]
    summary += [
        f"t={r.t}: cf gap {r.gap_mc:.5f} <= bound {r.bound:.5f} + 4se: "
        f"{'yes' if ok else 'NO'}"
        for r, ok in zip(cf_rows, holds)
    ]

    # Fourth-moment prefactor checks, reported as printed and with the
    # first-power variant; printed-bound violations are findings, not run
    # failures, so they stay out of the verdict.
    for check in (co1_check(spec, paths), co2_check(spec, paths)):
        report[check.name] = {
            "mc_mean": float(check.mc_mean),
            "mc_se": float(check.mc_se),
            "bound_as_printed": float(check.bound_as_printed),
            "bound_first_power": float(check.bound_first_power),
            "violates_printed": bool(check.violates_printed),
            "violates_first_power": bool(check.violates_first_power),
        }
        summary.append(
            f"{check.name}: mc {check.mc_mean:.4f}, printed bound "
            f"{check.bound_as_printed:.4f}"
            + (" [VIOLATED as printed]" if check.violates_printed else "")
        )

    geb_items = [
        (_GEBELEIN_H, min(cfg.n_max, 2048), cfg.master_seed + _SEED_GEBELEIN, rep)
        for rep in range(cfg.replicates)
    ]
    geb_values, fail = _run_replicates(_path_guarded, geb_items, cfg.workers)
    failures += fail
    geb_paths = [
        GaussianPath(fgn(_GEBELEIN_H), min(cfg.n_max, 2048), v,
                     cfg.master_seed + _SEED_GEBELEIN, rep)
        for rep, v in enumerate(geb_values)
    ]
    geb = gebelein_check(geb_paths, np.arctan, range(_GEBELEIN_MAX_LAG + 1))
    pieces.append(all(row.holds for row in geb))
    report["gebelein"] = {
        "H": _GEBELEIN_H,
        "f": "arctan",
        "rows": [
            {"lag": row.lag, "cov_mc": float(row.cov_mc), "se": float(row.se),
             "bound": float(row.bound), "holds": bool(row.holds)}
            for row in geb
        ],
    }
    summary.append(
        f"gebelein holds at all lags 0..{_GEBELEIN_MAX_LAG}: "
        f"{'yes' if all(row.holds for row in geb) else 'NO'}"
    )

    geb_csv = "lag,cov_mc,se,bound,holds\n" + "".join(
        f"{row.lag},{repr(float(row.cov_mc))},{repr(float(row.se))},"
        f"{repr(float(row.bound))},{int(row.holds)}\n"
        for row in geb
    )
    buf = io.StringIO()
    cf_rows_to_csv(cf_rows, buf)
    verdict = "consistent" if all(pieces) and not failures else "flagged"
    return RunArtifacts(
        report, {"cf_gap.csv": buf.getvalue(), "gebelein.csv": geb_csv},
        summary, verdict, failures,
    )


def _run_sigma_limits(cfg: ExperimentConfig) -> RunArtifacts:
    H, q = cfg.model["H"], cfg.model["q"]
    model = fgn(H)
    regime = regime_for(model, q)
    rel = float(cfg.tolerances.get("rel_sigma", 0.10))
    lim = sigma_limit(model, q)
    vals = [sigma_n_squared(model, q, n, regime) for n in cfg.n_grid]
    gaps = [abs(v - lim.value) for v in vals]
    monotone = bool(np.all(np.diff(gaps) < 0))
    final_gap = abs(vals[-1] / lim.value - 1.0)
    within = final_gap <= rel
    verdict = "consistent" if within and monotone else "flagged"
    csv = "n,sigma_sq\n" + "".join(
        f"{n},{repr(float(v))}\n" for n, v in zip(cfg.n_grid, vals)
    )
    report = {
        "model": {"H": H, "q": q},
        "regime": regime,
        "n_grid": list(cfg.n_grid),
        "sigma_sq": [float(v) for v in vals],
        "limit": float(lim.value),
        "limit_remainder_bound": float(lim.remainder_bound),
        "final_rel_gap": float(final_gap),
        "rel_tolerance": rel,
        "monotone_approach": monotone,
        "within": bool(within),
    }
    summary = [
        f"sigma_n^2 at n={n}: {v:.6f}" for n, v in zip(cfg.n_grid, vals)
    ] + [
        f"certified limit {lim.value:.6f} (remainder <= {lim.remainder_bound:.2e})",
        f"final rel gap {final_gap:.4f} vs tolerance {rel} "
        f"({'within' if within else 'OUTSIDE'}), monotone approach: "
        f"{'yes' if monotone else 'NO'}",
    ]
    return RunArtifacts(report, {"sigma.csv": csv}, summary, verdict, [])


_RUNNERS = {
    "asclt_fbm": _run_asclt_family,
    "asclt_hermite_sub": _run_asclt_family,
    "asclt_hermite_crit": _run_asclt_family,
    "asclt_general_f": _run_asclt_family,
    "non_gaussian": _run_non_gaussian,
    "kernels_decay": _run_kernels_decay,
    "delta_exactness": _run_delta_exactness,
    "malliavin_bounds": _run_malliavin_bounds,
    "sigma_limits": _run_sigma_limits,
}


# ---------------------------------------------------------------------------
# Run orchestration and report emission.


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def render_report(artifacts: RunArtifacts, cfg: ExperimentConfig) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "config": cfg.canonical(),
        "results": artifacts.report,
        "failures": artifacts.failures,
        "verdict": artifacts.verdict,
        "versions": {
            "asclt_lab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n"


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    return _RUNNERS[cfg.experiment](cfg)


def run(cfg: ExperimentConfig, echo=print) -> int:
    started = datetime.datetime.now(datetime.timezone.utc)
    t0 = time.monotonic()
    artifacts = run_experiment(cfg)
    elapsed = time.monotonic() - t0

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(render_report(artifacts, cfg))
    for name, text in artifacts.csvs.items():
        (out / name).write_text(text)
    lines = [f"{cfg.experiment}:"]
    lines += [f"  {s}" for s in artifacts.summary]
    if artifacts.failures:
        lines += [f"  failure: {f}" for f in artifacts.failures]
    lines.append(f"verdict: {artifacts.verdict}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    meta = {
        "started_utc": started.isoformat(),
        "elapsed_seconds": elapsed,
        "out_dir": str(out),
        "workers": cfg.workers,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    for line in lines:
        echo(line)
    if artifacts.failures:
        return 1
    return 0 if artifacts.verdict == "consistent" else 2


def list_experiments(echo=print) -> None:
    """Catalog in registry order: name, role, canonical default config."""
    for name, entry in _EXPERIMENTS.items():
        echo(f"{name} -> {entry['description']}")
        doc = _merged_defaults(name, {})
        doc.pop("out_dir")
        doc.pop("workers")
        echo(f"    default: {json.dumps(doc, sort_keys=True)}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="asclt-lab",
        description="Numerical experiments on log-averaged limit behaviour "
        "of normalized Gaussian functionals.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the config JSON")
    p_run.add_argument("--seed", type=int, default=None, help="override seeds.master_seed")
    p_run.add_argument("--workers", type=int, default=None, help="override worker count")
    p_run.add_argument("--out", default=None, help="override the output directory")
    sub.add_parser("list", help="print the experiment catalog and defaults")
    p_val = sub.add_parser("validate", help="validate a config without running it")
    p_val.add_argument("--config", required=True, help="path to the config JSON")

    args = parser.parse_args(argv)
    if args.command == "list":
        list_experiments()
        return 0

    try:
        cfg = load_config(args.config)
    except ConfigValidationError as exc:
        for err in exc.errors:
            print(str(err), file=sys.stderr)
        return 1

    if args.command == "validate":
        print(f"ok: valid {cfg.experiment} config")
        return 0

    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            print("config error at 'workers': must be >= 1", file=sys.stderr)
            return 1
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        base = cfg.canonical()
        seeds = base.pop("seeds")
        cfg = ExperimentConfig(
            experiment=base["experiment"],
            model=base["model"],
            n_max=base["n_max"],
            n_grid=tuple(base["n_grid"]),
            master_seed=overrides.get("master_seed", seeds["master_seed"]),
            replicates=seeds["replicates"],
            t_grid=tuple(base["t_grid"]),
            tolerances=base["tolerances"],
            out_dir=overrides.get("out_dir", cfg.out_dir),
            workers=overrides.get("workers", cfg.workers),
        )

    try:
        return run(cfg)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    with contextlib.suppress(KeyboardInterrupt):
        sys.exit(main())
