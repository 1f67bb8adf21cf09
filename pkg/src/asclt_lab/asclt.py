"""Log-averaged empirical measures and almost-sure CLT diagnostics.

The measurement layer: weighted empirical measures of a normalized series,
exact Kolmogorov distances to the target law, the log-averaged
characteristic-function statistic with its Monte-Carlo and closed-form
Gaussian second moments, and numerical summability diagnostics for the
averaging criteria. Verdicts are trend evidence, never proofs: a series
whose partial sums flatten on a finite grid is reported "consistent",
anything else "flagged".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .covariance import CovarianceModel, abs_rho_power_sum
from .gaussian_sim import GaussianPath, sample_ensemble
from .kernels import contraction_norm_sq
from .malliavin import _normalizer_sq, _quad_fourth_moment
from .sequences import (
    FbmScaled,
    GeneralF,
    GSeries,
    HermiteVariation,
    SequenceSpec,
    build_gseries,
    cross_covariance,
    geometric_grid,
)

__all__ = [
    "LogAveragedMeasure",
    "EmpiricalTarget",
    "DeltaEstimate",
    "IlRow",
    "IlDiagnostic",
    "ConditionDiagnostic",
    "CriteriaReport",
    "KsRow",
    "DeltaRow",
    "DEFAULT_T_GRID",
    "log_average_measure",
    "empirical_target",
    "ks_distance",
    "harmonic_weighted_mean",
    "delta_stat",
    "delta_stat_prefixes",
    "delta_triangle_bound",
    "delta_ensemble",
    "exact_gaussian_delta_sq",
    "il_series_diagnostic",
    "criteria_diagnostic",
    "criteria_report_to_json",
    "ks_rows_to_csv",
    "delta_rows_to_csv",
]

DEFAULT_T_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
EXACT_DELTA_MAX_N = 1 << 12
_EXACT_DELTA_CHUNK = 1 << 10
# Fit-based verdict thresholds, pilot-calibrated on grids up to 2^16.
# The averaged second moment decays only logarithmically in the healthy
# cases, so the slope gate is scale-dependent: -0.08 splits the unit-variance
# specs (slopes -0.10 to -0.25) from the non-Gaussian-limit ones (-0.05 to
# -0.06); much longer horizons would flatten the healthy slopes too and
# flag conservatively.
_IL_DECAY_MIN = 0.08
_FIT_ALPHA_MIN = 0.02


# ---------------------------------------------------------------------------
# Log-averaged measures and Kolmogorov distance.


@dataclass(frozen=True)
class LogAveragedMeasure:
    """Atoms (G_k, w_k) with w_k proportional to 1/k, sorted by value."""

    values: np.ndarray
    weights: np.ndarray
    normalization: str
    n: int

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


def log_average_measure(g: GSeries, normalization: str = "harmonic") -> LogAveragedMeasure:
    if normalization not in ("harmonic", "log_n"):
        raise ValueError(f"unknown normalization {normalization!r}")
    n = g.n
    if n < 2:
        raise ValueError("need n >= 2 atoms")
    raw = 1.0 / np.arange(1.0, n + 1.0)
    den = float(raw.sum()) if normalization == "harmonic" else math.log(n)
    order = np.argsort(g.values, kind="stable")
    values = g.values[order].copy()
    weights = raw[order] / den
    values.flags.writeable = False
    weights.flags.writeable = False
    return LogAveragedMeasure(values, weights, normalization, n)


@dataclass(frozen=True)
class EmpiricalTarget:
    """Step-function target CDF given by a weighted sample."""

    values: np.ndarray
    weights: np.ndarray


def empirical_target(values, weights=None) -> EmpiricalTarget:
    values = np.asarray(values, dtype=float)
    if weights is None:
        weights = np.full(values.size, 1.0 / values.size)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != values.shape:
            raise ValueError("weights must match values")
        weights = weights / weights.sum()
    order = np.argsort(values, kind="stable")
    return EmpiricalTarget(values[order], weights[order])


def _grouped_cdf(values: np.ndarray, weights: np.ndarray):
    """Unique jump points with CDF just after and just before each jump."""
    uniq, counts = np.unique(values, return_counts=True)
    cum = np.cumsum(weights)
    hi = cum[np.cumsum(counts) - 1]
    lo = np.concatenate(([0.0], hi[:-1]))
    return uniq, hi, lo


def ks_distance(m: LogAveragedMeasure, target="std_normal") -> float:
    """Exact sup-distance between the measure's CDF and the target CDF.

    The weighted empirical CDF is a step function, so the sup is attained
    at a jump point, approached from the left or the right; both one-sided
    values are compared at every jump of either CDF.
    """
    if m.normalization != "harmonic":
        raise ValueError("Kolmogorov distance needs a probability measure; use harmonic")
    uniq, hi, lo = _grouped_cdf(m.values, m.weights)
    if isinstance(target, str):
        if target != "std_normal":
            raise ValueError(f"unknown target {target!r}")
        phi = ndtr(uniq)
        return float(np.maximum(np.abs(hi - phi), np.abs(lo - phi)).max())
    if not isinstance(target, EmpiricalTarget):
        raise TypeError("target must be 'std_normal' or an EmpiricalTarget")
    t_uniq, t_hi, _ = _grouped_cdf(target.values, target.weights)
    points = np.union1d(uniq, t_uniq)
    # right-continuous CDF values at jump points, then left limits
    f_hi = np.concatenate(([0.0], hi))[np.searchsorted(uniq, points, side="right")]
    g_hi = np.concatenate(([0.0], t_hi))[np.searchsorted(t_uniq, points, side="right")]
    f_lo = np.concatenate(([0.0], hi))[np.searchsorted(uniq, points, side="left")]
    g_lo = np.concatenate(([0.0], t_hi))[np.searchsorted(t_uniq, points, side="left")]
    return float(
        max(np.abs(f_hi - g_hi).max(), np.abs(f_lo - g_lo).max())
    )


def harmonic_weighted_mean(values: np.ndarray) -> float:
    """Mean of values[k-1] under weights 1/k, normalized to mass one."""
    values = np.asarray(values, dtype=float)
    w = 1.0 / np.arange(1.0, values.size + 1.0)
    return float((w @ values) / w.sum())


# ---------------------------------------------------------------------------
# The log-averaged characteristic-function statistic.


def delta_stat(g: GSeries, t: float, target_cf=None) -> complex:
    """(1/log n) sum_{k<=n} (1/k)(e^{itG_k} - cf(t)), cf defaulting to e^{-t^2/2}."""
    n = g.n
    if n < 2:
        raise ValueError("need n >= 2")
    target = math.exp(-t * t / 2.0) if target_cf is None else complex(target_cf(t))
    k = np.arange(1.0, n + 1.0)
    total = np.sum((np.exp(1j * t * g.values) - target) / k)
    return complex(total / math.log(n))


def delta_stat_prefixes(g: GSeries, t: float, n_grid, target_cf=None) -> np.ndarray:
    """delta_stat of every prefix in n_grid, one cumulative pass."""
    n_grid = [int(n) for n in n_grid]
    if any(n < 2 or n > g.n for n in n_grid):
        raise ValueError("prefix sizes must lie in 2..n")
    target = None
    k = np.arange(1.0, g.n + 1.0)
    cum_phase = np.cumsum(np.exp(1j * t * g.values) / k)
    cum_w = np.cumsum(1.0 / k)
    idx = np.array(n_grid) - 1
    if target_cf is None:
        target = math.exp(-t * t / 2.0)
    else:
        target = complex(target_cf(t))
    return (cum_phase[idx] - target * cum_w[idx]) / np.log(np.array(n_grid, dtype=float))


def delta_triangle_bound(n: int) -> float:
    """|e^{itG} - cf| <= 2 termwise, so |delta| <= (1/log n) sum 2/k."""
    if n < 2:
        raise ValueError("need n >= 2")
    return 2.0 * float(np.sum(1.0 / np.arange(1.0, n + 1.0))) / math.log(n)


@dataclass(frozen=True)
class DeltaEstimate:
    t: float
    n: int
    per_replicate: np.ndarray
    mean_sq: float
    stderr: float
    target: str
    triangle_bound: float


def delta_ensemble(series: list[GSeries], t: float, target_cf=None, target_name: str = "std_normal") -> DeltaEstimate:
    if not series:
        raise ValueError("empty series ensemble")
    n = series[0].n
    if any(g.n != n for g in series):
        raise ValueError("series must share a common length")
    per = np.array([delta_stat(g, t, target_cf) for g in series])
    sq = np.abs(per) ** 2
    stderr = float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0
    per.flags.writeable = False
    return DeltaEstimate(
        t=float(t),
        n=n,
        per_replicate=per,
        mean_sq=float(sq.mean()),
        stderr=stderr,
        target=target_name,
        triangle_bound=delta_triangle_bound(n),
    )


def exact_gaussian_delta_sq(spec: SequenceSpec, n: int, t: float) -> float:
    """Closed-form E|delta_n(t)|^2 for a jointly Gaussian unit-variance series:
    (1/log^2 n) sum_{k,l} (e^{-t^2}/(kl)) (e^{E[G_k G_l] t^2} - 1).

    Only the scaled-increment-sum spec is jointly Gaussian; the double sum
    is evaluated in full, which caps n at 2^12.
    """
    if not isinstance(spec, FbmScaled):
        raise ValueError("exact second moment requires the jointly Gaussian spec")
    if n < 2:
        raise ValueError("need n >= 2")
    if n > EXACT_DELTA_MAX_N:
        raise ValueError(f"full double sum capped at n = {EXACT_DELTA_MAX_N}")
    if t == 0.0:
        return 0.0
    H = spec.H
    t2 = t * t
    damp = math.exp(-t2)
    l = np.arange(1.0, n + 1.0)
    l2h = l ** (2.0 * H)
    lh = l**H
    total = 0.0
    for start in range(0, n, _EXACT_DELTA_CHUNK):
        k = l[start : start + _EXACT_DELTA_CHUNK]
        cov = 0.5 * (
            k[:, None] ** (2.0 * H) + l2h[None, :] - np.abs(k[:, None] - l[None, :]) ** (2.0 * H)
        )
        cov /= k[:, None] ** H * lh[None, :]
        block = np.expm1(cov * t2) / (k[:, None] * l[None, :])
        total += float(block.sum())
    return damp * total / math.log(n) ** 2


# ---------------------------------------------------------------------------
# Summability diagnostics.


@dataclass(frozen=True)
class IlRow:
    t: float
    delta_sq: tuple[float, ...]
    summand: tuple[float, ...]
    partial_sums: tuple[float, ...]
    fitted_decay: float | None
    verdict: str


@dataclass(frozen=True)
class IlDiagnostic:
    n_grid: tuple[int, ...]
    rows: tuple[IlRow, ...]
    sup_delta_sq: tuple[float, ...]
    verdict: str


def _loglog_fit(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of log y against log x."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def _il_row(t: float, n_grid, delta_sq: np.ndarray) -> IlRow:
    n_arr = np.asarray(n_grid, dtype=float)
    summand = delta_sq / (n_arr * np.log(n_arr))
    gaps = np.diff(np.concatenate(([n_grid[0] - 1], n_arr)))
    gaps[0] = max(gaps[0], 1.0)
    partial = np.cumsum(summand * gaps)
    if t == 0.0 or np.all(delta_sq == 0.0):
        return IlRow(float(t), tuple(delta_sq), tuple(summand), tuple(partial), None, "consistent")
    slope, _ = _loglog_fit(n_arr, np.maximum(delta_sq, 1e-300))
    decaying = slope < -_IL_DECAY_MIN and delta_sq[-1] < delta_sq[0]
    return IlRow(
        float(t),
        tuple(delta_sq),
        tuple(summand),
        tuple(partial),
        slope,
        "consistent" if decaying else "flagged",
    )


def il_series_diagnostic(
    spec: SequenceSpec,
    t_grid=DEFAULT_T_GRID,
    n_grid=None,
    *,
    master_seed: int | None = None,
    replicates: int = 0,
) -> IlDiagnostic:
    """Trend diagnostic for the averaged-summability criterion: the summand
    E|delta_n(t)|^2 / (n log n) on a geometric n-grid, its grid partial sums,
    and a fitted decay exponent per t. Numerical evidence only.

    With replicates == 0 the second moment is exact (jointly Gaussian specs
    only); otherwise a fresh Monte-Carlo ensemble of the given size is drawn.
    """
    if n_grid is None:
        n_grid = [n for n in geometric_grid(EXACT_DELTA_MAX_N) if n >= 4]
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing")
    if n_grid[0] < 2:
        raise ValueError("n_grid entries must be >= 2")

    if replicates == 0:
        rows = tuple(
            _il_row(
                t,
                n_grid,
                np.array([exact_gaussian_delta_sq(spec, n, t) for n in n_grid]),
            )
            for t in t_grid
        )
    else:
        if master_seed is None:
            raise ValueError("master_seed required for Monte-Carlo evaluation")
        paths = sample_ensemble(spec.model, n_grid[-1], master_seed, replicates)
        series = [build_gseries(p, spec) for p in paths]
        rows = []
        for t in t_grid:
            if t == 0.0:
                rows.append(_il_row(t, n_grid, np.zeros(len(n_grid))))
                continue
            sq = np.abs(np.array([delta_stat_prefixes(g, t, n_grid) for g in series])) ** 2
            rows.append(_il_row(t, n_grid, sq.mean(axis=0)))
        rows = tuple(rows)

    sup = np.max(np.array([r.delta_sq for r in rows]), axis=0)
    verdict = "consistent" if all(r.verdict == "consistent" for r in rows) else "flagged"
    return IlDiagnostic(tuple(n_grid), rows, tuple(sup), verdict)


# ---------------------------------------------------------------------------
# Condition-by-condition criteria diagnostics.


@dataclass(frozen=True)
class ConditionDiagnostic:
    name: str
    fitted_alpha: float | None
    fitted_C: float | None
    partial_sums: tuple[float, ...]
    verdict: str
    applicable: bool
    detail: str


@dataclass(frozen=True)
class CriteriaReport:
    n_max: int
    conditions: tuple[ConditionDiagnostic, ...]
    verdict: str


def _interp_series(grid, vals, n_max: int) -> np.ndarray:
    """Power-law interpolation of positive grid values onto 1..n_max."""
    full = np.arange(1.0, n_max + 1.0)
    return np.exp(np.interp(np.log(full), np.log(np.asarray(grid, float)), np.log(vals)))


def _single_sum_condition(
    name: str, grid, vals: np.ndarray, n_max: int, inner_power: float, detail: str
) -> ConditionDiagnostic:
    """Series sum_n (1/(n log^2 n)) sum_{k<=n} a_k^{inner_power} / k with a_k
    power-law interpolated from the grid; verdict from the fitted decay of a_k."""
    if np.all(vals == 0.0):
        zeros = tuple(np.zeros(len(grid)))
        return ConditionDiagnostic(name, None, None, zeros, "consistent", True, detail)
    slope, intercept = _loglog_fit(grid, vals)
    a = _interp_series(grid, vals, n_max)
    k = np.arange(1.0, n_max + 1.0)
    inner = np.cumsum(a**inner_power / k)
    n = np.arange(2.0, n_max + 1.0)
    series = np.cumsum(inner[1:] / (n * np.log(n) ** 2))
    idx = np.array([g - 2 for g in grid if g >= 2])
    alpha = -slope
    verdict = "consistent" if alpha >= _FIT_ALPHA_MIN else "flagged"
    return ConditionDiagnostic(
        name,
        alpha,
        math.exp(intercept),
        tuple(series[idx]),
        verdict,
        True,
        detail,
    )


def _pair_grid(grid) -> list[tuple[int, int]]:
    pairs = []
    for i, k in enumerate(grid):
        for l in grid[i + 1 :]:
            if l > k:
                pairs.append((k, l))
    return pairs


def _envelope_condition(
    name: str, pairs, covs: np.ndarray, n_max: int, scale: float, detail: str
) -> ConditionDiagnostic:
    """Fit |cov| <= C (k/l)^alpha on the pair grid and sum the enveloped
    series sum_n (1/(n log^3 n)) [sum_k 1/k^2 + 2C sum_{k<l} (k/l)^alpha/(kl)]."""
    ratios = np.array([k / l for k, l in pairs])
    mags = np.abs(covs)
    keep = mags > 1e-300
    slope, _ = _loglog_fit(ratios[keep], mags[keep])
    alpha = max(slope, 0.0)
    env_c = float(np.max(mags / ratios**alpha))
    k = np.arange(1.0, n_max + 1.0)
    diag = np.cumsum(scale / k**2)
    inner_k = np.cumsum(k ** (alpha - 1.0))
    off = np.cumsum(np.concatenate(([0.0], inner_k[:-1])) / k ** (1.0 + alpha))
    inner = diag + 2.0 * env_c * off
    n = np.arange(2.0, n_max + 1.0)
    series = np.cumsum(inner[1:] / (n * np.log(n) ** 3))
    grid_ns = sorted({l for _, l in pairs})
    idx = np.array([g - 2 for g in grid_ns])
    verdict = "consistent" if slope >= _FIT_ALPHA_MIN else "flagged"
    return ConditionDiagnostic(
        name,
        float(slope),
        env_c,
        tuple(series[idx]),
        verdict,
        True,
        detail,
    )


def _not_applicable(name: str, detail: str) -> ConditionDiagnostic:
    return ConditionDiagnostic(name, None, None, (), "flagged", False, detail)


_NPR_NAME = "second_derivative_contraction"
_COV_NAME = "cross_covariance"
_KERNEL_NAME = "kernel_contraction"
_INNER_NAME = "kernel_inner"


def _npr_constant(q: int, r: int) -> float:
    return (
        q**4
        * (q - 1) ** 4
        * math.factorial(r - 1) ** 2
        * math.comb(q - 2, r - 1) ** 4
        * math.factorial(2 * q - 2 - 2 * r)
    )


def criteria_diagnostic(spec: SequenceSpec, n_max: int = EXACT_DELTA_MAX_N) -> CriteriaReport:
    """Numerical evidence for the four averaging conditions: decay of the
    second-derivative contraction (fourth root inside a log^2 series), the
    cross-covariance double series under a log^3 weight, and their fixed-
    chaos kernel forms. Fits and partial sums on geometric grids; verdicts
    are consistency flags, not proofs.
    """
    grid = [g for g in geometric_grid(n_max) if g >= 2]
    conditions: list[ConditionDiagnostic] = []

    supercritical = isinstance(spec, HermiteVariation) and spec.regime == "supercritical"

    # second-derivative contraction series
    if isinstance(spec, FbmScaled):
        conditions.append(
            _single_sum_condition(
                _NPR_NAME, grid, np.zeros(len(grid)), n_max, 0.25,
                "second derivative vanishes identically",
            )
        )
    elif isinstance(spec, HermiteVariation):
        vals = np.array(
            [
                sum(
                    _npr_constant(spec.q, r)
                    * contraction_norm_sq(spec.model, spec.q, r, g).value
                    for r in range(1, spec.q)
                )
                for g in grid
            ]
        )
        conditions.append(
            _single_sum_condition(
                _NPR_NAME, grid, vals, n_max, 0.25,
                "kernel-contraction route, exact at q = 2",
            )
        )
    else:
        rho_sum = abs_rho_power_sum(spec.model, 1).value
        fourth = _quad_fourth_moment(spec, "second")
        vals = np.array(
            [fourth * rho_sum**3 * g / _normalizer_sq(spec, g) ** 2 for g in grid]
        )
        conditions.append(
            _single_sum_condition(
                _NPR_NAME, grid, vals, n_max, 0.25,
                "first-power fourth-moment bound",
            )
        )

    # cross-covariance double series
    if supercritical:
        conditions.append(
            _not_applicable(_COV_NAME, "not applicable: no unit-variance normalization")
        )
    else:
        pairs = _pair_grid(grid)
        covs = np.array([cross_covariance(spec, k, l) for k, l in pairs])
        conditions.append(
            _envelope_condition(
                _COV_NAME, pairs, covs, n_max, 1.0, "ratio-power envelope fit"
            )
        )

    # kernel contraction series, fixed chaos only
    if isinstance(spec, FbmScaled):
        conditions.append(
            _single_sum_condition(
                _KERNEL_NAME, grid, np.zeros(len(grid)), n_max, 1.0,
                "first chaos has no nontrivial contractions",
            )
        )
    elif isinstance(spec, GeneralF):
        conditions.append(
            _not_applicable(_KERNEL_NAME, "not applicable: mixed chaos orders")
        )
    else:
        per_r = {
            r: np.sqrt(
                np.array(
                    [contraction_norm_sq(spec.model, spec.q, r, g).value for g in grid]
                )
            )
            for r in range(1, spec.q)
        }
        fits = {r: _loglog_fit(grid, v)[0] for r, v in per_r.items()}
        vals = np.sum(np.array(list(per_r.values())), axis=0)
        detail = "slowest contraction order r = %d; per-order decay %s" % (
            max(fits, key=fits.get),
            {r: round(s, 4) for r, s in fits.items()},
        )
        conditions.append(
            _single_sum_condition(_KERNEL_NAME, grid, vals, n_max, 1.0, detail)
        )

    # kernel inner-product double series
    if supercritical:
        conditions.append(
            _not_applicable(_INNER_NAME, "not applicable: no unit-variance normalization")
        )
    elif isinstance(spec, GeneralF):
        conditions.append(
            _not_applicable(_INNER_NAME, "not applicable: mixed chaos orders")
        )
    else:
        q = 1 if isinstance(spec, FbmScaled) else spec.q
        pairs = _pair_grid(grid)
        covs = np.array([cross_covariance(spec, k, l) for k, l in pairs]) / math.factorial(q)
        conditions.append(
            _envelope_condition(
                _INNER_NAME, pairs, covs, n_max, 1.0 / math.factorial(q),
                "cross covariance divided by q!",
            )
        )

    applicable = [c for c in conditions if c.applicable]
    verdict = "consistent" if all(c.verdict == "consistent" for c in applicable) else "flagged"
    return CriteriaReport(n_max, tuple(conditions), verdict)


def criteria_report_to_json(report: CriteriaReport) -> str:
    return json.dumps(
        {
            "n_max": report.n_max,
            "verdict": report.verdict,
            "conditions": [
                {
                    "name": c.name,
                    "fitted_alpha": c.fitted_alpha,
                    "fitted_C": c.fitted_C,
                    "partial_sums": list(c.partial_sums),
                    "verdict": c.verdict,
                    "applicable": c.applicable,
                    "detail": c.detail,
                }
                for c in report.conditions
            ],
        },
        sort_keys=True,
    )


# ---------------------------------------------------------------------------
# CSV outputs.


@dataclass(frozen=True)
class KsRow:
    n: int
    seed: int
    ks: float


@dataclass(frozen=True)
class DeltaRow:
    n: int
    t: float
    delta_sq_mc: float
    delta_sq_exact: float
    stderr: float


def ks_rows_to_csv(rows: list[KsRow], fh) -> None:
    fh.write("n,seed,ks_distance\n")
    for r in rows:
        fh.write(f"{r.n},{r.seed},{repr(r.ks)}\n")


def delta_rows_to_csv(rows: list[DeltaRow], fh) -> None:
    fh.write("n,t,delta_sq_mc,delta_sq_exact,stderr\n")
    for r in rows:
        fh.write(
            f"{r.n},{repr(r.t)},{repr(r.delta_sq_mc)},{repr(r.delta_sq_exact)},{repr(r.stderr)}\n"
        )
