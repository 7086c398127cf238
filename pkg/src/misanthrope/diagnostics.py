"""Quantitative comparison of simulation ensembles against the mean-field limit,
and extraction of coarsening observables from moment series."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .kernels import StationaryFamily, marginal as family_marginal
from .meanfield import MeanFieldSolution
from .simulate import EmpiricalTrajectory, ensemble_marginal, TwoSiteStats

__all__ = [
    "total_variation",
    "ConvergenceReport",
    "lln_report",
    "VarianceScalingReport",
    "variance_scaling",
    "CoarseningReport",
    "coarsening_fit",
    "PhaseSplit",
    "phase_split",
    "condensate_cutoff",
    "ChaosReport",
    "chaos_decay",
]


def total_variation(p, q) -> float:
    """Total variation distance (1/2) sum_k |p_k - q_k|, padding with zeros."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    width = max(p.size, q.size)
    pp = np.zeros(width)
    qq = np.zeros(width)
    pp[: p.size] = p
    qq[: q.size] = q
    return 0.5 * float(np.abs(pp - qq).sum())


def _loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of log y against log x with its standard error."""
    lx, ly = np.log(x), np.log(y)
    n = lx.size
    slope, intercept = np.polyfit(lx, ly, 1)
    if n <= 2:
        return float(slope), math.inf
    resid = ly - (intercept + slope * lx)
    var = float(resid @ resid) / (n - 2)
    sxx = float(((lx - lx.mean()) ** 2).sum())
    return float(slope), math.sqrt(var / sxx) if sxx > 0 else math.inf


@dataclass
class ConvergenceReport:
    """Per-system-size total-variation distances between ensemble averages and f(t)."""

    sizes: list[int]
    times: np.ndarray
    tv: np.ndarray                 # len(sizes) x len(times)
    stderr: np.ndarray             # jackknife SE of each TV entry
    replicas: list[int]
    sup_tv: np.ndarray             # per size
    slope: float                   # d log sup_tv / d log L
    slope_stderr: float

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.sup_tv) < 0))


def lln_report(
    ensembles: Mapping[int, Sequence[EmpiricalTrajectory]],
    meanfield: MeanFieldSolution,
    times: Sequence[float],
) -> ConvergenceReport:
    """Law-of-large-numbers check: TV(mean of F^L(t), f(t)) per size and time."""
    sizes = sorted(ensembles)
    times = np.asarray(list(times), dtype=float)
    ref = {}
    for t in times:
        state = meanfield.state_at(t)
        ref[t] = state.f
    tv = np.zeros((len(sizes), times.size))
    se = np.zeros_like(tv)
    reps = []
    for i, L in enumerate(sizes):
        trajs = list(ensembles[L])
        reps.append(len(trajs))
        for j, t in enumerate(times):
            mean_f = ensemble_marginal(trajs, t)
            tv[i, j] = total_variation(mean_f, ref[t])
            if len(trajs) > 1:
                # jackknife over replicas
                rows = [tr.F_at(t) for tr in trajs]
                width = max(max(r.size for r in rows), ref[t].size)
                mat = np.zeros((len(rows), width))
                for m, r in enumerate(rows):
                    mat[m, : r.size] = r
                tot = mat.sum(axis=0)
                jk = np.empty(len(rows))
                for m in range(len(rows)):
                    loo = (tot - mat[m]) / (len(rows) - 1)
                    jk[m] = total_variation(loo, ref[t])
                se[i, j] = math.sqrt((len(rows) - 1) * float(np.var(jk)))
    sup_tv = tv.max(axis=1)
    ok = sup_tv > 0
    if ok.sum() >= 2:
        slope, slope_se = _loglog_slope(np.array(sizes, dtype=float)[ok], sup_tv[ok])
    else:
        slope, slope_se = math.nan, math.inf
    return ConvergenceReport(
        sizes=sizes,
        times=times,
        tv=tv,
        stderr=se,
        replicas=reps,
        sup_tv=sup_tv,
        slope=slope,
        slope_stderr=slope_se,
    )


@dataclass
class VarianceScalingReport:
    sizes: list[int]
    variances: np.ndarray
    slope: float
    slope_stderr: float
    degenerate: bool = False


def variance_scaling(
    ensembles: Mapping[int, Sequence[EmpiricalTrajectory]],
    h: Callable[[np.ndarray], float] | np.ndarray,
    t: float,
) -> VarianceScalingReport:
    """Scaling of Var<F^L, h> across replicas with L; the martingale part
    of the empirical process vanishes like 1/L, so the slope should sit
    near -1."""
    sizes = sorted(ensembles)
    if len(sizes) < 3:
        raise ValueError("need at least 3 system sizes to fit a slope")
    variances = []
    for L in sizes:
        trajs = list(ensembles[L])
        if len(trajs) < 2:
            raise ValueError("need at least 2 replicas per size")
        vals = []
        for tr in trajs:
            f = tr.F_at(t)
            if callable(h):
                vals.append(float(h(f)))
            else:
                hv = np.asarray(h, dtype=float)
                width = min(hv.size, f.size)
                vals.append(float(hv[:width] @ f[:width]))
        variances.append(float(np.var(vals, ddof=1)))
    variances = np.array(variances)
    if np.any(variances == 0.0):
        return VarianceScalingReport(sizes, variances, math.nan, math.inf, degenerate=True)
    slope, se = _loglog_slope(np.array(sizes, dtype=float), variances)
    return VarianceScalingReport(sizes, variances, slope, se)


@dataclass
class CoarseningReport:
    exponent: float
    stderr: float
    regime: str                    # power-law | exponential | finite-time-blowup | saturated
    window: tuple[float, float]
    residual_power: float
    residual_exp: float
    baseline: float = 0.0


def coarsening_fit(
    times,
    m2,
    window: Optional[tuple[float, float]] = None,
    baseline: float = 0.0,
    blowup_time: Optional[float] = None,
    saturation_rtol: float = 0.01,
) -> CoarseningReport:
    """Fit the growth law of a second-moment series on a time window.

    The exponent comes from least squares of log(m2 - baseline) against
    log t; the regime tag compares that fit against an exponential one,
    flags blown-up runs, and tags series that plateau within
    ``saturation_rtol`` over the last decade of the window as saturated.
    ``baseline`` subtracts a stationary bulk contribution so the fit sees
    the diverging condensate part only.
    """
    times = np.asarray(times, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if window is None:
        # default to the latter half of the series to skip transients
        window = (times[-1] / 2 if times[-1] > 0 else times[0], times[-1])
    lo, hi = window
    sel = (times >= lo) & (times <= hi) & (times > 0)
    if sel.sum() < 5:
        raise ValueError("fit window must contain at least 5 points")
    ts = times[sel]
    ys = m2[sel] - baseline
    if np.any(ys <= 0):
        raise ValueError("m2 must exceed the baseline throughout the window")
    ly = np.log(ys)
    exp_power, se = _loglog_slope(ts, ys)
    coef_pow = np.polyfit(np.log(ts), ly, 1)
    res_pow = float(np.mean((ly - np.polyval(coef_pow, np.log(ts))) ** 2))
    coef_exp = np.polyfit(ts, ly, 1)
    res_exp = float(np.mean((ly - np.polyval(coef_exp, ts)) ** 2))

    if blowup_time is not None:
        regime = "finite-time-blowup"
    else:
        last_decade = times >= times[-1] / 10
        span = m2[last_decade]
        if span.size >= 3 and (span.max() - span.min()) <= saturation_rtol * abs(span.mean()):
            regime = "saturated"
        elif res_exp < res_pow:
            regime = "exponential"
        else:
            regime = "power-law"
    return CoarseningReport(
        exponent=float(exp_power),
        stderr=se,
        regime=regime,
        window=(float(lo), float(hi)),
        residual_power=res_pow,
        residual_exp=res_exp,
        baseline=baseline,
    )


@dataclass(frozen=True)
class PhaseSplit:
    bulk_density: float
    condensed_density: float
    cutoff: int


def condensate_cutoff(
    family: StationaryFamily,
    phi_c: float,
    f: Optional[np.ndarray] = None,
    tail_tol: float = 1e-6,
) -> int:
    """Level separating bulk from condensate.

    Smallest k with the critical-marginal tail above k below ``tail_tol``;
    when the actual distribution has a local minimum of k*f_k shortly
    above that level (the gap between bulk edge and condensate bump), the
    cutoff moves there.
    """
    fbar = family_marginal(family, phi_c, tail_tol=math.inf)
    tail = 1.0 - np.cumsum(fbar)
    below = np.nonzero(tail < tail_tol)[0]
    k0 = int(below[0]) if below.size else family.n_max
    if f is not None and f.size > k0 + 2:
        kf = np.arange(f.size) * f
        hi = min(f.size - 1, 3 * max(k0, 1))
        seg = kf[k0 : hi + 1]
        mins = [
            i
            for i in range(1, seg.size - 1)
            if seg[i] <= seg[i - 1] and seg[i] <= seg[i + 1]
        ]
        if mins:
            k0 = k0 + int(mins[0])
    return k0


def phase_split(f, rho_c: float, cutoff: int) -> PhaseSplit:
    """Mass-weighted split of a level distribution at a cutoff level.

    Bulk density sums k f_k up to the cutoff, condensed density above it;
    the two add up to m1(f) exactly.
    """
    f = np.asarray(f, dtype=float)
    k = np.arange(f.size, dtype=float)
    weighted = k * f
    bulk = float(weighted[: cutoff + 1].sum())
    cond = float(weighted[cutoff + 1 :].sum())
    return PhaseSplit(bulk_density=bulk, condensed_density=cond, cutoff=int(cutoff))


@dataclass
class ChaosReport:
    sizes: list[int]
    covariances: np.ndarray
    stderrs: np.ndarray
    decreasing: bool
    slope: float
    slope_stderr: float


def chaos_decay(stats_by_size: Mapping[int, TwoSiteStats]) -> ChaosReport:
    """Decay of the two-site covariance magnitude with system size."""
    sizes = sorted(stats_by_size)
    cov = np.array([abs(stats_by_size[L].covariance) for L in sizes])
    se = np.array([stats_by_size[L].stderr for L in sizes])
    decreasing = bool(np.all(np.diff(cov) < 0))
    if np.all(cov > 0):
        slope, slope_se = _loglog_slope(np.array(sizes, dtype=float), cov)
    else:
        slope, slope_se = math.nan, math.inf
    return ChaosReport(sizes, cov, se, decreasing, slope, slope_se)
