"""Post-selection, KPIs and discretization-error statistics.

Constraint checks follow the post-selection rules used for the sampled
portfolios:

* normalization holds when ``|sum(w) - 1| <= p_eff`` with ``p_eff`` the
  largest effective granularity over the assets,
* multi-asset constraints hold when their residual obeys the operator
  within ``1e-12``,
* volatility holds when ``w^T S w <= sigma2_target`` (no band).

Single-asset bounds are never reported: the encoding satisfies them for
every bit string.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .encoding import EncodingLayout, bits_to_str, decode_solution, max_effective_granularity
from .model import ConstraintOp, Problem, portfolio_return, portfolio_variance

__all__ = [
    "LINEAR_TOL",
    "ConstraintCheck",
    "ViolationReport",
    "Kpis",
    "ErrorStats",
    "SampleRecord",
    "ExperimentRecord",
    "check_constraints",
    "kpis",
    "success_probability",
    "error_stats_theory",
    "error_stats_monte_carlo",
    "rounding_errors",
    "summarize",
    "violation_counts",
]

LINEAR_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintCheck:
    label: str
    kind: str
    residual: float
    satisfied: bool


@dataclass(frozen=True)
class ViolationReport:
    entries: tuple[ConstraintCheck, ...]

    @property
    def not_satisfied(self) -> int:
        return sum(1 for e in self.entries if not e.satisfied)

    def entry(self, label: str) -> ConstraintCheck:
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)


def check_constraints(weights, slacks, problem: Problem, layout: EncodingLayout) -> ViolationReport:
    """Check normalization, multi-asset and volatility constraints.

    ``slacks`` is accepted for symmetry with :func:`decode_solution`; slack
    values never decide feasibility, only the weights do.  Residuals are
    ``value - target`` for every kind.
    """
    w = np.asarray(weights, dtype=float)
    p_eff = max_effective_granularity(problem, layout.bits_per_asset)
    entries = []
    budget = math.fsum(w) - 1.0
    entries.append(ConstraintCheck("normalization", "normalization", budget, abs(budget) <= p_eff))
    for j, con in enumerate(problem.multi_constraints):
        res = con.residual(w)
        entries.append(
            ConstraintCheck(con.label or f"multi_{j}", "multi_linear", res, con.is_satisfied(w, LINEAR_TOL))
        )
    var = portfolio_variance(w, problem)
    res = var - problem.sigma2_target
    entries.append(ConstraintCheck("volatility", "volatility", res, res <= 0.0))
    return ViolationReport(tuple(entries))


@dataclass(frozen=True)
class Kpis:
    expected_return: float
    volatility: float
    sharpe: Optional[float]


def kpis(weights, problem: Problem) -> Kpis:
    """Return, variance (``w^T S w``) and Sharpe ratio with zero risk-free rate.

    ``sharpe`` is ``None`` when the variance is not positive.
    """
    ret = portfolio_return(weights, problem)
    var = portfolio_variance(weights, problem)
    sharpe = ret / math.sqrt(var) if var > 0 else None
    return Kpis(ret, var, sharpe)


def success_probability(reports: Sequence[ViolationReport]) -> float:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports")
    clean = sum(1 for r in reports if r.not_satisfied == 0)
    return clean / len(reports)


# --- discretization error --------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    mean: float
    variance: float
    skewness: float
    mean_se: Optional[float] = None
    variance_se: Optional[float] = None
    n_samples: Optional[int] = None


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 0.5:
        raise ValueError(f"granularity must lie in (0, 0.5], got {p}")
    return p


def error_stats_theory(p: float) -> ErrorStats:
    """Closed-form moments of the rounding error of a uniform value on [0, 1].

    The representable values are ``0, p, ..., 1 - p``; every interior cell
    contributes a symmetric error, the top cell ``[1 - p, 1]`` a one-sided
    one.  That gives ``E = p^2/2``, ``Var = p^2/12 + p^3/4 - p^4/4`` and a
    third moment ``p^4/4``, from which the skewness follows.
    """
    p = _check_p(p)
    mean = p * p / 2.0
    var = p**2 / 12.0 + p**3 / 4.0 - p**4 / 4.0
    third = p**4 / 4.0
    skew = (third - 3.0 * mean * var - mean**3) / var**1.5
    return ErrorStats(mean, var, skew)


def rounding_errors(u: np.ndarray, p: float) -> np.ndarray:
    """``u - q(u)`` with ``q`` the nearest grid point of ``{0, p, ..., 1 - p}``."""
    top = round(1.0 / p) - 1
    levels = np.minimum(np.rint(u / p), top)
    return u - levels * p


def error_stats_monte_carlo(p: float, n_samples: int = 1_000_000, seed: int = 0) -> ErrorStats:
    """Sample moments of the rounding error for ``n_samples`` uniform draws.

    Variance uses ``ddof=1``; skewness is the adjusted Fisher-Pearson
    estimator ``G1 = g1 * sqrt(n (n-1)) / (n - 2)``.  Standard errors are
    ``sqrt(s^2/n)`` for the mean and ``sqrt((m4 - s^4)/n)`` for the variance.
    """
    p = _check_p(p)
    if n_samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    rng = np.random.default_rng(seed)
    eps = rounding_errors(rng.random(n_samples), p)
    mean = float(eps.mean())
    var = float(eps.var(ddof=1))
    skew = float(stats.skew(eps, bias=False))
    m4 = float(np.mean((eps - mean) ** 4))
    return ErrorStats(
        mean,
        var,
        skew,
        mean_se=math.sqrt(var / n_samples),
        variance_se=math.sqrt(max(m4 - var * var, 0.0) / n_samples),
        n_samples=n_samples,
    )


# --- experiment records ----------------------------------------------------

@dataclass
class SampleRecord:
    read: int
    round: int
    energy: float
    bits: str
    weights: np.ndarray
    kpis: Kpis
    report: ViolationReport

    @property
    def sum_weights(self) -> float:
        return math.fsum(self.weights)

    @property
    def feasible(self) -> bool:
        return self.report.not_satisfied == 0


@dataclass
class ExperimentRecord:
    rows: list
    best_feasible: Optional[int]
    medians: dict
    sum_weights_histogram: dict
    meta: dict = field(default_factory=dict)

    @property
    def has_feasible(self) -> bool:
        return self.best_feasible is not None

    @property
    def best(self) -> Optional[SampleRecord]:
        return None if self.best_feasible is None else self.rows[self.best_feasible]

    @property
    def success_probability(self) -> float:
        return success_probability([r.report for r in self.rows])

    def to_dict(self) -> dict:
        best = self.best
        return {
            "meta": self.meta,
            "n_samples": len(self.rows),
            "success_probability": self.success_probability,
            "best_feasible": None
            if best is None
            else {
                "index": self.best_feasible,
                "bits": best.bits,
                "energy": best.energy,
                "weights": best.weights.tolist(),
                "expected_return": best.kpis.expected_return,
                "volatility": best.kpis.volatility,
                "sharpe": best.kpis.sharpe,
            },
            "best_feasible_absent": best is None,
            "medians": self.medians,
            "sum_weights_histogram": self.sum_weights_histogram,
            "violations": violation_counts([r.report for r in self.rows]),
            "samples": [
                {
                    "read": r.read,
                    "round": r.round,
                    "energy": r.energy,
                    "bits": r.bits,
                    "expected_return": r.kpis.expected_return,
                    "volatility": r.kpis.volatility,
                    "sharpe": r.kpis.sharpe,
                    "not_satisfied": r.report.not_satisfied,
                    "sum_weights": r.sum_weights,
                    "violated": [e.label for e in r.report.entries if not e.satisfied],
                }
                for r in self.rows
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["energy", "return", "volatility", "sharpe", "not_satisfied", "sum_weights"])
            for r in self.rows:
                sharpe = "" if r.kpis.sharpe is None else repr(r.kpis.sharpe)
                writer.writerow(
                    [
                        repr(float(r.energy)),
                        repr(r.kpis.expected_return),
                        repr(r.kpis.volatility),
                        sharpe,
                        r.report.not_satisfied,
                        repr(r.sum_weights),
                    ]
                )

    def write_violations_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label", "kind", "violated", "total", "fraction"])
            for item in violation_counts([r.report for r in self.rows]):
                writer.writerow(
                    [item["label"], item["kind"], item["violated"], item["total"], repr(item["fraction"])]
                )


def violation_counts(reports: Iterable[ViolationReport]) -> list[dict]:
    """Per-constraint violation tallies in first-seen order (bar-chart data)."""
    counts: dict = {}
    total = 0
    for report in reports:
        total += 1
        for e in report.entries:
            item = counts.setdefault(e.label, {"label": e.label, "kind": e.kind, "violated": 0})
            if not e.satisfied:
                item["violated"] += 1
    out = []
    for item in counts.values():
        item["total"] = total
        item["fraction"] = item["violated"] / total if total else 0.0
        out.append(item)
    return out


def _median(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def summarize(sample_set, problem: Problem, layout: EncodingLayout, *, bins: int = 20, meta=None) -> ExperimentRecord:
    """Decode every sample and collect KPIs, reports, medians and histograms.

    The best feasible sample is the one with the highest expected return
    among samples violating nothing; ties keep the earlier sample.
    """
    rows = []
    for s in sample_set:
        w, slacks = decode_solution(s.bits, layout, problem)
        rows.append(
            SampleRecord(
                read=s.read,
                round=getattr(s, "round", 0),
                energy=float(s.energy),
                bits=bits_to_str(s.bits),
                weights=w,
                kpis=kpis(w, problem),
                report=check_constraints(w, slacks, problem, layout),
            )
        )
    if not rows:
        raise ValueError("empty sample set")
    best = None
    for i, r in enumerate(rows):
        if r.feasible and (best is None or r.kpis.expected_return > rows[best].kpis.expected_return):
            best = i
    feasible = [r for r in rows if r.feasible]
    medians = {
        "energy": _median(r.energy for r in rows),
        "expected_return": _median(r.kpis.expected_return for r in rows),
        "volatility": _median(r.kpis.volatility for r in rows),
        "sharpe": _median(r.kpis.sharpe for r in rows),
        "sum_weights": _median(r.sum_weights for r in rows),
        "abs_budget_error": _median(abs(r.sum_weights - 1.0) for r in rows),
        "feasible_abs_budget_error": _median(abs(r.sum_weights - 1.0) for r in feasible),
        "feasible_expected_return": _median(r.kpis.expected_return for r in feasible),
    }
    sums = np.array([r.sum_weights for r in rows])
    lo, hi = float(sums.min()), float(sums.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        # sums equal up to round-off; centre a unit window like numpy does for equal values
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(sums, bins=bins, range=(lo, hi))
    histogram = {"counts": counts.tolist(), "edges": edges.tolist()}
    return ExperimentRecord(rows, best, medians, histogram, dict(meta or {}))
