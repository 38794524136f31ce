"""Evaluation metrics, paired nonparametric tests and report emission.

R^2 / RMSE per subject and model, one-tailed Wilcoxon signed-rank tests
(exact enumeration for small tie-free samples, normal approximation with
tie and continuity corrections otherwise), paired Cohen's d, logarithmic
and linear least-squares utilities, and CSV/JSON report writers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import t as student_t

from .errors import (
    AllZeroDifferences,
    ConstantReference,
    DegenerateDesign,
    EmptyInput,
    EmptySeries,
    IoFailure,
    LengthMismatch,
    ZeroVariance,
)

REPORT_SCHEMA_VERSION = 1

#: exact Wilcoxon enumeration limit: 2^20 sign patterns is still sub-second
EXACT_WILCOXON_MAX_N = 20


def _paired(ref, pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(ref, dtype=float)
    b = np.asarray(pred, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"paired series shapes differ: {a.shape} vs {b.shape}")
    return a, b


def r_squared(ref, pred) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot (may be negative)."""
    a, b = _paired(ref, pred)
    if len(a) < 2:
        raise EmptySeries("r_squared needs at least 2 samples")
    if np.ptp(a) == 0:
        raise ConstantReference("reference series is constant")
    res = a - b
    dev = a - a.mean()
    return 1.0 - float(res @ res) / float(dev @ dev)


def rmse(ref, pred) -> float:
    """Root mean squared error."""
    a, b = _paired(ref, pred)
    if len(a) == 0:
        raise EmptySeries("rmse needs at least 1 sample")
    d = a - b
    return math.sqrt(float(d @ d) / len(d))


@dataclass(frozen=True)
class MetricPair:
    """R^2 and RMSE for one (subject, model) cell."""

    r2: float | None
    rmse: float

    def __post_init__(self):
        if self.rmse < 0:
            raise LengthMismatch(f"rmse must be >= 0, got {self.rmse}")
        if self.r2 is not None and self.r2 > 1.0 + 1e-12:
            raise LengthMismatch(f"r2 cannot exceed 1, got {self.r2}")


@dataclass(frozen=True)
class PairedTestResult:
    """One-tailed Wilcoxon p plus the matching paired effect size."""

    p_one_tailed: float
    cohens_d: float | None
    n_pairs: int
    direction: str
    n_zero_dropped: int = 0
    exact: bool = True


def _rank_abs(d: np.ndarray) -> np.ndarray:
    """Ranks of |d| with average ranks for ties."""
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_distribution(n: int) -> np.ndarray:
    """Exact null counts of W+ over all 2^n sign patterns (ranks 1..n).

    Entry k is the number of sign patterns with positive-rank sum k.
    """
    total = n * (n + 1) // 2
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in range(1, n + 1):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y, alternative: str = "greater") -> PairedTestResult:
    """One-tailed Wilcoxon signed-rank test on paired samples.

    Differences d = x - y; ``alternative`` states the suspected location
    of d ("greater" or "less" than zero). Zero differences are dropped
    (classical treatment) and counted. Exact enumeration is used for
    n <= 20 with tie-free |d|, otherwise the normal approximation with
    tie and continuity corrections.
    """
    a, b = _paired(x, y)
    if alternative not in ("greater", "less"):
        raise LengthMismatch(f"alternative must be greater|less, got {alternative}")
    d = a - b
    nonzero = d != 0
    n_zero = int(len(d) - nonzero.sum())
    d = d[nonzero]
    n = len(d)
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")

    ranks = _rank_abs(d)
    w_plus = float(ranks[d > 0].sum())
    has_ties = len(np.unique(np.abs(d))) != n

    if n <= EXACT_WILCOXON_MAX_N and not has_ties:
        counts = signed_rank_distribution(n)
        total = float(2 ** n)
        w = int(round(w_plus))
        if alternative == "greater":
            p = float(counts[w:].sum()) / total
        else:
            p = float(counts[: w + 1].sum()) / total
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        tie_sizes = np.array(
            [np.sum(np.abs(d) == u) for u in np.unique(np.abs(d))], dtype=float
        )
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(
            np.sum(tie_sizes ** 3 - tie_sizes)
        ) / 48.0
        sd = math.sqrt(var)
        if alternative == "greater":
            z = (w_plus - mean - 0.5) / sd
            p = 0.5 * math.erfc(z / math.sqrt(2.0))
        else:
            z = (w_plus - mean + 0.5) / sd
            p = 0.5 * math.erfc(-z / math.sqrt(2.0))
        p = min(max(p, 0.0), 1.0)
        exact = False

    try:
        d_eff = cohens_d_paired(a, b)
    except (ZeroVariance, EmptySeries):
        d_eff = None
    return PairedTestResult(
        p_one_tailed=p,
        cohens_d=d_eff,
        n_pairs=n,
        direction=alternative,
        n_zero_dropped=n_zero,
        exact=exact,
    )


def cohens_d_paired(x, y) -> float:
    """Paired effect size mean(y - x) / sd(y - x), sample sd (n-1)."""
    a, b = _paired(x, y)
    if len(a) < 2:
        raise EmptySeries("cohens_d_paired needs at least 2 pairs")
    diffs = b - a
    sd = float(np.std(diffs, ddof=1))
    if sd == 0:
        raise ZeroVariance("paired differences have zero variance")
    return float(np.mean(diffs)) / sd


def summary_stats(values) -> tuple[float, float, float]:
    """(median, max, min) of a sample; median averages the middle two."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise EmptyInput("summary_stats needs at least one value")
    return float(np.median(arr)), float(arr.max()), float(arr.min())


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    if sxx == 0:
        raise DegenerateDesign("regressor values are all equal")
    slope = float(np.sum((x - xbar) * (y - ybar))) / sxx
    return slope, ybar - slope * xbar


def log_curve_fit(xs, ys) -> tuple[float, float, float]:
    """OLS of ys on ln(xs): returns (slope, intercept, fit R^2)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or len(x) < 2:
        raise DegenerateDesign("need >= 2 aligned samples")
    if np.any(x <= 0):
        raise DegenerateDesign("log fit requires positive x values")
    lx = np.log(x)
    slope, intercept = _ols(lx, y)
    fitted = slope * lx + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


@dataclass(frozen=True)
class LinearFitCi:
    slope: float
    intercept: float
    lower: np.ndarray
    upper: np.ndarray
    coverage: float


def linear_fit_ci(xs, ys, level: float = 0.95, band: str = "mean") -> LinearFitCi:
    """OLS fit with a pointwise confidence band and its empirical coverage.

    ``band="mean"`` gives the mean-response CI; ``band="prediction"``
    widens it by the residual variance term. Coverage is the fraction of
    observed ys inside the band.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = len(x)
    if x.shape != y.shape or n < 3:
        raise DegenerateDesign("need >= 3 aligned samples")
    if band not in ("mean", "prediction"):
        raise DegenerateDesign(f"band must be mean|prediction, got {band}")
    slope, intercept = _ols(x, y)
    fitted = slope * x + intercept
    resid = y - fitted
    s2 = float(resid @ resid) / (n - 2)
    sxx = float(np.sum((x - x.mean()) ** 2))
    lever = 1.0 / n + (x - x.mean()) ** 2 / sxx
    if band == "prediction":
        lever = lever + 1.0
    half = student_t.ppf(0.5 + level / 2.0, n - 2) * np.sqrt(s2 * lever)
    lower, upper = fitted - half, fitted + half
    coverage = float(np.mean((y >= lower) & (y <= upper)))
    return LinearFitCi(slope, intercept, lower, upper, coverage)


# --- report assembly -------------------------------------------------------

#: comparisons run against the hybrid model, with the one-tailed direction
#: encoding "hybrid model better" for each metric
COMPARED_MODELS = ("fcnn", "pm")
METRIC_DIRECTIONS = {"r2": "greater", "rmse": "less"}
INSUFFICIENT = "insufficient pairs"


@dataclass(frozen=True)
class SubjectMetrics:
    """Per-subject metrics: overall per model, optional per-activity split."""

    participant: str
    overall: dict[str, MetricPair]
    per_activity: dict[str, dict[str, MetricPair]] = field(default_factory=dict)


@dataclass(frozen=True)
class EvalReport:
    """Aggregated evaluation: metrics table, summaries and paired tests."""

    subjects: tuple[SubjectMetrics, ...]
    models: tuple[str, ...]
    summary: dict
    comparisons: dict
    per_activity_summary: dict
    per_activity_comparisons: dict
    schema_version: int = REPORT_SCHEMA_VERSION


def _collect(values_by_model: dict[str, list], metric: str):
    pairs = {}
    for model, metric_pairs in values_by_model.items():
        vals = [getattr(mp, metric) for mp in metric_pairs]
        if any(v is None for v in vals):
            continue
        pairs[model] = np.array(vals, dtype=float)
    return pairs


def _compare(base: np.ndarray, other: np.ndarray, metric: str):
    direction = METRIC_DIRECTIONS[metric]
    try:
        return wilcoxon_signed_rank(base, other, alternative=direction)
    except AllZeroDifferences:
        return None


def _summaries_and_tests(values_by_model: dict[str, list]):
    summary, comparisons = {}, {}
    for metric in ("r2", "rmse"):
        columns = _collect(values_by_model, metric)
        for model, vals in columns.items():
            med, mx, mn = summary_stats(vals)
            summary.setdefault(model, {})[metric] = {
                "median": med, "max": mx, "min": mn,
            }
        base = columns.get("pmbnn")
        for model in COMPARED_MODELS:
            key = f"pmbnn_vs_{model}_{metric}"
            if base is None or model not in columns or len(base) < 2:
                comparisons[key] = INSUFFICIENT
                continue
            res = _compare(base, columns[model], metric)
            comparisons[key] = res if res is not None else INSUFFICIENT
    return summary, comparisons


def build_eval_report(subjects: list[SubjectMetrics]) -> EvalReport:
    """Summaries plus paired tests (hybrid vs baseline and vs PM)."""
    if not subjects:
        raise EmptyInput("need at least one subject result")
    models = []
    for s in subjects:
        for m in s.overall:
            if m not in models:
                models.append(m)

    overall_values = {
        m: [s.overall[m] for s in subjects if m in s.overall] for m in models
    }
    summary, comparisons = _summaries_and_tests(overall_values)

    activities = []
    for s in subjects:
        for act in s.per_activity:
            if act not in activities:
                activities.append(act)
    act_summary, act_comparisons = {}, {}
    for act in activities:
        values = {}
        for m in models:
            col = [
                s.per_activity[act][m]
                for s in subjects
                if act in s.per_activity and m in s.per_activity[act]
            ]
            if col:
                values[m] = col
        act_summary[act], act_comparisons[act] = _summaries_and_tests(values)

    return EvalReport(
        subjects=tuple(subjects),
        models=tuple(models),
        summary=summary,
        comparisons=comparisons,
        per_activity_summary=act_summary,
        per_activity_comparisons=act_comparisons,
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6g}"


def _write_rows(path, header, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _footer_rows(comparisons: dict, models: tuple[str, ...], activity: str | None):
    rows = []
    for kind, attr in (("p_value", "p_one_tailed"), ("d_value", "cohens_d")):
        for model in COMPARED_MODELS:
            if model not in models:
                continue
            cells = {}
            for metric in ("r2", "rmse"):
                res = comparisons.get(f"pmbnn_vs_{model}_{metric}")
                if res is None or res == INSUFFICIENT:
                    cells[metric] = INSUFFICIENT
                else:
                    cells[metric] = _fmt(getattr(res, attr))
            row = [kind, model, cells["r2"], cells["rmse"]]
            if activity is not None:
                row.append(activity)
            rows.append(row)
    return rows


def report_to_dict(report: EvalReport) -> dict:
    def test_dict(res):
        if res == INSUFFICIENT or res is None:
            return INSUFFICIENT
        return {
            "p_one_tailed": res.p_one_tailed,
            "cohens_d": res.cohens_d,
            "n_pairs": res.n_pairs,
            "direction": res.direction,
            "n_zero_dropped": res.n_zero_dropped,
            "exact": res.exact,
        }

    def metric_dict(mp: MetricPair):
        return {"r2": mp.r2, "rmse": mp.rmse}

    return {
        "schema_version": report.schema_version,
        "models": list(report.models),
        "subjects": [
            {
                "participant": s.participant,
                "overall": {m: metric_dict(v) for m, v in s.overall.items()},
                "per_activity": {
                    act: {m: metric_dict(v) for m, v in by_model.items()}
                    for act, by_model in s.per_activity.items()
                },
            }
            for s in report.subjects
        ],
        "summary": report.summary,
        "comparisons": {k: test_dict(v) for k, v in report.comparisons.items()},
        "per_activity_summary": report.per_activity_summary,
        "per_activity_comparisons": {
            act: {k: test_dict(v) for k, v in comps.items()}
            for act, comps in report.per_activity_comparisons.items()
        },
    }


def report_from_dict(payload: dict) -> EvalReport:
    def test_obj(v):
        if v == INSUFFICIENT:
            return INSUFFICIENT
        return PairedTestResult(
            p_one_tailed=v["p_one_tailed"],
            cohens_d=v["cohens_d"],
            n_pairs=v["n_pairs"],
            direction=v["direction"],
            n_zero_dropped=v["n_zero_dropped"],
            exact=v["exact"],
        )

    subjects = [
        SubjectMetrics(
            participant=s["participant"],
            overall={m: MetricPair(**v) for m, v in s["overall"].items()},
            per_activity={
                act: {m: MetricPair(**v) for m, v in by_model.items()}
                for act, by_model in s["per_activity"].items()
            },
        )
        for s in payload["subjects"]
    ]
    return EvalReport(
        subjects=tuple(subjects),
        models=tuple(payload["models"]),
        summary=payload["summary"],
        comparisons={k: test_obj(v) for k, v in payload["comparisons"].items()},
        per_activity_summary=payload["per_activity_summary"],
        per_activity_comparisons={
            act: {k: test_obj(v) for k, v in comps.items()}
            for act, comps in payload["per_activity_comparisons"].items()
        },
        schema_version=payload["schema_version"],
    )


def emit_report(report: EvalReport, out_dir) -> dict[str, str]:
    """Write CSV/JSON reports; returns the emitted paths by kind.

    ``report.csv``: participant,model,r2,rmse rows plus p/d footer rows.
    ``report_by_activity.csv``: the same layout with an activity column.
    ``boxplot_long.csv``: long-format (model, metric, value) rows.
    ``report.json``: machine-readable aggregate.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": os.path.join(out_dir, "report.csv"),
        "by_activity": os.path.join(out_dir, "report_by_activity.csv"),
        "long": os.path.join(out_dir, "boxplot_long.csv"),
        "json": os.path.join(out_dir, "report.json"),
    }

    rows = []
    for s in report.subjects:
        for model in report.models:
            if model in s.overall:
                mp = s.overall[model]
                rows.append([s.participant, model, _fmt(mp.r2), _fmt(mp.rmse)])
    rows.extend(_footer_rows(report.comparisons, report.models, None))
    _write_rows(paths["csv"], ["participant", "model", "r2", "rmse"], rows)

    act_rows = []
    for s in report.subjects:
        for act, by_model in s.per_activity.items():
            for model in report.models:
                if model in by_model:
                    mp = by_model[model]
                    act_rows.append(
                        [s.participant, model, _fmt(mp.r2), _fmt(mp.rmse), act]
                    )
    for act, comps in report.per_activity_comparisons.items():
        act_rows.extend(_footer_rows(comps, report.models, act))
    _write_rows(
        paths["by_activity"],
        ["participant", "model", "r2", "rmse", "activity"],
        act_rows,
    )

    long_rows = []
    for s in report.subjects:
        for model in report.models:
            if model in s.overall:
                mp = s.overall[model]
                if mp.r2 is not None:
                    long_rows.append([model, "r2", _fmt(mp.r2)])
                long_rows.append([model, "rmse", _fmt(mp.rmse)])
    _write_rows(paths["long"], ["model", "metric", "value"], long_rows)

    try:
        with open(paths["json"], "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, sort_keys=True, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {paths['json']}: {exc}") from exc
    return paths
