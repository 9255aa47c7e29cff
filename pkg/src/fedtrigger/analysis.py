"""Evaluation surface: threshold sweeps, hourly buckets, weight inspection, population skew."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .features import BINNED, FeatureSchema
from .fleet import EligibilityPolicy, InteractionGenerator, UserState, is_eligible
from .model import ModelParams, TrainingExample, design_matrix, predict_scores
from .rng import stream

ZERO_TOL = 1e-6
HOUR = 3600


class EmptyPopulationError(ValueError):
    pass


# --- threshold sweeps ---------------------------------------------------------

@dataclass(frozen=True)
class ThresholdMetrics:
    """Operating point at one threshold.

    ``delta_ctr`` is the relative change of CTR among shown impressions
    against CTR over all impressions. It is NaN when undefined (no clicks at
    all, or nothing shown); ``retained_clicks`` is NaN when there are no clicks.
    """

    tau: float
    delta_ctr: float
    retained_impressions: float
    retained_clicks: float
    shown: int
    clicks_shown: int
    impressions: int
    clicks: int

    @property
    def ctr_defined(self) -> bool:
        return not math.isnan(self.delta_ctr)


def metrics_from_counts(tau: float, shown, clicks_shown, impressions, clicks) -> ThresholdMetrics:
    if impressions <= 0:
        raise ValueError("no impressions")
    retained_impressions = shown / impressions
    if clicks > 0:
        retained_clicks = clicks_shown / clicks
        ctr_all = clicks / impressions
        delta_ctr = (clicks_shown / shown - ctr_all) / ctr_all if shown > 0 else float("nan")
    else:
        retained_clicks = delta_ctr = float("nan")
    return ThresholdMetrics(float(tau), delta_ctr, retained_impressions, retained_clicks,
                            int(shown), int(clicks_shown), int(impressions), int(clicks))


def sweep_thresholds(scores, labels, taus: Iterable[float]) -> list[ThresholdMetrics]:
    """Metrics at each tau; an impression is shown when its score >= tau."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise EmptyPopulationError("empty dataset")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    # clicks among s[i:] for every i
    suffix = np.concatenate([np.cumsum(labels[order][::-1])[::-1], [0]])
    n, clicks = s.size, int(labels.sum())
    out = []
    for tau in taus:
        i = int(np.searchsorted(s, tau, side="left"))
        out.append(metrics_from_counts(tau, n - i, int(suffix[i]), n, clicks))
    return out


def score_examples(params: ModelParams, examples: Sequence[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    X, y = design_matrix(examples, params.dimension)
    return predict_scores(params, X), y


def sweep_model(params: ModelParams, examples: Sequence[TrainingExample], taus) -> list[ThresholdMetrics]:
    scores, y = score_examples(params, examples)
    return sweep_thresholds(scores, y, taus)


def tau_grid(scores, count: int, low_quantile: float = 0.0, high_quantile: float = 1.0) -> list[float]:
    """``count`` uniformly spaced thresholds between two empirical score quantiles."""
    scores = np.asarray(scores, dtype=float)
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = np.quantile(scores, [low_quantile, high_quantile])
    if count == 1:
        return [float(lo)]
    return [float(v) for v in np.linspace(lo, hi, count)]


def eval_threshold_table(aggregate: dict, taus: Sequence[float]) -> list[ThresholdMetrics]:
    """Threshold metrics from an eval round's aggregated counters (no raw examples)."""
    counts = aggregate["threshold_counts"]
    impressions = int(aggregate["examples"][0])
    clicks = int(round(aggregate["clicks"][0]))
    return [metrics_from_counts(t, int(c[0]), int(round(c[1])), impressions, clicks)
            for t, c in zip(taus, counts)]


# --- hourly buckets ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HourlyBuckets:
    means: np.ndarray    # NaN where absent
    weights: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.weights > 0

    @property
    def totals(self) -> np.ndarray:
        """Weighted sums per bucket (0 where absent)."""
        return np.where(self.present, np.nan_to_num(self.means) * self.weights, 0.0)

    def mean(self, hour: int) -> Optional[float]:
        return float(self.means[hour]) if self.present[hour] else None


def bucket_by_hour(records: Iterable[tuple[float, float, float]], display_tz_offset: float = 0.0) -> HourlyBuckets:
    """Weighted mean of ``(sim_time, value, weight)`` records per display-timezone hour."""
    sums = np.zeros(24)
    weights = np.zeros(24)
    for t, v, w in records:
        h = int(math.floor(t / HOUR + display_tz_offset)) % 24
        sums[h] += v * w
        weights[h] += w
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(weights > 0, sums / np.where(weights > 0, weights, 1.0), np.nan)
    return HourlyBuckets(means, weights)


# --- weight inspection ------------------------------------------------------

@dataclass(frozen=True)
class GroupFinding:
    name: str
    kind: str
    size: int
    monotonicity: Optional[str]
    zero_spans: tuple[tuple[int, int], ...]
    max_zero_span_fraction: float
    zero_fraction: float
    correlation: Optional[float]


@dataclass(frozen=True)
class WeightReport:
    groups: tuple[GroupFinding, ...]
    correlation: Optional[float]

    def group(self, name: str) -> GroupFinding:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)


def monotonicity_verdict(values, tol: float = 0.0) -> str:
    """``monotone``, ``mostly-monotone`` (one step against the trend) or ``non-monotone``."""
    d = np.diff(np.asarray(values, dtype=float))
    violations = min(int(np.sum(d > tol)), int(np.sum(d < -tol)))
    return ("monotone", "mostly-monotone")[violations] if violations < 2 else "non-monotone"


def zero_spans(values, tol: float = ZERO_TOL) -> list[tuple[int, int]]:
    """Maximal half-open index ranges where ``|w| < tol``."""
    spans, start = [], None
    for i, v in enumerate(values):
        if abs(v) < tol:
            if start is None:
                start = i
        elif start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(values)))
    return spans


def _spearman(a, b) -> Optional[float]:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def inspect_weights(params: ModelParams, schema: FeatureSchema, feature_counts=None) -> WeightReport:
    """Per-group weight findings and the Spearman correlation between |w| and feature frequency."""
    if params.dimension != schema.total_dimension:
        raise ValueError("params do not match schema")
    w = params.weights
    counts = None if feature_counts is None else np.asarray(feature_counts, dtype=float)
    findings = []
    for g, off in zip(schema.groups, schema.offsets):
        gw = w[off:off + g.size]
        spans = zero_spans(gw)
        longest = max((b - a for a, b in spans), default=0)
        findings.append(GroupFinding(
            name=g.name,
            kind=g.kind,
            size=g.size,
            monotonicity=monotonicity_verdict(gw) if g.kind == BINNED else None,
            zero_spans=tuple(spans),
            max_zero_span_fraction=longest / g.size,
            zero_fraction=float(np.mean(np.abs(gw) < ZERO_TOL)),
            correlation=None if counts is None else _spearman(np.abs(gw), counts[off:off + g.size]),
        ))
    overall = None if counts is None else _spearman(np.abs(w), counts)
    return WeightReport(tuple(findings), overall)


def format_weight_report(report: WeightReport) -> str:
    def f(x):
        return "undefined" if x is None else f"{x:.4f}"
    lines = [f"magnitude-frequency correlation (Spearman): {f(report.correlation)}"]
    for g in report.groups:
        parts = [f"{g.name} ({g.kind}, {g.size} features)"]
        if g.monotonicity is not None:
            parts.append(f"monotonicity={g.monotonicity}")
        parts.append(f"zero_spans={list(g.zero_spans)}")
        parts.append(f"max_zero_span_fraction={g.max_zero_span_fraction:.2f}")
        parts.append(f"correlation={f(g.correlation)}")
        flag = "  [FLAG: zero weight over most of range]" if g.max_zero_span_fraction >= 0.5 else ""
        lines.append("  ".join(parts) + flag)
    return "\n".join(lines) + "\n"


# --- population skew --------------------------------------------------------

FleetSnapshot = list  # of (DeviceProfile, list[TrainingExample])


def snapshot_fleet(profiles, generator: InteractionGenerator, days: int, master_seed: int,
                   stream_name: str = "snapshot") -> FleetSnapshot:
    """Fresh interaction histories for every profile over ``days`` days."""
    out = []
    for p in profiles:
        rng = stream(master_seed, stream_name, p.device_id)
        user = UserState.fresh(generator.n_categories)
        exs = []
        for day in range(days):
            exs.extend(generator.generate(p, user, day, rng))
        out.append((p, exs))
    return out


@dataclass(frozen=True)
class SkewReport:
    taus: tuple[float, ...]
    training: tuple[ThresholdMetrics, ...]
    deployment: tuple[ThresholdMetrics, ...]

    def differences(self) -> list[dict]:
        """Deployment minus training, per tau."""
        return [{
            "tau": t.tau,
            "delta_ctr": d.delta_ctr - t.delta_ctr,
            "retained_impressions": d.retained_impressions - t.retained_impressions,
            "retained_clicks": d.retained_clicks - t.retained_clicks,
        } for t, d in zip(self.training, self.deployment)]


def compare_populations(params: ModelParams, snapshot: FleetSnapshot, training_policy: EligibilityPolicy,
                        deployment_policy: EligibilityPolicy, taus: Optional[Sequence[float]] = None,
                        n_taus: int = 3, low_quantile: float = 0.0, high_quantile: float = 1.0) -> SkewReport:
    """Sweep the training-eligible and deployment-eligible slices of one fleet snapshot."""
    train, deploy = [], []
    for profile, exs in snapshot:
        in_train = is_eligible(profile, training_policy)
        in_deploy = is_eligible(profile, deployment_policy)
        if in_train and not in_deploy:
            raise ValueError("deployment population must contain the training population")
        if in_train:
            train.extend(exs)
        if in_deploy:
            deploy.extend(exs)
    if not deploy:
        raise EmptyPopulationError("deployment population is empty")
    if not train:
        raise EmptyPopulationError("training population is empty")
    train_scores, train_y = score_examples(params, train)
    dep_scores, dep_y = score_examples(params, deploy)
    if taus is None:
        taus = tau_grid(train_scores, n_taus, low_quantile, high_quantile)
    taus = tuple(float(t) for t in taus)
    return SkewReport(taus, tuple(sweep_thresholds(train_scores, train_y, taus)),
                      tuple(sweep_thresholds(dep_scores, dep_y, taus)))


# --- CSV -----------------------------------------------------------------------

def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def format_threshold_table(rows: Sequence[ThresholdMetrics]) -> str:
    return _csv(("tau", "delta_ctr", "retained_impressions", "retained_clicks"),
                [(_num(r.tau), _num(r.delta_ctr), _num(r.retained_impressions), _num(r.retained_clicks))
                 for r in rows])


def format_hourly_table(b: HourlyBuckets) -> str:
    return _csv(("hour", "mean", "weight"),
                [(h, _num(b.means[h]) if b.present[h] else "", _num(b.weights[h])) for h in range(24)])


def format_skew_table(report: SkewReport) -> str:
    rows = []
    for pop, table in (("training", report.training), ("deployment", report.deployment)):
        for r in table:
            rows.append((pop, _num(r.tau), _num(r.delta_ctr), _num(r.retained_impressions), _num(r.retained_clicks)))
    for d in report.differences():
        rows.append(("difference", _num(d["tau"]), _num(d["delta_ctr"]), _num(d["retained_impressions"]),
                     _num(d["retained_clicks"])))
    return _csv(("population", "tau", "delta_ctr", "retained_impressions", "retained_clicks"), rows)


def format_weight_csv(report: WeightReport) -> str:
    return _csv(("group", "kind", "size", "monotonicity", "zero_spans", "max_zero_span_fraction", "correlation"),
                [(g.name, g.kind, g.size, g.monotonicity or "",
                  ";".join(f"{a}-{b}" for a, b in g.zero_spans), _num(g.max_zero_span_fraction),
                  _num(g.correlation)) for g in report.groups])
