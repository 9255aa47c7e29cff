"""Server-side round orchestration and Federated Averaging."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Hashable, Optional, Sequence

import numpy as np

from .device import ClientReport, SelectionCriteria, TaskKind, TrainingTask, DEFAULT_TTL
from .model import LocalTrainConfig, ModelParams, ModelUpdate, StaleModelError
from .features import SchemaError

HOUR = 3600
DEFAULT_POPULATION = "query_suggestions/triggering"


@dataclass(frozen=True)
class RoundConfig:
    goal_client_count: int = 100
    min_client_count: int = 80
    training_period: int = 300
    report_window: int = 120
    min_reporting_fraction: float = 0.8

    def __post_init__(self):
        if not 1 <= self.min_client_count <= self.goal_client_count:
            raise ValueError("need 1 <= min_client_count <= goal_client_count")
        if self.training_period <= 0 or self.report_window <= 0:
            raise ValueError("durations must be > 0")
        if not 0 < self.min_reporting_fraction <= 1:
            raise ValueError("min_reporting_fraction must be in (0, 1]")


def required_reports(selected: int, fraction: float) -> int:
    """Reports needed to commit a round of ``selected`` clients: ``ceil(fraction * selected)``.

    The fraction is taken at its decimal value, so 0.55 * 100 is exactly 55.
    """
    return math.ceil(Fraction(str(fraction)) * selected)


class RoundState(str, Enum):
    GATHERING = "gathering"
    RUNNING = "running"
    COMMITTED = "committed"
    ABANDONED = "abandoned"


_TRANSITIONS = {
    RoundState.GATHERING: {RoundState.RUNNING},
    RoundState.RUNNING: {RoundState.COMMITTED, RoundState.ABANDONED},
    RoundState.COMMITTED: set(),
    RoundState.ABANDONED: set(),
}


class RoundLifecycleError(RuntimeError):
    pass


@dataclass(eq=False)
class RoundRecord:
    round_id: int
    kind: TaskKind
    state: RoundState = RoundState.GATHERING
    selected: list = field(default_factory=list)
    reports_received: int = 0
    started_at: Optional[int] = None
    closed_at: Optional[int] = None
    model_version: int = 0
    aggregate_metrics: dict = field(default_factory=dict)
    applied_delta: Optional[tuple[np.ndarray, float]] = None
    stragglers: int = 0
    tasks: dict = field(default_factory=dict, repr=False)
    _reports: dict = field(default_factory=dict, repr=False)

    @property
    def outcome(self) -> Optional[str]:
        if self.state in (RoundState.COMMITTED, RoundState.ABANDONED):
            return self.state.value
        return None

    def advance(self, new: RoundState) -> None:
        if new not in _TRANSITIONS[self.state]:
            raise RoundLifecycleError(f"round {self.round_id}: {self.state.value} -> {new.value}")
        self.state = new

    @property
    def all_reported(self) -> bool:
        return len(self._reports) == len(self.selected)


@dataclass(frozen=True)
class CheckInDirective:
    """Answer to a check-in: enrolled into ``round_id`` or told to come back after ``retry_after`` s.

    Enrolled clients receive their :class:`TrainingTask` when the round starts.
    """

    round_id: Optional[int] = None
    retry_after: Optional[int] = None
    rejected: bool = False

    def __post_init__(self):
        if (self.round_id is None) == (self.retry_after is None):
            raise ValueError("exactly one of round_id / retry_after must be set")


@dataclass(eq=False)
class GlobalModel:
    params: ModelParams
    history: list = field(default_factory=list)


def federated_average(updates: Sequence[ModelUpdate], weighting: str = "examples") -> tuple[np.ndarray, float]:
    """Mean of client deltas, weighted by example count (or uniformly)."""
    if not updates:
        raise ValueError("no updates to average")
    version = updates[0].round_version
    dim = updates[0].delta_weights.shape[0]
    for u in updates:
        if u.round_version != version:
            raise StaleModelError(f"update versions differ: {u.round_version} vs {version}")
        if u.delta_weights.shape[0] != dim:
            raise SchemaError("update dimensions differ")
    if weighting == "examples":
        coef = np.array([u.num_examples for u in updates], dtype=float)
    elif weighting == "uniform":
        coef = np.ones(len(updates))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    total = coef.sum()
    if total <= 0:
        raise ValueError("total weight is zero")
    D = np.stack([u.delta_weights for u in updates])
    b = np.array([u.delta_bias for u in updates])
    return coef @ D / total, float(coef @ b / total)


def apply_round(model: GlobalModel, delta: tuple[np.ndarray, float], server_lr: float = 1.0) -> GlobalModel:
    dw, db = delta
    p = model.params
    new = ModelParams(p.weights + server_lr * dw, p.bias + server_lr * db, p.round_version + 1)
    return GlobalModel(new, model.history)


def replay(initial: ModelParams, history: Sequence[RoundRecord], server_lr: float = 1.0) -> ModelParams:
    """Rebuild the final params from the committed train rounds of a history."""
    model = GlobalModel(initial)
    for rec in history:
        if rec.kind == TaskKind.TRAIN and rec.state == RoundState.COMMITTED:
            model = apply_round(model, rec.applied_delta, server_lr)
    return model.params


def pooled_mean(pairs) -> float:
    """Sum of sums over sum of counts; NaN when there is nothing to pool."""
    s = c = 0.0
    for total, count in pairs:
        s += total
        c += count
    return s / c if c else float("nan")


@dataclass(frozen=True)
class ServerConfig:
    train_round: RoundConfig = RoundConfig()
    eval_round: RoundConfig = RoundConfig(goal_client_count=50, min_client_count=20, min_reporting_fraction=0.5)
    eval_enabled: bool = True
    eval_share: float = 0.25
    pacing_delay: int = 6 * HOUR
    pacing_jitter: float = 0.1
    server_lr: float = 1.0
    weighting: str = "examples"
    train_config: LocalTrainConfig = LocalTrainConfig()
    lookback: int = DEFAULT_TTL
    max_examples: Optional[int] = None
    taus: tuple[float, ...] = ()
    populations: tuple[str, ...] = (DEFAULT_POPULATION,)


class Server:
    """Round state machine for one task population.

    One gathering round per kind (train, eval) is open at any time; a
    gathering round starts at a period tick once ``min_client_count`` clients
    are enrolled and no round of its kind is running.
    """

    def __init__(self, config: ServerConfig, initial: ModelParams, rng: np.random.Generator | None = None):
        self.config = config
        self.model = GlobalModel(initial)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.rounds: dict[int, RoundRecord] = {}
        self.counters: Counter = Counter()
        self.feature_counts = np.zeros(initial.dimension, dtype=np.int64)
        self._next_id = 0
        self._gathering: dict[TaskKind, RoundRecord] = {}
        self._running: dict[TaskKind, Optional[RoundRecord]] = {TaskKind.TRAIN: None, TaskKind.EVAL: None}
        self.accepting = True
        self._open(TaskKind.TRAIN)
        self._open(TaskKind.EVAL)

    # -- helpers -----------------------------------------------------------

    def round_config(self, kind: TaskKind) -> RoundConfig:
        return self.config.train_round if kind == TaskKind.TRAIN else self.config.eval_round

    def _open(self, kind: TaskKind, carried=()) -> RoundRecord:
        rec = RoundRecord(self._next_id, kind, selected=list(carried))
        self._next_id += 1
        self.rounds[rec.round_id] = rec
        self._gathering[kind] = rec
        return rec

    def _eval_open(self) -> bool:
        return self.config.eval_enabled and self.model.params.round_version >= 1

    def pacing_delay(self) -> int:
        j = self.config.pacing_jitter
        base = self.config.pacing_delay
        return int(round(base * (1.0 + self.rng.uniform(-j, j)))) if j else base

    def gathering(self, kind: TaskKind) -> RoundRecord:
        return self._gathering[kind]

    def running(self, kind: TaskKind) -> Optional[RoundRecord]:
        return self._running[kind]

    @property
    def history(self) -> list[RoundRecord]:
        return self.model.history

    # -- operations ----------------------------------------------------------

    def check_in(self, client: Hashable, population: str, now: int) -> CheckInDirective:
        """Enroll ``client`` (an opaque connection handle) or send it away with a pacing delay."""
        if population not in self.config.populations:
            self.counters["unknown_population"] += 1
            return CheckInDirective(retry_after=self.pacing_delay(), rejected=True)
        if not self.accepting:
            return CheckInDirective(retry_after=self.pacing_delay())
        kinds = [TaskKind.TRAIN]
        if self._eval_open():
            kinds.append(TaskKind.EVAL)
            if self.rng.random() < self.config.eval_share:
                kinds.reverse()
        if any(client in self._gathering[k].selected for k in (TaskKind.TRAIN, TaskKind.EVAL)):
            self.counters["duplicate_checkin"] += 1
            return CheckInDirective(retry_after=self.pacing_delay(), rejected=True)
        for k in kinds:
            rec = self._gathering[k]
            if len(rec.selected) < self.round_config(k).goal_client_count:
                rec.selected.append(client)
                return CheckInDirective(round_id=rec.round_id)
        self.counters["full"] += 1
        return CheckInDirective(retry_after=self.pacing_delay())

    def try_start_round(self, now: int, kind: TaskKind = TaskKind.TRAIN) -> Optional[RoundRecord]:
        """Move the gathering round to running if enough clients are enrolled.

        Beyond ``goal_client_count`` a seeded uniform sample is selected and the
        rest stay enrolled for the next round.
        """
        if self._running[kind] is not None:
            return None
        if kind == TaskKind.EVAL and not self._eval_open():
            return None
        cfg = self.round_config(kind)
        rec = self._gathering[kind]
        if len(rec.selected) < cfg.min_client_count:
            return None
        enrolled = rec.selected
        carried = []
        if len(enrolled) > cfg.goal_client_count:
            pick = np.sort(self.rng.choice(len(enrolled), cfg.goal_client_count, replace=False))
            keep = set(pick.tolist())
            carried = [c for i, c in enumerate(enrolled) if i not in keep]
            rec.selected = [enrolled[i] for i in pick]
        rec.advance(RoundState.RUNNING)
        rec.started_at = now
        rec.model_version = self.model.params.round_version
        task = self._make_task(kind, rec.round_id, now)
        rec.tasks = {c: task for c in rec.selected}
        self._running[kind] = rec
        self._open(kind, carried)
        return rec

    def _make_task(self, kind: TaskKind, round_id: int, now: int) -> TrainingTask:
        c = self.config
        criteria = SelectionCriteria(max(0, now - c.lookback), now, c.max_examples)
        return TrainingTask(self.model.params, kind, c.train_config, criteria,
                            taus=tuple(c.taus) if kind == TaskKind.EVAL else (), round_id=round_id)

    def tick(self, now: int) -> list[RoundRecord]:
        started = []
        for kind in (TaskKind.TRAIN, TaskKind.EVAL):
            rec = self.try_start_round(now, kind)
            if rec is not None:
                started.append(rec)
        return started

    def receive_report(self, round_id: int, client: Hashable, report: ClientReport, now: int) -> bool:
        """Accumulate a report; returns False when it is discarded."""
        rec = self.rounds.get(round_id)
        if rec is None or rec.started_at is None:
            self.counters["unknown_round"] += 1
            return False
        late = now > rec.started_at + self.round_config(rec.kind).report_window
        if rec.state != RoundState.RUNNING:
            if late:
                self.counters["straggler"] += 1
                rec.stragglers += 1
            else:
                self.counters["closed_round"] += 1
            return False
        if client not in rec.tasks:
            self.counters["unselected_reporter"] += 1
            return False
        if client in rec._reports:
            self.counters["duplicate_report"] += 1
            return False
        if late:
            self.counters["straggler"] += 1
            rec.stragglers += 1
            return False
        if rec.kind == TaskKind.TRAIN:
            if report.update is None or report.update.round_version != rec.model_version:
                self.counters["stale_update"] += 1
                return False
        rec._reports[client] = report
        rec.reports_received = len(rec._reports)
        return True

    def close_round(self, round_id: int, now: int) -> RoundRecord:
        rec = self.rounds[round_id]
        reports = list(rec._reports.values())
        rec._reports = {}
        rec.tasks = {}
        rec.closed_at = now
        cfg = self.round_config(rec.kind)
        if self._running.get(rec.kind) is rec:
            self._running[rec.kind] = None
        if len(reports) >= required_reports(len(rec.selected), cfg.min_reporting_fraction) and reports:
            rec.advance(RoundState.COMMITTED)
            rec.aggregate_metrics = aggregate_reports(reports)
            if rec.kind == TaskKind.TRAIN:
                delta = federated_average([r.update for r in reports], self.config.weighting)
                self.model = apply_round(self.model, delta, self.config.server_lr)
                rec.applied_delta = delta
                for r in reports:
                    if r.feature_counts is not None:
                        self.feature_counts += r.feature_counts
        else:
            rec.advance(RoundState.ABANDONED)
        self.model.history.append(rec)
        return rec

    def run_eval_round(self, clients: Sequence, now: int, execute) -> RoundRecord:
        """Synchronous eval round: enroll ``clients``, hand out the task, collect via ``execute(client, task)``.

        Convenience wrapper over check_in / try_start_round / receive_report /
        close_round for callers without an event loop.
        """
        if not self._eval_open():
            raise RuntimeError("no committed model to evaluate")
        rec = self._gathering[TaskKind.EVAL]
        for c in clients:
            if len(rec.selected) < self.config.eval_round.goal_client_count and c not in rec.selected:
                rec.selected.append(c)
        started = self.try_start_round(now, TaskKind.EVAL)
        if started is None:
            raise RuntimeError("not enough clients for an eval round")
        for c, task in list(started.tasks.items()):
            report = execute(c, task)
            if report is not None:
                self.receive_report(started.round_id, c, report, now)
        return self.close_round(started.round_id, now)


def aggregate_reports(reports: Sequence[ClientReport]) -> dict:
    """Pool per-client (sum, count) metrics and sum threshold counters."""
    pooled: dict[str, list[float]] = {}
    for r in reports:
        for name, (s, c) in r.metrics.items():
            acc = pooled.setdefault(name, [0.0, 0.0])
            acc[0] += s
            acc[1] += c
    out = {name: (s, c) for name, (s, c) in pooled.items()}
    out["mean_loss"] = pooled_mean([pooled.get("loss", (0.0, 0.0))])
    out["example_count"] = int(pooled.get("examples", (0.0, 0.0))[0])
    counts = [r.threshold_counts for r in reports if r.threshold_counts is not None]
    if counts:
        out["threshold_counts"] = np.sum(counts, axis=0)
    return out


ROUND_LOG_COLUMNS = ("round_id", "kind", "sim_time", "selected", "reported", "outcome", "mean_loss", "example_count")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def round_log_rows(history: Sequence[RoundRecord]):
    for rec in history:
        m = rec.aggregate_metrics
        yield (rec.round_id, rec.kind.value, rec.closed_at, len(rec.selected), rec.reports_received,
               rec.outcome, _fmt(m.get("mean_loss")), _fmt(m.get("example_count")))


def format_round_log(history: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_LOG_COLUMNS)
    w.writerows(round_log_rows(history))
    return buf.getvalue()
