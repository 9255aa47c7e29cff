"""Deterministic discrete-event loop binding the fleet, device runtimes and the server."""
from __future__ import annotations

import hashlib
import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .device import DEFAULT_CAPACITY, DEFAULT_TTL, Device, TaskKind, TrainingCache
from .features import FeatureSchema, default_schema
from .fleet import (
    DAY,
    EligibilityPolicy,
    FleetConfig,
    GroundTruth,
    InteractionGenerator,
    UserState,
    build_fleet,
    default_fleet_config,
    default_ground_truth,
    is_available,
    is_eligible,
    _n_categories,
)
from .model import ModelParams, StaleModelError
from .orchestrator import RoundState, Server, ServerConfig
from .rng import stream

# same-time ordering: new data, then reports, then round closes, then ticks, then device wake-ups
_P_DAY, _P_REPORT, _P_CLOSE, _P_TICK, _P_WAKE = range(5)


@dataclass(frozen=True)
class SimulationConfig:
    schema: FeatureSchema = field(default_factory=default_schema)
    ground_truth: Optional[GroundTruth] = None
    fleet: FleetConfig = field(default_factory=default_fleet_config)
    server: ServerConfig = ServerConfig()
    training_policy: EligibilityPolicy = EligibilityPolicy()
    cache_ttl: int = DEFAULT_TTL
    cache_capacity: int = DEFAULT_CAPACITY
    poll_interval: int = 1800
    latency_min: int = 10
    latency_max_factor: float = 1.1
    master_seed: int = 0

    def resolved_ground_truth(self) -> GroundTruth:
        return self.ground_truth if self.ground_truth is not None else default_ground_truth(self.schema)


@dataclass(eq=False)
class SimDevice:
    profile: object
    runtime: Device
    user: UserState
    availability_rng: np.random.Generator
    dropout_rng: np.random.Generator
    datagen_rng: np.random.Generator
    pending: list = field(default_factory=list)
    session: Optional[int] = None


class Simulation:
    """The whole world as a pure function of (config, master seed).

    Raw generated interactions are kept only when ``keep_raw`` is set; that
    path exists for test oracles and never feeds the server.
    """

    def __init__(self, config: SimulationConfig, keep_raw: bool = False):
        self.config = config
        seed = config.master_seed
        self.schema = config.schema
        self.ground_truth = config.resolved_ground_truth()
        n_cat = _n_categories(self.schema)
        self.generator = InteractionGenerator(self.schema, self.ground_truth, n_cat,
                                              config.fleet.score_range, config.fleet.activity)
        self.profiles = build_fleet(config.fleet, seed, n_cat)
        self.server = Server(config.server, ModelParams.zeros(self.schema.total_dimension),
                             stream(seed, "selection"))
        self.population = config.server.populations[0]
        self.devices: list[SimDevice] = []
        for p in self.profiles:
            if not is_eligible(p, config.training_policy):
                continue
            self.devices.append(SimDevice(
                p,
                Device(self.population, TrainingCache(config.cache_ttl, config.cache_capacity),
                       stream(seed, "device", p.device_id)),
                UserState.fresh(n_cat),
                stream(seed, "availability", p.device_id),
                stream(seed, "dropout", p.device_id),
                stream(seed, "datagen", p.device_id),
            ))
        self.now = 0
        self.log: list[tuple] = []
        self.counters: Counter = Counter()
        self.keep_raw = keep_raw
        self.raw_examples: list = []
        self.reporters: dict[int, list[int]] = {}
        self.selected_devices: dict[TaskKind, set] = {TaskKind.TRAIN: set(), TaskKind.EVAL: set()}
        self._sessions: dict[int, int] = {}
        self._next_session = 0
        self._heap: list = []
        self._seq = 0
        self._push(0, _P_DAY, "day", 0)
        self._push(0, _P_TICK, "tick", None)
        for i, d in enumerate(self.devices):
            self._push(int(d.availability_rng.integers(0, config.poll_interval)), _P_WAKE, "wake", i)

    # -- event plumbing ----------------------------------------------------------

    def _push(self, t: int, prio: int, kind: str, payload) -> None:
        heapq.heappush(self._heap, (t, prio, self._seq, kind, payload))
        self._seq += 1

    def step(self, until: int, stop: Callable[["Simulation"], bool] | None = None) -> list[tuple]:
        """Process every event with time <= ``until``; returns the log entries produced."""
        if until < self.now:
            raise ValueError("cannot step backwards")
        start = len(self.log)
        heap = self._heap
        while heap and heap[0][0] <= until:
            t, _, _, kind, payload = heapq.heappop(heap)
            self.now = t
            getattr(self, "_on_" + kind)(t, payload)
            if stop is not None and stop(self):
                return self.log[start:]
        self.now = until
        return self.log[start:]

    def run_days(self, days: float) -> "Simulation":
        self.step(int(days * DAY))
        return self

    def run_until_committed(self, n_rounds: int, max_days: float = 60) -> "Simulation":
        self.step(int(max_days * DAY),
                  stop=lambda s: s.server.model.params.round_version >= n_rounds)
        return self

    # -- handlers --------------------------------------------------------------

    def _flush(self, d: SimDevice, now: int) -> None:
        if not d.pending:
            return
        keep = []
        for ex in d.pending:
            if ex.created_at <= now:
                d.runtime.cache.put(ex, now)
            else:
                keep.append(ex)
        d.pending = keep

    def _on_day(self, t: int, day: int) -> None:
        for d in self.devices:
            self._flush(d, t)
            new = self.generator.generate(d.profile, d.user, day, d.datagen_rng, d.runtime.range_violations)
            d.pending.extend(new)
            if self.keep_raw:
                self.raw_examples.extend((d.profile.device_id, ex) for ex in new)
        self.log.append((t, "day", day))
        self._push(t + DAY, _P_DAY, "day", day + 1)

    def _on_wake(self, t: int, i: int) -> None:
        d = self.devices[i]
        if not is_available(d.profile, d.profile.schedule, t, d.availability_rng):
            self._push(t + self.config.poll_interval, _P_WAKE, "wake", i)
            return
        token = self._next_session
        self._next_session += 1
        directive = self.server.check_in(token, self.population, t)
        if directive.round_id is None:
            self.log.append((t, "retry", i))
            self._push(t + directive.retry_after, _P_WAKE, "wake", i)
            return
        self._sessions[token] = i
        d.session = token
        self.log.append((t, "enroll", i, directive.round_id))

    def _on_tick(self, t: int, _) -> None:
        cfg = self.config.server.train_round
        for rec in self.server.tick(t):
            self.log.append((t, "start", rec.round_id, rec.kind.value, len(rec.selected)))
            window = self.server.round_config(rec.kind).report_window
            lat_max = max(self.config.latency_min, int(round(window * self.config.latency_max_factor)))
            for token, task in list(rec.tasks.items()):
                i = self._sessions.pop(token)
                d = self.devices[i]
                d.session = None
                self.selected_devices[rec.kind].add(i)
                self._push(t + self.server.pacing_delay(), _P_WAKE, "wake", i)
                self._flush(d, t)
                try:
                    report = d.runtime.execute_task(task, t)
                except StaleModelError:
                    self.counters["stale_task"] += 1
                    continue
                if report is None:
                    self.counters["declined"] += 1
                    continue
                if d.dropout_rng.random() >= d.profile.network_reliability:
                    self.counters["dropped"] += 1
                    continue
                latency = int(d.dropout_rng.integers(self.config.latency_min, lat_max + 1))
                self._push(t + latency, _P_REPORT, "report", (rec.round_id, token, i, report))
            self._push(t + window, _P_CLOSE, "close", rec.round_id)
        self._push(t + cfg.training_period, _P_TICK, "tick", None)

    def _on_report(self, t: int, payload) -> None:
        rid, token, i, report = payload
        ok = self.server.receive_report(rid, token, report, t)
        self.log.append((t, "report", rid, int(ok)))
        if ok:
            self.reporters.setdefault(rid, []).append(i)
            rec = self.server.rounds[rid]
            if rec.all_reported:
                self._close(t, rid)

    def _on_close(self, t: int, rid: int) -> None:
        if self.server.rounds[rid].state == RoundState.RUNNING:
            self._close(t, rid)

    def _close(self, t: int, rid: int) -> None:
        rec = self.server.close_round(rid, t)
        if rec.state != RoundState.COMMITTED:
            self.reporters.pop(rid, None)
        self.log.append((t, "close", rid, rec.outcome, rec.reports_received))

    # -- summaries ---------------------------------------------------------------

    @property
    def params(self) -> ModelParams:
        return self.server.model.params

    def log_digest(self) -> str:
        h = hashlib.sha256()
        for entry in self.log:
            h.update(repr(entry).encode())
        return h.hexdigest()

    def committed(self, kind: TaskKind = TaskKind.TRAIN) -> list:
        return [r for r in self.server.history if r.kind == kind and r.state == RoundState.COMMITTED]

    def overlap_rate(self) -> float:
        """Share of participating devices selected for both training and eval."""
        a, b = self.selected_devices[TaskKind.TRAIN], self.selected_devices[TaskKind.EVAL]
        union = a | b
        return len(a & b) / len(union) if union else 0.0

    def reporter_share(self, predicate) -> float:
        """Fraction of accepted committed-round reports whose device satisfies ``predicate``."""
        committed = {r.round_id for r in self.committed(TaskKind.TRAIN)}
        hits = total = 0
        for rid, devs in self.reporters.items():
            if rid not in committed:
                continue
            for i in devs:
                total += 1
                hits += bool(predicate(self.devices[i].profile))
        return hits / total if total else float("nan")

    def pooled_examples(self):
        """All generated examples (oracle-only raw access)."""
        if not self.keep_raw:
            raise RuntimeError("simulation was not created with keep_raw=True")
        return [ex for _, ex in self.raw_examples]
