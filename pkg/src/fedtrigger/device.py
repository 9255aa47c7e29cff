"""Simulated client: TTL training cache and task execution."""
from __future__ import annotations

import bisect
import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .model import (
    LocalTrainConfig,
    ModelParams,
    ModelUpdate,
    StaleModelError,
    TrainingExample,
    compute_update,
    design_matrix,
    loss_from_scores,
    predict_scores,
    run_sgd,
)

DAY = 86_400
DEFAULT_TTL = 7 * DAY
DEFAULT_CAPACITY = 500


class TrainingCache:
    """On-device store of training examples with a time-to-live.

    Records are kept ordered by ``(created_at, insertion order)``. A record
    survives eviction while ``now - created_at <= ttl``; when over capacity
    the oldest record goes first.
    """

    def __init__(self, ttl: int = DEFAULT_TTL, capacity: int = DEFAULT_CAPACITY):
        if ttl < 0 or capacity < 1:
            raise ValueError("ttl must be >= 0 and capacity >= 1")
        self.ttl = ttl
        self.capacity = capacity
        self._keys: list[tuple[int, int]] = []
        self._records: list[TrainingExample] = []
        self._seq = 0

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> list[TrainingExample]:
        return list(self._records)

    def put(self, ex: TrainingExample, now: int) -> "TrainingCache":
        if ex.created_at > now:
            raise ValueError(f"example created at {ex.created_at} is in the future (now={now})")
        key = (ex.created_at, self._seq)
        self._seq += 1
        i = bisect.bisect_right(self._keys, key)
        self._keys.insert(i, key)
        self._records.insert(i, ex)
        if len(self._records) > self.capacity:
            drop = len(self._records) - self.capacity
            del self._keys[:drop]
            del self._records[:drop]
        return self

    def _first_live(self, now: int) -> int:
        # first record with created_at >= now - ttl
        return bisect.bisect_left(self._keys, (now - self.ttl, -1))

    def evict(self, now: int) -> "TrainingCache":
        i = self._first_live(now)
        if i:
            del self._keys[:i]
            del self._records[:i]
        return self

    def query(self, criteria: "SelectionCriteria", now: int) -> list[TrainingExample]:
        """Live records inside the criteria's date window, newest ``max_examples`` kept.

        The TTL filter is applied here as well, so querying without a prior
        :meth:`evict` gives the same answer.
        """
        lo = max(self._first_live(now), bisect.bisect_left(self._keys, (criteria.min_created_at, -1)))
        hi = bisect.bisect_right(self._keys, (criteria.max_created_at, self._seq))
        if hi <= lo:
            return []
        if criteria.max_examples is not None:
            lo = max(lo, hi - criteria.max_examples)
        return self._records[lo:hi]


@dataclass(frozen=True)
class SelectionCriteria:
    min_created_at: int = 0
    max_created_at: int = 2**62
    max_examples: Optional[int] = None

    def __post_init__(self):
        if self.min_created_at > self.max_created_at:
            raise ValueError("min_created_at must be <= max_created_at")
        if self.max_examples is not None and self.max_examples < 0:
            raise ValueError("max_examples must be >= 0")


class TaskKind(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True, eq=False)
class TrainingTask:
    model: ModelParams
    kind: TaskKind = TaskKind.TRAIN
    train_config: LocalTrainConfig = LocalTrainConfig()
    criteria: SelectionCriteria = SelectionCriteria()
    metrics: tuple[str, ...] = ("loss", "examples", "clicks")
    taus: tuple[float, ...] = ()
    round_id: int = -1


@dataclass(frozen=True, eq=False)
class ClientReport:
    """What a client uploads. Carries no device identifier.

    ``metrics`` maps a name to a ``(sum, count)`` pair. Eval reports add
    ``threshold_counts``: one ``(shown, clicks_shown)`` row per task tau.
    """

    update: Optional[ModelUpdate]
    metrics: dict
    population: str
    threshold_counts: Optional[np.ndarray] = None
    feature_counts: Optional[np.ndarray] = None


class Device:
    """Client runtime state: one training cache plus a private random stream."""

    def __init__(
        self,
        population: str,
        cache: TrainingCache | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.population = population
        self.cache = cache if cache is not None else TrainingCache()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.latest_version = -1
        self.range_violations: Counter = Counter()

    def execute_task(self, task: TrainingTask, now: int) -> ClientReport | None:
        """Run ``task`` on the local cache; ``None`` means participation declined."""
        if task.model.round_version < self.latest_version:
            raise StaleModelError(
                f"task model version {task.model.round_version} older than {self.latest_version}")
        self.latest_version = task.model.round_version
        self.cache.evict(now)
        examples = self.cache.query(task.criteria, now)
        if not examples:
            return None
        return execute_on_examples(task, examples, self.population, self.rng)


def execute_on_examples(
    task: TrainingTask,
    examples: Sequence[TrainingExample],
    population: str,
    rng: np.random.Generator,
) -> ClientReport:
    params = task.model
    X, y = design_matrix(examples, params.dimension)
    n = len(examples)
    clicks = float(y.sum())
    if task.kind == TaskKind.TRAIN:
        cfg = task.train_config
        draw = int(rng.integers(2**31))
        cfg = dataclasses.replace(cfg, shuffle_seed=(cfg.shuffle_seed * 1_000_003 + draw) % 2**63)
        trained, loss_sum, visits = run_sgd(params, X, y, cfg)
        metrics = {"loss": (loss_sum, visits), "examples": (float(n), 1), "clicks": (clicks, n)}
        update = compute_update(params, trained, n, metrics)
        return ClientReport(update, metrics, population,
                            feature_counts=np.count_nonzero(X, axis=0))
    scores = predict_scores(params, X)
    losses = loss_from_scores(scores, y)
    metrics = {"loss": (float(losses.sum()), n), "examples": (float(n), 1), "clicks": (clicks, n)}
    counts = np.zeros((len(task.taus), 2))
    for i, tau in enumerate(task.taus):
        shown = scores >= tau
        counts[i] = (np.count_nonzero(shown), float(y[shown].sum()))
    return ClientReport(None, metrics, population, threshold_counts=counts)
