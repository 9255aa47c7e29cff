import numpy as np
import pytest

from fedtrigger.features import FeatureVector
from fedtrigger.model import TrainingExample


def random_examples(rng, n, dim, density=0.3, t=0):
    """Sparse random examples with labels drawn from a fixed logistic model."""
    w = rng.normal(0, 1, dim)
    out = []
    for _ in range(n):
        mask = rng.random(dim) < density
        ids = np.flatnonzero(mask)
        vals = rng.normal(0, 1, ids.size)
        p = 1 / (1 + np.exp(-(vals @ w[ids])))
        out.append(TrainingExample(FeatureVector(ids.astype(np.int32), vals), int(rng.random() < p), t))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class NaiveCache:
    """Reference cache: a plain list scanned linearly on every operation."""

    def __init__(self, ttl, capacity):
        self.ttl, self.capacity = ttl, capacity
        self.items = []  # (created_at, seq, example), insertion order

    def put(self, ex, seq):
        self.items.append((ex.created_at, seq, ex))
        self.items.sort(key=lambda r: (r[0], r[1]))
        while len(self.items) > self.capacity:
            self.items.pop(0)

    def evict(self, now):
        self.items = [r for r in self.items if now - r[0] <= self.ttl]

    def query(self, lo, hi, max_examples, now):
        hits = [r[2] for r in self.items if now - r[0] <= self.ttl and lo <= r[0] <= hi]
        if max_examples is not None:
            hits = hits[max(0, len(hits) - max_examples):] if max_examples else []
        return hits


def run_cache_ops(seed, n_ops, ttl=50, capacity=8):
    """Drive TrainingCache and NaiveCache with the same random operations; return mismatches."""
    from fedtrigger.device import SelectionCriteria, TrainingCache

    r = np.random.default_rng(seed)
    real, naive = TrainingCache(ttl, capacity), NaiveCache(ttl, capacity)
    span = max(ttl, 5)  # time scale of the random steps and windows
    now, seq, bad = 0, 0, []
    for step in range(n_ops):
        op = r.integers(4)
        if op == 0:
            now += int(r.integers(0, max(span // 3, 2)))
        elif op == 1:
            t = max(0, now - int(r.integers(0, 2 * span)))
            e = TrainingExample(FeatureVector(np.array([seq % 3], dtype=np.int32), np.array([1.0])), seq % 2, t)
            real.put(e, now)
            naive.put(e, seq)
            seq += 1
        elif op == 2:
            real.evict(now)
            naive.evict(now)
            if real.records != [x[2] for x in naive.items]:
                bad.append((step, "evict"))
        else:
            lo = max(0, now - int(r.integers(0, 3 * span)))
            hi = lo + int(r.integers(0, 3 * span))
            k = None if r.random() < 0.5 else int(r.integers(0, 6))
            got = real.query(SelectionCriteria(lo, hi, k), now)
            want = naive.query(lo, hi, k, now)
            if len(got) != len(want) or any(a is not b for a, b in zip(got, want)):
                bad.append((step, "query"))
    return bad


def brute_force_sweep(scores, labels, tau):
    """Per-impression enumeration: (shown, clicks_shown, impressions, clicks)."""
    shown = clicks_shown = clicks = 0
    for s, y in zip(scores, labels):
        clicks += y
        if s >= tau:
            shown += 1
            clicks_shown += y
    return shown, clicks_shown, len(scores), clicks


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
