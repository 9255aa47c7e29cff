import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtrigger.device import ClientReport, TaskKind
from fedtrigger.model import ModelParams, ModelUpdate, StaleModelError
from fedtrigger.orchestrator import (
    DEFAULT_POPULATION,
    CheckInDirective,
    GlobalModel,
    RoundConfig,
    RoundLifecycleError,
    RoundRecord,
    RoundState,
    Server,
    ServerConfig,
    aggregate_reports,
    apply_round,
    federated_average,
    format_round_log,
    replay,
    required_reports,
)

POP = DEFAULT_POPULATION


def server(dim=3, **kw):
    kw.setdefault("pacing_jitter", 0.0)
    kw.setdefault("eval_enabled", False)
    return Server(ServerConfig(**kw), ModelParams.zeros(dim), np.random.default_rng(0))


def enroll(s, n, start=0):
    return [s.check_in(c, POP, 0) for c in range(start, start + n)]


def train_report(dw, db=0.0, n=1, version=0):
    m = {"loss": (0.5 * n, n), "examples": (float(n), 1)}
    return ClientReport(ModelUpdate(np.asarray(dw, float), db, n, version, m), m, POP)


def test_round_config_defaults():
    c = RoundConfig()
    assert (c.goal_client_count, c.min_client_count, c.training_period, c.report_window,
            c.min_reporting_fraction) == (100, 80, 300, 120, 0.8)
    with pytest.raises(ValueError):
        RoundConfig(goal_client_count=10, min_client_count=11)
    with pytest.raises(ValueError):
        RoundConfig(report_window=0)


def test_150_checkins_goal_100():
    s = server()
    out = enroll(s, 150)
    assert sum(d.round_id is not None for d in out) == 100
    assert sum(d.retry_after is not None for d in out) == 50


def test_retry_after_is_pacing_delay_when_not_gathering():
    s = server(pacing_delay=3600)
    s.accepting = False
    assert s.check_in("a", POP, 0).retry_after == 3600


def test_duplicate_checkin_refused():
    s = server()
    assert s.check_in("a", POP, 0).round_id is not None
    d = s.check_in("a", POP, 1)
    assert d.round_id is None and d.rejected
    assert len(s.gathering(TaskKind.TRAIN).selected) == 1


def test_unknown_population_rejected():
    d = server().check_in("a", "other/population", 0)
    assert d.rejected and d.retry_after is not None


def test_directive_is_exclusive():
    with pytest.raises(ValueError):
        CheckInDirective()
    with pytest.raises(ValueError):
        CheckInDirective(round_id=1, retry_after=5)


def test_start_needs_min_clients():
    s = server()
    enroll(s, 79)
    assert s.try_start_round(0) is None
    enroll(s, 1, start=79)
    rec = s.try_start_round(0)
    assert rec is not None and len(rec.selected) == 80
    assert rec.state == RoundState.RUNNING


def test_overfull_round_selects_goal_and_carries_rest():
    s = server()
    g = s.gathering(TaskKind.TRAIN)
    g.selected = list(range(123))  # not reachable through check_in, which caps at goal
    rec = s.try_start_round(0)
    assert len(rec.selected) == 100
    nxt = s.gathering(TaskKind.TRAIN)
    assert len(nxt.selected) == 23
    assert set(rec.selected) | set(nxt.selected) == set(range(123))
    assert not set(rec.selected) & set(nxt.selected)


def test_only_one_running_round_per_kind():
    s = server()
    enroll(s, 80)
    assert s.try_start_round(0) is not None
    enroll(s, 80, start=100)
    assert s.try_start_round(10) is None


def started(s, n=80, t=0):
    enroll(s, n)
    return s.try_start_round(t)


def test_report_window_boundary():
    s = server()
    rec = started(s)
    a, b = rec.selected[:2]
    assert s.receive_report(rec.round_id, a, train_report([1, 0, 0]), 120)
    assert not s.receive_report(rec.round_id, b, train_report([1, 0, 0]), 121)
    assert rec.stragglers == 1
    assert s.counters["straggler"] == 1


def test_duplicate_and_unselected_reports_dropped():
    s = server()
    rec = started(s)
    c = rec.selected[0]
    assert s.receive_report(rec.round_id, c, train_report([1, 0, 0]), 5)
    assert not s.receive_report(rec.round_id, c, train_report([1, 0, 0]), 6)
    assert not s.receive_report(rec.round_id, "stranger", train_report([1, 0, 0]), 6)
    assert rec.reports_received == 1


def test_stale_update_dropped():
    s = server()
    rec = started(s)
    assert not s.receive_report(rec.round_id, rec.selected[0], train_report([1, 0, 0], version=7), 5)


def test_late_report_after_close_is_straggler():
    s = server()
    rec = started(s)
    s.close_round(rec.round_id, 120)
    s.receive_report(rec.round_id, rec.selected[0], train_report([1, 0, 0]), 150)
    assert rec.stragglers == 1


@pytest.mark.parametrize("selected,reports,outcome", [
    (100, 80, "committed"), (100, 79, "abandoned"), (80, 64, "committed"),
])
def test_close_round_examples(selected, reports, outcome):
    s = server()
    rec = started(s, selected)
    for c in rec.selected[:reports]:
        s.receive_report(rec.round_id, c, train_report([0.5, 0, 0]), 10)
    assert s.close_round(rec.round_id, 120).outcome == outcome
    assert s.model.params.round_version == (1 if outcome == "committed" else 0)


def test_commit_rule_exhaustive():
    # integer oracle: reports >= ceil(0.8 * selected)  <=>  5 * reports >= 4 * selected
    for selected in range(1, 201):
        for reports in range(selected + 1):
            assert (reports >= required_reports(selected, 0.8)) == (5 * reports >= 4 * selected)


def test_required_reports_uses_decimal_fraction():
    # 0.55 * 100 is 55.00000000000001 in binary floating point
    assert math.ceil(0.55 * 100) == 56
    assert required_reports(100, 0.55) == 55


def test_lifecycle_is_a_dag():
    rec = RoundRecord(0, TaskKind.TRAIN)
    with pytest.raises(RoundLifecycleError):
        rec.advance(RoundState.COMMITTED)
    rec.advance(RoundState.RUNNING)
    rec.advance(RoundState.ABANDONED)
    for st_ in RoundState:
        with pytest.raises(RoundLifecycleError):
            rec.advance(st_)


def upd(dw, db=0.0, n=1, v=0):
    return ModelUpdate(np.asarray(dw, float), db, n, v)


def test_federated_average_examples():
    dw, db = federated_average([upd([1.0, -2.0], 0.5, 4)])
    np.testing.assert_array_equal(dw, [1.0, -2.0])
    assert db == 0.5
    dw, _ = federated_average([upd([0.3, 0.1], n=5), upd([-0.3, -0.1], n=5)])
    np.testing.assert_allclose(dw, 0, atol=1e-17)
    # (1 * 0.0 + 3 * 0.4) / 4
    dw, _ = federated_average([upd([0.0], n=1), upd([0.4], n=3)])
    assert dw[0] == pytest.approx(0.3, abs=1e-16)
    dw, _ = federated_average([upd([0.0], n=1), upd([0.4], n=3)], weighting="uniform")
    assert dw[0] == pytest.approx(0.2, abs=1e-16)


def test_federated_average_rejects_mixed_versions():
    with pytest.raises(StaleModelError):
        federated_average([upd([1.0], v=0), upd([1.0], v=1)])
    with pytest.raises(ValueError):
        federated_average([])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_federated_average_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    ups = [upd(rng.normal(0, 1, 6), float(rng.normal()), int(rng.integers(1, 100))) for _ in range(k)]
    a = federated_average(ups)
    b = federated_average([ups[i] for i in rng.permutation(k)])
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)
    assert abs(a[1] - b[1]) <= 1e-12


def test_apply_round():
    m = GlobalModel(ModelParams(np.array([0.25, -1.5]), 0.5, 3))
    same = apply_round(m, (np.zeros(2), 0.0))
    np.testing.assert_array_equal(same.params.weights, m.params.weights)
    assert same.params.round_version == 4
    d = (np.array([0.125, 2.0]), -0.25)
    new = apply_round(m, d)
    np.testing.assert_array_equal(new.params.weights, [0.375, 0.5])
    back = new.params.weights - d[0]
    # exact here because every value is a dyadic rational
    np.testing.assert_array_equal(back, m.params.weights)


def test_eval_rounds_pool_and_never_touch_params():
    s = server(eval_enabled=True, eval_round=RoundConfig(goal_client_count=2, min_client_count=1,
                                                        min_reporting_fraction=0.5))
    s.model = apply_round(s.model, (np.zeros(3), 0.0))
    before = s.model.params

    def execute(c, task):
        n = {"a": 2, "b": 6}[c]
        loss = {"a": 2.0, "b": 6.0}[c]
        return ClientReport(None, {"loss": (loss, n), "examples": (float(n), 1)}, POP)

    rec = s.run_eval_round(["a", "b"], 0, execute)
    assert rec.aggregate_metrics["mean_loss"] == 1.0
    assert s.model.params == before

    rec = s.run_eval_round(["a"], 10, execute)
    assert rec.aggregate_metrics["mean_loss"] == 1.0  # (2.0 / 2) for the lone client


def test_aggregate_sums_threshold_counts():
    r1 = ClientReport(None, {"loss": (1.0, 2)}, POP, threshold_counts=np.array([[2, 1], [1, 1]]))
    r2 = ClientReport(None, {"loss": (3.0, 2)}, POP, threshold_counts=np.array([[1, 0], [0, 0]]))
    agg = aggregate_reports([r1, r2])
    assert agg["mean_loss"] == 1.0
    np.testing.assert_array_equal(agg["threshold_counts"], [[3, 1], [1, 1]])


def test_replay_reproduces_params():
    s = server()
    rng = np.random.default_rng(5)
    for t in range(6):
        rec = started(s, 80, t * 1000)
        for c in rec.selected[: 60 + 5 * t]:
            s.receive_report(rec.round_id, c, train_report(rng.normal(0, 1, 3), float(rng.normal()),
                                                           int(rng.integers(1, 9)), s.model.params.round_version),
                             t * 1000 + 5)
        s.close_round(rec.round_id, t * 1000 + 120)
        s.gathering(TaskKind.TRAIN).selected.clear()
    # 60 reports fall short of ceil(0.8 * 80) = 64; the other five rounds commit
    assert s.model.params.round_version == 5
    assert replay(ModelParams.zeros(3), s.history) == s.model.params
    log = format_round_log(s.history)
    assert log.count("\n") == 7
    assert log.count("abandoned") == 1
