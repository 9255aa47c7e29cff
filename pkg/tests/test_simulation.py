from dataclasses import replace

import numpy as np
import pytest

from fedtrigger.device import TaskKind
from fedtrigger.fleet import Distribution, FleetConfig, SubpopulationConfig, default_fleet_config
from fedtrigger.orchestrator import RoundConfig, RoundState, ServerConfig, replay
from fedtrigger.model import ModelParams
from fedtrigger.simulation import Simulation, SimulationConfig

SMALL_SERVER = ServerConfig(
    train_round=RoundConfig(goal_client_count=20, min_client_count=16),
    eval_round=RoundConfig(goal_client_count=10, min_client_count=5, min_reporting_fraction=0.5),
    pacing_delay=3 * 3600,
)


def small(seed=1, fleet=None, **kw):
    return SimulationConfig(fleet=fleet or default_fleet_config(300), server=SMALL_SERVER, master_seed=seed, **kw)


def test_empty_fleet_only_timers():
    sim = Simulation(small(fleet=FleetConfig(()))).run_days(1)
    assert sim.server.history == []
    assert {e[1] for e in sim.log} == {"day"}


def test_replay_is_bit_exact():
    a = Simulation(small(seed=4)).run_days(2)
    b = Simulation(small(seed=4)).run_days(2)
    assert a.log_digest() == b.log_digest()
    assert a.params == b.params
    assert a.log_digest() != Simulation(small(seed=5)).run_days(2).log_digest()


def test_model_changes_only_through_committed_train_rounds():
    sim = Simulation(small(seed=2)).run_days(2)
    hist = sim.server.history
    assert any(r.kind == TaskKind.EVAL and r.state == RoundState.COMMITTED for r in hist)
    assert sim.params.round_version == len(sim.committed(TaskKind.TRAIN)) > 0
    assert replay(ModelParams.zeros(sim.schema.total_dimension), hist) == sim.params


def test_step_is_resumable():
    a = Simulation(small(seed=3))
    a.step(40_000)
    a.step(90_000)
    b = Simulation(small(seed=3))
    b.step(90_000)
    assert a.log == b.log
    with pytest.raises(ValueError):
        a.step(10)


def test_unreliable_tier_underrepresented_among_reporters():
    # two tiers identical except for network reliability
    common = dict(tz_range=(-8.0, -5.0), impressions_per_day=Distribution.constant(10.0))
    fleet = FleetConfig((
        SubpopulationConfig("hi", 200, tier="high", network_reliability=Distribution.constant(0.98), **common),
        SubpopulationConfig("lo", 200, tier="low", network_reliability=Distribution.constant(0.7), **common),
    ))
    sim = Simulation(small(seed=6, fleet=fleet)).run_days(3)
    share = sim.reporter_share(lambda p: p.tier == "low")
    fleet_share = np.mean([d.profile.tier == "low" for d in sim.devices])
    assert share / fleet_share < 1


def test_overlap_rate_is_reported():
    sim = Simulation(small(seed=7)).run_days(2)
    assert 0.0 <= sim.overlap_rate() <= 1.0


def test_only_eligible_devices_participate():
    sim = Simulation(small(seed=8))
    assert len(sim.devices) <= len(sim.profiles)
    assert all(d.profile.ram_mb >= 2048 for d in sim.devices)


def test_raw_access_needs_opt_in():
    with pytest.raises(RuntimeError):
        Simulation(small()).pooled_examples()
