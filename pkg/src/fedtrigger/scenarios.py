"""Named experiment setups shared by the acceptance tests and the demos."""
from __future__ import annotations

from dataclasses import replace

from .features import default_schema
from .fleet import Distribution, EligibilityPolicy, FleetConfig, default_fleet_config, default_ground_truth
from .model import LocalTrainConfig
from .orchestrator import ServerConfig
from .simulation import SimulationConfig

TRAINING_POLICY = EligibilityPolicy()
DEPLOYMENT_POLICY = EligibilityPolicy(min_ram_mb=0)


def clean_fleet(total: int = 2000) -> FleetConfig:
    """North-American devices only, labels driven purely by the ground truth, no dropouts."""
    base = default_fleet_config(total, in_share=0.0)
    na = replace(base.subpopulations[0],
                 base_click_logit=Distribution.constant(0.0),
                 category_affinity=Distribution.constant(0.0),
                 network_reliability=Distribution.constant(1.0))
    return replace(base, subpopulations=(na,))


def weight_recovery(seed: int = 11) -> SimulationConfig:
    return SimulationConfig(fleet=clean_fleet(), server=ServerConfig(eval_enabled=False), master_seed=seed)


def skew_fleet(total: int = 2000, low_ram: int = 600) -> FleetConfig:
    """Default fleet plus a block of low-RAM devices that only the deployment policy admits."""
    base = default_fleet_config(total)
    low = replace(base.subpopulations[1], name="low-ram", count=low_ram, ram_mb=Distribution.uniform(1024, 2000))
    return replace(base, subpopulations=base.subpopulations + (low,))


def population_skew(seed: int = 21) -> SimulationConfig:
    return SimulationConfig(fleet=skew_fleet(), master_seed=seed)


NARROW_RANGE = (0.0, 0.3)


def narrow_range(corrected: bool, seed: int = 4) -> SimulationConfig:
    """Baseline scores only ever fall in [0, 0.3); the live schema bins them over [0, 1] unless corrected."""
    live = default_schema()
    true_schema = live.with_bin_range("baseline_score", *NARROW_RANGE)
    gt = default_ground_truth(true_schema)
    fleet = replace(clean_fleet(), score_range=NARROW_RANGE)
    server = ServerConfig(eval_enabled=False, train_config=LocalTrainConfig(epochs=10))
    return SimulationConfig(schema=true_schema if corrected else live, ground_truth=gt, fleet=fleet,
                            server=server, master_seed=seed)
