"""Experiment configuration: one YAML file, validated with line-anchored errors."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .device import DEFAULT_CAPACITY, DEFAULT_TTL
from .features import FeatureSchema, SchemaError, default_schema
from .fleet import (
    DEFAULT_ACTIVITY,
    AvailabilitySchedule,
    Distribution,
    EligibilityPolicy,
    FleetConfig,
    GroundTruth,
    SubpopulationConfig,
    default_fleet_config,
    default_ground_truth,
)
from .model import LocalTrainConfig
from .orchestrator import RoundConfig, ServerConfig
from .simulation import SimulationConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)


def _line_map(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines."""
    if out is None:
        out = {}
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
            out[key] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Section:
    def __init__(self, data, lines: dict, source: str, path=()):
        self.data = data if data is not None else {}
        self.lines = lines
        self.source = source
        self.path = path

    def error(self, msg: str, key=None) -> ConfigError:
        p = self.path + ((key,) if key is not None else ())
        line = None
        while line is None and p is not None:
            line = self.lines.get(p)
            p = p[:-1] if p else None
        dotted = ".".join(str(x) for x in self.path + ((key,) if key is not None else ()))
        return ConfigError(f"{dotted or '<root>'}: {msg}", line, self.source)

    def keys(self, allowed) -> None:
        if not isinstance(self.data, dict):
            raise self.error("expected a mapping")
        for k in self.data:
            if k not in allowed:
                raise self.error(f"unknown field {k!r}", k)

    def has(self, key) -> bool:
        return key in self.data

    def sub(self, key) -> "_Section":
        v = self.data.get(key)
        if v is not None and not isinstance(v, dict):
            raise self.error("expected a mapping", key)
        return _Section(v, self.lines, self.source, self.path + (key,))

    def raw(self, key, default=None):
        return self.data.get(key, default)

    def get(self, key, default, conv=float, check=None, msg="invalid value"):
        if key not in self.data or self.data[key] is None:
            return default
        try:
            v = conv(self.data[key])
        except (TypeError, ValueError) as e:
            raise self.error(f"{msg}: {e}", key) from None
        if check is not None and not check(v):
            raise self.error(f"{msg}: {self.data[key]!r}", key)
        return v


def _int(v) -> int:
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"expected an integer, got {v}")
    return int(v)


def _floats(n: int):
    def conv(v):
        vals = tuple(float(x) for x in v)
        if len(vals) != n:
            raise ValueError(f"expected {n} numbers, got {len(vals)}")
        return vals
    return conv


@dataclass(frozen=True)
class TauSpec:
    """Explicit thresholds, or a uniform grid over training-score quantiles."""

    values: Optional[tuple[float, ...]] = None
    count: int = 3
    low_quantile: float = 0.0
    high_quantile: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    schema: FeatureSchema = field(default_factory=default_schema)
    ground_truth: Optional[GroundTruth] = None
    round: RoundConfig = RoundConfig()
    server: ServerConfig = ServerConfig()
    training_policy: EligibilityPolicy = EligibilityPolicy()
    deployment_policy: EligibilityPolicy = EligibilityPolicy(min_ram_mb=0)
    fleet: FleetConfig = field(default_factory=default_fleet_config)
    local_train: LocalTrainConfig = LocalTrainConfig()
    taus: TauSpec = TauSpec(values=(-2.0, -1.5, -1.0))
    horizon_days: float = 3.0
    output_dir: str = "out"
    display_tz_offset: float = -8.0
    cache_ttl: int = DEFAULT_TTL
    cache_capacity: int = DEFAULT_CAPACITY
    poll_interval: int = 1800
    latency_min: int = 10
    latency_max_factor: float = 1.1
    sweep_days: int = 3

    def simulation_config(self) -> SimulationConfig:
        server = replace(self.server, train_round=self.round, train_config=self.local_train,
                         taus=self.taus.values or ())
        return SimulationConfig(
            schema=self.schema,
            ground_truth=self.resolved_ground_truth(),
            fleet=self.fleet,
            server=server,
            training_policy=self.training_policy,
            cache_ttl=self.cache_ttl,
            cache_capacity=self.cache_capacity,
            poll_interval=self.poll_interval,
            latency_min=self.latency_min,
            latency_max_factor=self.latency_max_factor,
            master_seed=self.master_seed,
        )

    def resolved_ground_truth(self) -> GroundTruth:
        return self.ground_truth if self.ground_truth is not None else default_ground_truth(self.schema)


def _policy(s: _Section, default: EligibilityPolicy) -> EligibilityPolicy:
    s.keys({"min_ram_mb", "min_sdk", "locales"})
    locales = default.locales
    if s.has("locales"):
        v = s.raw("locales")
        if v is None or v == "any":
            locales = None
        elif isinstance(v, list):
            locales = frozenset(str(x) for x in v)
        else:
            raise s.error("locales must be a list or 'any'", "locales")
    return EligibilityPolicy(
        min_ram_mb=s.get("min_ram_mb", default.min_ram_mb, _int, lambda v: v >= 0),
        min_sdk=s.get("min_sdk", default.min_sdk, _int, lambda v: v >= 0),
        locales=locales,
    )


def _dist(s: _Section, key, default: Distribution) -> Distribution:
    if not s.has(key):
        return default
    try:
        return Distribution.from_value(s.raw(key))
    except (KeyError, TypeError, ValueError) as e:
        raise s.error(f"bad distribution: {e}", key) from None


_SUB_FIELDS = {"name", "count", "tz_range", "locales", "ram_mb", "sdk_level", "tier", "network_reliability",
               "schedule", "base_click_logit", "category_affinity", "hour_effect", "impressions_per_day",
               "alignment"}


def _subpopulation(s: _Section) -> SubpopulationConfig:
    s.keys(_SUB_FIELDS)
    if not s.has("name") or not s.has("count"):
        raise s.error("subpopulation needs 'name' and 'count'")
    d = SubpopulationConfig(name="x", count=0)
    locales = d.locales
    if s.has("locales"):
        v = s.raw("locales")
        if not isinstance(v, dict) or not v:
            raise s.error("locales must map locale -> weight", "locales")
        locales = tuple((str(k), float(w)) for k, w in v.items())
    schedule = d.schedule
    if s.has("schedule"):
        try:
            schedule = AvailabilitySchedule(s.get("schedule", None, _floats(24)))
        except ValueError as e:
            raise s.error(str(e), "schedule") from None
    try:
        return SubpopulationConfig(
            name=str(s.raw("name")),
            count=s.get("count", 0, _int, lambda v: v >= 0, "count must be a non-negative integer"),
            tz_range=s.get("tz_range", d.tz_range, _floats(2)),
            locales=locales,
            ram_mb=_dist(s, "ram_mb", d.ram_mb),
            sdk_level=_dist(s, "sdk_level", d.sdk_level),
            tier=s.get("tier", d.tier, str, lambda v: v in ("high", "low"), "tier must be high or low"),
            network_reliability=_dist(s, "network_reliability", d.network_reliability),
            schedule=schedule,
            base_click_logit=_dist(s, "base_click_logit", d.base_click_logit),
            category_affinity=_dist(s, "category_affinity", d.category_affinity),
            hour_effect=_dist(s, "hour_effect", d.hour_effect),
            impressions_per_day=_dist(s, "impressions_per_day", d.impressions_per_day),
            alignment=_dist(s, "alignment", d.alignment),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise s.error(str(e)) from None


def _fleet(s: _Section) -> FleetConfig:
    s.keys({"subpopulations", "score_range", "activity", "preset"})
    base = default_fleet_config()
    subs = base.subpopulations
    if s.has("preset"):
        preset = s.raw("preset")
        if not isinstance(preset, dict) or "size" not in preset:
            raise s.error("preset must be {size: N, in_share: f}", "preset")
        p = s.sub("preset")
        p.keys({"size", "in_share"})
        subs = default_fleet_config(p.get("size", 2000, _int, lambda v: v >= 0),
                                    p.get("in_share", 0.3, float, lambda v: 0 <= v <= 1)).subpopulations
    if s.has("subpopulations"):
        raw = s.raw("subpopulations")
        if not isinstance(raw, list):
            raise s.error("subpopulations must be a list", "subpopulations")
        subs = tuple(_subpopulation(_Section(item, s.lines, s.source, s.path + ("subpopulations", i)))
                     for i, item in enumerate(raw))
    score_range = s.get("score_range", base.score_range, _floats(2), lambda v: v[1] > v[0],
                        "score_range must be [low, high] with high > low")
    activity = s.get("activity", DEFAULT_ACTIVITY, _floats(24), lambda v: min(v) >= 0 and sum(v) > 0,
                     "activity must be 24 non-negative weights")
    return FleetConfig(subs, score_range, activity)


def _schema(s: _Section) -> FeatureSchema:
    if not s.data:
        return default_schema()
    s.keys({"groups", "categories", "score_bins", "score_range"})
    if s.has("groups"):
        try:
            return FeatureSchema.from_dict({"groups": s.raw("groups")})
        except (SchemaError, KeyError, TypeError, ValueError) as e:
            raise s.error(f"invalid schema: {e}", "groups") from None
    try:
        return default_schema(
            categories=tuple(str(c) for c in s.raw("categories", ["food", "entertainment", "shopping", "travel"])),
            score_bins=s.get("score_bins", 10, _int, lambda v: v >= 1),
            score_range=s.get("score_range", (0.0, 1.0), _floats(2)),
        )
    except SchemaError as e:
        raise s.error(str(e)) from None


def _round(s: _Section, default: RoundConfig) -> RoundConfig:
    s.keys({"goal_client_count", "min_client_count", "training_period", "report_window", "min_reporting_fraction"})
    try:
        return RoundConfig(
            goal_client_count=s.get("goal_client_count", default.goal_client_count, _int),
            min_client_count=s.get("min_client_count", default.min_client_count, _int),
            training_period=s.get("training_period", default.training_period, _int),
            report_window=s.get("report_window", default.report_window, _int),
            min_reporting_fraction=s.get("min_reporting_fraction", default.min_reporting_fraction, float),
        )
    except ValueError as e:
        raise s.error(str(e)) from None


_TOP = {"master_seed", "schema", "ground_truth", "round", "eval_round", "server", "eligibility", "fleet",
        "local_train", "taus", "horizon_days", "output_dir", "display_tz_offset", "device", "sweep"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1 if mark else None, source) from None
    if data is None:
        data, lines = {}, {}
    else:
        lines = _line_map(node)
    root = _Section(data, lines, source)
    root.keys(_TOP)

    schema = _schema(root.sub("schema"))
    d = ExperimentConfig()

    gt = None
    g = root.sub("ground_truth")
    if g.data:
        g.keys({"bias", "interaction", "seed", "score_range"})
        gt_schema = schema
        if g.has("score_range"):
            lo, hi = g.get("score_range", None, _floats(2), lambda v: v[1] > v[0])
            try:
                gt_schema = schema.with_bin_range("baseline_score", lo, hi)
            except (KeyError, SchemaError) as e:
                raise g.error(f"cannot respan baseline_score: {e}", "score_range") from None
        gt = default_ground_truth(gt_schema, bias=g.get("bias", -1.3), interaction=g.get("interaction", 0.0),
                                  seed=g.get("seed", 7, _int))

    train_round = _round(root.sub("round"), d.round)
    srv = root.sub("server")
    srv.keys({"pacing_delay", "pacing_jitter", "server_lr", "weighting", "eval_share", "eval_enabled",
              "lookback", "max_examples", "population"})
    ds = d.server
    server = ServerConfig(
        train_round=train_round,
        eval_round=_round(root.sub("eval_round"), ds.eval_round),
        eval_enabled=bool(srv.get("eval_enabled", ds.eval_enabled, bool)),
        eval_share=srv.get("eval_share", ds.eval_share, float, lambda v: 0 <= v <= 1),
        pacing_delay=srv.get("pacing_delay", ds.pacing_delay, _int, lambda v: v > 0),
        pacing_jitter=srv.get("pacing_jitter", ds.pacing_jitter, float, lambda v: 0 <= v < 1),
        server_lr=srv.get("server_lr", ds.server_lr, float, lambda v: v > 0),
        weighting=srv.get("weighting", ds.weighting, str, lambda v: v in ("examples", "uniform"),
                          "weighting must be 'examples' or 'uniform'"),
        lookback=srv.get("lookback", ds.lookback, _int, lambda v: v > 0),
        max_examples=srv.get("max_examples", None, _int, lambda v: v > 0),
        populations=(srv.get("population", ds.populations[0], str),),
    )

    lt = root.sub("local_train")
    lt.keys({"epochs", "learning_rate", "batch_size", "shuffle_seed", "l2"})
    try:
        local_train = LocalTrainConfig(
            epochs=lt.get("epochs", 1, _int),
            learning_rate=lt.get("learning_rate", 0.1),
            batch_size=lt.get("batch_size", 10, _int),
            shuffle_seed=lt.get("shuffle_seed", 0, _int),
            l2=lt.get("l2", 0.0),
        )
    except ValueError as e:
        raise lt.error(str(e)) from None

    elig = root.sub("eligibility")
    elig.keys({"training", "deployment"})
    training_policy = _policy(elig.sub("training"), d.training_policy)
    deployment_policy = _policy(elig.sub("deployment"), d.deployment_policy)

    taus = d.taus
    if root.has("taus"):
        raw = root.raw("taus")
        if isinstance(raw, list):
            if not raw:
                raise root.error("tau list is empty", "taus")
            taus = TauSpec(values=root.get("taus", None, lambda v: tuple(float(x) for x in v)))
        else:
            t = root.sub("taus")
            t.keys({"count", "low_quantile", "high_quantile"})
            taus = TauSpec(None, t.get("count", 3, _int, lambda v: v >= 1),
                           t.get("low_quantile", 0.0, float, lambda v: 0 <= v <= 1),
                           t.get("high_quantile", 1.0, float, lambda v: 0 <= v <= 1))

    dev = root.sub("device")
    dev.keys({"cache_ttl", "cache_capacity", "poll_interval", "latency_min", "latency_max_factor"})
    sweep = root.sub("sweep")
    sweep.keys({"days"})

    return ExperimentConfig(
        master_seed=root.get("master_seed", 0, _int),
        schema=schema,
        ground_truth=gt,
        round=train_round,
        server=server,
        training_policy=training_policy,
        deployment_policy=deployment_policy,
        fleet=_fleet(root.sub("fleet")),
        local_train=local_train,
        taus=taus,
        horizon_days=root.get("horizon_days", d.horizon_days, float, lambda v: v >= 1,
                              "horizon_days must be >= 1"),
        output_dir=str(root.raw("output_dir", d.output_dir)),
        display_tz_offset=root.get("display_tz_offset", d.display_tz_offset, float, lambda v: -12 <= v <= 14),
        cache_ttl=dev.get("cache_ttl", d.cache_ttl, _int, lambda v: v >= 0),
        cache_capacity=dev.get("cache_capacity", d.cache_capacity, _int, lambda v: v >= 1),
        poll_interval=dev.get("poll_interval", d.poll_interval, _int, lambda v: v > 0),
        latency_min=dev.get("latency_min", d.latency_min, _int, lambda v: v >= 0),
        latency_max_factor=dev.get("latency_max_factor", d.latency_max_factor, float, lambda v: v > 0),
        sweep_days=sweep.get("days", d.sweep_days, _int, lambda v: v >= 1),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
