"""Synthetic device fleet: profiles, eligibility, diurnal availability and user behavior."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import (
    BINNED,
    CATEGORY_LOG_COUNT,
    LOG_COUNT,
    FeatureSchema,
    InteractionContext,
    featurize,
)
from .model import TrainingExample
from .rng import stream

DAY = 86_400
HOUR = 3_600


# --- distributions ----------------------------------------------------------

@dataclass(frozen=True)
class Distribution:
    """``constant(value)``, ``uniform(low, high)`` or ``normal_truncated(mean, sd, low, high)``."""

    family: str = "constant"
    params: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        want = {"constant": 1, "uniform": 2, "normal_truncated": 4}
        if self.family not in want:
            raise ValueError(f"unknown distribution family {self.family!r}")
        if len(self.params) != want[self.family]:
            raise ValueError(f"{self.family} takes {want[self.family]} parameters, got {len(self.params)}")
        if self.family == "uniform" and self.params[1] < self.params[0]:
            raise ValueError("uniform: high < low")
        if self.family == "normal_truncated":
            mean, sd, lo, hi = self.params
            if sd < 0 or hi < lo:
                raise ValueError("normal_truncated: need sd >= 0 and low <= high")

    @classmethod
    def constant(cls, v: float) -> "Distribution":
        return cls("constant", (float(v),))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Distribution":
        return cls("uniform", (float(lo), float(hi)))

    @classmethod
    def normal_truncated(cls, mean: float, sd: float, lo: float, hi: float) -> "Distribution":
        return cls("normal_truncated", (float(mean), float(sd), float(lo), float(hi)))

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        p = self.params
        if self.family == "constant":
            return p[0] if size is None else np.full(size, p[0])
        if self.family == "uniform":
            return rng.uniform(p[0], p[1], size)
        mean, sd, lo, hi = p
        n = 1 if size is None else size
        out = np.empty(n)
        filled = 0
        # rejection sampling; the clip is a fallback for extreme truncation
        for _ in range(100):
            draw = rng.normal(mean, sd, n)
            ok = draw[(draw >= lo) & (draw <= hi)]
            take = min(ok.size, n - filled)
            out[filled:filled + take] = ok[:take]
            filled += take
            if filled == n:
                break
        else:
            out[filled:] = np.clip(rng.normal(mean, sd, n - filled), lo, hi)
        return float(out[0]) if size is None else out

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}

    @classmethod
    def from_value(cls, v) -> "Distribution":
        if isinstance(v, Distribution):
            return v
        if isinstance(v, (int, float)):
            return cls.constant(v)
        return cls(str(v["family"]), tuple(float(x) for x in v["params"]))


# --- profiles -------------------------------------------------------------

@dataclass(frozen=True)
class AvailabilitySchedule:
    """Per-local-hour probability that the device is charging, on unmetered network and idle."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) != 24:
            raise ValueError("availability schedule needs 24 values")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("availability probabilities must be in [0, 1]")

    @classmethod
    def night_peaked(cls, night: float = 0.6, day: float = 0.01, shoulder: float = 0.1) -> "AvailabilitySchedule":
        """Peak 22:00-06:00 local, shoulders at 20-21 and 07, low otherwise."""
        probs = []
        for h in range(24):
            if h >= 22 or h < 6:
                probs.append(night)
            elif h in (20, 21, 6, 7):
                probs.append(shoulder)
            else:
                probs.append(day)
        return cls(tuple(probs))


@dataclass(frozen=True)
class UserBehaviorParams:
    base_click_logit: float = 0.0
    category_affinities: tuple[float, ...] = ()
    hour_effects: tuple[float, ...] = (0.0,) * 24
    impressions_per_day: float = 10.0
    alignment: float = 1.0

    def __post_init__(self):
        if self.impressions_per_day < 0:
            raise ValueError("impressions_per_day must be >= 0")
        if len(self.hour_effects) != 24:
            raise ValueError("hour_effects needs 24 values")


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    ram_mb: int
    sdk_level: int
    locale: str
    tz_offset_hours: float
    tier: str
    network_reliability: float
    behavior: UserBehaviorParams
    schedule: AvailabilitySchedule = AvailabilitySchedule.night_peaked()
    subpopulation: str = ""

    def __post_init__(self):
        if not 0.0 <= self.network_reliability <= 1.0:
            raise ValueError("network_reliability must be in [0, 1]")
        if not -12.0 <= self.tz_offset_hours <= 14.0:
            raise ValueError("tz_offset_hours must be in [-12, 14]")
        if self.tier not in ("high", "low"):
            raise ValueError("tier must be 'high' or 'low'")


@dataclass(frozen=True)
class EligibilityPolicy:
    min_ram_mb: int = 2048
    min_sdk: int = 21
    locales: Optional[frozenset] = frozenset({"en-US", "en-CA"})

    def __post_init__(self):
        if self.locales is not None:
            object.__setattr__(self, "locales", frozenset(self.locales))


def is_eligible(profile: DeviceProfile, policy: EligibilityPolicy) -> bool:
    return (profile.ram_mb >= policy.min_ram_mb
            and profile.sdk_level >= policy.min_sdk
            and (policy.locales is None or profile.locale in policy.locales))


def local_hour(sim_time: float, tz_offset_hours: float) -> int:
    return int(math.floor(sim_time / HOUR + tz_offset_hours)) % 24


def is_available(profile: DeviceProfile, schedule: AvailabilitySchedule, sim_time: float,
                 rng: np.random.Generator) -> bool:
    """One Bernoulli draw at the schedule's probability for the device's local hour."""
    p = schedule.probs[local_hour(sim_time, profile.tz_offset_hours)]
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(rng.random() < p)


# --- ground truth ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Generative click model, logistic in ``schema``.

    ``interaction`` adds a hidden ``ln(1+clicks) * baseline_score`` term that
    no linear model in the live schema can represent.
    """

    schema: FeatureSchema
    weights: np.ndarray
    bias: float
    interaction: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.schema.total_dimension,):
            raise ValueError("ground-truth weights do not match schema")
        if not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("ground truth must be finite")
        object.__setattr__(self, "weights", w)

    def score(self, ctx: InteractionContext, x=None) -> float:
        if x is None:
            x = featurize(ctx, self.schema)
        s = float(np.dot(self.weights[x.indices], x.values)) + self.bias
        if self.interaction:
            s += self.interaction * math.log1p(ctx.clicks) * ctx.baseline_score
        return s


def identifiable(schema: FeatureSchema, weights: np.ndarray, bias: float) -> tuple[np.ndarray, float]:
    """Minimum-norm equivalent of (weights, bias).

    In every exclusive group (binned / one-hot) exactly one feature is active,
    so shifting that group's weights by ``c`` and the bias by ``-c`` leaves all
    scores unchanged. This removes those shift directions, giving the unique
    representative that gradient descent from zero converges toward.
    """
    w = np.array(weights, dtype=float)
    groups = [(g, off) for g, off in zip(schema.groups, schema.offsets) if g.is_exclusive]
    if not groups:
        return w, float(bias)
    k = np.array([g.size for g, _ in groups], dtype=float)
    s = np.array([w[off:off + g.size].sum() for g, off in groups])
    # shift c_g on group g, bias + sum(c): require sum(w_g - c_g) == b + sum(c) for every g
    A = np.diag(k) + np.ones((k.size, k.size))
    c = np.linalg.solve(A, s - bias)
    for (g, off), cg in zip(groups, c):
        w[off:off + g.size] -= cg
    return w, float(bias + c.sum())


def default_ground_truth(schema: FeatureSchema, bias: float = -1.3, interaction: float = 0.0,
                         seed: int = 7) -> GroundTruth:
    """Structured ground truth: clicks help, impressions hurt, monotone baseline-score bins,
    distinct per-category and evening-peaked hour effects."""
    rng = np.random.default_rng(seed)
    w = np.zeros(schema.total_dimension)
    for g, off in zip(schema.groups, schema.offsets):
        sl = slice(off, off + g.size)
        if g.kind == LOG_COUNT:
            w[sl] = 0.6 if "click" in g.source else -0.35
        elif g.kind == CATEGORY_LOG_COUNT:
            sign = 1.0 if "click" in g.source else -1.0
            w[sl] = sign * rng.uniform(0.15, 0.4, g.size)
        elif g.kind == BINNED:
            centers = (np.array(g.edges[:-1]) + np.array(g.edges[1:])) / 2
            lo, hi = g.edges[0], g.edges[-1]
            w[sl] = -1.5 + 3.0 * (centers - lo) / (hi - lo)
        elif g.source == "hour":
            h = np.arange(g.size)
            w[sl] = 0.6 * np.cos(2 * np.pi * (h - 20) / 24)
        elif g.source == "day":
            w[sl] = 0.25 * np.cos(2 * np.pi * (np.arange(g.size) - 5) / 7)
        else:
            w[sl] = rng.choice([-1, 1], g.size) * rng.uniform(0.4, 0.9, g.size)
    w, b = identifiable(schema, w, bias)
    return GroundTruth(schema, w, b, interaction)


# --- interactions ------------------------------------------------------------

DEFAULT_ACTIVITY = tuple(0.15 if h < 7 else (0.5 if h == 23 else 1.0) for h in range(24))


@dataclass
class UserState:
    """Running per-user counters; they persist across simulated days."""

    clicks: int = 0
    impressions: int = 0
    category_clicks: list = field(default_factory=list)
    category_impressions: list = field(default_factory=list)

    @classmethod
    def fresh(cls, n_categories: int) -> "UserState":
        return cls(0, 0, [0] * n_categories, [0] * n_categories)


@dataclass(frozen=True, eq=False)
class InteractionGenerator:
    """Draws a day of impressions for one device and labels them with the ground truth."""

    live_schema: FeatureSchema
    ground_truth: GroundTruth
    n_categories: int
    score_range: tuple[float, float] = (0.0, 1.0)
    activity: tuple[float, ...] = DEFAULT_ACTIVITY

    def generate(self, profile: DeviceProfile, state: UserState, day: int, rng: np.random.Generator,
                 violations: Counter | None = None) -> list[TrainingExample]:
        beh = profile.behavior
        n = int(rng.poisson(beh.impressions_per_day)) if beh.impressions_per_day > 0 else 0
        if n == 0:
            return []
        act = np.asarray(self.activity, dtype=float)
        hours = rng.choice(24, size=n, p=act / act.sum())
        secs = rng.integers(0, HOUR, size=n)
        cats = rng.integers(0, self.n_categories, size=n)
        scores = rng.uniform(self.score_range[0], self.score_range[1], size=n)
        coins = rng.random(n)
        tz = profile.tz_offset_hours
        local = hours * HOUR + secs
        utc_in_day = np.mod(local - round(tz * HOUR), DAY)
        order = np.argsort(utc_in_day, kind="stable")
        same_schema = self.ground_truth.schema.schema_id == self.live_schema.schema_id
        affin = beh.category_affinities
        out = []
        for i in order:
            t = day * DAY + int(utc_in_day[i])
            local_t = t + tz * HOUR
            hour = int(hours[i])
            cat = int(cats[i])
            ctx = InteractionContext(
                clicks=state.clicks,
                impressions=state.impressions,
                category_clicks=tuple(state.category_clicks),
                category_impressions=tuple(state.category_impressions),
                baseline_score=float(scores[i]),
                hour=hour,
                day=int(local_t // DAY) % 7,
                category=cat,
            )
            x = featurize(ctx, self.live_schema, violations)
            gt = self.ground_truth.score(ctx, x if same_schema else None)
            logit = beh.alignment * gt + beh.base_click_logit + beh.hour_effects[hour]
            if affin:
                logit += affin[cat]
            label = int(coins[i] < 1.0 / (1.0 + math.exp(-logit)))
            out.append(TrainingExample(x, label, t))
            state.impressions += 1
            state.category_impressions[cat] += 1
            if label:
                state.clicks += 1
                state.category_clicks[cat] += 1
        return out


def generate_interactions(profile: DeviceProfile, ground_truth: GroundTruth, day: int,
                          rng: np.random.Generator, live_schema: FeatureSchema | None = None,
                          state: UserState | None = None, **kwargs) -> list[TrainingExample]:
    """One day of labeled impressions for ``profile``; ``state`` carries the user's counters."""
    schema = live_schema or ground_truth.schema
    n_cat = len(profile.behavior.category_affinities) or _n_categories(schema)
    gen = InteractionGenerator(schema, ground_truth, n_cat, **kwargs)
    return gen.generate(profile, state if state is not None else UserState.fresh(n_cat), day, rng)


def _n_categories(schema: FeatureSchema) -> int:
    for g in schema.groups:
        if g.kind == CATEGORY_LOG_COUNT:
            return len(g.categories)
        if g.source == "category":
            return g.cardinality
    return 1


# --- fleet construction ------------------------------------------------------

@dataclass(frozen=True)
class SubpopulationConfig:
    name: str
    count: int
    tz_range: tuple[float, float] = (-8.0, -5.0)
    locales: tuple[tuple[str, float], ...] = (("en-US", 0.9), ("en-CA", 0.1))
    ram_mb: Distribution = Distribution.uniform(2048, 8192)
    sdk_level: Distribution = Distribution.uniform(21, 30)
    tier: str = "high"
    network_reliability: Distribution = Distribution.constant(0.98)
    schedule: AvailabilitySchedule = AvailabilitySchedule.night_peaked()
    base_click_logit: Distribution = Distribution.constant(0.0)
    category_affinity: Distribution = Distribution.constant(0.0)
    hour_effect: Distribution = Distribution.constant(0.0)
    impressions_per_day: Distribution = Distribution.constant(10.0)
    alignment: Distribution = Distribution.constant(1.0)

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        lo, hi = self.tz_range
        if not -12 <= lo <= hi <= 14:
            raise ValueError("tz_range must satisfy -12 <= low <= high <= 14")
        if self.tier not in ("high", "low"):
            raise ValueError("tier must be 'high' or 'low'")
        if not self.locales or any(p < 0 for _, p in self.locales):
            raise ValueError("locales need non-negative weights")


@dataclass(frozen=True)
class FleetConfig:
    subpopulations: tuple[SubpopulationConfig, ...]
    score_range: tuple[float, float] = (0.0, 1.0)
    activity: tuple[float, ...] = DEFAULT_ACTIVITY

    @property
    def size(self) -> int:
        return sum(s.count for s in self.subpopulations)


def default_fleet_config(total: int = 2000, in_share: float = 0.3) -> FleetConfig:
    """North-American majority plus an en-US-locale population at UTC+5:30.

    The second group is available during North-American daytime, has less
    reliable networks, and clicks differently from the majority.
    """
    n_in = int(round(total * in_share))
    na = SubpopulationConfig(
        name="NA",
        count=total - n_in,
        tz_range=(-8.0, -5.0),
        network_reliability=Distribution.uniform(0.95, 1.0),
        base_click_logit=Distribution.normal_truncated(0.0, 0.2, -1.0, 1.0),
        category_affinity=Distribution.normal_truncated(0.0, 0.1, -0.5, 0.5),
    )
    ind = SubpopulationConfig(
        name="IN-skew",
        count=n_in,
        tz_range=(5.5, 5.5),
        locales=(("en-US", 1.0),),
        ram_mb=Distribution.uniform(2048, 4096),
        tier="low",
        network_reliability=Distribution.uniform(0.7, 0.9),
        base_click_logit=Distribution.normal_truncated(0.8, 0.4, -1.0, 2.5),
        category_affinity=Distribution.normal_truncated(0.0, 1.0, -2.0, 2.0),
        alignment=Distribution.uniform(0.2, 0.5),
    )
    return FleetConfig((na, ind))


def _round_half_hour(x: float) -> float:
    return math.floor(x * 2 + 0.5) / 2


def build_fleet(config: FleetConfig, master_seed: int, n_categories: int) -> list[DeviceProfile]:
    """Instantiate every device; each device draws from its own ``fleet`` substream."""
    profiles = []
    did = 0
    for sub in config.subpopulations:
        names = [l for l, _ in sub.locales]
        w = np.array([p for _, p in sub.locales], dtype=float)
        w = w / w.sum()
        for _ in range(sub.count):
            rng = stream(master_seed, "fleet", did)
            tz = _round_half_hour(rng.uniform(*sub.tz_range)) if sub.tz_range[1] > sub.tz_range[0] else sub.tz_range[0]
            behavior = UserBehaviorParams(
                base_click_logit=float(sub.base_click_logit.sample(rng)),
                category_affinities=tuple(float(v) for v in sub.category_affinity.sample(rng, n_categories)),
                hour_effects=tuple(float(v) for v in sub.hour_effect.sample(rng, 24)),
                impressions_per_day=max(0.0, float(sub.impressions_per_day.sample(rng))),
                alignment=float(sub.alignment.sample(rng)),
            )
            profiles.append(DeviceProfile(
                device_id=did,
                ram_mb=int(round(sub.ram_mb.sample(rng))),
                sdk_level=int(round(sub.sdk_level.sample(rng))),
                locale=str(names[int(rng.choice(len(names), p=w))]),
                tz_offset_hours=min(14.0, max(-12.0, tz)),
                tier=sub.tier,
                network_reliability=float(np.clip(sub.network_reliability.sample(rng), 0.0, 1.0)),
                behavior=behavior,
                schedule=sub.schedule,
                subpopulation=sub.name,
            ))
            did += 1
    return profiles
