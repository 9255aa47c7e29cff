"""Feature schema and featurization for the triggering model.

A schema is an ordered list of feature groups. Each group owns a contiguous
block of feature ids and reads one attribute of an :class:`InteractionContext`.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LOG_COUNT = "log_count"
CATEGORY_LOG_COUNT = "category_log_count"
BINNED = "binned"
ONE_HOT = "one_hot"

GROUP_KINDS = (LOG_COUNT, CATEGORY_LOG_COUNT, BINNED, ONE_HOT)

DEFAULT_CATEGORIES = ("food", "entertainment", "shopping", "travel")


class SchemaError(ValueError):
    """Raised for an invalid schema or a vector/params that does not match one."""


@dataclass(frozen=True)
class FeatureGroup:
    """One block of features.

    ``source`` names the :class:`InteractionContext` attribute the group reads.
    Only the fields relevant to ``kind`` are used: ``categories`` for
    per-category counts, ``edges`` for binned reals, ``cardinality`` for
    one-hots.
    """

    name: str
    kind: str
    source: str
    categories: tuple[str, ...] = ()
    edges: tuple[float, ...] = ()
    cardinality: int = 0

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise SchemaError(f"group {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORY_LOG_COUNT and not self.categories:
            raise SchemaError(f"group {self.name!r}: category list is empty")
        if self.kind == BINNED:
            if len(self.edges) < 2:
                raise SchemaError(f"group {self.name!r}: need at least two bin edges")
            if any(not math.isfinite(e) for e in self.edges):
                raise SchemaError(f"group {self.name!r}: bin edges must be finite")
            if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise SchemaError(f"group {self.name!r}: bin edges must be strictly ascending")
        if self.kind == ONE_HOT and self.cardinality < 2:
            raise SchemaError(f"group {self.name!r}: cardinality must be >= 2")

    @property
    def size(self) -> int:
        if self.kind == LOG_COUNT:
            return 1
        if self.kind == CATEGORY_LOG_COUNT:
            return len(self.categories)
        if self.kind == BINNED:
            return len(self.edges) - 1
        return self.cardinality

    @property
    def is_exclusive(self) -> bool:
        """True for groups where exactly one feature is active per vector."""
        return self.kind in (BINNED, ONE_HOT)

    def feature_names(self) -> list[str]:
        if self.kind == LOG_COUNT:
            return [self.name]
        if self.kind == CATEGORY_LOG_COUNT:
            return [f"{self.name}[{c}]" for c in self.categories]
        return [f"{self.name}[{i}]" for i in range(self.size)]

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "source": self.source}
        if self.kind == CATEGORY_LOG_COUNT:
            out["categories"] = list(self.categories)
        elif self.kind == BINNED:
            out["edges"] = list(self.edges)
        elif self.kind == ONE_HOT:
            out["cardinality"] = self.cardinality
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureGroup":
        d = dict(d)
        kind = d.get("kind")
        if kind == BINNED and "edges" not in d:
            # shorthand: {bins: 10, range: [0, 1]}
            lo, hi = d.pop("range", (0.0, 1.0))
            d["edges"] = tuple(uniform_edges(lo, hi, int(d.pop("bins", 10))))
        unknown = set(d) - {"name", "kind", "source", "categories", "edges", "cardinality"}
        if unknown:
            raise SchemaError(f"group {d.get('name')!r}: unknown fields {sorted(unknown)}")
        return cls(
            name=str(d["name"]),
            kind=str(kind),
            source=str(d.get("source", d["name"])),
            categories=tuple(str(c) for c in d.get("categories", ())),
            edges=tuple(float(e) for e in d.get("edges", ())),
            cardinality=int(d.get("cardinality", 0)),
        )


def uniform_edges(lo: float, hi: float, bins: int) -> list[float]:
    if bins < 1 or not hi > lo:
        raise SchemaError(f"cannot build {bins} bins on [{lo}, {hi}]")
    return [lo + (hi - lo) * i / bins for i in range(bins)] + [float(hi)]


@dataclass(frozen=True)
class FeatureSchema:
    groups: tuple[FeatureGroup, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)
    total_dimension: int = field(init=False)

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise SchemaError("schema has no groups")
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise SchemaError("group names must be unique")
        offsets, pos = [], 0
        for g in groups:
            offsets.append(pos)
            pos += g.size
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total_dimension", pos)

    def group(self, name: str) -> FeatureGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def group_slice(self, name: str) -> slice:
        for g, off in zip(self.groups, self.offsets):
            if g.name == name:
                return slice(off, off + g.size)
        raise KeyError(name)

    def group_of(self, feature_id: int) -> FeatureGroup:
        if not 0 <= feature_id < self.total_dimension:
            raise SchemaError(f"feature id {feature_id} outside schema")
        i = bisect.bisect_right(self.offsets, feature_id) - 1
        return self.groups[i]

    def feature_names(self) -> list[str]:
        return [n for g in self.groups for n in g.feature_names()]

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(FeatureGroup.from_dict(g) for g in d["groups"]))

    @property
    def schema_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_bin_range(self, name: str, lo: float, hi: float) -> "FeatureSchema":
        """Copy of this schema with binned group ``name`` respanned to [lo, hi], same bin count."""
        g = self.group(name)
        if g.kind != BINNED:
            raise SchemaError(f"group {name!r} is not binned")
        new = FeatureGroup(g.name, g.kind, g.source, edges=tuple(uniform_edges(lo, hi, g.size)))
        return FeatureSchema(tuple(new if x.name == name else x for x in self.groups))


def default_schema(
    categories: Sequence[str] = DEFAULT_CATEGORIES,
    score_bins: int = 10,
    score_range: tuple[float, float] = (0.0, 1.0),
) -> FeatureSchema:
    """Past clicks/impressions (overall and per category), binned baseline score,
    query category, day-of-week and hour-of-day one-hots."""
    cats = tuple(categories)
    return FeatureSchema((
        FeatureGroup("past_clicks", LOG_COUNT, "clicks"),
        FeatureGroup("past_impressions", LOG_COUNT, "impressions"),
        FeatureGroup("category_clicks", CATEGORY_LOG_COUNT, "category_clicks", categories=cats),
        FeatureGroup("category_impressions", CATEGORY_LOG_COUNT, "category_impressions", categories=cats),
        FeatureGroup("baseline_score", BINNED, "baseline_score",
                     edges=tuple(uniform_edges(score_range[0], score_range[1], score_bins))),
        FeatureGroup("query_category", ONE_HOT, "category", cardinality=len(cats)),
        FeatureGroup("day_of_week", ONE_HOT, "day", cardinality=7),
        FeatureGroup("hour_of_day", ONE_HOT, "hour", cardinality=24),
    ))


@dataclass(frozen=True)
class InteractionContext:
    """Raw inputs available on-device when a suggestion is surfaced."""

    clicks: int
    impressions: int
    category_clicks: tuple[int, ...]
    category_impressions: tuple[int, ...]
    baseline_score: float
    hour: int
    day: int
    category: int = 0


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse feature vector: sorted feature ids and their values."""

    indices: np.ndarray
    values: np.ndarray
    schema_id: str = ""

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def to_dense(self, dimension: int) -> np.ndarray:
        out = np.zeros(dimension)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.schema_id == other.schema_id
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    @classmethod
    def from_dict(cls, values: dict[int, float], schema_id: str = "") -> "FeatureVector":
        ids = sorted(values)
        return cls(np.array(ids, dtype=np.int32), np.array([values[i] for i in ids], dtype=float), schema_id)


def _bin_index(edges: tuple[float, ...], value: float) -> tuple[int, bool]:
    """Bin holding ``value``; the last bin is closed on the right. Out-of-range clamps."""
    nbins = len(edges) - 1
    if value < edges[0]:
        return 0, True
    if value > edges[-1]:
        return nbins - 1, True
    return min(bisect.bisect_right(edges, value) - 1, nbins - 1), False


def featurize(
    raw: InteractionContext,
    schema: FeatureSchema,
    violations: Counter | None = None,
) -> FeatureVector:
    """Map an interaction context onto ``schema``.

    Counts become ``ln(1 + count)``; binned reals set one bin indicator; one-hots
    set one index. A binned value outside its edges is clamped into the boundary
    bin and counted in ``violations[group.name]``.
    """
    ids: list[int] = []
    vals: list[float] = []
    for g, off in zip(schema.groups, schema.offsets):
        x = getattr(raw, g.source)
        if g.kind == LOG_COUNT:
            if x < 0:
                raise ValueError(f"{g.source}: negative count {x}")
            if x:
                ids.append(off)
                vals.append(math.log1p(x))
        elif g.kind == CATEGORY_LOG_COUNT:
            if len(x) != len(g.categories):
                raise SchemaError(f"{g.source}: expected {len(g.categories)} counts, got {len(x)}")
            for j, c in enumerate(x):
                if c < 0:
                    raise ValueError(f"{g.source}: negative count {c}")
                if c:
                    ids.append(off + j)
                    vals.append(math.log1p(c))
        elif g.kind == BINNED:
            b, clamped = _bin_index(g.edges, float(x))
            if clamped and violations is not None:
                violations[g.name] += 1
            ids.append(off + b)
            vals.append(1.0)
        else:
            k = int(x)
            if not 0 <= k < g.cardinality:
                raise ValueError(f"{g.source}: index {x} outside [0, {g.cardinality})")
            ids.append(off + k)
            vals.append(1.0)
    return FeatureVector(np.array(ids, dtype=np.int32), np.array(vals), schema.schema_id)


def validate_vector(x: FeatureVector, schema: FeatureSchema) -> None:
    """Raise :class:`SchemaError` unless ``x`` satisfies the schema's invariants."""
    if x.schema_id and x.schema_id != schema.schema_id:
        raise SchemaError("feature vector built for a different schema")
    ids = np.asarray(x.indices)
    if ids.size and (ids.min() < 0 or ids.max() >= schema.total_dimension):
        raise SchemaError("feature id outside schema")
    if np.unique(ids).size != ids.size:
        raise SchemaError("duplicate feature id")
    vals = dict(zip(ids.tolist(), np.asarray(x.values).tolist()))
    for g, off in zip(schema.groups, schema.offsets):
        block = [vals[i] for i in range(off, off + g.size) if i in vals]
        if g.is_exclusive:
            if block != [1.0]:
                raise SchemaError(f"group {g.name!r}: expected exactly one active indicator")
        elif any(v < 0 or not math.isfinite(v) for v in block):
            raise SchemaError(f"group {g.name!r}: log-count features must be finite and >= 0")


def stack(vectors: Iterable[FeatureVector], dimension: int) -> np.ndarray:
    """Dense (n, dimension) design matrix from sparse vectors."""
    vectors = list(vectors)
    X = np.zeros((len(vectors), dimension))
    for r, v in enumerate(vectors):
        X[r, v.indices] = v.values
    return X
