"""Logistic-regression triggering model: scoring, loss, local SGD, updates."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .features import FeatureSchema, FeatureVector, SchemaError, stack

PROB_FLOOR = 1e-7
# Largest loss one example can contribute: the observed label's probability is floored.
MAX_EXAMPLE_LOSS = -math.log(PROB_FLOOR)


class Label(IntEnum):
    IGNORED = 0
    CLICKED = 1


class Decision(Enum):
    SHOW = "show"
    HIDE = "hide"


class StaleModelError(RuntimeError):
    """Model versions disagree (e.g. an update computed against an old round)."""


class EmptyTrainingSetError(ValueError):
    """Local training was asked to run on zero examples."""


@dataclass(frozen=True)
class TrainingExample:
    features: FeatureVector
    label: int
    created_at: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.created_at < 0:
            raise ValueError("created_at must be >= 0")


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    bias: float = 0.0
    round_version: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("parameters must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, dimension: int, bias: float = 0.0) -> "ModelParams":
        return cls(np.zeros(dimension), bias, 0)

    @property
    def dimension(self) -> int:
        return self.weights.shape[0]

    def as_vector(self) -> np.ndarray:
        """Weights with the bias appended."""
        return np.append(self.weights, self.bias)

    def replace(self, weights=None, bias=None, round_version=None) -> "ModelParams":
        return ModelParams(
            self.weights if weights is None else weights,
            self.bias if bias is None else bias,
            self.round_version if round_version is None else round_version,
        )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights) and self.bias == other.bias
                and self.round_version == other.round_version)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 10
    shuffle_seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    """A client's parameter delta, its example count and local metrics."""

    delta_weights: np.ndarray
    delta_bias: float
    num_examples: int
    round_version: int
    metrics: dict = field(default_factory=dict)


def predict_score(params: ModelParams, x: FeatureVector) -> float:
    """Logit ``w . x + b``."""
    if x.indices.size and int(x.indices.max()) >= params.dimension:
        raise SchemaError(f"feature id {int(x.indices.max())} outside model dimension {params.dimension}")
    return float(np.dot(params.weights[x.indices], x.values) + params.bias)


def predict_scores(params: ModelParams, X: np.ndarray) -> np.ndarray:
    if X.shape[1] != params.dimension:
        raise SchemaError(f"design matrix has {X.shape[1]} columns, model has {params.dimension}")
    return X @ params.weights + params.bias


def predict_prob(score):
    """Logistic sigmoid of a score (scalar or array)."""
    return expit(score)


def loss_from_scores(scores, labels):
    """Per-example cross-entropy from logits, capped at ``-ln(PROB_FLOOR)``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    raw = -(labels * log_expit(scores) + (1.0 - labels) * log_expit(-scores))
    return np.minimum(raw, MAX_EXAMPLE_LOSS)


def log_loss(params: ModelParams, ex: TrainingExample) -> float:
    return float(loss_from_scores(predict_score(params, ex.features), ex.label))


def mean_log_loss(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(loss_from_scores(predict_scores(params, X), y)))


def log_loss_gradient(params: ModelParams, ex: TrainingExample) -> tuple[np.ndarray, float]:
    """Gradient of :func:`log_loss` w.r.t. (weights, bias): ``(p - y) x`` and ``p - y``."""
    r = float(predict_prob(predict_score(params, ex.features))) - ex.label
    g = np.zeros(params.dimension)
    g[ex.features.indices] = r * ex.features.values
    return g, r


def design_matrix(examples: Sequence[TrainingExample], dimension: int) -> tuple[np.ndarray, np.ndarray]:
    X = stack((e.features for e in examples), dimension)
    y = np.fromiter((e.label for e in examples), dtype=float, count=len(examples))
    return X, y


def run_sgd(
    params: ModelParams, X: np.ndarray, y: np.ndarray, config: LocalTrainConfig
) -> tuple[ModelParams, float, int]:
    """Minibatch SGD on dense arrays.

    Returns the trained params plus the summed per-example loss and the number
    of example visits, where each batch's loss is measured before its step.
    """
    n = X.shape[0]
    if n == 0:
        raise EmptyTrainingSetError("no training examples")
    if X.shape[1] != params.dimension:
        raise SchemaError(f"design matrix has {X.shape[1]} columns, model has {params.dimension}")
    w = params.weights.copy()
    b = params.bias
    lr, bs, l2 = config.learning_rate, config.batch_size, config.l2
    rng = np.random.default_rng(config.shuffle_seed)
    loss_sum, visits = 0.0, 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            Xb, yb = X[idx], y[idx]
            s = Xb @ w + b
            loss_sum += float(np.sum(loss_from_scores(s, yb)))
            visits += idx.size
            r = expit(s) - yb
            gw = Xb.T @ r / idx.size
            gb = float(np.sum(r)) / idx.size
            if l2:
                gw = gw + l2 * w
            w = w - lr * gw
            b = b - lr * gb
    return ModelParams(w, b, params.round_version), loss_sum, visits


def sgd_train(params: ModelParams, examples: Sequence[TrainingExample], config: LocalTrainConfig) -> ModelParams:
    """Run ``config.epochs`` passes of minibatch SGD; the input params are untouched."""
    if not examples:
        raise EmptyTrainingSetError("no training examples")
    X, y = design_matrix(examples, params.dimension)
    return run_sgd(params, X, y, config)[0]


def compute_update(initial: ModelParams, trained: ModelParams, n: int, metrics: dict | None = None) -> ModelUpdate:
    if initial.round_version != trained.round_version:
        raise StaleModelError(
            f"trained params are version {trained.round_version}, initial {initial.round_version}")
    if initial.dimension != trained.dimension:
        raise SchemaError("dimension mismatch between initial and trained params")
    return ModelUpdate(
        trained.weights - initial.weights,
        trained.bias - initial.bias,
        int(n),
        initial.round_version,
        dict(metrics or {}),
    )


def threshold_decision(score: float, tau: float) -> Decision:
    """Show iff ``score >= tau``."""
    return Decision.SHOW if score >= tau else Decision.HIDE


# --- checkpoints -----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def format_checkpoint(params: ModelParams, schema: FeatureSchema) -> str:
    """Flat text checkpoint: one ``feature_id,name,weight`` row per feature, bias last."""
    if params.dimension != schema.total_dimension:
        raise SchemaError("params do not match schema dimension")
    buf = io.StringIO()
    buf.write(f"# round_version={params.round_version}\n")
    buf.write(f"# schema_id={schema.schema_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature_id", "feature_name", "weight"])
    for i, (name, v) in enumerate(zip(schema.feature_names(), params.weights)):
        w.writerow([i, name, repr(float(v))])
    w.writerow(["bias", "bias", repr(params.bias)])
    return buf.getvalue()


def write_checkpoint(path, params: ModelParams, schema: FeatureSchema) -> None:
    Path(path).write_text(format_checkpoint(params, schema))


def parse_checkpoint(text: str, schema: FeatureSchema | None = None) -> ModelParams:
    version = 0
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "round_version":
                try:
                    version = int(val)
                except ValueError:
                    raise CheckpointError(f"line {lineno}: bad round_version {val!r}") from None
            continue
        rows.append((lineno, next(csv.reader([line]))))
    if not rows or rows[0][1] != ["feature_id", "feature_name", "weight"]:
        raise CheckpointError("missing header row 'feature_id,feature_name,weight'")
    body = rows[1:]
    if not body or body[-1][1][0] != "bias":
        raise CheckpointError("last row must be the bias")
    weights, names = [], []
    for i, (lineno, row) in enumerate(body[:-1]):
        if len(row) != 3:
            raise CheckpointError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            fid, val = int(row[0]), float(row[2])
        except ValueError:
            raise CheckpointError(f"line {lineno}: unparsable row {row!r}") from None
        if fid != i:
            raise CheckpointError(f"line {lineno}: feature ids must be 0..n-1 in order")
        weights.append(val)
        names.append(row[1])
    lineno, brow = body[-1]
    try:
        bias = float(brow[-1])
    except ValueError:
        raise CheckpointError(f"line {lineno}: unparsable bias") from None
    if schema is not None:
        if len(weights) != schema.total_dimension or names != schema.feature_names():
            raise SchemaError("checkpoint features do not match the schema")
    try:
        return ModelParams(np.array(weights), bias, version)
    except ValueError as e:
        raise CheckpointError(str(e)) from None


def read_checkpoint(path, schema: FeatureSchema | None = None) -> ModelParams:
    return parse_checkpoint(Path(path).read_text(), schema)
