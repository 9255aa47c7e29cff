"""Federated training of an on-device suggestion-triggering model, with a deterministic fleet simulator."""
from .features import FeatureSchema, FeatureVector, InteractionContext, default_schema, featurize
from .model import LocalTrainConfig, ModelParams, ModelUpdate, TrainingExample, predict_prob, predict_score
from .orchestrator import RoundConfig, Server, ServerConfig, federated_average
from .simulation import Simulation, SimulationConfig

__version__ = "0.1.0"

__all__ = [
    "FeatureSchema", "FeatureVector", "InteractionContext", "default_schema", "featurize",
    "LocalTrainConfig", "ModelParams", "ModelUpdate", "TrainingExample", "predict_prob", "predict_score",
    "RoundConfig", "Server", "ServerConfig", "federated_average",
    "Simulation", "SimulationConfig",
]
