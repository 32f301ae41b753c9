"""Deep-RBF networks: class prediction plus a built-in rejection probability.

Pure numpy implementation of the backbone layers, the RBF output head and its
SoftML loss, runtime anomaly detection, training-set cleaning, synthetic data
generators, baselines and the experiment harness behind the ``deeprbf`` CLI.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DeepRbfError,
    InputError,
    NumericError,
    RbdsError,
    ShapeError,
    StateError,
)
from .model import Model, TrainConfig, build_model, build_rbf_model, train
from .numeric import Network, backward, forward, init_parameters
from .rbf import (
    RbfHead,
    class_probabilities,
    predict,
    rejection_probability,
    softml_loss,
)
from .steering import SteeringSpec, class_center, discretize

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DeepRbfError",
    "InputError",
    "Model",
    "Network",
    "NumericError",
    "RbdsError",
    "RbfHead",
    "ShapeError",
    "StateError",
    "SteeringSpec",
    "TrainConfig",
    "backward",
    "build_model",
    "build_rbf_model",
    "class_center",
    "class_probabilities",
    "discretize",
    "forward",
    "init_parameters",
    "predict",
    "rejection_probability",
    "softml_loss",
    "train",
]
