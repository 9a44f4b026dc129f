"""Stochastic finite-state recurrent sequence models.

A recurrent classifier whose hidden state walks over a small learned set of
state vectors via Gumbel-softmax transitions with a learned temperature. The
discrete structure makes uncertainty decomposable (total = aleatoric +
epistemic over transition paths) and the trained model compilable into
deterministic or probabilistic automata. Includes calibration and
out-of-distribution metrics, a cartpole policy-gradient harness, and a CLI.
"""

__version__ = "0.1.0"

from .gumbel import TemperatureParam, gumbel_softmax, sample_gumbel, straight_through
from .model import (Ensemble, McPrediction, ModelConfig, StateModel, TrainSettings,
                    TrainingDiverged, mc_predict, train, train_ensemble)
from .tensor import NonFiniteError, Parameter, ShapeError, Tape, Tensor, adam_step

__all__ = [
    "Ensemble", "McPrediction", "ModelConfig", "NonFiniteError", "Parameter",
    "ShapeError", "StateModel", "Tape", "TemperatureParam", "Tensor",
    "TrainSettings", "TrainingDiverged", "adam_step", "gumbel_softmax",
    "mc_predict", "sample_gumbel", "straight_through", "train", "train_ensemble",
    "__version__",
]
