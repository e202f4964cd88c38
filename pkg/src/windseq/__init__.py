"""Turbine-level wind power forecasting with a GRU encoder-decoder.

Neighbouring turbines (k-NN on coordinates) supply the encoder channels,
calendar features are appended at every step, and a learned per-turbine
embedding conditions the decoder.
"""
__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .data import SeriesTable, ingest, make_windows, synth_farm, time_features
from .evaluation import acf, evaluate, persistence_baseline
from .graph import FarmLayout, NeighborIndex, build_knn
from .model import Checkpoint, ModelConfig, Seq2Seq, parameter_count
from .training import TrainConfig, fit, train

__all__ = [
    "Checkpoint", "FarmLayout", "ModelConfig", "NeighborIndex", "Seq2Seq", "SeriesTable",
    "Tape", "Tensor", "TrainConfig", "acf", "build_knn", "evaluate", "fit", "ingest",
    "make_windows", "parameter_count", "persistence_baseline", "synth_farm", "time_features",
    "train",
]
