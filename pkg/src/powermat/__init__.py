"""PowerMat context-aware matrix factorization with DotMat and classic MF baselines."""
from .core import FactorModel, GradientMode, Hyperparams, PredictionRule
from .data import ColumnMapping, ContextEncoder, Dataset, RatingEvent, parse_comoda, split, synth_generate
from .trainers import Algorithm, TrainConfig, TrainReport, predict, train

__version__ = "0.1.0"
