"""Epoch-level SGD loops over a Dataset, model initialization and prediction
with cold-start fallback."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import core
from .core import FactorModel, Hyperparams, NumericOverflowError, PredictionRule
from .data import ConfigError, Dataset


class Algorithm(str, Enum):
    POWERMAT = "powermat"
    DOTMAT = "dotmat"
    CLASSIC_MF = "classic_mf"


class RatingAccessError(RuntimeError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, epoch: int, step: int, parameter: str, report: "TrainReport"):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.parameter = parameter
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.POWERMAT
    epochs: int = 20
    shuffle_seed: int = 0
    init_seed: int = 0
    init_scale: float = 1.0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    rating_blind: bool = False
    record_beta: bool = False

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs}")
        if not self.init_scale > 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if self.rating_blind and self.algorithm is not Algorithm.POWERMAT:
            raise ConfigError(f"rating_blind training is only defined for powermat, not {self.algorithm.value}")


@dataclass
class TrainReport:
    algorithm: str
    loss_name: str
    loss_trace: list[float] = field(default_factory=list)
    norms: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    steps: int = 0
    clamp_events: int = 0
    overflow_events: int = 0
    rating_reads: int | None = None
    beta_trace: list[float] | None = None


class RatingBlindView:
    """Read-only view of a Dataset exposing ids and contexts only.

    Touching ``ratings`` increments ``rating_reads`` and raises, so a training
    run that finishes with ``rating_reads == 0`` never looked at a rating.
    """

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self.rating_reads = 0
        self.user_idx = dataset.user_idx
        self.item_idx = dataset.item_idx
        self.contexts = dataset.contexts

    def __len__(self) -> int:
        return len(self._dataset)

    @property
    def ratings(self):
        self.rating_reads += 1
        raise RatingAccessError("ratings are hidden in rating-blind training")


def init_model(dataset: Dataset, config: TrainConfig) -> FactorModel:
    """Embedding entries uniform on (0, init_scale/sqrt(k)]; alpha = 0, beta = 0."""
    if len(dataset) == 0:
        raise ConfigError("cannot initialize a model on an empty dataset")
    k = config.hyper.k
    bound = config.init_scale / math.sqrt(k)
    rng = np.random.default_rng(config.init_seed)
    # bound - U[0, bound) lies in (0, bound]
    U = bound - rng.uniform(0.0, bound, size=(dataset.n_users, k))
    V = bound - rng.uniform(0.0, bound, size=(dataset.n_items, k))
    return FactorModel(U, V, np.zeros(dataset.encoder.dim), 0.0, config.hyper,
                       list(dataset.user_ids), list(dataset.item_ids))


def _norms(model: FactorModel) -> dict[str, float]:
    return {
        "user_factors": float(np.linalg.norm(model.user_factors)),
        "item_factors": float(np.linalg.norm(model.item_factors)),
        "alpha": float(np.linalg.norm(model.alpha)),
        "beta": abs(float(model.beta)),
    }


# overflow is caught by the step functions and surfaced as TrainingDiverged
@np.errstate(over="ignore", invalid="ignore")
def train(dataset: Dataset, config: TrainConfig) -> tuple[FactorModel, TrainReport]:
    """Per-event SGD, one step per event per epoch, reshuffled every epoch.

    The recorded loss is the mean pre-step per-event loss of each epoch. For
    powermat it is the negative log-posterior J (in verbatim mode a monitor
    only, since the printed updates are not its gradient).
    """
    model = init_model(dataset, config)
    hyper = config.hyper
    algo = config.algorithm
    loss_name = {
        Algorithm.POWERMAT: "neg_log_posterior",
        Algorithm.DOTMAT: "dotmat_abs_error",
        Algorithm.CLASSIC_MF: "squared_error",
    }[algo]
    report = TrainReport(algo.value, loss_name)
    if config.record_beta:
        report.beta_trace = [model.beta]

    if algo is Algorithm.POWERMAT:
        source = RatingBlindView(dataset) if config.rating_blind else dataset
        ratings = None
    else:
        source = dataset
        ratings = dataset.ratings
    users, items, contexts = source.user_idx, source.item_idx, source.contexts
    U, V = model.user_factors, model.item_factors
    floor = hyper.dot_floor
    powermat_step = (core.powermat_step_derived
                     if hyper.gradient_mode is core.GradientMode.DERIVED
                     else core.powermat_step_verbatim)

    rng = np.random.default_rng(config.shuffle_seed)
    start = time.perf_counter()
    n = len(dataset)
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        for pos in rng.permutation(n):
            i, j = users[pos], items[pos]
            u, v = U[i], V[j]
            if u @ v <= floor:
                report.clamp_events += 1
            try:
                if algo is Algorithm.POWERMAT:
                    c = contexts[pos]
                    total += core.powermat_objective(u, v, model.alpha, model.beta, c, hyper)
                    U[i], V[j], model.alpha, model.beta = powermat_step(
                        u, v, model.alpha, model.beta, c, hyper)
                    if report.beta_trace is not None:
                        report.beta_trace.append(model.beta)
                elif algo is Algorithm.DOTMAT:
                    total += core.dotmat_loss(u, v, ratings[pos], hyper)
                    U[i], V[j] = core.dotmat_step(u, v, ratings[pos], hyper)
                else:
                    total += core.classic_mf_loss(u, v, ratings[pos], hyper)
                    U[i], V[j] = core.classic_mf_step(u, v, ratings[pos], hyper)
            except NumericOverflowError as exc:
                report.overflow_events += 1
                report.steps = step
                report.wall_seconds = time.perf_counter() - start
                _finish(report, source)
                raise TrainingDiverged(
                    f"{algo.value}: non-finite {exc.parameter} at epoch {epoch}, step {step} "
                    f"(user {dataset.user_ids[i]}, item {dataset.item_ids[j]})",
                    epoch, step, exc.parameter, report,
                ) from exc
            step += 1
        mean_loss = total / n
        if not (math.isfinite(mean_loss) and model.is_finite()):
            report.overflow_events += 1
            report.steps = step
            _finish(report, source)
            raise TrainingDiverged(
                f"{algo.value}: non-finite state after epoch {epoch}", epoch, step, "loss", report)
        report.loss_trace.append(mean_loss)
    report.steps = step
    report.wall_seconds = time.perf_counter() - start
    report.norms = _norms(model)
    _finish(report, source)
    return model, report


def _finish(report: TrainReport, source) -> None:
    if isinstance(source, RatingBlindView):
        report.rating_reads = source.rating_reads


def _rows(ids, index: dict[str, int], factors: np.ndarray) -> np.ndarray:
    """Embedding rows for ``ids``; unknown ids get the mean embedding."""
    mean = factors.mean(axis=0)
    out = np.empty((len(ids), factors.shape[1]))
    for n, key in enumerate(ids):
        row = index.get(key)
        out[n] = mean if row is None else factors[row]
    return out


def score(model: FactorModel, user_ids, item_ids, contexts: np.ndarray) -> np.ndarray:
    """Raw predictions for aligned sequences of (user, item, encoded context)."""
    U = _rows(user_ids, model.user_index, model.user_factors)
    V = _rows(item_ids, model.item_index, model.item_factors)
    hyper = model.hyper
    if hyper.prediction_rule is PredictionRule.POWER:
        contexts = np.asarray(contexts, dtype=float).reshape(len(U), -1)
        if contexts.shape[1] != model.d:
            raise core.DimensionError(f"context dimension {contexts.shape[1]} != {model.d}")
        return core.predict_power_batch(U, V, model.alpha, contexts, model.beta, hyper)
    return core.predict_linear_batch(U, V, hyper.r_max)


def predict(model: FactorModel, user_id: str, item_id: str, context: np.ndarray,
            dataset: Dataset | None = None) -> float:
    """Single prediction. Users or items absent from training are replaced by
    the mean trained embedding. The linear rule ignores ``context``."""
    context = np.asarray(context, dtype=float)
    if context.shape != (model.d,):
        raise core.DimensionError(f"context has shape {context.shape}, expected ({model.d},)")
    user_index = dataset.user_index if dataset is not None else model.user_index
    item_index = dataset.item_index if dataset is not None else model.item_index
    u = _rows([user_id], user_index, model.user_factors)[0]
    v = _rows([item_id], item_index, model.item_factors)[0]
    if model.hyper.prediction_rule is PredictionRule.POWER:
        return core.predict_power(u, v, model.alpha, context, model.beta, model.hyper)
    return core.predict_linear(u, v, model.hyper.r_max)


def predict_dataset(model: FactorModel, dataset: Dataset) -> np.ndarray:
    return score(model, [e.user_id for e in dataset.events],
                 [e.item_id for e in dataset.events], dataset.contexts)
