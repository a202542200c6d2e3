"""Accuracy and popularity-bias metrics."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from .core import FactorModel, PredictionRule
from .data import Dataset
from .trainers import predict_dataset, score

logger = logging.getLogger(__name__)


class UndefinedFitError(ValueError):
    def __init__(self, message: str, side: str | None = None):
        self.side = side
        super().__init__(message if side is None else f"{side}: {message}")


def _pair(predictions, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mae(predictions: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _pair(predictions, truths)
    return float(np.mean(np.abs(p - t)))


def rmse(predictions: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _pair(predictions, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def clip_predictions(predictions, lo: float, hi: float) -> tuple[np.ndarray, int]:
    p = np.asarray(predictions, dtype=float)
    clipped = np.clip(p, lo, hi)
    return clipped, int(np.count_nonzero(clipped != p))


def zipf_slope(counts: Sequence[float]) -> float:
    """Least-squares slope of ln(count) against ln(rank), rank 1 = largest count.

    Zeros are dropped before ranking.
    """
    c = np.asarray(counts, dtype=float)
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    c = np.sort(c[c > 0])[::-1]
    if c.size < 2:
        raise UndefinedFitError(f"need at least 2 positive counts, got {c.size}")
    if c[0] == c[-1]:
        return 0.0
    x = np.log(np.arange(1, c.size + 1))
    y = np.log(c)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def matthew_degree(rec_lists: Mapping[object, Sequence], train_item_counts: Mapping[object, float]) -> float:
    """Slope of the recommendation rank-frequency curve minus that of the
    training data. Negative means recommendations concentrate on popular items
    more than the data does."""
    occurrences = Counter(item for items in rec_lists.values() for item in items)
    if not occurrences:
        raise UndefinedFitError("no recommended items", side="recommendations")
    try:
        s_rec = zipf_slope(list(occurrences.values()))
    except UndefinedFitError as exc:
        raise UndefinedFitError(str(exc), side="recommendations") from None
    try:
        s_data = zipf_slope(list(train_item_counts.values()))
    except UndefinedFitError as exc:
        raise UndefinedFitError(str(exc), side="training data") from None
    return s_rec - s_data


def top_k_lists(model: FactorModel, dataset: Dataset, users: Sequence[str], k_rec: int = 10,
                context_source: str = "per_user_last", context_events: Dataset | None = None,
                fixed_context: np.ndarray | None = None) -> dict[str, list[int]]:
    """Top-``k_rec`` model item indices per user, excluding the user's items in
    ``dataset`` (the training set). Ties go to the lower item index.

    With ``context_source="per_user_last"`` the power rule scores with the
    context of the user's last event in ``context_events`` (falling back to
    ``dataset``, then to an all-zero context). Users left with no candidate
    items get an empty list.
    """
    n_items = len(model.item_ids)
    if not 1 <= k_rec <= n_items:
        raise ValueError(f"k_rec must lie in [1, {n_items}], got {k_rec}")
    if context_source not in ("per_user_last", "fixed"):
        raise ValueError(f"unknown context_source {context_source!r}")
    if context_source == "fixed" and fixed_context is None:
        raise ValueError("fixed context_source requires fixed_context")

    seen: dict[str, set[int]] = {}
    for ev in dataset.events:
        j = model.item_index.get(ev.item_id)
        if j is not None:
            seen.setdefault(ev.user_id, set()).add(j)

    last_ctx: dict[str, np.ndarray] = {}
    if context_source == "per_user_last":
        for source in (dataset, context_events):
            if source is None:
                continue
            for ev, row in zip(source.events, source.contexts):
                last_ctx[ev.user_id] = row

    use_context = model.hyper.prediction_rule is PredictionRule.POWER
    all_items = model.item_ids
    out: dict[str, list[int]] = {}
    for user in users:
        if use_context:
            ctx = (np.asarray(fixed_context, dtype=float) if context_source == "fixed"
                   else last_ctx.get(user, np.zeros(model.d)))
            C = np.broadcast_to(ctx, (n_items, model.d))
        else:
            C = np.zeros((n_items, model.d))
        scores = score(model, [user] * n_items, all_items, C)
        excluded = seen.get(user, set())
        if excluded:
            scores = scores.copy()
            scores[list(excluded)] = -np.inf
        order = np.argsort(-scores, kind="stable")
        picks = [int(j) for j in order[: k_rec + len(excluded)] if int(j) not in excluded][:k_rec]
        if not picks:
            logger.info("user %s has no unseen items; empty recommendation list", user)
        out[user] = picks
    return out


@dataclass
class EvalReport:
    algorithm: str
    prediction_rule: str
    gamma: float
    mae: float
    rmse: float
    matthew_degree: float
    n_test: int
    clip_count: int
    diverged: bool = False
    train_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: FactorModel, train: Dataset, test: Dataset, algorithm: str,
             k_rec: int = 10, context_source: str = "per_user_last") -> EvalReport:
    """Clipped MAE/RMSE on ``test`` plus the Matthew degree of top-k lists for
    every test user against the training item counts."""
    raw = predict_dataset(model, test)
    preds, clip_count = clip_predictions(raw, test.rating_min, test.r_max)
    users = list(dict.fromkeys(e.user_id for e in test.events))
    k_rec = min(k_rec, len(model.item_ids))
    try:
        lists = top_k_lists(model, train, users, k_rec, context_source, context_events=test)
        md = matthew_degree(lists, train.item_counts())
    except UndefinedFitError as exc:
        logger.warning("%s: Matthew degree undefined (%s)", algorithm, exc)
        md = math.nan
    return EvalReport(
        algorithm=algorithm,
        prediction_rule=model.hyper.prediction_rule.value,
        gamma=model.hyper.gamma,
        mae=mae(preds, test.ratings),
        rmse=rmse(preds, test.ratings),
        matthew_degree=md,
        n_test=len(test),
        clip_count=clip_count,
    )
