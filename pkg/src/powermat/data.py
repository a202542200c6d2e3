"""Dataset ingestion (LDOS-CoMoDa style CSV), context encoding, seeded splits
and synthetic data generators."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = -1

COMODA_CONTEXT_COLUMNS = (
    "time", "daytype", "season", "location", "weather", "social",
    "endEmo", "dominantEmo", "mood", "physical", "decision", "interaction",
)
# Approximate category counts of the twelve context variables above, used only
# to give synthetic data a CoMoDa-like shape.
COMODA_CATEGORY_COUNTS = (4, 3, 4, 3, 5, 7, 7, 7, 3, 2, 2, 2)


class DataError(Exception):
    """Raised for unreadable input: missing file, missing column, no valid rows."""


class EncodingError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Scheme(str, Enum):
    ONE_HOT = "one_hot"
    NORMALIZED_ORDINAL = "normalized_ordinal"


@dataclass(frozen=True)
class RatingEvent:
    user_id: str
    item_id: str
    rating: float
    context_attrs: tuple[int, ...]


@dataclass(frozen=True)
class ColumnMapping:
    user_col: str = "userID"
    item_col: str = "itemID"
    rating_col: str = "rating"
    context_cols: tuple[str, ...] = COMODA_CONTEXT_COLUMNS
    scheme: Scheme = Scheme.ONE_HOT
    rating_min: float = 1.0
    r_max: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "context_cols", tuple(self.context_cols))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.context_cols:
            raise ConfigError("at least one context column is required")
        if not self.rating_min < self.r_max:
            raise ConfigError("rating_min must be below r_max")


@dataclass(frozen=True)
class ContextEncoder:
    scheme: Scheme
    columns: tuple[str, ...]
    # one_hot: sorted category codes per column (UNKNOWN included when seen)
    categories: tuple[tuple[int, ...], ...] = ()
    # normalized_ordinal: (min, max) of the known codes per column
    ranges: tuple[tuple[int, int], ...] = ()

    @classmethod
    def fit(cls, events: Iterable[RatingEvent], columns: Sequence[str],
            scheme: Scheme | str = Scheme.ONE_HOT) -> "ContextEncoder":
        scheme = Scheme(scheme)
        columns = tuple(columns)
        seen: list[set[int]] = [set() for _ in columns]
        for ev in events:
            if len(ev.context_attrs) != len(columns):
                raise EncodingError(
                    f"event has {len(ev.context_attrs)} context values, expected {len(columns)}")
            for s, code in zip(seen, ev.context_attrs):
                s.add(code)
        if scheme is Scheme.ONE_HOT:
            cats = tuple(tuple(sorted(s)) for s in seen)
            for name, c in zip(columns, cats):
                if not c:
                    raise EncodingError(f"column {name!r} has no observed values")
            return cls(scheme, columns, categories=cats)
        ranges = []
        for s in seen:
            known = [code for code in s if code != UNKNOWN]
            ranges.append((min(known), max(known)) if known else (0, 0))
        return cls(scheme, columns, ranges=tuple(ranges))

    @cached_property
    def _offsets(self) -> list[dict[int, int]]:
        out, pos = [], 0
        for cats in self.categories:
            out.append({code: pos + i for i, code in enumerate(cats)})
            pos += len(cats)
        return out

    @property
    def dim(self) -> int:
        if self.scheme is Scheme.ONE_HOT:
            return sum(len(c) for c in self.categories)
        return len(self.columns)

    def encode_attrs(self, attrs: Sequence[int]) -> np.ndarray:
        if len(attrs) != len(self.columns):
            raise EncodingError(f"expected {len(self.columns)} context values, got {len(attrs)}")
        out = np.zeros(self.dim)
        if self.scheme is Scheme.ONE_HOT:
            for name, lookup, code in zip(self.columns, self._offsets, attrs):
                try:
                    out[lookup[code]] = 1.0
                except KeyError:
                    raise EncodingError(f"unseen category {code} in column {name!r}") from None
            return out
        for t, (name, (lo, hi), code) in enumerate(zip(self.columns, self.ranges, attrs)):
            if code == UNKNOWN:
                out[t] = 0.5
            elif not lo <= code <= hi:
                raise EncodingError(f"value {code} outside fitted range [{lo}, {hi}] in column {name!r}")
            else:
                out[t] = (code - lo) / (hi - lo) if hi > lo else 0.0
        return out

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "columns": list(self.columns),
            "categories": [list(c) for c in self.categories],
            "ranges": [list(r) for r in self.ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextEncoder":
        return cls(
            Scheme(d["scheme"]), tuple(d["columns"]),
            categories=tuple(tuple(c) for c in d.get("categories", ())),
            ranges=tuple(tuple(r) for r in d.get("ranges", ())),
        )


def encode_context(event: RatingEvent, encoder: ContextEncoder) -> np.ndarray:
    return encoder.encode_attrs(event.context_attrs)


@dataclass(frozen=True)
class Dataset:
    events: tuple[RatingEvent, ...]
    user_index: dict[str, int]
    item_index: dict[str, int]
    encoder: ContextEncoder
    rating_min: float = 1.0
    r_max: float = 5.0
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def from_events(cls, events: Sequence[RatingEvent], encoder: ContextEncoder,
                    rating_min: float = 1.0, r_max: float = 5.0,
                    diagnostics: Sequence[str] = ()) -> "Dataset":
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        for ev in events:
            users.setdefault(ev.user_id, len(users))
            items.setdefault(ev.item_id, len(items))
        return cls(tuple(events), users, items, encoder, rating_min, r_max, tuple(diagnostics))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    @cached_property
    def user_ids(self) -> list[str]:
        return list(self.user_index)

    @cached_property
    def item_ids(self) -> list[str]:
        return list(self.item_index)

    @cached_property
    def user_idx(self) -> np.ndarray:
        return np.fromiter((self.user_index[e.user_id] for e in self.events), dtype=np.int64,
                           count=len(self.events))

    @cached_property
    def item_idx(self) -> np.ndarray:
        return np.fromiter((self.item_index[e.item_id] for e in self.events), dtype=np.int64,
                           count=len(self.events))

    @cached_property
    def ratings(self) -> np.ndarray:
        return np.fromiter((e.rating for e in self.events), dtype=float, count=len(self.events))

    @cached_property
    def contexts(self) -> np.ndarray:
        """Encoded context matrix, one row per event."""
        if not self.events:
            return np.zeros((0, self.encoder.dim))
        return np.stack([encode_context(e, self.encoder) for e in self.events])

    def item_counts(self) -> dict[str, int]:
        counts = np.bincount(self.item_idx, minlength=self.n_items)
        return {iid: int(counts[j]) for iid, j in self.item_index.items()}


def _parse_code(raw: str) -> int:
    raw = raw.strip()
    if raw == "":
        return UNKNOWN
    value = float(raw)
    if not value.is_integer():
        raise ValueError(f"non-integer context code {raw!r}")
    return int(value)


def parse_comoda(path: str | Path, config: ColumnMapping = ColumnMapping()) -> Dataset:
    """Load a CoMoDa-format CSV. Malformed rows are skipped and reported in
    ``Dataset.diagnostics`` (row numbers count the header as row 1)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    events: list[RatingEvent] = []
    diagnostics: list[str] = []
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = (config.user_col, config.item_col, config.rating_col, *config.context_cols)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for rowno, row in enumerate(reader, start=2):
            user = (row[config.user_col] or "").strip()
            item = (row[config.item_col] or "").strip()
            if not user or not item:
                diagnostics.append(f"row {rowno}: missing user or item id")
                continue
            try:
                rating = float(row[config.rating_col])
            except (TypeError, ValueError):
                diagnostics.append(f"row {rowno}: unparseable rating {row[config.rating_col]!r}")
                continue
            if not (math.isfinite(rating) and config.rating_min <= rating <= config.r_max):
                diagnostics.append(
                    f"row {rowno}: rating {rating} outside [{config.rating_min}, {config.r_max}]")
                continue
            try:
                attrs = tuple(_parse_code(row[c] or "") for c in config.context_cols)
            except ValueError as exc:
                diagnostics.append(f"row {rowno}: bad context value ({exc})")
                continue
            events.append(RatingEvent(user, item, rating, attrs))
    for msg in diagnostics:
        logger.warning("%s: %s", path.name, msg)
    if not events:
        raise DataError(f"{path}: no valid rows ({len(diagnostics)} skipped)")
    encoder = ContextEncoder.fit(events, config.context_cols, config.scheme)
    return Dataset.from_events(events, encoder, config.rating_min, config.r_max, diagnostics)


def write_comoda(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["userID", "itemID", "rating", *dataset.encoder.columns])
        for ev in dataset.events:
            w.writerow([ev.user_id, ev.item_id, repr(ev.rating), *ev.context_attrs])


def split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random per-event holdout. Both sides keep the source event order and
    share the source encoder; each side re-indexes its own users and items."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test > n - 1:
        raise ConfigError(f"split of {n} events at fraction {test_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    test_mask = np.zeros(n, dtype=bool)
    test_mask[perm[:n_test]] = True
    train_ev = [e for e, t in zip(dataset.events, test_mask) if not t]
    test_ev = [e for e, t in zip(dataset.events, test_mask) if t]
    make = lambda evs: Dataset.from_events(evs, dataset.encoder, dataset.rating_min, dataset.r_max)
    return make(train_ev), make(test_ev)


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -exponent
    return w / w.sum()


def synth_generate(n_users: int, n_items: int, n_events: int, zipf_exponent: float = 1.0,
                   context_columns: Sequence[int] = (3, 4), seed: int = 0,
                   rating_min: int = 1, r_max: int = 5,
                   column_names: Sequence[str] | None = None) -> Dataset:
    """Synthetic events: Zipf item popularity (item i0 most popular), uniform
    users, uniform integer ratings and uniform context codes 1..n per column."""
    for name, value in (("n_users", n_users), ("n_items", n_items), ("n_events", n_events)):
        if value < 1:
            raise ConfigError(f"{name} must be positive, got {value}")
    if not zipf_exponent > 0:
        raise ConfigError(f"zipf_exponent must be positive, got {zipf_exponent}")
    if not context_columns or min(context_columns) < 1:
        raise ConfigError("context_columns must be a nonempty list of positive category counts")
    if column_names is None:
        column_names = [f"ctx{t}" for t in range(len(context_columns))]
    if len(column_names) != len(context_columns):
        raise ConfigError("column_names and context_columns differ in length")
    rng = np.random.default_rng(seed)
    users = rng.integers(0, n_users, size=n_events)
    items = rng.choice(n_items, size=n_events, p=zipf_probabilities(n_items, zipf_exponent))
    ratings = rng.integers(rating_min, r_max + 1, size=n_events)
    ctx = np.column_stack([rng.integers(1, m + 1, size=n_events) for m in context_columns])
    events = [
        RatingEvent(f"u{u}", f"i{i}", float(r), tuple(int(c) for c in row))
        for u, i, r, row in zip(users, items, ratings, ctx)
    ]
    encoder = ContextEncoder.fit(events, column_names, Scheme.ONE_HOT)
    return Dataset.from_events(events, encoder, float(rating_min), float(r_max))


def synth_planted(n_users: int, n_items: int, k: int = 1, seed: int = 0,
                  r_max: float = 5.0) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Fully observed noiseless rank-k data: rating = r_max * u.v.

    Factor entries are uniform on [0.5/sqrt(k), 1/sqrt(k)], so every planted
    dot product lies in [0.25, 1]. Returns the dataset and the planted factors.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 0.5 / math.sqrt(k), 1.0 / math.sqrt(k)
    U = rng.uniform(lo, hi, size=(n_users, k))
    V = rng.uniform(lo, hi, size=(n_items, k))
    events = [
        RatingEvent(f"u{i}", f"i{j}", float(r_max * U[i] @ V[j]), (1,))
        for i in range(n_users) for j in range(n_items)
    ]
    encoder = ContextEncoder.fit(events, ["ctx0"], Scheme.ONE_HOT)
    return Dataset.from_events(events, encoder, 0.0, r_max), U, V
