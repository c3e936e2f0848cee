"""Interaction ingestion, filtering, sessions, leave-one-out splits and sampling.

Users are market-local: the key ``("de", "u1")`` and ``("jp", "u1")`` are two
different people.  Items are shared across markets and get one dense id each,
with id 0 reserved for padding.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .model import PAD, Batch, ModelInput
from .numerics import ProtocolError

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """A malformed line in an interaction file."""

    def __init__(self, line: int, column: int, reason: str):
        super().__init__(f"line {line}, column {column}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


@dataclass(frozen=True)
class Interaction:
    market: str
    user: str
    item: str
    rating: float = 1.0


def load_interactions(path) -> list[Interaction]:
    """Parse a ``market<TAB>user<TAB>item<TAB>rating`` file; ``#`` lines are comments."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataFormatError(lineno, len(cols), f"expected 4 tab-separated columns, found {len(cols)}")
            for i, col in enumerate(cols[:3], start=1):
                if not col:
                    raise DataFormatError(lineno, i, "empty key")
            try:
                rating = float(cols[3])
            except ValueError:
                raise DataFormatError(lineno, 4, f"rating {cols[3]!r} is not a number") from None
            records.append(Interaction(cols[0], cols[1], cols[2], rating))
    return records


def write_interactions(records: Iterable[Interaction], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.market}\t{r.user}\t{r.item}\t{r.rating:g}\n")


def filter_min_interactions(records: Sequence[Interaction], k: int = 5) -> list[Interaction]:
    """Drop sparse users (counted per market) and items (counted globally) to a fixpoint."""
    current = list(records)
    while True:
        users = Counter((r.market, r.user) for r in current)
        kept = [r for r in current if users[(r.market, r.user)] >= k]
        items = Counter(r.item for r in kept)
        kept = [r for r in kept if items[r.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


@dataclass
class Catalog:
    items: dict[str, int]  # item key -> id >= 1
    markets: dict[str, int]  # market key -> id >= 0
    market_items: dict[int, np.ndarray] = field(default_factory=dict)  # sorted observed ids

    @classmethod
    def build(
        cls,
        records: Sequence[Interaction],
        items: Optional[dict[str, int]] = None,
        markets: Optional[dict[str, int]] = None,
    ) -> "Catalog":
        """Assign dense ids, or reuse fixed ``items``/``markets`` maps (e.g. from a checkpoint)."""
        if items is None:
            items = {key: i + 1 for i, key in enumerate(sorted({r.item for r in records}))}
        if markets is None:
            markets = {key: i for i, key in enumerate(sorted({r.market for r in records}))}
        market_ids = dict(markets)
        observed: dict[int, set] = defaultdict(set)
        for r in records:
            if r.item not in items:
                raise KeyError(f"item {r.item!r} is not in the catalog")
            if r.market not in market_ids:
                raise KeyError(f"market {r.market!r} is not in the catalog")
            observed[market_ids[r.market]].add(items[r.item])
        market_items = {m: np.array(sorted(observed[m]), dtype=np.int64) for m in market_ids.values()}
        return cls(dict(items), market_ids, market_items)

    @property
    def n_items(self) -> int:
        """Table size including the PAD row."""
        return len(self.items) + 1

    @property
    def n_markets(self) -> int:
        return len(self.markets)

    def item_keys(self) -> list[str]:
        keys = [""] * self.n_items
        for key, i in self.items.items():
            keys[i] = key
        return keys

    def market_keys(self) -> list[str]:
        keys = [""] * self.n_markets
        for key, i in self.markets.items():
            keys[i] = key
        return keys

    def market_id(self, key: str) -> int:
        try:
            return self.markets[key]
        except KeyError:
            raise KeyError(f"unknown market {key!r}; known: {sorted(self.markets)}") from None


@dataclass
class Session:
    user: str
    market: int
    items: list[int]


def build_sessions(records: Sequence[Interaction], catalog: Catalog) -> list[Session]:
    """One session per (market, user), items in file order, duplicates collapsed."""
    grouped: dict[tuple[str, str], list[int]] = {}
    seen: dict[tuple[str, str], set] = defaultdict(set)
    for r in records:
        key = (r.market, r.user)
        item = catalog.items[r.item]
        if item in seen[key]:
            continue
        seen[key].add(item)
        grouped.setdefault(key, []).append(item)
    return [Session(user, catalog.market_id(market), items) for (market, user), items in grouped.items()]


@dataclass
class SplitSession:
    user: str
    market: int
    train: list[int]
    val: int
    test: int

    @property
    def positives(self) -> set[int]:
        return set(self.train) | {self.val, self.test}


def leave_one_out_split(session: Session, rng: np.random.Generator) -> SplitSession:
    """Hold out one random item for validation and a different one for test."""
    if len(session.items) < 5:
        raise ProtocolError(f"session of user {session.user!r} has {len(session.items)} items; need at least 5")
    val_pos, test_pos = rng.choice(len(session.items), size=2, replace=False)
    train = [it for i, it in enumerate(session.items) if i not in (val_pos, test_pos)]
    return SplitSession(session.user, session.market, train, session.items[val_pos], session.items[test_pos])


def negative_pool(split: SplitSession, catalog: Catalog) -> np.ndarray:
    pool = catalog.market_items[split.market]
    return pool[~np.isin(pool, list(split.positives))]


def sample_train_negatives(
    split: SplitSession, catalog: Catalog, rng: np.random.Generator, ratio: int = 4, n_positives: Optional[int] = None
) -> np.ndarray:
    """``ratio`` uniform draws (with replacement) per positive from the market's unobserved items."""
    n_pos = len(split.train) if n_positives is None else n_positives
    if ratio == 0 or n_pos == 0:
        return np.zeros(0, dtype=np.int64)
    pool = negative_pool(split, catalog)
    if pool.size == 0:
        raise ProtocolError(f"no negative items available for user {split.user!r} in market {split.market}")
    return pool[rng.integers(0, pool.size, size=n_pos * ratio)]


def sample_eval_negatives(
    split: SplitSession, catalog: Catalog, rng: np.random.Generator, n: int = 99, market_name: Optional[str] = None
) -> np.ndarray:
    """``n`` distinct negatives for ranking the held-out item."""
    pool = negative_pool(split, catalog)
    if pool.size < n:
        label = market_name if market_name is not None else split.market
        raise ProtocolError(f"market {label}: negative pool of {pool.size} items is smaller than {n}")
    return rng.choice(pool, size=n, replace=False)


def make_example(history: Sequence[int], candidate: int, market: int, max_len: int) -> ModelInput:
    """Keep the last ``max_len - 1`` history items, right-aligned, candidate last."""
    return ModelInput.from_history(history, candidate, market, max_len)


@dataclass
class TrainingExamples:
    """Column-oriented training examples; ``batch(idx)`` gives a model batch."""

    item_ids: np.ndarray
    market_ids: np.ndarray
    keep_mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def batch(self, idx) -> tuple[Batch, np.ndarray]:
        return Batch(self.item_ids[idx], self.market_ids[idx], self.keep_mask[idx]), self.labels[idx]


def encode_rows(histories: list[Sequence[int]], candidates: Sequence[int], markets: Sequence[int], max_len: int) -> Batch:
    """Vectorized ``make_example`` for many rows."""
    n = len(candidates)
    ids = np.zeros((n, max_len), dtype=np.int64)
    keep = np.zeros((n, max_len), dtype=bool)
    for row, hist in enumerate(histories):
        hist = list(hist)[-(max_len - 1):]
        if not hist:
            raise ProtocolError("example has no history items")
        ids[row, max_len - 1 - len(hist):max_len - 1] = hist
        keep[row, max_len - 1 - len(hist):max_len - 1] = True
    ids[:, -1] = candidates
    return Batch(ids, np.asarray(markets, dtype=np.int64), keep)


def batch_iterator(n_examples: int, batch_size: int, rng: Optional[np.random.Generator], shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index batches over ``range(n_examples)``; the last short batch is kept."""
    order = rng.permutation(n_examples) if shuffle else np.arange(n_examples)
    for start in range(0, n_examples, batch_size):
        yield order[start:start + batch_size]


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, key...), stable across runs and processes."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# stream tags for derived_rng
SPLIT_STREAM = 1
VAL_NEG_STREAM = 2
TEST_NEG_STREAM = 3


@dataclass
class Dataset:
    """Filtered, split data plus evaluation negatives fixed per (seed, user)."""

    catalog: Catalog
    splits: list[SplitSession]
    val_negatives: list[np.ndarray]
    test_negatives: list[np.ndarray]
    seed: int
    train_neg_ratio: int = 4

    @classmethod
    def from_records(
        cls,
        records: Sequence[Interaction],
        seed: int,
        eval_negatives: int = 99,
        train_neg_ratio: int = 4,
        min_interactions: int = 5,
        items: Optional[dict[str, int]] = None,
        markets: Optional[dict[str, int]] = None,
    ) -> "Dataset":
        records = filter_min_interactions(records, min_interactions)
        catalog = Catalog.build(records, items, markets)
        sessions = build_sessions(records, catalog)
        splits, val_negs, test_negs = [], [], []
        market_names = catalog.market_keys()
        for idx, session in enumerate(sessions):
            split = leave_one_out_split(session, derived_rng(seed, SPLIT_STREAM, session.market, idx))
            splits.append(split)
            name = market_names[session.market]
            val_negs.append(sample_eval_negatives(split, catalog, derived_rng(seed, VAL_NEG_STREAM, session.market, idx), eval_negatives, name))
            test_negs.append(sample_eval_negatives(split, catalog, derived_rng(seed, TEST_NEG_STREAM, session.market, idx), eval_negatives, name))
        return cls(catalog, splits, val_negs, test_negs, seed, train_neg_ratio)

    def user_indices(self, market: Optional[int] = None) -> list[int]:
        return [i for i, s in enumerate(self.splits) if market is None or s.market == market]

    def training_examples(self, rng: np.random.Generator, max_len: int, market: Optional[int] = None) -> TrainingExamples:
        """Fresh positives and negatives for one epoch.

        Each training positive is predicted from the user's other training
        items; its ``ratio`` negatives share that same history.
        """
        histories, candidates, markets, labels = [], [], [], []
        ratio = self.train_neg_ratio
        for i in self.user_indices(market):
            split = self.splits[i]
            negs = sample_train_negatives(split, self.catalog, rng, ratio)
            for j, pos in enumerate(split.train):
                hist = split.train[:j] + split.train[j + 1:]
                group = [pos, *negs[j * ratio:(j + 1) * ratio]]
                histories.extend([hist] * len(group))
                candidates.extend(group)
                markets.extend([split.market] * len(group))
                labels.extend([1.0] + [0.0] * ratio)
        if not candidates:
            empty = np.zeros((0, max_len))
            return TrainingExamples(empty.astype(np.int64), np.zeros(0, dtype=np.int64), empty.astype(bool), np.zeros(0))
        batch = encode_rows(histories, candidates, markets, max_len)
        return TrainingExamples(batch.item_ids, batch.market_ids, batch.keep_mask, np.asarray(labels))


# ----------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    users_per_market: list[int]
    n_items: int
    per_user: int
    beta: float = 0.0
    latent_dim: int = 8
    market_names: Optional[list[str]] = None

    def names(self) -> list[str]:
        if self.market_names is not None:
            return list(self.market_names)
        return [f"m{k}" for k in range(len(self.users_per_market))]


def synthesize_markets(spec: SyntheticSpec, rng: np.random.Generator) -> list[Interaction]:
    """Latent-factor multi-market interactions.

    Items, users and market offsets are standard normal vectors.  A user in
    market ``k`` ranks items by ``(u + beta * m_k / latent_dim) . v_i`` and
    interacts with the top ``per_user`` of them.  The market offset shifts
    every user of a market toward the same items, so ``beta`` controls how
    far market popularity diverges.
    """
    if spec.per_user > spec.n_items:
        raise ValueError(f"per_user={spec.per_user} exceeds n_items={spec.n_items}")
    if spec.per_user < 1 or spec.n_items < 1:
        raise ValueError("per_user and n_items must be positive")
    names = spec.names()
    if len(names) != len(spec.users_per_market):
        raise ValueError("market_names and users_per_market differ in length")
    dim = spec.latent_dim
    item_vecs = rng.standard_normal((spec.n_items, dim))
    market_vecs = rng.standard_normal((len(names), dim))
    width = len(str(spec.n_items - 1))
    item_keys = [f"i{i:0{width}d}" for i in range(spec.n_items)]
    records = []
    for k, (name, n_users) in enumerate(zip(names, spec.users_per_market)):
        users = rng.standard_normal((n_users, dim))
        scores = (users + (spec.beta / dim) * market_vecs[k]) @ item_vecs.T
        uwidth = len(str(max(n_users - 1, 0)))
        for u in range(n_users):
            # stable sort: ties go to the lower item index
            top = np.argsort(-scores[u], kind="stable")[:spec.per_user]
            for i in top:
                records.append(Interaction(name, f"u{u:0{uwidth}d}", item_keys[i], 1.0))
    return records


# --------------------------------------------------------------------- stats


@dataclass
class MarketStats:
    market: str
    users: int
    items: int
    ratings: int

    @property
    def avg_length(self) -> float:
        return self.ratings / self.users if self.users else 0.0


def dataset_statistics(records: Sequence[Interaction]) -> list[MarketStats]:
    """#User, #Item, #Ratings per market plus a ``total`` row (users summed, items unioned)."""
    users: dict[str, set] = defaultdict(set)
    items: dict[str, set] = defaultdict(set)
    ratings: Counter = Counter()
    for r in records:
        users[r.market].add(r.user)
        items[r.market].add(r.item)
        ratings[r.market] += 1
    rows = [MarketStats(m, len(users[m]), len(items[m]), ratings[m]) for m in sorted(users)]
    if rows:
        all_items = set().union(*items.values())
        rows.append(MarketStats("total", sum(s.users for s in rows), len(all_items), sum(s.ratings for s in rows)))
    return rows


def write_statistics(rows: Sequence[MarketStats], path_or_file) -> None:
    lines = ["market\tusers\titems\tratings\tavg_length"]
    lines += [f"{s.market}\t{s.users}\t{s.items}\t{s.ratings}\t{s.avg_length:.4f}" for s in rows]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text, encoding="utf-8")
