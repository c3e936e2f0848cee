"""Sampled-negative ranking evaluation and embedding export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Catalog, Dataset, encode_rows
from .model import ParameterSet, predict


def recall_at_k(rank: int, k: int) -> int:
    """Hit indicator for a single relevant item at 1-based ``rank``."""
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class RankedList:
    items: np.ndarray  # candidate ids, best first
    scores: np.ndarray  # aligned with items
    positive: int  # held-out item id

    @property
    def rank(self) -> int:
        return int(np.flatnonzero(self.items == self.positive)[0]) + 1


def order_candidates(candidates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorting by score descending, ties to the lower item id."""
    return np.lexsort((candidates, -scores))


def rank_candidates(params: ParameterSet, history: Sequence[int], market: int, positive: int, negatives: Sequence[int]) -> RankedList:
    candidates = np.concatenate([[positive], np.asarray(negatives, dtype=np.int64)])
    batch = encode_rows([history] * len(candidates), candidates, [market] * len(candidates), params.config.max_len)
    scores = predict(params, batch)
    order = order_candidates(candidates, scores)
    return RankedList(candidates[order], scores[order], int(positive))


def positive_rank(scores: np.ndarray, candidates: np.ndarray, positive_index: int = 0) -> int:
    """1-based rank of ``candidates[positive_index]`` under the tie rule."""
    order = order_candidates(candidates, scores)
    return int(np.flatnonzero(order == positive_index)[0]) + 1


METRIC_NAMES = ("recall@5", "recall@10", "ndcg@5", "ndcg@10")


def user_metrics(rank: int) -> dict[str, float]:
    return {
        "recall@5": float(recall_at_k(rank, 5)),
        "recall@10": float(recall_at_k(rank, 10)),
        "ndcg@5": ndcg_at_k(rank, 5),
        "ndcg@10": ndcg_at_k(rank, 10),
    }


@dataclass
class EvalReport:
    market: str
    split: str
    rows: list[dict] = field(default_factory=list)  # user, rank, metrics

    @property
    def user_count(self) -> int:
        return len(self.rows)

    def mean(self, metric: str) -> float:
        if not self.rows:
            return 0.0
        return sum(r[metric] for r in self.rows) / len(self.rows)

    @property
    def recall5(self) -> float:
        return self.mean("recall@5")

    @property
    def recall10(self) -> float:
        return self.mean("recall@10")

    @property
    def ndcg5(self) -> float:
        return self.mean("ndcg@5")

    @property
    def ndcg10(self) -> float:
        return self.mean("ndcg@10")

    def summary_line(self) -> str:
        return f"{self.market}\t{self.user_count}\t" + "\t".join(f"{self.mean(m):.6f}" for m in METRIC_NAMES)


REPORT_HEADER = "market\tuser_count\tr@5\tr@10\tn@5\tn@10"
DETAIL_HEADER = "market\tuser\trank\tr@5\tr@10\tn@5\tn@10"


def format_reports(reports: Sequence[EvalReport], detail: bool = False) -> str:
    lines = [REPORT_HEADER] + [r.summary_line() for r in reports]
    if detail:
        lines.append("")
        lines.append(DETAIL_HEADER)
        for rep in reports:
            for row in rep.rows:
                vals = "\t".join(f"{row[m]:.6f}" for m in METRIC_NAMES)
                lines.append(f"{rep.market}\t{row['user']}\t{row['rank']}\t{vals}")
    return "\n".join(lines) + "\n"


def evaluate_users(params: ParameterSet, dataset: Dataset, users: Sequence[int], split: str) -> list[dict]:
    """Score every user's held-out item against its fixed negatives in one pass."""
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    histories, candidates, markets, sizes = [], [], [], []
    for i in users:
        s = dataset.splits[i]
        # history is the train list only, so val never sees test and vice versa
        positive = s.val if split == "val" else s.test
        negs = dataset.val_negatives[i] if split == "val" else dataset.test_negatives[i]
        cands = np.concatenate([[positive], negs])
        histories.extend([s.train] * len(cands))
        candidates.append(cands)
        markets.extend([s.market] * len(cands))
        sizes.append(len(cands))
    if not users:
        return []
    flat = np.concatenate(candidates)
    scores = predict(params, encode_rows(histories, flat, markets, params.config.max_len))
    rows = []
    offset = 0
    for i, cands, size in zip(users, candidates, sizes):
        rank = positive_rank(scores[offset:offset + size], cands)
        offset += size
        rows.append({"user": dataset.splits[i].user, "rank": rank, **user_metrics(rank)})
    return rows


def evaluate_market(params: ParameterSet, dataset: Dataset, market: Optional[int], split: str = "test") -> EvalReport:
    """Mean Recall/NDCG@{5,10} over the users of one market (``None``: all markets)."""
    name = "all" if market is None else dataset.catalog.market_keys()[market]
    rows = evaluate_users(params, dataset, dataset.user_indices(market), split)
    return EvalReport(name, split, rows)


# ---------------------------------------------------------------- embeddings


def pca_project(x: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Project centered rows onto the top covariance eigenvectors.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order]
    for j in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    proj = centered @ comps
    if proj.shape[1] < n_components:
        proj = np.pad(proj, ((0, 0), (0, n_components - proj.shape[1])))
    return proj


def export_embeddings(params: ParameterSet, catalog: Catalog, mode: str = "raw") -> str:
    """TSV rows ``kind key dim0 dim1 ...`` for every item (incl. PAD) and market.

    In ``pca2`` mode items and markets are projected separately.
    """
    if mode not in ("raw", "pca2"):
        raise ValueError(f"unknown export mode {mode!r}")
    items = params["item_emb"]
    markets = params["market_emb"]
    if mode == "pca2":
        items, markets = pca_project(items), pca_project(markets)
    item_keys = catalog.item_keys()
    item_keys[0] = "<pad>"
    lines = []
    for kind, keys, table in (("item", item_keys, items), ("market", catalog.market_keys(), markets)):
        for key, row in zip(keys, table):
            lines.append("\t".join([kind, key] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"
