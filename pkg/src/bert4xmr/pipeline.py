"""End-to-end runs: pre-train, fine-tune, evaluate and the ablation arms."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import Dataset, Interaction, derived_rng
from .evaluation import METRIC_NAMES, EvalReport, evaluate_market
from .model import ParameterSet
from .train import INIT_STREAM, FitResult, fit

logger = logging.getLogger(__name__)

ARMS = ("full", "no-market-emb", "single-market", "no-finetune")


def build_dataset(records: Sequence[Interaction], cfg: RunConfig, seed: int, checkpoint: Optional[Checkpoint] = None) -> Dataset:
    kwargs = {}
    if checkpoint is not None:
        kwargs = {"items": checkpoint.items, "markets": checkpoint.markets}
    return Dataset.from_records(
        records,
        seed=seed,
        eval_negatives=cfg.eval_negatives,
        train_neg_ratio=cfg.train_neg_ratio,
        min_interactions=cfg.min_interactions,
        **kwargs,
    )


def initial_params(cfg: RunConfig, dataset: Dataset, seed: int, market_emb: bool = True) -> ParameterSet:
    model_cfg = cfg.model_config(dataset.catalog.n_items, dataset.catalog.n_markets)
    params = ParameterSet.initialize(model_cfg, derived_rng(seed, INIT_STREAM))
    if not market_emb:
        params.disable_market_embedding()
    return params


def pretrain(cfg: RunConfig, dataset: Dataset, seed: int, market_emb: bool = True) -> FitResult:
    """Fit on every market pooled."""
    return fit(cfg.plan("pretrain", None, seed), dataset, initial=initial_params(cfg, dataset, seed, market_emb))


def finetune(cfg: RunConfig, dataset: Dataset, params: ParameterSet, market: int, seed: int) -> FitResult:
    return fit(cfg.plan("finetune", market, seed), dataset, initial=params)


def train_single_market(cfg: RunConfig, dataset: Dataset, market: int, seed: int) -> FitResult:
    """Train from scratch on one market only."""
    return fit(cfg.plan("pretrain", market, seed), dataset, initial=initial_params(cfg, dataset, seed))


def to_checkpoint(result: FitResult, dataset: Dataset, phase: str, seed: int, market: Optional[str] = None) -> Checkpoint:
    provenance = {"seed": seed, "epoch": result.best_epoch, "phase": phase}
    if market is not None:
        provenance["market"] = market
    return Checkpoint(result.params, dataset.catalog.items, dataset.catalog.markets, provenance)


def evaluate_all(params: ParameterSet, dataset: Dataset, split: str = "test", markets: Optional[Sequence[int]] = None) -> list[EvalReport]:
    if markets is None:
        markets = range(dataset.catalog.n_markets)
    return [evaluate_market(params, dataset, m, split) for m in markets]


@dataclass
class AblationRow:
    seed: int
    market: str
    arm: str
    report: EvalReport

    def tsv(self) -> str:
        metrics = "\t".join(f"{self.report.mean(m):.6f}" for m in METRIC_NAMES)
        return f"{self.seed}\t{self.market}\t{self.arm}\t{self.report.user_count}\t{metrics}"


ABLATION_HEADER = "seed\tmarket\tarm\tuser_count\tr@5\tr@10\tn@5\tn@10"


def run_ablation_seed(
    records: Sequence[Interaction],
    cfg: RunConfig,
    seed: int,
    markets: Optional[Sequence[str]] = None,
    arms: Sequence[str] = ARMS,
) -> list[AblationRow]:
    """All arms for one seed; every arm sees the same splits and negatives.

    ``full``: pre-train with market embeddings then fine-tune on the target.
    ``no-market-emb``: the same with the market table zeroed and frozen.
    ``single-market``: train from scratch on the target only.
    ``no-finetune``: the pre-trained model of ``full``, evaluated directly.
    """
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown ablation arms {sorted(unknown)}")
    dataset = build_dataset(records, cfg, seed)
    names = dataset.catalog.market_keys()
    targets = names if markets is None else list(markets)
    pre = pretrain(cfg, dataset, seed) if {"full", "no-finetune"} & set(arms) else None
    pre_flat = pretrain(cfg, dataset, seed, market_emb=False) if "no-market-emb" in arms else None
    rows = []
    for name in targets:
        m = dataset.catalog.market_id(name)
        for arm in arms:
            if arm == "full":
                params = finetune(cfg, dataset, pre.params, m, seed).params
            elif arm == "no-market-emb":
                params = finetune(cfg, dataset, pre_flat.params, m, seed).params
            elif arm == "single-market":
                params = train_single_market(cfg, dataset, m, seed).params
            else:
                params = pre.params
            report = evaluate_market(params, dataset, m, "test")
            logger.info("seed %d market %s arm %s ndcg@10 %.4f", seed, name, arm, report.ndcg10)
            rows.append(AblationRow(seed, name, arm, report))
    return rows
