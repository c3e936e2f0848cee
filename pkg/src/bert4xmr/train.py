"""Binary cross-entropy training with Adam and two-phase transfer.

Pre-training pools every market's examples; fine-tuning continues from a
pre-trained parameter set on one target market.  Both phases optimize the
same objective.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, batch_iterator, derived_rng
from .evaluation import evaluate_market
from .model import ModelConfig, ParameterSet, forward
from .numerics import ProtocolError, Tape

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
EPOCH_STREAM = 10
INIT_STREAM = 11
PHASES = ("pretrain", "finetune")


def bce_loss(probs, labels) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy and its gradient with respect to ``probs``."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    return float(loss), grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-7
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, frozen=()) -> None:
    """One in-place Adam update with coupled L2 (added to the gradient)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, theta in values.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        if state.l2:
            g = g + state.l2 * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainPlan:
    phase: str = "pretrain"
    market: Optional[int] = None  # None: all markets pooled
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 1024
    seed: int = 0
    lr: float = 1e-3
    l2: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def optimizer(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.l2)


def loss_and_grads(params: ParameterSet, batch, labels, rng=None, training=False):
    tape = Tape()
    leaves = params.leaves()
    probs = forward(tape, batch, params, rng=rng, training=training, leaves=leaves)
    loss, dprobs = bce_loss(probs.data, labels)
    grads = tape.backward(probs, dprobs, params=leaves)
    return loss, grads


def train_epoch(params: ParameterSet, dataset: Dataset, plan: TrainPlan, rng: np.random.Generator, state: AdamState) -> float:
    """Resample negatives, shuffle, and take one Adam step per batch.

    Returns the mean per-example loss over the epoch (0 for no examples).
    """
    examples = dataset.training_examples(rng, params.config.max_len, plan.market)
    if len(examples) == 0:
        return 0.0
    total = 0.0
    for idx in batch_iterator(len(examples), plan.batch_size, rng, shuffle=True):
        batch, labels = examples.batch(idx)
        loss, grads = loss_and_grads(params, batch, labels, rng=rng, training=True)
        adam_step(params.values, grads, state, params.frozen)
        total += loss
    return total / len(examples)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    market_scope: str
    train_loss: float
    val_ndcg10: float
    val_recall10: float
    seconds: float  # wall clock, kept out of the TSV so logs stay reproducible

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.phase}\t{self.market_scope}\t{self.train_loss:.6f}\t"
                f"{self.val_ndcg10:.6f}\t{self.val_recall10:.6f}")


EPOCH_LOG_HEADER = "epoch\tphase\tmarket_scope\ttrain_loss\tval_ndcg10\tval_recall10"


@dataclass
class FitResult:
    params: ParameterSet
    history: list[EpochRecord]
    best_epoch: int
    best_val_ndcg10: float

    def log_tsv(self) -> str:
        return "\n".join([EPOCH_LOG_HEADER] + [r.tsv() for r in self.history]) + "\n"


def fit(
    plan: TrainPlan,
    dataset: Dataset,
    initial: Optional[ParameterSet] = None,
    config: Optional[ModelConfig] = None,
) -> FitResult:
    """Train until ``max_epochs`` or ``patience`` epochs without a better val NDCG@10.

    Pre-training starts from ``initial`` if given, else from a fresh
    initialization of ``config``.  The returned parameters are those of the
    best validation epoch.
    """
    if plan.phase == "finetune":
        if initial is None:
            raise ProtocolError("fine-tuning needs a pre-trained checkpoint")
        if plan.market is None:
            raise ProtocolError("fine-tuning needs a target market")
    if initial is not None:
        params = initial.copy()
    elif config is not None:
        params = ParameterSet.initialize(config, derived_rng(plan.seed, INIT_STREAM))
    else:
        raise ValueError("either initial parameters or a model config is required")

    scope = "all" if plan.market is None else dataset.catalog.market_keys()[plan.market]
    phase_code = PHASES.index(plan.phase)
    state = plan.optimizer()
    best = params.copy()
    best_score = -np.inf
    best_epoch = 0
    stale = 0
    history = []
    for epoch in range(1, plan.max_epochs + 1):
        start = time.perf_counter()
        rng = derived_rng(plan.seed, EPOCH_STREAM, phase_code, epoch)
        loss = train_epoch(params, dataset, plan, rng, state)
        report = evaluate_market(params, dataset, plan.market, "val")
        record = EpochRecord(epoch, plan.phase, scope, loss, report.ndcg10, report.recall10, time.perf_counter() - start)
        history.append(record)
        logger.info("%s\t%.3fs", record.tsv(), record.seconds)
        if report.ndcg10 > best_score:
            best_score, best_epoch, stale = report.ndcg10, epoch, 0
            best = params.copy()
        else:
            stale += 1
            if stale > plan.patience:
                break
    return FitResult(best, history, best_epoch, float(best_score))
