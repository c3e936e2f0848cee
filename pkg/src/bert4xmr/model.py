"""The cross-market transformer recommender.

Layout of one input row (``max_len`` slots)::

    [PAD ... PAD | h_1 ... h_k | candidate]

History is right-aligned against a dedicated final candidate slot; id 0 is
PAD.  There is no positional term, so the network is invariant to the order
of history slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional

import numpy as np

from .numerics import ProtocolError, Tape, Tensor

PAD = 0


@dataclass
class ModelConfig:
    n_items: int  # includes PAD
    n_markets: int
    d: int = 32
    n_layers: int = 4
    n_heads: int = 8
    max_len: int = 50
    dropout_rate: float = 0.3
    ffn_hidden: Optional[int] = None  # defaults to 4*d
    per_head_scale: bool = False  # scale scores by sqrt(d/g) instead of sqrt(d)
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for one history slot and the candidate")
        if self.n_items < 2 or self.n_markets < 1:
            raise ValueError("need at least one real item and one market")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def attention_scale(self) -> float:
        width = self.head_dim if self.per_head_scale else self.d
        return 1.0 / math.sqrt(width)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, h = config.d, config.ffn_hidden
    shapes = {
        "item_emb": (config.n_items, d),
        "market_emb": (config.n_markets, d),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        shapes.update({
            p + "w_q": (d, d),
            p + "w_k": (d, d),
            p + "w_v": (d, d),
            p + "w_o": (d, d),
            p + "ffn_w1": (d, h),
            p + "ffn_b1": (h,),
            p + "ffn_w2": (h, d),
            p + "ffn_b2": (d,),
            p + "ln1_gamma": (d,),
            p + "ln1_beta": (d,),
            p + "ln2_gamma": (d,),
            p + "ln2_beta": (d,),
        })
    shapes["pred_w"] = (2 * d, 1)
    shapes["pred_b"] = (1,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class ParameterSet:
    """Named learnable arrays of one model instance."""

    config: ModelConfig
    values: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> "ParameterSet":
        values = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("gamma"):
                values[name] = np.ones(shape)
            elif leaf.endswith("beta") or leaf in ("ffn_b1", "ffn_b2", "pred_b"):
                values[name] = np.zeros(shape)
            else:
                values[name] = _truncated_normal(rng, shape, std)
        return cls(config, values)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.values.items()}, set(self.frozen))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def count(self) -> int:
        return sum(v.size for v in self.values.values())

    def disable_market_embedding(self) -> None:
        """Zero the market table and exclude it from optimization."""
        self.values["market_emb"][:] = 0.0
        self.frozen.add("market_emb")

    def leaves(self) -> dict[str, Tensor]:
        """Fresh named tensors over the current values, one set per tape."""
        return {name: Tensor(v, name=name) for name, v in self.values.items()}


@dataclass
class ModelInput:
    """One padded sequence: right-aligned history, candidate in the final slot."""

    item_ids: np.ndarray  # (max_len,) int
    market_id: int
    keep_mask: np.ndarray  # (max_len,) bool, True at real history slots

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.keep_mask = np.asarray(self.keep_mask, dtype=bool)
        if self.keep_mask[-1]:
            raise ProtocolError("the candidate slot is not part of the history")
        if not self.keep_mask.any():
            raise ProtocolError("input has no history items")

    @classmethod
    def from_history(cls, history: Iterable[int], candidate: int, market_id: int, max_len: int) -> "ModelInput":
        hist = list(history)[-(max_len - 1):]
        ids = np.zeros(max_len, dtype=np.int64)
        keep = np.zeros(max_len, dtype=bool)
        if hist:
            ids[max_len - 1 - len(hist):max_len - 1] = hist
            keep[max_len - 1 - len(hist):max_len - 1] = True
        ids[-1] = candidate
        return cls(ids, int(market_id), keep)


@dataclass
class Batch:
    item_ids: np.ndarray  # (B, n) int
    market_ids: np.ndarray  # (B,) int
    keep_mask: np.ndarray  # (B, n) bool

    def __len__(self) -> int:
        return self.item_ids.shape[0]

    @classmethod
    def stack(cls, inputs: list[ModelInput]) -> "Batch":
        return cls(
            np.stack([x.item_ids for x in inputs]),
            np.array([x.market_id for x in inputs], dtype=np.int64),
            np.stack([x.keep_mask for x in inputs]),
        )

    @property
    def attend_mask(self) -> np.ndarray:
        """Slots visible as attention keys: history plus the candidate."""
        mask = self.keep_mask.copy()
        mask[:, -1] = True
        return mask


def embed_input(tape: Tape, batch: Batch, leaves: dict[str, Tensor]) -> Tensor:
    items = tape.embedding_lookup(leaves["item_emb"], batch.item_ids)  # (B, n, d)
    markets = tape.embedding_lookup(leaves["market_emb"], batch.market_ids[:, None])  # (B, 1, d)
    return tape.add(items, markets)


def _split_heads(tape: Tape, x: Tensor, config: ModelConfig) -> Tensor:
    b, n, _ = x.shape
    x = tape.reshape(x, (b, n, config.n_heads, config.head_dim))
    return tape.transpose(x, (0, 2, 1, 3))


def attention_heads(tape: Tape, t: Tensor, attend_mask: np.ndarray, leaves: dict, prefix: str, config: ModelConfig) -> Tensor:
    """Per-head attention outputs before the output projection, (B, g, n, d/g)."""
    q = _split_heads(tape, tape.matmul(t, leaves[prefix + "w_q"]), config)
    k = _split_heads(tape, tape.matmul(t, leaves[prefix + "w_k"]), config)
    v = _split_heads(tape, tape.matmul(t, leaves[prefix + "w_v"]), config)
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), config.attention_scale)
    weights = tape.softmax_rows(scores, attend_mask[:, None, None, :])
    return tape.matmul(weights, v)


def multi_head_attention(tape: Tape, t: Tensor, attend_mask: np.ndarray, leaves: dict, prefix: str, config: ModelConfig) -> Tensor:
    heads = attention_heads(tape, t, attend_mask, leaves, prefix, config)
    b, _, n, _ = heads.shape
    merged = tape.reshape(tape.transpose(heads, (0, 2, 1, 3)), (b, n, config.d))
    return tape.matmul(merged, leaves[prefix + "w_o"])


def feed_forward(tape: Tape, c: Tensor, leaves: dict, prefix: str) -> Tensor:
    hidden = tape.relu(tape.add(tape.matmul(c, leaves[prefix + "ffn_w1"]), leaves[prefix + "ffn_b1"]))
    return tape.add(tape.matmul(hidden, leaves[prefix + "ffn_w2"]), leaves[prefix + "ffn_b2"])


def transformer_layer(
    tape: Tape,
    t: Tensor,
    attend_mask: np.ndarray,
    leaves: dict,
    layer: int,
    config: ModelConfig,
    rng: Optional[np.random.Generator],
    training: bool,
) -> Tensor:
    p = f"layer{layer}."
    rate = config.dropout_rate
    attn = tape.dropout(multi_head_attention(tape, t, attend_mask, leaves, p, config), rate, rng, training)
    c = tape.layer_norm(tape.add(t, attn), leaves[p + "ln1_gamma"], leaves[p + "ln1_beta"], config.ln_eps)
    ffn = tape.dropout(feed_forward(tape, c, leaves, p), rate, rng, training)
    return tape.layer_norm(tape.add(c, ffn), leaves[p + "ln2_gamma"], leaves[p + "ln2_beta"], config.ln_eps)


def explicit_user_modeling(tape: Tape, t_final: Tensor, keep_mask: np.ndarray) -> Tensor:
    """Mean of the final representations at history slots only."""
    return tape.mean_pool_rows(t_final, keep_mask)


def predict_probability(tape: Tape, t_user: Tensor, t_cand: Tensor, leaves: dict) -> Tensor:
    joint = tape.concat(t_user, t_cand)
    logits = tape.add(tape.matmul(joint, leaves["pred_w"]), leaves["pred_b"])
    return tape.sigmoid(logits)


def encode(
    tape: Tape,
    batch: Batch,
    leaves: dict,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Embedding layer plus the transformer stack: (B, n, d)."""
    t = embed_input(tape, batch, leaves)
    mask = batch.attend_mask
    for layer in range(config.n_layers):
        t = transformer_layer(tape, t, mask, leaves, layer, config, rng, training)
    return t


def forward(
    tape: Tape,
    batch: Batch,
    params: ParameterSet,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    leaves: Optional[dict] = None,
) -> Tensor:
    """Engagement probabilities, shape (B,)."""
    config = params.config
    if batch.item_ids.shape[1] > config.max_len:
        raise ValueError(f"sequence length {batch.item_ids.shape[1]} exceeds max_len={config.max_len}")
    if leaves is None:
        leaves = params.leaves()
    t = encode(tape, batch, leaves, config, rng, training)
    t_user = explicit_user_modeling(tape, t, batch.keep_mask)
    t_cand = tape.select(t, -1, axis=1)
    probs = predict_probability(tape, t_user, t_cand, leaves)
    return tape.reshape(probs, (len(batch),))


def predict(params: ParameterSet, batch: Batch, chunk: int = 4096) -> np.ndarray:
    """Inference-mode probabilities (dropout off, nothing recorded)."""
    tape = Tape(enabled=False)
    leaves = params.leaves()
    out = []
    for start in range(0, len(batch), chunk):
        sub = Batch(
            batch.item_ids[start:start + chunk],
            batch.market_ids[start:start + chunk],
            batch.keep_mask[start:start + chunk],
        )
        out.append(forward(tape, sub, params, leaves=leaves).data)
    return np.concatenate(out) if out else np.zeros(0)
