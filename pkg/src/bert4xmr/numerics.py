"""Dense float64 tensors and a reverse-mode tape over a small, closed op set.

Every op is a method of :class:`Tape`.  Ops accept leading batch dimensions
so a whole mini-batch goes through one tape; the 2-D forms are the special
case with no batch axes.

    tape = Tape()
    w = Tensor(np.zeros((3, 1)), name="w")
    y = tape.sigmoid(tape.matmul(x, w))
    grads = tape.backward(tape.sum(y))
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

MASK_FILL = -1e9


class ProtocolError(RuntimeError):
    """An operation was called outside its contract (e.g. empty softmax row)."""


class Tensor:
    """A float64 array plus an accumulated gradient.

    Tensors with a ``name`` are treated as learnable leaves: ``Tape.backward``
    reports their gradients under that name.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over axes that were broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records executed ops and replays their adjoints in reverse order.

    A disabled tape (``Tape(enabled=False)``) runs the same forward code
    without recording anything, which is what evaluation uses.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        if self.enabled:
            if self._consumed:
                raise ProtocolError("tape already replayed; record a new forward pass")
            self._records.append((out, tuple(inputs), backward))
        return out

    # ------------------------------------------------------------------ ops

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``a @ b`` over the last two axes; leading axes broadcast."""
        if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
        out = Tensor(np.matmul(a.data, b.data))

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if b.data.ndim == 2:
                # shared weight: fold batch axes into one GEMM
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return _unbroadcast(ga, a.shape), gb

        return self._record(out, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may be a trailing-axis bias (e.g. shape ``(d,)``)."""
        out = Tensor(a.data + b.data)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record(out, (a, b), backward)

    def scale(self, x: Tensor, factor: float) -> Tensor:
        out = Tensor(x.data * factor)
        return self._record(out, (x,), lambda g: (g * factor,))

    def sum(self, x: Tensor) -> Tensor:
        out = Tensor(np.array([x.data.sum()]))
        return self._record(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape),))

    def reshape(self, x: Tensor, shape: tuple) -> Tensor:
        out = Tensor(x.data.reshape(shape))
        return self._record(out, (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, x: Tensor, axes: tuple) -> Tensor:
        inverse = tuple(np.argsort(axes))
        out = Tensor(np.transpose(x.data, axes))
        return self._record(out, (x,), lambda g: (np.transpose(g, inverse),))

    def softmax_rows(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Softmax over the last axis.

        ``mask`` is a boolean array broadcastable to ``x`` with True marking
        positions that may receive weight.  Masked positions come out as
        exactly zero.
        """
        logits = x.data
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
            if not mask.any(axis=-1).all():
                raise ProtocolError("softmax row has no unmasked position")
            logits = np.where(mask, logits, logits + MASK_FILL)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        if mask is not None:
            e = np.where(mask, e, 0.0)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(y)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._record(out, (x,), backward)

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
        """Normalize the last axis with the population variance, then scale and shift."""
        mean = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out = Tensor(xhat * gamma.data + beta.data)

        def backward(g):
            d = x.shape[-1]
            gxhat = g * gamma.data
            gx = inv_std / d * (
                d * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
            ggamma = _unbroadcast(g * xhat, gamma.shape)
            gbeta = _unbroadcast(g, beta.shape)
            return gx, ggamma, gbeta

        return self._record(out, (x, gamma, beta), backward)

    def relu(self, x: Tensor) -> Tensor:
        active = x.data > 0
        out = Tensor(np.where(active, x.data, 0.0))
        return self._record(out, (x,), lambda g: (g * active,))

    def sigmoid(self, x: Tensor) -> Tensor:
        # split by sign so exp never overflows
        z = x.data
        ez = np.exp(-np.abs(z))
        y = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
        out = Tensor(y)
        return self._record(out, (x,), lambda g: (g * y * (1.0 - y),))

    def dropout(
        self,
        x: Tensor,
        rate: float,
        rng: Optional[np.random.Generator],
        training: bool,
    ) -> Tensor:
        """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return x
        if rng is None:
            raise ProtocolError("training-mode dropout needs a seeded generator")
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        out = Tensor(x.data * keep)
        return self._record(out, (x,), lambda g: (g * keep,))

    def embedding_lookup(self, table: Tensor, ids) -> Tensor:
        """Gather rows of ``table``; ``ids`` may have any shape."""
        ids = np.asarray(ids, dtype=np.int64)
        n_rows = table.shape[0]
        if ids.size:
            bad = ids[(ids < 0) | (ids >= n_rows)]
            if bad.size:
                raise IndexError(f"embedding id {int(bad[0])} out of range for {n_rows} rows")
        out = Tensor(table.data[ids].reshape(ids.shape + table.shape[1:]))

        def backward(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
            return (gt,)

        return self._record(out, (table,), backward)

    def mean_pool_rows(self, x: Tensor, keep) -> Tensor:
        """Mean of the rows of ``x[..., n, d]`` where ``keep[..., n]`` is True."""
        keep = np.asarray(keep, dtype=bool)
        counts = keep.sum(axis=-1)
        if np.any(counts == 0):
            raise ProtocolError("mean pooling over zero kept rows")
        weights = keep / counts[..., None]
        out = Tensor((x.data * weights[..., None]).sum(axis=-2))
        return self._record(out, (x,), lambda g: (g[..., None, :] * weights[..., None],))

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        """Join along the last axis, ``a`` first."""
        split = a.shape[-1]
        out = Tensor(np.concatenate([a.data, b.data], axis=-1))
        return self._record(out, (a, b), lambda g: (g[..., :split], g[..., split:]))

    def select(self, x: Tensor, index: int, axis: int) -> Tensor:
        """Take one slice along ``axis`` (the axis is dropped)."""
        out = Tensor(np.take(x.data, index, axis=axis))

        def backward(g):
            gx = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = index
            gx[tuple(sl)] = g
            return (gx,)

        return self._record(out, (x,), backward)

    # ------------------------------------------------------------- backward

    def backward(
        self,
        loss: Tensor,
        loss_grad: Optional[np.ndarray] = None,
        params: Optional[dict[str, Tensor]] = None,
    ) -> dict[str, np.ndarray]:
        """Replay the tape in reverse and return gradients of named leaves.

        If ``params`` is given, every entry appears in the result; those the
        forward pass never touched get zero gradients.
        """
        if not self.enabled:
            raise ProtocolError("cannot differentiate through a disabled tape")
        if self._consumed:
            raise ProtocolError("backward already run on this tape")
        self._consumed = True

        seed = np.ones_like(loss.data) if loss_grad is None else np.asarray(loss_grad, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ValueError(f"loss_grad shape {seed.shape} does not match loss {loss.shape}")
        loss._accumulate(seed)

        leaves: dict[str, Tensor] = {}
        for out, inputs, fn in reversed(self._records):
            if out.grad is None:
                continue
            for tensor, g in zip(inputs, fn(out.grad)):
                if g is None:
                    continue
                tensor._accumulate(g)
                if tensor.name is not None:
                    leaves[tensor.name] = tensor
            # intermediate gradients are dead once propagated
            if out.name is None:
                out.grad = None

        grads = {name: t.grad for name, t in leaves.items()}
        if params is not None:
            for name, t in params.items():
                if name not in grads:
                    grads[name] = np.zeros_like(t.data)
        return grads
