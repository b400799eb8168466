"""Dense float64 tensors with a reverse-mode tape.

Values are plain numpy arrays.  A :class:`Tensor` pairs a value with the
:class:`Tape` node that produced it; tensors without a tape are constants and
never receive gradients.  Every op accepts tensors or raw arrays, and records a
node only when at least one input lives on a tape, so the same forward code
serves training (parameters watched), attacks (only the input watched) and
inference (nothing watched).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "affine",
    "conv2d",
    "relu",
    "maxpool2x2",
    "flatten",
    "softmax_cross_entropy",
    "add",
    "mul",
    "tensor_sum",
    "input_gradient",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"


ArrayLike = Union[Tensor, np.ndarray, float, Sequence]


class Tape:
    """Append-only record of the ops applied to watched tensors.

    Nodes are appended in execution order, so parents always precede their
    children and a single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.backwards: list[Optional[Backward]] = []
        self.shapes: list[tuple] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def watch(self, value) -> Tensor:
        """Register a leaf (an input or a parameter) and return its handle."""
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=np.float64)
        return self._append("leaf", data, (), None)

    def _append(self, kind, data, parents, backward) -> Tensor:
        node = len(self.kinds)
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.backwards.append(backward)
        self.shapes.append(np.shape(data))
        return Tensor(data, self, node)

    def backward(self, loss: Tensor) -> list[Optional[np.ndarray]]:
        """Gradient slots for every node up to ``loss``; ``None`` where unreached."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[Optional[np.ndarray]] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones(self.shapes[loss.node])
        for i in range(loss.node, -1, -1):
            g = grads[i]
            fn = self.backwards[i]
            if g is None or fn is None:
                continue
            for parent, pg in zip(self.parents[i], fn(g)):
                if parent < 0 or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return grads

    def gradient(self, loss: Tensor, wrt):
        """Gradients of ``loss`` w.r.t. one tensor or a sequence of tensors."""
        single = isinstance(wrt, Tensor)
        targets = [wrt] if single else list(wrt)
        slots = self.backward(loss)
        out = []
        for t in targets:
            if t.tape is not self:
                raise ValueError("target tensor is not on this tape")
            g = slots[t.node] if t.node < len(slots) else None
            out.append(np.zeros(t.shape) if g is None else g)
        return out[0] if single else out


def _split(*args: ArrayLike):
    tape = None
    values = []
    ids = []
    for a in args:
        if isinstance(a, Tensor):
            values.append(a.data)
            if a.tape is not None:
                if tape is None:
                    tape = a.tape
                elif a.tape is not tape:
                    raise ValueError("operands recorded on different tapes")
                ids.append(a.node)
            else:
                ids.append(-1)
        else:
            values.append(np.asarray(a, dtype=np.float64))
            ids.append(-1)
    return tape, values, ids


def _emit(tape, kind, data, ids, backward) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape._append(kind, data, ids, backward)


def affine(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (B, I) and ``weight`` (I, O)."""
    tape, (xv, wv, bv), ids = _split(x, weight, bias)
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
        raise DimensionError(f"affine expects 2-D input/weight and 1-D bias, got {xv.shape}, {wv.shape}, {bv.shape}")
    if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise DimensionError(f"affine shapes do not conform: {xv.shape} @ {wv.shape} + {bv.shape}")
    out = xv @ wv + bv

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _emit(tape, "affine", out, ids, backward)


def _im2col(xpad: np.ndarray, k: int) -> np.ndarray:
    """Columns laid out as (C, K, K, B, H', W'); each offset is one strided copy."""
    b, c, hp, wp = xpad.shape
    ho, wo = hp - k + 1, wp - k + 1
    cols = np.empty((c, k, k, b, ho, wo))
    xt = xpad.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols


def conv2d(x: ArrayLike, kernel: ArrayLike, bias: ArrayLike, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (B, C, H, W), ``kernel`` is (F, C, K, K); the output is
    (B, F, H + 2*padding - K + 1, W + 2*padding - K + 1).
    """
    tape, (xv, kv, bv), ids = _split(x, kernel, bias)
    if xv.ndim != 4 or kv.ndim != 4 or bv.ndim != 1:
        raise DimensionError(f"conv2d expects 4-D input/kernel and 1-D bias, got {xv.shape}, {kv.shape}, {bv.shape}")
    f, c, k, kw = kv.shape
    if k != kw:
        raise DimensionError(f"conv2d kernel must be square, got {k}x{kw}")
    if xv.shape[1] != c or bv.shape[0] != f:
        raise DimensionError(f"conv2d channel mismatch: input {xv.shape}, kernel {kv.shape}, bias {bv.shape}")
    if padding < 0:
        raise DimensionError("padding must be non-negative")
    b, _, h, w = xv.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho, wo = hp - k + 1, wp - k + 1
    xpad = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xpad, k).reshape(c * k * k, b * ho * wo)
    kmat = kv.reshape(f, c * k * k)
    out = (kmat @ cols).reshape(f, b, ho, wo).transpose(1, 0, 2, 3) + bv[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gk = gb = None
        gmat = g.transpose(1, 0, 2, 3).reshape(f, b * ho * wo)
        if ids[0] >= 0:
            dcols = (kmat.T @ gmat).reshape(c, k, k, b, ho, wo)
            dpad = np.zeros((c, b, hp, wp))
            for i in range(k):
                for j in range(k):
                    dpad[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
            gx = np.ascontiguousarray(dpad[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        if ids[1] >= 0:
            gk = (gmat @ cols.T).reshape(kv.shape)
        if ids[2] >= 0:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _emit(tape, "conv2d", out, ids, backward)


def relu(x: ArrayLike) -> Tensor:
    tape, (xv,), ids = _split(x)
    mask = xv > 0
    out = np.where(mask, xv, 0.0)
    return _emit(tape, "relu", out, ids, lambda g: (g * mask,))


def maxpool2x2(x: ArrayLike) -> Tensor:
    """Non-overlapping 2x2 max; ties go to the first cell in row-major order."""
    tape, (xv,), ids = _split(x)
    if xv.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects (B, C, H, W), got {xv.shape}")
    b, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extent, got {h}x{w}")
    cells = xv.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gc = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(gc, idx[..., None], g[..., None], axis=-1)
        gx = gc.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _emit(tape, "maxpool2x2", out, ids, backward)


def flatten(x: ArrayLike) -> Tensor:
    tape, (xv,), ids = _split(x)
    shape = xv.shape
    out = xv.reshape(shape[0], -1)
    return _emit(tape, "flatten", out, ids, lambda g: (g.reshape(shape),))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    tape, (av, bv), ids = _split(a, b)
    if av.shape != bv.shape:
        raise DimensionError(f"add needs equal shapes, got {av.shape} and {bv.shape}")
    return _emit(tape, "add", av + bv, ids, lambda g: (g, g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    tape, (av, bv), ids = _split(a, b)
    if av.shape != bv.shape:
        raise DimensionError(f"mul needs equal shapes, got {av.shape} and {bv.shape}")
    return _emit(tape, "mul", av * bv, ids, lambda g: (g * bv, g * av))


def tensor_sum(x: ArrayLike, scale: float = 1.0) -> Tensor:
    """``scale * sum(x)`` as a scalar tensor."""
    tape, (xv,), ids = _split(x)
    shape = xv.shape
    out = np.asarray(scale * xv.sum())
    return _emit(tape, "sum", out, ids, lambda g: (np.full(shape, scale * float(g)),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: ArrayLike, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``.

    ``reduction`` is ``"mean"`` (the training loss), ``"sum"`` (so each
    example's input gradient is its own loss gradient) or ``"none"`` (per
    example losses, never recorded on a tape).
    """
    tape, (zv,), ids = _split(logits)
    labels = np.asarray(labels)
    if zv.ndim != 2:
        raise DimensionError(f"logits must be (B, C), got {zv.shape}")
    if labels.shape != (zv.shape[0],):
        raise DimensionError(f"labels must have shape ({zv.shape[0]},), got {labels.shape}")
    n, c = zv.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    logp = log_softmax(zv)
    per_example = -logp[np.arange(n), labels]
    if reduction == "none":
        return Tensor(per_example)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per_example.sum() * scale)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (scale * float(g)),)

    return _emit(tape, "softmax_cross_entropy", out, ids, backward)


def input_gradient(tape: Tape, loss: Tensor, x: Tensor) -> np.ndarray:
    """``d loss / d x``; zeros when ``x`` does not feed ``loss``."""
    return tape.gradient(loss, x)
