"""Dense float64 tensors and an explicit reverse-mode gradient tape.

Every differentiable operation is a method of :class:`Tape`. A tape is created
for one forward pass, records each operation whose inputs require gradients,
and is consumed by :meth:`Tape.backward`. A tape built with ``record=False``
evaluates the same expressions without keeping any graph, which is what
evaluation and retrieval use.

Operations act on the trailing axes and broadcast over leading (batch) axes the
way numpy does, so a whole matrix of image-text pairs can be pushed through
one expression.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError

EPS = 1e-12

_tape_ids = itertools.count(1)


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs are fresh arrays; skip the defensive copy
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.tape_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def assign(self, values) -> None:
        """Replace the values of a leaf tensor (optimizer updates, checkpoint loads)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} into tensor of shape {self.shape}")
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self.id = next(_tape_ids)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(np.asarray(data), needs)
        if needs:
            out.tape_id = self.id
            self._nodes.append((out, inputs, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor the scalar ``loss`` depends on.

        Gradients of leaf tensors (parameters) accumulate across calls; call
        ``zero_grad`` between optimizer steps. The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            self._nodes.clear()
            return
        if loss.tape_id is not None and loss.tape_id != self.id:
            raise ContractError("loss was recorded on a different tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        if loss.tape_id is None:
            leaves[id(loss)] = (loss, grads.pop(id(loss)))

        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.tape_id == self.id:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    prev_leaf = leaves.get(key)
                    leaves[key] = (inp, gi if prev_leaf is None else prev_leaf[1] + gi)

        for tensor, g in leaves.values():
            g = np.array(g, dtype=np.float64).reshape(tensor.shape)
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self._nodes.clear()

    # -- constructors -----------------------------------------------------

    @staticmethod
    def constant(data) -> Tensor:
        return Tensor(data)

    # -- arithmetic -------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        return self._emit(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        return self._emit(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def mul(self, a, b) -> Tensor:
        """Hadamard product with numpy broadcasting."""
        a, b = _as_tensor(a), _as_tensor(b)

        def back(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return self._emit(a.data * b.data, (a, b), back)

    def div(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        out = a.data / b.data

        def back(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return self._emit(out, (a, b), back)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit(c * x.data, (x,), lambda g: (c * g,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix product over the last two axes; leading axes broadcast."""
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul batch axes do not broadcast: {a.shape} and {b.shape}") from None

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return self._emit(a.data @ b.data, (a, b), back)

    # -- elementwise nonlinearities --------------------------------------

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.data)
        return self._emit(y, (x,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, x: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return self._emit(y, (x,), lambda g: (g * y * (1.0 - y),))

    def exp(self, x: Tensor) -> Tensor:
        y = np.exp(x.data)
        return self._emit(y, (x,), lambda g: (g * y,))

    def softplus(self, x: Tensor) -> Tensor:
        d = x.data
        y = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0)
        return self._emit(y, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * d)),))

    def relu(self, x: Tensor) -> Tensor:
        """``max(x, 0)``; the subgradient at 0 is taken as 0."""
        pos = x.data > 0
        return self._emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))

    # -- reductions and shape plumbing ------------------------------------

    def sum(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape),)

        return self._emit(np.asarray(out), (x,), back)

    def mean(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = x.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([x.shape[a] for a in axes]))
        return self.scale(self.sum(x, axis=axis, keepdims=keepdims), 1.0 / count)

    def mean_rows(self, x: Tensor) -> Tensor:
        """Average over the first axis (rows) of a matrix."""
        return self.mean(x, axis=0)

    def reshape(self, x: Tensor, shape) -> Tensor:
        return self._emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, x: Tensor, axes=None) -> Tensor:
        if axes is None:
            axes = tuple(range(x.ndim))[::-1]
        inverse = tuple(np.argsort(axes))
        return self._emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))

    def swap_last(self, x: Tensor) -> Tensor:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(x, tuple(axes))

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        xs = [_as_tensor(x) for x in xs]
        sizes = [x.shape[axis] for x in xs]
        bounds = np.cumsum(sizes)[:-1]
        return self._emit(
            np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
            lambda g: tuple(np.split(g, bounds, axis=axis)),
        )

    def stack(self, xs: Sequence[Tensor], axis: int = 0) -> Tensor:
        xs = [_as_tensor(x) for x in xs]
        n = len(xs)
        return self._emit(
            np.stack([x.data for x in xs], axis=axis), tuple(xs),
            lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        )

    def index(self, x: Tensor, idx) -> Tensor:
        """``x[idx]`` for basic or integer-array indices; repeated indices accumulate."""
        out = np.array(x.data[idx])

        def back(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            return (z,)

        return self._emit(out, (x,), back)

    def slice_blocks(self, x: Tensor, t: int) -> list[Tensor]:
        """Split the last axis into ``t`` contiguous blocks of equal width."""
        d = x.shape[-1]
        if t < 1 or d % t:
            raise ConfigurationError(f"block count {t} does not divide dimension {d}")
        w = d // t
        return [self.index(x, (Ellipsis, slice(i * w, (i + 1) * w))) for i in range(t)]

    # -- normalized maps --------------------------------------------------

    def softmax_rows(self, x: Tensor, scale: float = 1.0, mask=None) -> Tensor:
        """Softmax of ``scale * x`` along the last axis.

        ``mask`` (boolean, broadcastable to ``x``) excludes entries; excluded
        entries get probability exactly 0. A fully masked row yields zeros.
        """
        if not scale > 0:
            raise ContractError(f"softmax scale must be positive, got {scale}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("softmax_rows received non-finite input")
        z = scale * x.data
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
            z = np.where(mask, z, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.exp(z - zmax)
        total = e.sum(axis=-1, keepdims=True)
        y = e / np.where(total > 0, total, 1.0)

        def back(g):
            return (scale * y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit(y, (x,), back)

    def cosine(self, a: Tensor, b: Tensor) -> Tensor:
        """Cosine similarity along the last axis.

        If either vector has norm below ``EPS`` the result is 0 and no
        gradient flows through that entry.
        """
        if a.shape[-1] != b.shape[-1]:
            raise DimensionError(f"cosine shape mismatch: {a.shape} and {b.shape}")
        ad, bd = a.data, b.data
        na = np.sqrt((ad * ad).sum(axis=-1))
        nb = np.sqrt((bd * bd).sum(axis=-1))
        dot = (ad * bd).sum(axis=-1)
        valid = (na >= EPS) & (nb >= EPS)
        na_s = np.where(valid, na, 1.0)
        nb_s = np.where(valid, nb, 1.0)
        y = np.where(valid, dot / (na_s * nb_s), 0.0)

        def back(g):
            gv = np.where(valid, g, 0.0)[..., None]
            inv = (1.0 / (na_s * nb_s))[..., None]
            yy = y[..., None]
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(gv * (bd * inv - yy * ad / (na_s * na_s)[..., None]), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(gv * (ad * inv - yy * bd / (nb_s * nb_s)[..., None]), b.shape)
            return ga, gb

        return self._emit(y, (a, b), back)

    def l2_normalize_rows(self, x: Tensor) -> Tensor:
        """Scale each vector along the last axis to unit L2 norm; zero vectors stay zero."""
        n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
        valid = n >= EPS
        n_s = np.where(valid, n, 1.0)
        y = np.where(valid, x.data / n_s, 0.0)

        def back(g):
            gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / n_s
            return (np.where(valid, gx, 0.0),)

        return self._emit(y, (x,), back)
