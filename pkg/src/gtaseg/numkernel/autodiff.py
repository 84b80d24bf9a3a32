"""Tape-based reverse-mode differentiation over float32 numpy arrays."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError


class Tensor:
    """A float32 array, optionally recorded on a :class:`GradTape`.

    ``data`` is always a C-contiguous float32 ndarray, so its flat buffer is
    the row-major layout and ``data.size == prod(shape)``.
    """

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data, tape: GradTape | None = None, index: int = -1, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class GradTape:
    """Records differentiable operations in execution order.

    Execution order is a valid topological order, so :meth:`backward` walks the
    record in reverse and each node is visited exactly once. A tape can be
    consumed only once.
    """

    def __init__(self):
        self._nodes: list[_Node | None] = []
        self._watched: dict[str, Tensor] = {}
        self._consumed = False

    def watch(self, name: str, array) -> Tensor:
        if name in self._watched:
            raise UsageError(f"parameter {name!r} already watched on this tape")
        t = Tensor(array, self, len(self._nodes), name)
        self._nodes.append(None)
        self._watched[name] = t
        return t

    def watch_store(self, params) -> dict[str, Tensor]:
        return {p.name: self.watch(p.name, p.data) for p in params}

    def record(self, value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        """Register an op output. ``vjp(grad_out)`` returns one gradient per parent
        (``None`` for parents that need none)."""
        self._check_open()
        t = Tensor(value, self, len(self._nodes))
        self._nodes.append(_Node(tuple(parents), vjp))
        return t

    def _check_open(self):
        if self._consumed:
            raise UsageError("tape already consumed by backward()")

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by watched parameter name.

        Parameters the loss does not depend on get exact zeros.
        """
        self._check_open()
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
        for i in range(loss.index, -1, -1):
            g = grads.get(i)
            node = self._nodes[i]
            if g is None or node is None:
                continue
            if i != loss.index:
                del grads[i]  # free intermediate buffers early
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        out = {}
        for name, t in self._watched.items():
            g = grads.get(t.index)
            out[name] = np.zeros_like(t.data) if g is None else g.astype(np.float32, copy=False)
        return out


def constant(array) -> Tensor:
    return Tensor(array)


def tape_of(*tensors: Tensor) -> GradTape | None:
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise UsageError("operands recorded on different tapes")
    return next(iter(tapes.values()), None)
