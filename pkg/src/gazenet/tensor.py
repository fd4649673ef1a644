"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of a tape nothing is recorded, which is how inference runs without holding
intermediate activations.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPES: List["Tape"] = []


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the implementations live in gazenet.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`.

    Recording order is execution order, so every node's inputs were produced
    by earlier nodes (or are leaves) and a single reverse sweep is a valid
    topological traversal.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append(Node(op, out, inputs, backward))

    def backward(self, loss: Tensor, params: Optional["ParameterStore"] = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Parameters of ``params`` that the loss does not depend on get a zero
        gradient so the optimizer can treat every parameter uniformly.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    leaves[key] = inp
        for key, g in grads.items():
            t = leaves.get(key, loss if key == id(loss) else None)
            if t is None or key in produced:
                continue
            if g.shape != t.shape:
                raise RuntimeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
        if params is not None:
            for _, p in params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(loss: Tensor, tape: Tape, params: Optional["ParameterStore"] = None) -> None:
    tape.backward(loss, params)


class ParameterStore:
    """Named trainable tensors plus non-trainable buffers (normalization statistics).

    Iteration is lexicographic by name so anything derived from the store
    (optimizer state, weight files, parameter counts) is order-stable.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def add(self, name: str, value, dtype=None) -> Tensor:
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return sorted(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self._params.items() if n.startswith(prefix))

    def state(self) -> Dict[str, np.ndarray]:
        """All tensors (parameters and buffers) by name, as plain arrays."""
        out = {n: p.data for n, p in self._params.items()}
        out.update(self.buffers)
        return dict(sorted(out.items()))

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self._params)
        missing = expected - set(state)
        if strict and missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in self._params:
                p = self._params[name]
                if p.shape != tuple(arr.shape):
                    raise ValueError(f"shape mismatch for {name}: store {p.shape}, file {tuple(arr.shape)}")
                p.data = np.array(arr, dtype=p.dtype)
            elif is_buffer_name(name):
                self.buffers[name] = np.array(arr, dtype=np.float32)
            elif strict:
                raise KeyError(f"unexpected tensor {name!r}")

    def astype(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)


BUFFER_SUFFIXES = ("/running_mean", "/running_var")


def is_buffer_name(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)
