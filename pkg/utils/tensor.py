"""
Tensor and Tape
Dense real tensors plus a Wengert-list tape for reverse-mode gradients
"""

from contextlib import contextmanager
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

# Storage dtype stack; float32 by default, float64 in gradient-test mode
_DTYPE_STACK: List[type] = [np.float32]
_ACTIVE_TAPES: List["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op"""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shape_text = ", ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = shapes


class NumericalFailure(RuntimeError):
    """A recorded op produced NaN or Inf"""

    def __init__(self, op: str, index: int, detail: str = ""):
        super().__init__(f"non-finite value first produced by '{op}' (tape node {index}){': ' + detail if detail else ''}")
        self.op = op
        self.index = index


def default_dtype() -> type:
    return _DTYPE_STACK[-1]


@contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype (float64 for gradient checks)"""
    _DTYPE_STACK.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without copying or casting"""
        obj = cls.__new__(cls)
        obj.data = data
        obj.requires_grad = requires_grad
        obj.node_id = None
        obj._tape = None
        return obj

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the op bodies live in utils.functional
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __rtruediv__(self, other):
        return F.div(other, self)

    def __neg__(self):
        return F.neg(self)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.mean(self, axis=axis, keepdims=keepdims)


class Node:
    __slots__ = ("kind", "inputs", "output", "backward", "value")

    def __init__(self, kind: str, inputs: Tuple[Optional[int], ...], output: int,
                 backward: Callable, value: np.ndarray):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.value = value


class Tape:
    """Append-only record of one forward pass; discarded after backward"""

    def __init__(self, check_finite: bool = False):
        self.nodes: List[Node] = []
        self.gradients: Dict[int, Tensor] = {}
        self.check_finite = check_finite
        self._leaves: Dict[int, Tensor] = {}
        self._leaf_ids: Dict[int, int] = {}
        self._next_id = 0

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def _new_id(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id

    def _input_id(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.node_id
        if not tensor.requires_grad:
            return None
        leaf_id = self._leaf_ids.get(id(tensor))
        if leaf_id is None:
            leaf_id = self._new_id()
            self._leaf_ids[id(tensor)] = leaf_id
            self._leaves[leaf_id] = tensor
        return leaf_id

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray,
               backward: Callable) -> Tensor:
        ids = tuple(self._input_id(t) for t in inputs)
        if all(i is None for i in ids):
            return Tensor.wrap(value)
        node_id = self._new_id()
        self.nodes.append(Node(kind, ids, node_id, backward, value))
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalFailure(kind, len(self.nodes) - 1)
        out = Tensor.wrap(value, requires_grad=True)
        out.node_id = node_id
        out._tape = self
        return out

    def first_nonfinite(self) -> Optional[Tuple[int, str]]:
        """Index and kind of the first recorded op whose output is not finite"""
        for index, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                return index, node.kind
        return None

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        if loss.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("backward: loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(node.output, None)
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for input_id, grad in zip(node.inputs, input_grads):
                if input_id is None or grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        self.gradients = {
            leaf_id: Tensor.wrap(np.asarray(grad, dtype=self._leaves[leaf_id].data.dtype))
            for leaf_id, grad in grads.items() if leaf_id in self._leaves
        }
        return self.gradients

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        leaf_id = self._leaf_ids.get(id(tensor))
        if leaf_id is None or leaf_id not in self.gradients:
            return None
        return self.gradients[leaf_id].data


def record(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Callable) -> Tensor:
    """Record an op on the active tape when any input needs a gradient"""
    value = np.asarray(value)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor.wrap(value)
    return tape.record(kind, inputs, value, backward)


class Parameter:
    """Named weight; frozen parameters never enter the tape as leaves"""

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.frozen = frozen
        self.tensor = Tensor(data, requires_grad=not frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False

    def unfreeze(self):
        self.frozen = False
        self.tensor.requires_grad = True

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name}, shape={self.shape}, {state})"


def backward(tape: Tape, loss: Tensor,
             parameters: Optional[Mapping[str, Parameter]] = None) -> Dict[str, np.ndarray]:
    """Run the reverse sweep and return gradients keyed by parameter name"""
    tape.backward(loss)
    if parameters is None:
        return {str(leaf_id): grad.data for leaf_id, grad in tape.gradients.items()}
    result = {}
    for name, param in parameters.items():
        if param.frozen:
            continue
        grad = tape.grad(param.tensor)
        if grad is not None:
            result[name] = grad
    return result


from utils import functional as F  # noqa: E402
