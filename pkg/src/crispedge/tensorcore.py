"""Dense 4-D tensors with reverse-mode differentiation and SGD-with-momentum.

Every tensor carries a (batch, channels, height, width) shape and float64
values. Operations record their inputs and a gradient closure on the output
tensor; ``backward`` replays them in reverse topological order. Scalars are
(1, 1, 1, 1) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ShapeError

Shape = tuple[int, int, int, int]


def _as_data(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    elif arr.ndim == 2:
        arr = arr.reshape((1, 1) + arr.shape)
    elif arr.ndim == 3:
        arr = arr.reshape((1,) + arr.shape)
    if arr.ndim != 4:
        raise ShapeError(f"tensors are 4-D (batch, channels, height, width); got ndim {arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Immutable dense array node in a compute graph.

    ``data`` must not be mutated once the tensor exists; gradient state
    (``grad``) is the only mutable field and is touched only by ``backward``
    and the optimizer.
    """

    __slots__ = ("data", "grad", "_parents", "_grad_fn")

    def __init__(self, values, _parents: tuple = (), _grad_fn=None):
        self.data = _as_data(values)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), float(value)))

    @classmethod
    def zeros(cls, shape: Shape) -> "Tensor":
        return cls(np.zeros(shape))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def square(self) -> "Tensor":
        return square(self)

    def reciprocal(self) -> "Tensor":
        return reciprocal(self)

    def clip(self, lo: float, hi: float) -> "Tensor":
        return clip(self, lo, hi)

    def sum(self) -> "Tensor":
        return global_sum(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable tensor with persistent gradient and momentum velocity."""

    __slots__ = ("velocity", "requires_grad")

    def __init__(self, values, requires_grad: bool = True):
        super().__init__(values)
        self.data = self.data.copy()  # updates happen in place; never share a buffer
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.requires_grad = requires_grad

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class ComputeGraph:
    """Topologically ordered record of the operations below a root tensor."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` for every node below ``loss``.

    Calling twice without zeroing gradients accumulates both passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a 1-element loss tensor, shape is {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    # interior grads are scratch state: clear them so every call contributes
    # exactly one d(loss)/d(leaf) to each leaf
    for node in graph.nodes:
        if node._grad_fn is not None:
            node.grad = None
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from ``shape``."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcastable(a: Shape, b: Shape) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# pointwise operations


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a tensor (same or broadcastable shape),
    scalar, or constant array."""
    if isinstance(b, Tensor):
        if a.shape != b.shape and not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"add shapes {a.shape} and {b.shape} do not align")
        out = Tensor(a.data + b.data, _parents=(a, b))

        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        out._grad_fn = grad_fn
        return out

    const = np.asarray(b, dtype=np.float64)
    out = Tensor(a.data + const, _parents=(a,))
    out._grad_fn = lambda g: _accumulate(a, _unbroadcast(g, a.shape))
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a tensor, scalar, or constant array."""
    if isinstance(b, Tensor):
        if a.shape != b.shape and not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"mul shapes {a.shape} and {b.shape} do not align")
        out = Tensor(a.data * b.data, _parents=(a, b))

        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

        out._grad_fn = grad_fn
        return out

    const = np.asarray(b, dtype=np.float64)
    out = Tensor(a.data * const, _parents=(a,))
    out._grad_fn = lambda g: _accumulate(a, _unbroadcast(g * const, a.shape))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))
    mask = x.data > 0.0
    out._grad_fn = lambda g: _accumulate(x, g * mask)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s, _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, g * s * (1.0 - s))
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e, _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, g * e)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError(f"log needs strictly positive input, min is {x.data.min()}")
    out = Tensor(np.log(x.data), _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, g / x.data)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, g * 2.0 * x.data)
    return out


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0.0):
        raise DomainError("reciprocal of zero")
    inv = 1.0 / x.data
    out = Tensor(inv, _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, -g * inv * inv)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient is zero where the clamp binds."""
    out = Tensor(np.clip(x.data, lo, hi), _parents=(x,))
    mask = (x.data >= lo) & (x.data <= hi)
    out._grad_fn = lambda g: _accumulate(x, g * mask)
    return out


def global_sum(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()), _parents=(x,))
    out._grad_fn = lambda g: _accumulate(x, np.broadcast_to(g, x.shape))
    return out


# ---------------------------------------------------------------------------
# spatial operations


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``kernel`` (O,C,KH,KW)."""
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be non-negative, got {padding}")
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"input has {c} channels, kernel expects {ck}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {kh}x{kw} with stride {stride}, padding {padding} "
                         f"gives non-positive output size for {h}x{w} input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    y = np.einsum("bcijhw,ocij->bohw", view, kernel.data, optimize=True)
    out = Tensor(y, _parents=(x, kernel))

    def grad_fn(g: np.ndarray) -> None:
        dk = np.einsum("bcijhw,bohw->ocij", view, g, optimize=True)
        _accumulate(kernel, dk)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                    "bohw,oc->bchw", g, kernel.data[:, :, i, j], optimize=True)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        _accumulate(x, dxp)

    out._grad_fn = grad_fn
    return out


def resize_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear interpolation matrix with half-pixel centers.

    Source coordinate of target index t is (t + 0.5) * src/dst - 0.5, clamped
    to the valid range. Rows sum to 1; when dst == src the matrix is exactly
    the identity.
    """
    w = np.zeros((dst, src))
    scale = src / dst
    for t in range(dst):
        pos = min(max((t + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(np.floor(pos))
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        w[t, i0] += 1.0 - frac
        w[t, i1] += frac
    return w


def resize_array(data: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes of a plain array."""
    h, w = data.shape[-2], data.shape[-1]
    if target_h == h and target_w == w:
        return data.copy()
    wh = resize_weights(h, target_h)
    ww = resize_weights(w, target_w)
    tmp = np.einsum("th,...hw->...tw", wh, data, optimize=True)
    return np.einsum("uw,...tw->...tu", ww, tmp, optimize=True)


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear interpolation of the spatial axes to (target_h, target_w)."""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be at least 1x1, got {target_h}x{target_w}")
    _, _, h, w = x.shape
    if target_h == h and target_w == w:
        out = Tensor(x.data, _parents=(x,))
        out._grad_fn = lambda g: _accumulate(x, g)
        return out
    wh = resize_weights(h, target_h)
    ww = resize_weights(w, target_w)
    y = np.einsum("uw,th,bchw->bctu", ww, wh, x.data, optimize=True)
    out = Tensor(y, _parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, np.einsum("uw,th,bctu->bchw", ww, wh, g, optimize=True))

    out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD hyperparameters; ``lr_decay`` is the factor applied at schedule
    milestones by the training loop."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: list[Parameter], config: OptimizerConfig) -> None:
    """Classical momentum update, in place; gradients are zeroed afterwards.

    v <- momentum * v + grad + weight_decay * p
    p <- p - learning_rate * v
    """
    for p in params:
        if not p.requires_grad:
            p.zero_grad()
            continue
        p.velocity[...] = config.momentum * p.velocity + p.grad + config.weight_decay * p.data
        p.data[...] = p.data - config.learning_rate * p.velocity
        p.zero_grad()


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()
