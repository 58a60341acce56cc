"""Dense float64 tensors with reverse-mode automatic differentiation.

Provides exactly the primitives the two neural models need (matmul, add,
concat, relu, sigmoid, row softmax, layer norm, scalar scale, transpose,
reductions, MSE), plus the Adam optimizer and a shared epoch-level
convergence rule.

Every op validates that its output is finite; NaN/Inf anywhere is treated
as an error state, not a value.  Graph nodes are immutable once created;
the op recording order is a topological order of the graph, so backward
simply visits reachable nodes by descending creation id.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "matmul",
    "transpose",
    "add",
    "concat",
    "relu",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "scale",
    "sum_all",
    "mse",
    "backward",
    "Adam",
    "glorot_uniform",
    "ConvergenceRule",
]

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "catseq_grad_enabled", default=True
)
_NODE_IDS = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """A dense float64 array node in the computation graph.

    Data is immutable by convention once the node participates in a graph;
    only the optimizer rewrites leaf ``data`` between training steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_NODE_IDS)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node for an op output, wiring the backward closure."""
    if not np.all(np.isfinite(out_data)):
        raise ValueError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node_id = next(_NODE_IDS)
    out.op = op
    out._done = False
    track = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched on leading axes with numpy semantics."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul requires 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_sum_to_shape(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_sum_to_shape(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _record("matmul", out_data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ValueError("transpose requires a 2-D or higher tensor")
    out_data = np.swapaxes(x.data, -1, -2)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.swapaxes(g, -1, -2))

    return _record("transpose", out_data, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; one operand may be a trailing-shape broadcast of the other."""
    sa, sb = a.shape, b.shape
    if not (sa == sb or sa[-len(sb):] == sb or sb[-len(sa):] == sa):
        raise ValueError(f"add shapes do not align: {sa} + {sb}")
    out_data = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_sum_to_shape(g, b.shape))

    return _record("add", out_data, (a, b), backward_fn)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along one axis."""
    if not parts:
        raise ValueError("concat requires at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray) -> None:
        pieces = np.split(g, offsets, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p.accumulate_grad(piece)

    return _record("concat", out_data, tuple(parts), backward_fn)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return _record("relu", out_data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _record("sigmoid", out_data, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis; every output row sums to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out_data * (g - dot))

    return _record("softmax_rows", out_data, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad(_sum_to_shape(g * xhat, gain.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_sum_to_shape(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _record("layer_norm", out_data, (x, gain, bias), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out_data = x.data * c

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _record("scale", out_data, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum())

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _record("sum_all", out_data, (x,), backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of squared differences."""
    if a.shape != b.shape:
        raise ValueError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out_data = np.asarray((diff * diff).sum() / n)

    def backward_fn(g: np.ndarray) -> None:
        coeff = 2.0 * float(g) / n
        if a.requires_grad:
            a.accumulate_grad(coeff * diff)
        if b.requires_grad:
            b.accumulate_grad(-coeff * diff)

    return _record("mse", out_data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every reachable leaf.

    Gradient at each node is the sum over all its uses.  A graph can only
    be walked once; rerunning on the same loss node is an error.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    if loss._done:
        raise ValueError("backward already ran on this graph")
    loss._done = True

    seen: set[int] = {loss.node_id}
    nodes: list[Tensor] = [loss]
    stack: list[Tensor] = [loss]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                seen.add(parent.node_id)
                nodes.append(parent)
                stack.append(parent)

    # Creation order is a topological order: every op's inputs predate it.
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction over a fixed list of leaf parameters."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError("gradient shape does not match parameter shape")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class ConvergenceRule:
    """Stop when relative epoch-loss improvement stays below a threshold.

    Fires after `patience` consecutive epochs whose relative improvement
    over the previous epoch is below `rel_tol` (increases count as stalls).
    """

    def __init__(self, rel_tol: float = 1e-4, patience: int = 5):
        self.rel_tol = rel_tol
        self.patience = patience
        self._prev: float | None = None
        self._stall = 0

    def update(self, epoch_loss: float) -> bool:
        if self._prev is None:
            self._prev = epoch_loss
            return False
        denom = max(abs(self._prev), 1e-300)
        improvement = (self._prev - epoch_loss) / denom
        if improvement < self.rel_tol:
            self._stall += 1
        else:
            self._stall = 0
        self._prev = epoch_loss
        return self._stall >= self.patience
