"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every op records its parents and a closure
mapping the output gradient to parent gradients. ``Tensor.backward`` walks the
graph once in reverse topological order and accumulates into leaf ``.grad``
buffers.

Data lives in C-contiguous numpy arrays (row-major). Broadcasting is supported
for elementwise arithmetic only; gradients of broadcast operands are summed
back to the operand's shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def make_rng(seed: int) -> np.random.Generator:
    """The library-wide generator: numpy's PCG64 (128-bit LCG, XSL-RR output).

    PCG64 streams are platform independent for a fixed seed, which the
    reproducibility tests rely on.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Create an op output; attaches the graph only when it is needed."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- backward ------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Only scalar outputs may omit ``grad``. Repeated calls accumulate.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; deep stacks would overflow Python recursion.
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b.dtype if isinstance(b, Tensor) else None)
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b.dtype if isinstance(b, Tensor) else None)
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one pass, never overflows.
    out = np.tanh(x * x.dtype.type(0.5))
    out += 1.0
    out *= 0.5
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def backward(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return Tensor._make(x * s, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return Tensor._make(out, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return Tensor._make(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids)
    rows = table.shape[0]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"row id out of range [0, {rows})")
    return Tensor._make(table.data[ids], (table,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a shared ``(k, n)`` matrix or a
    batch ``(..., k, n)`` with the same leading extents as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
    else:
        out = ad @ bd

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._make(out, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


_additive_masks: dict[tuple, np.ndarray] = {}


def _additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    key = (mask.shape, mask.tobytes(), np.dtype(dtype).str)
    m = _additive_masks.get(key)
    if m is None:
        m = np.where(mask, -np.inf, 0.0).astype(dtype)
        m.setflags(write=False)
        _additive_masks[key] = m
    return m


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(dh), masked) v`` over the last two axes, as one op.

    Only the attention probabilities are kept for the backward pass. ``mask``
    is true where a key must be ignored.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    c = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    qd, kd, vd = q.data, k.data, v.data
    # scaling the (T, dh) operands is cheaper than scaling the (T, T) scores
    scores = (qd * c) @ np.swapaxes(kd, -1, -2)
    if mask is not None:
        scores += _additive_mask(np.asarray(mask, dtype=bool), scores.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores
    out = probs @ vd

    def backward(g):
        gv = np.swapaxes(probs, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        # sum_j gp_ij p_ij equals g_i . out_i, which avoids a (T, T) temporary
        gp -= (g * out).sum(axis=-1, keepdims=True)
        gp *= probs
        gq = gp @ kd
        gq *= c
        gk = np.swapaxes(gp, -1, -2) @ qd
        gk *= c
        return gq, gk, gv

    return Tensor._make(out, (q, k, v), backward)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """``silu(x W_gate) * (x W_up)`` projected back by ``W_down``.

    Weights are stored input-major: ``w_gate`` and ``w_up`` are ``(d, d_ff)``,
    ``w_down`` is ``(d_ff, d)``.
    """
    d = x.shape[-1]
    if w_gate.shape[0] != d or w_up.shape != w_gate.shape or w_down.shape != (w_gate.shape[1], d):
        raise ValueError(
            f"swiglu shape mismatch: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``(..., vocab)``; ``targets`` holds integer ids with the
    leading shape of ``logits``.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = t.shape[0]
    nll = lse - shifted[np.arange(n), t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return Tensor._make(loss, (logits,), backward)


# -- numerical oracle ------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over
    ``x`` directly (e.g. a model parameter).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude of the two."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
