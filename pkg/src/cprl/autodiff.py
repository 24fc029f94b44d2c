"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor`. Operations record a closure that maps the
output gradient onto their inputs; :meth:`Tensor.backward` replays those
closures in reverse topological order.

Broadcasting is deliberately narrow: elementwise operations accept two tensors
of identical shape, or a tensor and a scalar (a Python number or a 0-d tensor).
Anything else is rejected with both shapes in the message.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Number = Union[int, float]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array that may take part in a differentiable computation."""

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Callable[[np.ndarray], None]] = None, _op: str = ""):
        # ops hand over freshly computed arrays; user-supplied data is copied
        self.data = np.asarray(data, dtype=np.float64) if _op else np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- introspection -----------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- gradient accumulation ---------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Only scalar tensors may start a backward pass unless an explicit seed
        gradient is supplied. Leaf gradients accumulate across calls; clear
        them with :meth:`zero_grad` between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not match {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node._accumulate(g)
                continue
            # intermediate nodes hand their gradient to parents through the closure
            node._backward(g, grads)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _send(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _result(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    """Wrap ``data``; record ``rule(g) -> per-parent grads`` if anything needs grad."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)

    def backward(g, grads):
        for p, pg in zip(parents, rule(g)):
            if pg is not None:
                _send(grads, p, pg)

    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim:
        return np.asarray(g.sum())
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)), "div")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and reshaping --------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out), (a,), rule, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-D vector to every row of an (N, D) matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add_bias(out, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw). ``padding`` defaults to
    ``kh // 2`` so odd kernels keep the spatial size.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} vs weight {weight.shape}")
    _, _, kh, kw = weight.shape
    p = kh // 2 if padding is None else int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    Ho, Wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def rule(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            flipped = weight.data[:, :, ::-1, ::-1]
            gxp = np.tensordot(gcols, flipped, axes=([1, 4, 5], [0, 2, 3]))  # N, Hp, Wp, C
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2)[:, :, p:p + x.shape[2], p:p + x.shape[3]])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),), "gap")


def pairwise_diff(v: Tensor) -> Tensor:
    """(..., K) -> (..., K, K) with entry [k, j] = v[k] - v[j]."""
    out = v.data[..., :, None] - v.data[..., None, :]
    return _result(out, (v,), lambda g: (g.sum(axis=-1) - g.sum(axis=-2),), "pairwise_diff")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error between equal-shape tensors."""
    return mean(square(sub(pred, target)))


def sign(x) -> np.ndarray:
    """Signum with sign(0) = 0. Not differentiable; returns a plain array."""
    return np.sign(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))


# -- spectral normalization ----------------------------------------------------

class PowerIteration:
    """Persistent left-singular-vector estimate for one weight matrix."""

    def __init__(self, n_rows: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(n_rows)
        self.u = u / np.linalg.norm(u)
        self.v: Optional[np.ndarray] = None

    def run(self, W: np.ndarray, iters: int = 1, eps: float = 1e-12) -> float:
        if W.ndim != 2:
            raise ShapeError(f"spectral normalization expects a 2-D weight, got {W.shape}")
        if iters < 1:
            raise ValueError("iters must be >= 1")
        u = self.u
        for _ in range(iters):
            v = W.T @ u
            v = v / max(np.linalg.norm(v), eps)
            u = W @ v
            u = u / max(np.linalg.norm(u), eps)
        self.u, self.v = u, v
        return float(u @ W @ v)

    def sigma(self, W: np.ndarray) -> float:
        """Re-measure the singular value estimate with the stored vectors."""
        if self.v is None:
            raise ValueError("no stored singular vectors; call run() first")
        return float(self.u @ W @ self.v)


def spectral_normalize(W: Tensor, iters: int = 1, power: Optional[PowerIteration] = None,
                       eps: float = 1e-12) -> Tensor:
    """Return ``W / sigma_max`` with ``sigma_max`` from power iteration.

    ``iters=0`` skips the iteration and reuses the vectors already stored in
    ``power``.
    Gradients flow through the estimate ``u^T W v`` with ``u`` and ``v`` held
    fixed. A zero matrix comes back unchanged.
    """
    W = as_tensor(W)
    if W.ndim != 2:
        raise ShapeError(f"spectral normalization expects a 2-D weight, got {W.shape}")
    if power is None:
        power = PowerIteration(W.shape[0])
    if iters == 0 and power.v is not None:
        # reuse the stored singular vectors as they are
        sigma = float(power.u @ W.data @ power.v)
    else:
        sigma = power.run(W.data, iters)
    if sigma < eps:
        return div(W, Tensor(eps))
    u = Tensor(power.u.reshape(1, -1))
    v = Tensor(power.v.reshape(-1, 1))
    est = reshape(matmul(matmul(u, W), v), ())
    return div(W, est)

