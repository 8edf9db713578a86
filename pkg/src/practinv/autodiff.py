"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the local vector-Jacobian product.  Node ids come from a
process-wide counter, so sorting the nodes reachable from a loss by id yields a
valid topological order; that sorted list is the :class:`Tape` replayed by
:func:`backward`.

Gradients accumulate into ``Tensor.grad`` of leaves created with
``requires_grad=True``.  Callers zero them between steps (see :func:`zero_grad`).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced or received NaN/Inf."""


class ConfigError(ValueError):
    """An invalid hyperparameter was supplied."""


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op}: non-finite values")


class Tensor:
    """A dense array with an optional gradient slot and a link into the graph."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        _check_finite(self.values, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
        _check_finite(values, op)
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.node_id = next(_ids)
        out.op = op
        # Only keep the graph when something upstream wants gradients.
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as err:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from err
    return Tensor._from_op(
        out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError as err:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from err
    return Tensor._from_op(
        out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError as err:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from err
    return Tensor._from_op(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.values * x.values, "square", (x,), lambda g: (2.0 * x.values * g,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return Tensor._from_op(
        np.asarray(x.values.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return Tensor._from_op(
        np.asarray(x.values.mean()), "mean", (x,), lambda g: (np.full(x.shape, g / n),)
    )


# --- matrix algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.values @ b.values

    def backward(g):
        if b.values.ndim == 1:
            return np.outer(g, b.values), a.values.T @ g
        return g @ b.values.T, a.values.T @ g

    return Tensor._from_op(out, "matmul", (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for x of shape (n, p), W (p, q), b (q,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if (
        x.values.ndim != 2
        or W.values.ndim != 2
        or b.values.ndim != 1
        or x.shape[1] != W.shape[0]
        or W.shape[1] != b.shape[0]
    ):
        raise DimensionError(f"affine: x{x.shape} @ W{W.shape} + b{b.shape} is ill-formed")
    out = x.values @ W.values + b.values
    return Tensor._from_op(
        out, "affine", (x, W, b), lambda g: (g @ W.values.T, x.values.T @ g, g.sum(axis=0))
    )


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return Tensor._from_op(x.values.T.copy(), "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.values.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from err
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]``."""
    out = x.values[start:stop].copy()

    def backward(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(out, "rows", (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise DimensionError("concat_rows of nothing")
    try:
        out = np.concatenate([p.values for p in parts], axis=0)
    except ValueError as err:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise DimensionError(f"concat_rows: incompatible shapes {shapes}") from err
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return Tensor._from_op(
        out,
        "concat_rows",
        parts,
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def append_ones(x: Tensor) -> Tensor:
    """Append a constant intercept column to a matrix."""
    if x.values.ndim != 2:
        raise DimensionError(f"append_ones needs a matrix, got shape {x.shape}")
    out = np.hstack([x.values, np.ones((x.shape[0], 1))])
    return Tensor._from_op(out, "append_ones", (x,), lambda g: (g[:, :-1],))


def add_diagonal(M: Tensor, eps: float) -> Tensor:
    if M.values.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"add_diagonal needs a square matrix, got shape {M.shape}")
    return Tensor._from_op(M.values + eps * np.eye(M.shape[0]), "add_diagonal", (M,), lambda g: (g,))


def solve(M: Tensor, B: Tensor) -> Tensor:
    """Solve ``M X = B`` by LU factorization; gradients flow into both M and B."""
    M, B = as_tensor(M), as_tensor(B)
    if M.values.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != B.shape[0]:
        raise DimensionError(f"solve: M{M.shape} X = B{B.shape} is ill-formed")
    X = np.linalg.solve(M.values, B.values)

    def backward(g):
        gB = np.linalg.solve(M.values.T, g)
        gM = -np.outer(gB, X) if X.ndim == 1 else -gB @ X.T
        return gM, gB

    return Tensor._from_op(X, "solve", (M, B), backward)


# --- nonlinearities and losses ---------------------------------------------

ACTIVATIONS = ("tanh", "relu", "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_np(v) -> np.ndarray:
    return _sigmoid(np.asarray(v, dtype=np.float64))


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "tanh":
        out = np.tanh(x.values)
        deriv = 1.0 - out * out
    elif kind == "relu":
        out = np.maximum(x.values, 0.0)
        deriv = (x.values > 0).astype(np.float64)
    elif kind == "sigmoid":
        out = _sigmoid(x.values)
        deriv = out * (1.0 - out)
    else:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return Tensor._from_op(out, kind, (x,), lambda g: (g * deriv,))


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy, ``mean(log(1 + exp(-s * logit)))`` with s = 2y - 1."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.values.ndim != 1 or labels.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs labels {labels.shape}")
    n = labels.size
    if n == 0:
        raise DimensionError("bce_with_logits: empty input")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    margin = (2.0 * labels - 1.0) * logits.values
    # log(1 + e^-m) = max(-m, 0) + log1p(e^-|m|)
    loss = np.mean(np.maximum(-margin, 0.0) + np.log1p(np.exp(-np.abs(margin))))
    probs = _sigmoid(logits.values)
    return Tensor._from_op(
        np.asarray(loss), "bce_with_logits", (logits,), lambda g: (g * (probs - labels) / n,)
    )


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce(logits: Tensor, classes) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = as_tensor(logits)
    classes = np.asarray(classes)
    if logits.values.ndim != 2 or classes.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_ce: logits {logits.shape} vs classes {classes.shape}")
    n, k = logits.shape
    if n == 0:
        raise DimensionError("softmax_ce: empty input")
    if not np.issubdtype(classes.dtype, np.integer):
        if not np.all(classes == np.round(classes)):
            raise ValueError("softmax_ce: class indices must be integers")
        classes = classes.astype(np.int64)
    if classes.min() < 0 or classes.max() >= k:
        raise IndexError(f"softmax_ce: class index out of range [0, {k})")
    logp = log_softmax_np(logits.values)
    idx = np.arange(n)
    loss = -logp[idx, classes].mean()

    def backward(g):
        d = np.exp(logp)
        d[idx, classes] -= 1.0
        return (g * d / n,)

    return Tensor._from_op(np.asarray(loss), "softmax_ce", (logits,), backward)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ConfigError(f"grad_reverse: lambda must be >= 0, got {lam}")
    x = as_tensor(x)
    return Tensor._from_op(x.values.copy(), "grad_reverse", (x,), lambda g: (-lam * g,))


# --- backward pass ----------------------------------------------------------


@dataclass
class Tape:
    """Operations reachable from a root, in topological (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.node_id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from each reachable ``requires_grad`` leaf to the gradient
    contributed by this call.
    """
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                contributed[node] = g
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
    for g in contributed.values():
        _check_finite(g, "backward")
    return contributed


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    value: Callable[[], float] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds the scalar from ``params`` on every call; parameter values
    are perturbed in place and restored.  ``value`` is the function that is
    differenced (default ``f().item()``); it differs from ``f`` when the graph
    carries a gradient reversal.
    """
    if step <= 0:
        raise ConfigError(f"finite_diff_check: step must be > 0, got {step}")
    value = value or (lambda: f().item())
    zero_grad(params)
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    zero_grad(params)
    return worst
