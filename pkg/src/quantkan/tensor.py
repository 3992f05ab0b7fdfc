"""Dense float64 arrays with reverse-mode autodiff.

The tape is rebuilt on every forward pass: each operation that touches a
gradient-requiring input records a backward closure on the output node.
``backward`` walks the graph in reverse topological order and accumulates
gradients into every reachable ``requires_grad`` leaf. Quantizers and basis
functions register themselves as single tape nodes with analytic (or STE)
backward rules via ``from_op``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DecompositionError, DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (pinned convention).

    numpy's ``round`` is banker's rounding; every quantizer in this package
    uses this helper instead so integer codes are bit-exact across platforms.
    """
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None] | None, op: str) -> "Tensor":
        """Create a tape node. ``backward`` receives the upstream gradient."""
        out = Tensor(data)
        if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g, other.shape))

        return Tensor.from_op(data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(-g, other.shape))

        return Tensor.from_op(data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        data = self.data * other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

        return Tensor.from_op(data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        data = self.data / other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor.from_op(data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(-g)

        return Tensor.from_op(-self.data, (self,), backward, "neg")

    def __pow__(self, exponent: float):
        p = float(exponent)
        data = self.data ** p

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * p * self.data ** (p - 1.0))

        return Tensor.from_op(data, (self,), backward, "pow")

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g.reshape(src))

        return Tensor.from_op(data, (self,), backward, "reshape")

    # -- reductions and pointwise --------------------------------------------

    def sum(self) -> "Tensor":
        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(np.full_like(self.data, float(g)))

        return Tensor.from_op(np.asarray(self.data.sum()), (self,), backward, "sum")

    def mean(self) -> "Tensor":
        n = self.data.size

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(np.full_like(self.data, float(g) / n))

        return Tensor.from_op(np.asarray(self.data.mean()), (self,), backward, "mean")

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * data)

        return Tensor.from_op(data, (self,), backward, "exp")

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * (1.0 - data * data))

        return Tensor.from_op(data, (self,), backward, "tanh")

    def sigmoid(self) -> "Tensor":
        data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * data * (1.0 - data))

        return Tensor.from_op(data, (self,), backward, "sigmoid")

    def abs(self) -> "Tensor":
        data = np.abs(self.data)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * np.sign(self.data))

        return Tensor.from_op(data, (self,), backward, "abs")

    def clip(self, lo: float, hi: float) -> "Tensor":
        data = np.clip(self.data, lo, hi)
        inside = (self.data > lo) & (self.data < hi)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g * inside)

        return Tensor.from_op(data, (self,), backward, "clip")

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable ``requires_grad`` tensor.

        Only scalar roots are accepted. Repeated calls accumulate into leaf
        gradients; non-leaf gradients are reset per call.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of 2-D tensors with gradient support."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return Tensor.from_op(data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for ``w`` stored [out, in]; one tape node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear expects [n,in] x [out,in], got {x.shape} and {w.shape}")
    data = x.data @ w.data.T

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data)
        if w.requires_grad:
            w.accumulate_grad(g.T @ x.data)

    return Tensor.from_op(data, (x, w), backward, "linear")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsumexp
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(grad * (float(g) / n))

    return Tensor.from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def cholesky(a: Tensor | np.ndarray) -> Tensor:
    """Lower-triangular factor L with L @ L.T == a. Forward-only (no tape).

    Raises :class:`DecompositionError` naming the failing pivot when ``a``
    is not positive definite.
    """
    mat = a.data if isinstance(a, Tensor) else _as_array(a)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {mat.shape}")
    try:
        return Tensor(np.linalg.cholesky(mat))
    except np.linalg.LinAlgError:
        pivot = _failing_pivot(mat)
        raise DecompositionError(
            f"matrix is not positive definite: pivot {pivot} is non-positive")


def _failing_pivot(mat: np.ndarray) -> int:
    n = mat.shape[0]
    lower = np.zeros_like(mat)
    for j in range(n):
        d = mat[j, j] - lower[j, :j] @ lower[j, :j]
        if d <= 0 or not np.isfinite(d):
            return j
        lower[j, j] = math.sqrt(d)
        if j + 1 < n:
            lower[j + 1:, j] = (mat[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
    return n - 1


# -- random numbers ------------------------------------------------------------


class Rng:
    """Counter-based (Philox) random stream; splittable and reproducible.

    The same ``seed`` yields the same sequence on every platform, and
    ``split`` derives independent child streams without consuming state
    from the parent.
    """

    def __init__(self, seed: int, _bitgen=None):
        self.seed = int(seed)
        bitgen = _bitgen if _bitgen is not None else np.random.Philox(self.seed)
        self._gen = np.random.Generator(bitgen)

    def split(self, index: int) -> "Rng":
        """Child stream ``index`` (>= 0); deterministic, independent."""
        child = np.random.Philox(self.seed).jumped(index + 1)
        return Rng(self.seed, _bitgen=child)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ContractError(f"rand_uniform requires lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def rademacher(self, shape) -> np.ndarray:
        return self._gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def rand_uniform(rng: Rng, shape, lo: float, hi: float) -> Tensor:
    """Uniform tensor on [lo, hi); advances ``rng`` deterministically."""
    return Tensor(rng.uniform(shape, lo, hi))


def first_nonfinite(root: Tensor) -> str | None:
    """Name the tape node where NaN/Inf first appeared, or None if all finite.

    The reported node holds non-finite values while all of its parents are
    finite, i.e. it is where the bad values originated.
    """
    seen: set[int] = set()
    stack = [root]
    candidate = None
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.isfinite(node.data).all():
            if all(np.isfinite(p.data).all() for p in node._parents):
                return node.op
            candidate = node.op
        stack.extend(node._parents)
    return candidate
