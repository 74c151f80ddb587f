"""Reverse-mode automatic differentiation over dense float64 arrays.

Each `Tensor` records the tensors it was computed from and a closure that pushes
its gradient back to them. `backward` walks the graph in reverse topological
order. Broadcasting is limited to what matrix-vector code needs: an operand may
be a scalar, a row vector or a column vector against a matrix, and its gradient
is summed back to its own shape.
"""

import dataclasses
import logging
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np

from decision_nce.errors import (
    EmptyInputError,
    NonFiniteError,
    NonScalarRootError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

EPS = 1e-8

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


class Tensor:
    """A node of the compute graph: a value plus an accumulated gradient."""

    __slots__ = ("data", "grad", "op", "requires_grad", "_prev", "_backward", "name")

    def __init__(
        self,
        data: Any,
        _children: tuple["Tensor", ...] = (),
        op: str = "",
        requires_grad: bool = False,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.op = op
        self.name = name
        self._prev = _children if _grad_enabled else ()
        self.requires_grad = requires_grad or any(c.requires_grad for c in self._prev)
        self._backward: Callable[[], None] = lambda: None
        if not _children and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(name or "tensor input")

    @classmethod
    def param(cls, data: Any, name: str = "") -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarRootError(self.shape)
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    def _attach(self, out: "Tensor", backward: Callable[[], None]) -> "Tensor":
        if _grad_enabled and out.requires_grad:
            out._backward = backward
        return out

    # elementwise arithmetic

    def __add__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast("add", self.data, other.data)
        out = Tensor(self.data + other.data, (self, other), "+")

        def _backward():
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad += _unbroadcast(out.grad, other.shape)

        return self._attach(out, _backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, (self,), "neg")

        def _backward():
            self.grad -= out.grad

        return self._attach(out, _backward)

    def __sub__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast("sub", self.data, other.data)
        out = Tensor(self.data - other.data, (self, other), "-")

        def _backward():
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad -= _unbroadcast(out.grad, other.shape)

        return self._attach(out, _backward)

    def __rsub__(self, other: Any) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast("mul", self.data, other.data)
        out = Tensor(self.data * other.data, (self, other), "*")

        def _backward():
            self.grad += _unbroadcast(out.grad * other.data, self.shape)
            other.grad += _unbroadcast(out.grad * self.data, other.shape)

        return self._attach(out, _backward)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        _check_broadcast("div", self.data, other.data)
        out = Tensor(self.data / other.data, (self, other), "/")

        def _backward():
            self.grad += _unbroadcast(out.grad / other.data, self.shape)
            other.grad -= _unbroadcast(out.grad * self.data / other.data**2, other.shape)

        return self._attach(out, _backward)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.shape[-1] != other.shape[0]:
            raise ShapeMismatchError("matmul", self.shape, other.shape)
        out = Tensor(self.data @ other.data, (self, other), "@")

        def _backward():
            g = out.grad
            match self.ndim, other.ndim:
                case 1, 1:
                    self.grad += other.data * g
                    other.grad += self.data * g
                case 1, _:
                    self.grad += other.data @ g
                    other.grad += np.outer(self.data, g)
                case _, 1:
                    self.grad += np.outer(g, other.data)
                    other.grad += self.data.T @ g
                case _:
                    self.grad += g @ other.data.T
                    other.grad += self.data.T @ g

        return self._attach(out, _backward)

    # unary functions

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), (self,), "relu")

        def _backward():
            self.grad += (self.data > 0) * out.grad

        return self._attach(out, _backward)

    def sqrt(self) -> "Tensor":
        out = Tensor(np.sqrt(self.data), (self,), "sqrt")

        def _backward():
            with np.errstate(divide="ignore", invalid="ignore"):
                local = np.where(out.data > 0, 0.5 / out.data, 0.0)
            self.grad += local * out.grad

        return self._attach(out, _backward)

    def clamp_min(self, floor: float) -> "Tensor":
        out = Tensor(np.maximum(self.data, floor), (self,), "clamp_min")

        def _backward():
            self.grad += (self.data > floor) * out.grad

        return self._attach(out, _backward)

    # reductions

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.shape)

        return self._attach(out, _backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def logsumexp(self, axis: int | None = None) -> "Tensor":
        """Numerically stable log Σ exp along `axis` (all elements when None)."""
        if self.data.size == 0:
            raise EmptyInputError("logsumexp")
        shift = np.max(self.data, axis=axis, keepdims=True)
        summed = np.sum(np.exp(self.data - shift), axis=axis, keepdims=True)
        value = shift + np.log(summed)
        out = Tensor(np.squeeze(value, axis=axis) if axis is not None else value.reshape(()),
                     (self,), "logsumexp")

        def _backward():
            softmax = np.exp(self.data - value)
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            self.grad += softmax * g

        return self._attach(out, _backward)

    # structure

    def __getitem__(self, index: Any) -> "Tensor":
        out = Tensor(self.data[index], (self,), "getitem")

        def _backward():
            np.add.at(self.grad, index, out.grad)

        return self._attach(out, _backward)

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), (self,), "reshape")

        def _backward():
            self.grad += out.grad.reshape(self.shape)

        return self._attach(out, _backward)

    @property
    def T(self) -> "Tensor":
        out = Tensor(self.data.T, (self,), "T")

        def _backward():
            self.grad += out.grad.T

        return self._attach(out, _backward)

    def diagonal(self) -> "Tensor":
        n = min(self.shape)
        idx = np.arange(n)
        return self[idx, idx]


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise EmptyInputError("concat")
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward():
        for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            t.grad += g

    return tensors[0]._attach(out, _backward)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors into a matrix, one per row."""
    if not tensors:
        raise EmptyInputError("stack_rows")
    tensors = [as_tensor(t) for t in tensors]
    widths = {t.shape for t in tensors}
    if len(widths) != 1:
        raise ShapeMismatchError("stack_rows", *sorted(widths))
    out = Tensor(np.stack([t.data for t in tensors]), tuple(tensors), "stack")

    def _backward():
        for i, t in enumerate(tensors):
            t.grad += out.grad[i]

    return tensors[0]._attach(out, _backward)


def logsumexp(xs: Sequence[Any] | Tensor) -> Tensor:
    """Stable log Σ exp over a non-empty sequence of scalars."""
    if isinstance(xs, Tensor):
        return xs.logsumexp()
    if len(xs) == 0:
        raise EmptyInputError("logsumexp")
    if all(isinstance(x, Tensor) for x in xs):
        return stack_rows([x.reshape(1) for x in xs]).logsumexp()
    return as_tensor([float(as_tensor(x).data) for x in xs]).logsumexp()


def _normalize_rows(x: Tensor) -> Tensor:
    norms = (x * x).sum(axis=-1, keepdims=True).sqrt().clamp_min(EPS)
    return x / norms


def cosine_similarity(a: Any, b: Any) -> Tensor:
    """⟨a,b⟩ / (max(‖a‖, ε) · max(‖b‖, ε)) for rank-1 inputs of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError("cosine_similarity", a.shape, b.shape)
    return (_normalize_rows(a) * _normalize_rows(b)).sum()


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of matching rows: (N, K), (N, K) -> (N,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatchError("rowwise_cosine", a.shape, b.shape)
    return (_normalize_rows(a) * _normalize_rows(b)).sum(axis=-1)


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity: (N, K), (M, K) -> (N, M)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("pairwise_cosine", a.shape, b.shape)
    return _normalize_rows(a) @ _normalize_rows(b).T


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Fill `.grad` on every node reachable from a scalar root.

    Gradients are zeroed first, so repeated calls do not accumulate. Returns the
    gradient of every leaf that requires it.
    """
    if root.data.size != 1:
        raise NonScalarRootError(root.shape)
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        node._backward()
    return {node: node.grad for node in order if not node._prev and node.requires_grad}


@dataclasses.dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def finite_difference_check(
    f: Callable[[Tensor], Tensor], theta: Any, step: float = 1e-6
) -> GradCheckResult:
    """Compare the autodiff gradient of `f` at `theta` with central differences.

    Relative error per coordinate is |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    theta = np.array(theta, dtype=np.float64)
    point = Tensor.param(theta, name="theta")
    value = f(point)
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteError("finite_difference_check: f(theta)")
    backward(value)
    analytic = point.grad.copy()

    numeric = np.zeros_like(theta)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(theta.size):
            shifted = theta.copy().reshape(-1)
            shifted[i] += step
            upper = f(Tensor(shifted.reshape(theta.shape))).item()
            shifted[i] -= 2 * step
            lower = f(Tensor(shifted.reshape(theta.shape))).item()
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NonFiniteError(f"finite_difference_check: coordinate {i}")
            flat[i] = (upper - lower) / (2 * step)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    errors = np.abs(analytic - numeric) / scale
    worst = float(errors.max()) if errors.size else 0.0
    logger.debug("Gradient check over %d coordinates: max relative error %.3e", theta.size, worst)
    return GradCheckResult(worst, analytic, numeric)


@dataclasses.dataclass
class MlpParams:
    """Affine layers with a rectifier between them; the last layer stays affine.

    Weights are stored (fan_in, fan_out) so rows of a batch multiply on the left.
    """

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ShapeMismatchError("MlpParams", tuple(self.widths))
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatchError(
                "MlpParams", tuple(self.widths), (len(self.weights), len(self.biases))
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.widths[i], self.widths[i + 1])
            if w.shape != expected or b.shape != (self.widths[i + 1],):
                raise ShapeMismatchError(f"MlpParams layer {i}", expected, w.shape, b.shape)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named.append((f"{prefix}layers.{i}.weight", w))
            named.append((f"{prefix}layers.{i}.bias", b))
        return named


def init_mlp(widths: Sequence[int], rng: np.random.Generator, name: str = "") -> MlpParams:
    """Zero-mean normal weights scaled by 1/sqrt(fan_in), zero biases."""
    widths = [int(w) for w in widths]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor.param(rng.normal(0.0, scale, (fan_in, fan_out)), f"{name}.w{i}"))
        biases.append(Tensor.param(np.zeros(fan_out), f"{name}.b{i}"))
    return MlpParams(widths, weights, biases)


def mlp_apply(params: MlpParams, x: Any) -> Tensor:
    """Run a rank-1 input or a batch of rows through the network."""
    x = as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_width:
        raise ShapeMismatchError("mlp_apply", x.shape, (params.in_width,))
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < last:
            x = x.relu()
    return x
