"""Small reverse-mode autodiff tape over dense numpy operations.

Only the handful of primitives needed to differentiate an MLP classifier
loss are supported: slicing a flat parameter vector, affine maps,
elementwise nonlinearities, a fused softmax cross-entropy and a squared
norm, plus linear combinations of scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a tape node produces a NaN or infinite value."""

    def __init__(self, index: int, op: str, label: str | None = None):
        self.index = index
        self.op = op
        self.label = label
        where = f"node {index} ({op}" + (f", {label})" if label else ")")
        super().__init__(f"non-finite value produced at {where}")


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    aux: Any = None
    label: str | None = None


class Tape:
    """Single-use record of a forward computation.

    Nodes are appended in evaluation order, so the list is already
    topologically sorted. Call :meth:`backward` once on a scalar root.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.adjoints: list[np.ndarray | None] = []

    def _push(self, op, inputs, value, aux=None, label=None, requires_grad=None) -> int:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(len(self.nodes), op, label)
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), value, requires_grad, aux, label))
        return len(self.nodes) - 1

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    # -- leaves -----------------------------------------------------------
    def variable(self, value, label: str | None = None) -> int:
        return self._push("variable", (), np.array(value, dtype=np.float64), label=label, requires_grad=True)

    def constant(self, value, label: str | None = None) -> int:
        return self._push("constant", (), np.array(value, dtype=np.float64), label=label, requires_grad=False)

    # -- primitives -------------------------------------------------------
    def slice(self, src: int, offset: int, shape: tuple[int, ...], label: str | None = None) -> int:
        """View ``prod(shape)`` entries of a flat vector starting at ``offset``."""
        size = int(np.prod(shape))
        flat = self.nodes[src].value
        if flat.ndim != 1 or offset < 0 or offset + size > flat.size:
            raise ValueError(f"slice [{offset}, {offset + size}) out of range for vector of length {flat.size}")
        return self._push("slice", (src,), flat[offset:offset + size].reshape(shape), aux=(offset, size), label=label)

    def affine(self, x: int, w: int, b: int, label: str | None = None) -> int:
        """Batched affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
        xv, wv, bv = self.value(x), self.value(w), self.value(b)
        if xv.shape[-1] != wv.shape[1] or bv.shape != (wv.shape[0],):
            raise ValueError(f"affine shape mismatch: x {xv.shape}, w {wv.shape}, b {bv.shape}")
        return self._push("affine", (x, w, b), xv @ wv.T + bv, label=label)

    def relu(self, x: int, label: str | None = None) -> int:
        return self._push("relu", (x,), np.maximum(self.value(x), 0.0), label=label)

    def tanh(self, x: int, label: str | None = None) -> int:
        return self._push("tanh", (x,), np.tanh(self.value(x)), label=label)

    def softmax_xent(self, logits: int, labels, label: str | None = None) -> int:
        """Mean softmax cross-entropy of a (batch, classes) logit matrix."""
        z = self.value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim == 1:
            z = z[None, :]
            labels = labels.reshape(1)
        if labels.shape != (z.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match logits {z.shape}")
        probs = softmax(z)
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        nll = logsumexp - shifted[np.arange(z.shape[0]), labels]
        return self._push("softmax_xent", (logits,), nll.mean(), aux=(probs, labels), label=label)

    def sqnorm(self, x: int, label: str | None = None) -> int:
        v = self.value(x)
        return self._push("sqnorm", (x,), np.dot(v.ravel(), v.ravel()), label=label)

    def scale(self, x: int, c: float, label: str | None = None) -> int:
        return self._push("scale", (x,), c * self.value(x), aux=float(c), label=label)

    def add(self, *xs: int, label: str | None = None) -> int:
        total = self.value(xs[0]).copy()
        for x in xs[1:]:
            total = total + self.value(x)
        return self._push("add", xs, total, label=label)

    def sub(self, x: int, y: int, label: str | None = None) -> int:
        return self._push("sub", (x, y), self.value(x) - self.value(y), label=label)

    # -- reverse pass -----------------------------------------------------
    def backward(self, root: int) -> None:
        if self.nodes[root].value.ndim != 0:
            raise ValueError("backward() needs a scalar root")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[root] = np.array(1.0)

        def acc(i, g):
            if not self.nodes[i].requires_grad:
                return
            adj[i] = g if adj[i] is None else adj[i] + g

        for i in range(root, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or not node.requires_grad:
                continue
            op = node.op
            if op == "variable" or op == "constant":
                continue
            if op == "slice":
                (src,) = node.inputs
                offset, size = node.aux
                full = np.zeros_like(self.nodes[src].value)
                full[offset:offset + size] = g.ravel()
                acc(src, full)
            elif op == "affine":
                x, w, b = node.inputs
                xv, wv = self.value(x), self.value(w)
                acc(x, g @ wv)
                acc(w, g.T @ xv if g.ndim == 2 else np.outer(g, xv))
                acc(b, g.sum(axis=0) if g.ndim == 2 else g)
            elif op == "relu":
                acc(node.inputs[0], g * (self.value(node.inputs[0]) > 0.0))
            elif op == "tanh":
                acc(node.inputs[0], g * (1.0 - node.value ** 2))
            elif op == "softmax_xent":
                probs, labels = node.aux
                d = probs.copy()
                d[np.arange(d.shape[0]), labels] -= 1.0
                d *= g / d.shape[0]
                if self.value(node.inputs[0]).ndim == 1:
                    d = d[0]
                acc(node.inputs[0], d)
            elif op == "sqnorm":
                acc(node.inputs[0], 2.0 * g * self.value(node.inputs[0]))
            elif op == "scale":
                acc(node.inputs[0], node.aux * g)
            elif op == "add":
                for x in node.inputs:
                    acc(x, g)
            elif op == "sub":
                x, y = node.inputs
                acc(x, g)
                acc(y, -g)
            else:  # pragma: no cover
                raise NotImplementedError(op)
        self.adjoints = adj

    def grad(self, i: int) -> np.ndarray:
        g = self.adjoints[i] if self.adjoints else None
        return np.zeros_like(self.nodes[i].value) if g is None else g


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ScalarFn:
    """A scalar loss expressed as a tape builder.

    ``build(tape, theta, batch)`` receives the tape and the node index of the
    flat parameter vector and must return the index of a scalar node.
    """

    build: Callable[[Tape, int, Any], int]
    dim: int

    def __call__(self, params, batch) -> float:
        tape = Tape()
        theta = tape.variable(_check_params(params, self.dim), label="theta")
        with np.errstate(over="ignore", invalid="ignore"):  # surfaced as NonFiniteError
            return float(tape.value(self.build(tape, theta, batch)))


def _check_params(params, dim: int) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (dim,):
        raise ValueError(f"expected parameter vector of length {dim}, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NonFiniteError(0, "variable", "theta")
    return params


def value_and_grad(fn: ScalarFn, params, batch) -> tuple[float, np.ndarray]:
    """Evaluate ``fn`` and its exact gradient with respect to the parameters."""
    tape = Tape()
    theta = tape.variable(_check_params(params, fn.dim), label="theta")
    with np.errstate(over="ignore", invalid="ignore"):  # surfaced as NonFiniteError
        root = fn.build(tape, theta, batch)
        tape.backward(root)
    return float(tape.value(root)), tape.grad(theta).copy()


def finite_diff_grad(fn: Callable[[np.ndarray, Any], float], params, batch, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (fn(up, batch) - fn(down, batch)) / (2.0 * step)
    return grad


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the L2 norm; zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
