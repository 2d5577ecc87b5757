"""
Dense tensor helpers, symmetric and generalized-symmetric eigensolvers, and a
small reverse-mode tape.

Arrays are plain numpy ndarrays. The tape records primitive ops in evaluation
order, so a node's inputs always precede it; ``backward`` walks that order in
reverse and accumulates fan-out by summation.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sp_fft

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
PD_FLOOR = 1e-12
DEGENERATE_GAP = 1e-10


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class SingularMatrixError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def check_finite(value: np.ndarray, what: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def _check_square(a: np.ndarray, what: str):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{what} expects a square matrix, got shape {a.shape}")


# -----------------------------
# Eigensolvers
# -----------------------------

def _normalize_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column is made positive
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(a) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix.

    Returns eigenvalues sorted descending (stable on ties, so equal values keep
    their original order) and orthonormal eigenvectors as columns.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square(a, "sym_eig")
    check_finite(a, "sym_eig input")

    values, vectors = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(-values, kind="stable")
    return values[order], _normalize_signs(vectors[:, order])


def has_degenerate_gap(values, tol: float = DEGENERATE_GAP) -> bool:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return False
    return bool(np.any(np.abs(np.diff(values)) < tol))


def whitening_matrix(c) -> np.ndarray:
    """P = Λ^{-1/2} Uᵀ for C = U Λ Uᵀ, so that P C Pᵀ = I."""
    values, vectors = sym_eig(c)
    if values[-1] <= PD_FLOOR:
        raise SingularMatrixError(
            f"matrix is not positive definite (smallest eigenvalue {values[-1]:.3e})"
        )
    return (vectors / np.sqrt(values)).T


def generalized_eig_spd(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solves A v = λ B v for symmetric PSD A and symmetric PD B by whitening B.

    Eigenvalues come back descending; eigenvector columns satisfy vᵀ B v = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_square(a, "generalized_eig_spd")
    _check_square(b, "generalized_eig_spd")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: A {a.shape} vs B {b.shape}")
    check_finite(a, "generalized_eig_spd A")
    check_finite(b, "generalized_eig_spd B")

    p = whitening_matrix(b)
    values, v = sym_eig(p @ a @ p.T)
    return values, p.T @ v


# -----------------------------
# FFT-based same-length convolution
# -----------------------------

# (forward, input-gradient, weight-gradient) contractions over the rfft axis q
_CONV_EQUATIONS = {
    "dense": ("ncq,ocq->noq", "noq,ocq->ncq", "ncq,noq->ocq"),
    "depthwise": ("ncq,cgq->ncgq", "ncgq,cgq->ncq", "ncq,ncgq->cgq"),
}


def _spectral_contract(mode: str, kind: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if mode != "dense":
        return np.einsum(_CONV_EQUATIONS[mode][kind], a, b)
    # dense contractions as frequency-batched matrix products
    a_q = np.moveaxis(a, -1, 0)
    b_q = np.moveaxis(b, -1, 0)
    if kind == 0:
        out = a_q @ np.swapaxes(b_q, 1, 2)
    elif kind == 1:
        out = a_q @ b_q
    else:
        out = np.swapaxes(b_q, 1, 2) @ a_q
    return np.moveaxis(out, 0, -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, mode: str) -> np.ndarray:
    n_samples = x.shape[-1]
    k = w.shape[-1]
    left = (k - 1) // 2
    size = sp_fft.next_fast_len(n_samples + k - 1, real=True)
    xf = sp_fft.rfft(x, size, axis=-1)
    hf = sp_fft.rfft(w[..., ::-1], size, axis=-1)
    full = sp_fft.irfft(_spectral_contract(mode, 0, xf, hf), size, axis=-1)
    start = k - 1 - left
    return full[..., start:start + n_samples]


def _conv_grad_input(g: np.ndarray, w: np.ndarray, n_samples: int, mode: str) -> np.ndarray:
    k = w.shape[-1]
    left = (k - 1) // 2
    size = sp_fft.next_fast_len(n_samples + k - 1, real=True)
    gf = sp_fft.rfft(g, size, axis=-1)
    wf = sp_fft.rfft(w, size, axis=-1)
    full = sp_fft.irfft(_spectral_contract(mode, 1, gf, wf), size, axis=-1)
    return full[..., left:left + n_samples]


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, k: int, mode: str) -> np.ndarray:
    n_samples = x.shape[-1]
    left = (k - 1) // 2
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, k - 1 - left)])
    # only lags 0..k-1 are kept, so a circular length of T + k - 1 does not alias them
    size = sp_fft.next_fast_len(n_samples + k - 1, real=True)
    pf = sp_fft.rfft(padded, size, axis=-1)
    gf = sp_fft.rfft(g[..., ::-1], size, axis=-1)
    full = sp_fft.irfft(_spectral_contract(mode, 2, pf, gf), size, axis=-1)
    return full[..., n_samples - 1:n_samples - 1 + k]


# -----------------------------
# Tape
# -----------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    index: int
    value: np.ndarray
    parents: Tuple[int, ...]
    vjp: Optional[VJP]
    op: str
    tape: "Tape"
    name: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


Operand = Union[Node, np.ndarray, float, int]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _split_subscripts(subscripts: str) -> Tuple[str, str, str]:
    try:
        inputs, out = subscripts.replace(" ", "").split("->")
        left, right = inputs.split(",")
    except ValueError:
        raise ShapeError(f"contract expects 'ab,bc->ac' style subscripts, got {subscripts!r}")
    for part in (left, right, out):
        if "." in part or len(set(part)) != len(part):
            raise ShapeError(f"unsupported subscripts {subscripts!r}")
    if not set(left) <= set(out) | set(right) or not set(right) <= set(out) | set(left):
        raise ShapeError(f"every operand index must appear in the output or the other operand: {subscripts!r}")
    return left, right, out


class Tape:
    """Append-only record of primitive ops over float64 arrays."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, int] = {}

    # ---- leaves ----

    def _record(self, op: str, value, parents: Sequence[int], vjp: Optional[VJP],
                name: Optional[str] = None) -> Node:
        index = len(self.nodes)
        for parent in parents:
            if parent >= index:
                raise TapeError(f"cycle detected: {op} consumes node {parent} recorded after it")
        node = Node(index, np.asarray(value, dtype=np.float64), tuple(parents), vjp, op, self, name)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, value) -> Node:
        if name in self.parameters:
            raise TapeError(f"parameter {name!r} already on tape")
        node = self._record("parameter", np.array(value, dtype=np.float64), (), None, name)
        self.parameters[name] = node.index
        return node

    def constant(self, value) -> Node:
        return self._record("constant", np.array(value, dtype=np.float64), (), None)

    def _lift(self, x: Operand) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeError("node belongs to a different tape")
            return x
        return self.constant(x)

    # ---- elementwise ----

    def _broadcast(self, a: Node, b: Node, op: str) -> Tuple[int, ...]:
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")

    def add(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._broadcast(a, b, "add")
        return self._record(
            "add", a.value + b.value, (a.index, b.index),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    def mul(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._broadcast(a, b, "mul")
        return self._record(
            "mul", a.value * b.value, (a.index, b.index),
            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        )

    def scale(self, a: Operand, factor: float) -> Node:
        a = self._lift(a)
        return self._record("scale", a.value * factor, (a.index,), lambda g: (g * factor,))

    def log(self, a: Operand) -> Node:
        a = self._lift(a)
        return self._record("log", np.log(a.value), (a.index,), lambda g: (g / a.value,))

    def exp(self, a: Operand) -> Node:
        a = self._lift(a)
        out = np.exp(a.value)
        return self._record("exp", out, (a.index,), lambda g: (g * out,))

    def relu(self, a: Operand) -> Node:
        a = self._lift(a)
        mask = a.value > 0
        return self._record("relu", np.where(mask, a.value, 0.0), (a.index,), lambda g: (g * mask,))

    # ---- reductions / shape ----

    def sum(self, a: Operand, axis: Optional[int] = None) -> Node:
        a = self._lift(a)
        shape = a.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record("sum", a.value.sum(axis=axis), (a.index,), vjp)

    def mean(self, a: Operand, axis: Optional[int] = None) -> Node:
        a = self._lift(a)
        count = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / count)

    def reshape(self, a: Operand, shape: Sequence[int]) -> Node:
        a = self._lift(a)
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
        return self._record("reshape", out, (a.index,), lambda g: (g.reshape(a.shape),))

    def concat(self, items: Sequence[Operand], axis: int = 0) -> Node:
        nodes = [self._lift(item) for item in items]
        try:
            out = np.concatenate([node.value for node in nodes], axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}")
        bounds = np.cumsum([node.shape[axis] for node in nodes])[:-1]
        return self._record(
            "concat", out, [node.index for node in nodes],
            lambda g: tuple(np.split(g, bounds, axis=axis)),
        )

    def trace(self, a: Operand) -> Node:
        a = self._lift(a)
        _check_square(a.value, "trace")
        eye = np.eye(a.shape[0])
        return self._record("trace", np.trace(a.value), (a.index,), lambda g: (g * eye,))

    def diag(self, a: Operand) -> Node:
        a = self._lift(a)
        _check_square(a.value, "diag")
        return self._record("diag", np.diag(a.value).copy(), (a.index,), lambda g: (np.diag(g),))

    # ---- products ----

    def matmul(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self._record(
            "matmul", a.value @ b.value, (a.index, b.index),
            lambda g: (g @ b.value.T, a.value.T @ g),
        )

    def contract(self, subscripts: str, a: Operand, b: Operand) -> Node:
        """Two-operand einsum without traces or ellipses."""
        left, right, out = _split_subscripts(subscripts)
        a, b = self._lift(a), self._lift(b)
        try:
            value = np.einsum(subscripts, a.value, b.value)
        except ValueError as exc:
            raise ShapeError(f"contract {subscripts!r}: {exc}")
        return self._record(
            "contract", value, (a.index, b.index),
            lambda g: (
                np.einsum(f"{out},{right}->{left}", g, b.value),
                np.einsum(f"{out},{left}->{right}", g, a.value),
            ),
        )

    def _conv(self, x: Operand, w: Operand, mode: str) -> Node:
        x, w = self._lift(x), self._lift(w)
        if x.value.ndim != 3 or w.value.ndim != 3 or x.shape[1] != w.shape[0 if mode == "depthwise" else 1]:
            raise ShapeError(f"{mode} conv1d: incompatible shapes {x.shape} and {w.shape}")
        n_samples = x.shape[-1]
        k = w.shape[-1]
        if n_samples < k:
            raise ShapeError(f"{mode} conv1d: {n_samples} samples shorter than kernel {k}")
        return self._record(
            f"conv1d_{mode}", _conv_forward(x.value, w.value, mode), (x.index, w.index),
            lambda g: (
                _conv_grad_input(g, w.value, n_samples, mode),
                _conv_grad_weight(g, x.value, k, mode),
            ),
        )

    def conv1d(self, x: Operand, w: Operand) -> Node:
        """x: (N, C, T), w: (O, C, K) -> (N, O, T), same-length zero padding."""
        return self._conv(x, w, "dense")

    def depthwise_conv1d(self, x: Operand, w: Operand) -> Node:
        """x: (N, C, T), w: (C, G, K) -> (N, C, G, T); every channel has its own G filters."""
        return self._conv(x, w, "depthwise")

    # ---- losses ----

    def softmax_cross_entropy(self, logits: Operand, labels) -> Node:
        logits = self._lift(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
        probs = softmax(logits.value)
        rows = np.arange(labels.size)
        loss = -np.mean(np.log(np.clip(probs[rows, labels], 1e-300, None)))
        onehot = np.zeros_like(probs)
        onehot[rows, labels] = 1.0
        return self._record(
            "softmax_cross_entropy", loss, (logits.index,),
            lambda g: (g * (probs - onehot) / labels.size,),
        )

    def custom(self, inputs: Sequence[Node], value, vjp: VJP, op: str = "custom") -> Node:
        """Registers a value whose vector-Jacobian product is supplied by the caller."""
        nodes = [self._lift(item) for item in inputs]
        return self._record(op, value, [node.index for node in nodes], vjp)

    # ---- reverse pass ----

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        if not isinstance(loss, Node) or loss.tape is not self or loss.index >= len(self.nodes) \
                or self.nodes[loss.index] is not loss:
            raise TapeError("loss is not on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)

        for node in reversed(self.nodes[:loss.index + 1]):
            grad = grads[node.index]
            if grad is None or node.vjp is None:
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(grad)):
                if parent_grad is None:
                    continue
                if parent >= node.index:
                    raise TapeError(f"cycle detected at node {node.index} ({node.op})")
                parent_grad = np.asarray(parent_grad, dtype=np.float64)
                if parent_grad.shape != self.nodes[parent].shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {parent_grad.shape} "
                        f"does not match input shape {self.nodes[parent].shape}"
                    )
                if grads[parent] is None:
                    grads[parent] = parent_grad
                else:
                    grads[parent] = grads[parent] + parent_grad

        result: Dict[str, np.ndarray] = {}
        for name, index in self.parameters.items():
            grad = grads[index] if index <= loss.index else None
            result[name] = grad if grad is not None else np.zeros_like(self.nodes[index].value)
        return result


def backward(tape: Tape, loss: Node) -> Dict[str, np.ndarray]:
    return tape.backward(loss)


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)
