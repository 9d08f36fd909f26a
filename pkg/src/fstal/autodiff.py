"""Minimal reverse-mode differentiation over dense float64 matrices.

Everything is a 2-D float64 array; scalars are 1x1 matrices. A ``Tape``
records primitive applications in creation order, which is automatically a
topological order, and ``Tape.backward`` walks it once in reverse. The op
set is exactly what the few-shot model needs (matmul, row softmax, layer
norm, sigmoid with a clamp, row-wise cosine, elementwise arithmetic, log,
dropout-by-mask, column concat, transpose, sum). No broadcasting, no GPU,
no higher-order derivatives.

Numerical conventions, pinned so tests are unambiguous:

* sigmoid outputs are clamped into [SIGMOID_CLAMP, 1 - SIGMOID_CLAMP] so a
  downstream log is always finite;
* layer norm uses the population (biased) variance with stabilizer
  ``LAYER_NORM_EPS``;
* row-wise cosine uses denominator ``|a| * |w| + COSINE_EPS``.

``grad_check`` compares tape gradients against central finite differences
and is the house oracle for every composite loss built here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_EPS = 1e-8
LAYER_NORM_EPS = 1e-5
SIGMOID_CLAMP = 1e-7


class TapeError(RuntimeError):
    """Misuse of the tape: shape mismatch, double backward, etc."""


def as_matrix(value) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise TapeError(f"expected a matrix, got ndim={arr.ndim}")
    return arr


class Node:
    """One value on a tape: a matrix plus a gradient slot.

    ``parents`` and ``backward_fn`` define the reverse rule; leaves have
    neither. ``needs_grad`` is true when the node is a trainable leaf or
    depends on one, and gates gradient propagation.
    """

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn",
                 "requires_grad", "needs_grad", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None,
                 requires_grad=False, name=""):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad or any(p.needs_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, grad_value: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad_value.copy()
        else:
            self.grad += grad_value


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, so every node's inputs precede
    it. One backward pass per forward build; a second call is rejected.
    A tape is single-threaded; independent tapes may run concurrently.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def leaf(self, value, requires_grad: bool = False, name: str = "") -> Node:
        node = Node(self, as_matrix(value), requires_grad=requires_grad,
                    name=name)
        self.nodes.append(node)
        return node

    def record(self, value, parents, backward_fn, name="") -> Node:
        """Append an op result. ``backward_fn(out_grad)`` must return one
        gradient per parent (``None`` for parents that need none)."""
        for p in parents:
            if p.tape is not self:
                raise TapeError("cannot mix nodes from different tapes")
        node = Node(self, value, tuple(parents), backward_fn, name=name)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Reverse-topological gradient accumulation from a scalar loss."""
        if loss.tape is not self:
            raise TapeError("loss node belongs to a different tape")
        if self._backward_done:
            raise TapeError("backward already ran on this tape")
        if loss.value.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got {loss.value.shape}")
        self._backward_done = True
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.backward_fn is None or node.grad is None:
                continue
            if not node.needs_grad:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.needs_grad:
                    continue
                parent._accumulate(g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix product. d a = g b^T, d b = a^T g."""
    if a.value.shape[1] != b.value.shape[0]:
        raise TapeError(
            f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def backward(g):
        ga = g @ b.value.T if a.needs_grad else None
        gb = a.value.T @ g if b.needs_grad else None
        return ga, gb

    return a.tape.record(out, (a, b), backward, name="matmul")


def transpose(a: Node) -> Node:
    def backward(g):
        return (g.T,)

    return a.tape.record(a.value.T.copy(), (a,), backward, name="transpose")


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise TapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return a.tape.record(a.value + b.value, (a, b),
                         lambda g: (g, g), name="add")


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise TapeError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    return a.tape.record(a.value - b.value, (a, b),
                         lambda g: (g, -g), name="sub")


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product of same-shape matrices."""
    if a.value.shape != b.value.shape:
        raise TapeError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")

    def backward(g):
        ga = g * b.value if a.needs_grad else None
        gb = g * a.value if b.needs_grad else None
        return ga, gb

    return a.tape.record(a.value * b.value, (a, b), backward, name="mul")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,), name="scale")


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise TapeError("log requires strictly positive input")
    out = np.log(a.value)

    def backward(g):
        return (g / a.value,)

    return a.tape.record(out, (a,), backward, name="log")


def sigmoid(a: Node) -> Node:
    """Elementwise logistic, output clamped into (0, 1).

    The clamp keeps downstream cross-entropy logs finite; the backward rule
    uses the clamped output, which is indistinguishable from the exact
    derivative at the magnitudes where the clamp engages.
    """
    out = sigmoid_forward(a.value)

    def backward(g):
        return (g * out * (1.0 - out),)

    return a.tape.record(out, (a,), backward, name="sigmoid")


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """Stable sigmoid used by both the tape op and plain-numpy callers."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)


def row_softmax(a: Node) -> Node:
    """Softmax along each row, computed with per-row max subtraction."""
    out = row_softmax_forward(a.value)

    def backward(g):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return (out * (g - inner),)

    return a.tape.record(out, (a,), backward, name="row_softmax")


def row_softmax_forward(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=1, keepdims=True)


def layer_norm(a: Node, gain: Node, bias: Node) -> Node:
    """Per-row normalization to zero mean / unit population variance,
    then an affine gain and bias (each a 1 x cols row)."""
    cols = a.value.shape[1]
    if gain.value.shape != (1, cols) or bias.value.shape != (1, cols):
        raise TapeError("layer_norm gain/bias must be 1 x cols rows")
    mean = np.mean(a.value, axis=1, keepdims=True)
    var = np.mean((a.value - mean) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    normed = (a.value - mean) * inv_std
    out = normed * gain.value + bias.value

    def backward(g):
        gn = g * gain.value
        ga = None
        if a.needs_grad:
            mean_gn = np.mean(gn, axis=1, keepdims=True)
            mean_gn_x = np.mean(gn * normed, axis=1, keepdims=True)
            ga = inv_std * (gn - mean_gn - normed * mean_gn_x)
        ggain = np.sum(g * normed, axis=0, keepdims=True) if gain.needs_grad else None
        gbias = np.sum(g, axis=0, keepdims=True) if bias.needs_grad else None
        return ga, ggain, gbias

    return a.tape.record(out, (a, gain, bias), backward, name="layer_norm")


def _cosine_parts(a: np.ndarray, w: np.ndarray):
    wrow = w[0]
    norm_w = math.sqrt(float(wrow @ wrow))
    norms_a = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
    denom = norms_a * norm_w + COSINE_EPS
    out = (a @ wrow.reshape(-1, 1)) / denom
    return out, norms_a, norm_w, denom, wrow


def cosine_rows_forward(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Plain-numpy twin of the ``cosine_rows`` op (same float sequence)."""
    return _cosine_parts(as_matrix(a), as_matrix(w))[0]


def cosine_rows(a: Node, w: Node) -> Node:
    """Cosine similarity of every row of ``a`` against the single row ``w``.

    Output is rows x 1, each entry dot(a_t, w) / (|a_t| |w| + eps). Zero
    rows come out as ~0 thanks to the stabilizer.
    """
    if w.value.shape[0] != 1:
        raise TapeError("cosine_rows weight must be a single row")
    if a.value.shape[1] != w.value.shape[1]:
        raise TapeError(
            f"cosine_rows dim mismatch: {a.value.shape} vs {w.value.shape}")
    out, norms_a, norm_w, denom, wrow = _cosine_parts(a.value, w.value)

    def backward(g):
        safe_a = np.maximum(norms_a, 1e-300)
        safe_w = max(norm_w, 1e-300)
        ga = None
        if a.needs_grad:
            ga = g * (wrow[None, :] / denom
                      - out * norm_w / (safe_a * denom) * a.value)
        gw = None
        if w.needs_grad:
            per_row = (a.value / denom
                       - out * norms_a / (safe_w * denom) * wrow[None, :])
            gw = np.sum(g * per_row, axis=0, keepdims=True)
        return ga, gw

    return a.tape.record(out, (a, w), backward, name="cosine_rows")


def concat_cols(parts: list[Node]) -> Node:
    """Concatenate same-height matrices side by side."""
    if not parts:
        raise TapeError("concat_cols needs at least one input")
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise TapeError("concat_cols inputs must share row count")
    out = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]

    def backward(g):
        grads = []
        offset = 0
        for w in widths:
            grads.append(g[:, offset:offset + w])
            offset += w
        return tuple(grads)

    return parts[0].tape.record(out, tuple(parts), backward, name="concat_cols")


def dropout_mask(a: Node, mask: np.ndarray) -> Node:
    """Multiply by a fixed, pre-scaled dropout mask (inverted dropout).

    The mask is a constant: drawing it is the caller's business, so the op
    stays deterministic and finite-difference checkable.
    """
    mask = as_matrix(mask)
    if mask.shape != a.value.shape:
        raise TapeError("dropout mask shape mismatch")
    return a.tape.record(a.value * mask, (a,),
                         lambda g: (g * mask,), name="dropout")


def sum_all(a: Node) -> Node:
    """Sum of all entries, as a 1x1 matrix."""
    out = np.array([[np.sum(a.value)]])

    def backward(g):
        return (np.full(a.value.shape, g[0, 0]),)

    return a.tape.record(out, (a,), backward, name="sum_all")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-central-difference comparison."""

    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    tolerance: float = 1e-6
    nonfinite: bool = False

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tolerance


def grad_check(build_loss, point: dict, step: float = 1e-5,
               tolerance: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``build_loss(tape, nodes)`` gets one trainable leaf per entry of
    ``point`` (a dict name -> array) and must return a scalar node. Errors
    are normalized by max(1, |analytic|, |numeric|) per component; the
    report carries the max over everything plus a per-input breakdown.
    Non-finite evaluations are flagged, never masked.
    """
    arrays = {k: as_matrix(v).copy() for k, v in point.items()}

    def evaluate(current) -> float:
        tape = Tape()
        nodes = {k: tape.leaf(v, requires_grad=True) for k, v in current.items()}
        loss = build_loss(tape, nodes)
        return float(loss.value[0, 0])

    tape = Tape()
    nodes = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tape, nodes)
    tape.backward(loss)
    analytic = {k: (nodes[k].grad if nodes[k].grad is not None
                    else np.zeros_like(arrays[k]))
                for k in arrays}

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, arr in arrays.items():
        numeric = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = arr[idx]
            arr[idx] = saved + step
            up = evaluate(arrays)
            arr[idx] = saved - step
            down = evaluate(arrays)
            arr[idx] = saved
            numeric[idx] = (up - down) / (2.0 * step)
            if not (math.isfinite(up) and math.isfinite(down)):
                report.nonfinite = True
            it.iternext()
        diff = np.abs(analytic[name] - numeric)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic[name]),
                                           np.abs(numeric)))
        err = float(np.max(diff / denom)) if diff.size else 0.0
        report.per_input[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
