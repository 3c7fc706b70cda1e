"""Dense float64 matrices with reverse-mode automatic differentiation.

Matrices are plain 2-D C-order float64 numpy arrays.  A forward pass
records every operation as a node on a `Tape`; `backward` walks the
node list once in reverse, accumulating vector-Jacobian products into
each node's gradient slot and finally into the `Param` leaves that
were read onto the tape.

A tape is single-use and single-threaded.  Independent tapes (one per
training window, per seed, per tuning trial) share nothing mutable
except `Param` objects, which are only written between passes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Mat",
    "ShapeError",
    "NumericError",
    "Param",
    "Value",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "relu",
    "tanh",
    "exp",
    "neg",
    "ew",
    "matmul",
    "transpose",
    "concat_cols",
    "mean_stack",
    "sum_all",
    "add_rowvec",
    "scale_var",
    "clamp",
    "l2_normalize_rows",
    "masked_softmax_columns",
    "bce_with_logits_masked",
    "backward",
]

Mat = np.ndarray  # always 2-D, float64, C-order

EPS_NORM = 1e-12  # denominator clamp for zero rows in l2_normalize_rows


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


def as_mat(x) -> Mat:
    """Coerce to a 2-D float64 matrix (scalars become 1x1)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Param:
    """A named trainable matrix with a gradient slot of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = as_mat(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        """Scalar value of a 1x1 parameter."""
        if self.value.shape != (1, 1):
            raise ShapeError(f"parameter {self.name!r} has shape {self.value.shape}, not 1x1")
        return float(self.value[0, 0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name!r}, shape={self.value.shape})"


class Value:
    """One tape node: a computed matrix plus how to push gradients back."""

    __slots__ = ("tape", "idx", "data", "op", "parents", "vjp", "grad")

    def __init__(self, tape: "Tape", idx: int, data: Mat, op: str,
                 parents: tuple["Value", ...],
                 vjp: Callable[[Mat], Sequence[Mat | None]] | None) -> None:
        self.tape = tape
        self.idx = idx
        self.data = data
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.grad: Mat | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Value({self.op}, shape={self.data.shape}, idx={self.idx})"


class Tape:
    """Ordered record of one forward computation (parents precede children)."""

    def __init__(self) -> None:
        self.nodes: list[Value] = []
        self._param_leaves: dict[int, tuple[Param, Value]] = {}

    def _record(self, data: Mat, op: str, parents: tuple[Value, ...],
                vjp: Callable[[Mat], Sequence[Mat | None]] | None) -> Value:
        node = Value(self, len(self.nodes), data, op, parents, vjp)
        self.nodes.append(node)
        return node

    def constant(self, x) -> Value:
        """Enter a non-trainable matrix (data, masks, noise) onto the tape."""
        return self._record(as_mat(x), "const", (), None)

    def leaf(self, param: Param) -> Value:
        """Read a Param onto the tape; one node per (tape, param).

        Repeated reads return the same node, so weight sharing (the same
        parameter used for every snapshot in a window) accumulates
        gradients naturally through the node's multiple consumers.
        """
        key = id(param)
        cached = self._param_leaves.get(key)
        if cached is not None:
            return cached[1]
        node = self._record(param.value, f"param:{param.name}", (), None)
        self._param_leaves[key] = (param, node)
        return node


def _same_tape(*vals: Value) -> Tape:
    tape = vals[0].tape
    for v in vals[1:]:
        if v.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def _require_same_shape(op: str, a: Value, b: Value) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a: Value, b: Value) -> Value:
    _require_same_shape("add", a, b)
    return _same_tape(a, b)._record(a.data + b.data, "add", (a, b),
                                    lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    _require_same_shape("sub", a, b)
    return _same_tape(a, b)._record(a.data - b.data, "sub", (a, b),
                                    lambda g: (g, -g))


def mul(a: Value, b: Value) -> Value:
    _require_same_shape("mul", a, b)
    return _same_tape(a, b)._record(a.data * b.data, "mul", (a, b),
                                    lambda g: (g * b.data, g * a.data))


def scale(a: Value, c: float) -> Value:
    """Multiply by a fixed (non-trainable) scalar."""
    c = float(c)
    return a.tape._record(a.data * c, "scale", (a,), lambda g: (g * c,))


def sigmoid(a: Value) -> Value:
    y = _sigmoid(a.data)
    return a.tape._record(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Value) -> Value:
    y = np.maximum(a.data, 0.0)
    pos = a.data > 0.0
    return a.tape._record(y, "relu", (a,), lambda g: (g * pos,))


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)
    return a.tape._record(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Value) -> Value:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.isfinite(y).all():
        raise NumericError("exp overflowed to a non-finite value")
    return a.tape._record(y, "exp", (a,), lambda g: (g * y,))


def neg(a: Value) -> Value:
    return a.tape._record(-a.data, "neg", (a,), lambda g: (-g,))


_EW_UNARY = {"sigmoid": sigmoid, "relu": relu, "tanh": tanh, "exp": exp, "neg": neg}
_EW_BINARY = {"add": add, "sub": sub, "mul": mul}


def ew(kind: str, a: Value, b: Value | None = None, *, c: float | None = None) -> Value:
    """Dispatch an elementwise op by kind.

    Binary kinds (add, sub, mul) need `b`; "scale" needs the fixed
    scalar `c`; unary kinds take `a` alone.
    """
    if kind in _EW_BINARY:
        if b is None:
            raise ValueError(f"ew({kind!r}) needs a second operand")
        return _EW_BINARY[kind](a, b)
    if kind == "scale":
        if c is None:
            raise ValueError("ew('scale') needs the scalar c")
        return scale(a, c)
    if kind in _EW_UNARY:
        if b is not None:
            raise ValueError(f"ew({kind!r}) is unary")
        return _EW_UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def _sigmoid(x: Mat) -> Mat:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# structural operations
# ---------------------------------------------------------------------------

def matmul(a: Value, b: Value) -> Value:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain")

    def vjp(g: Mat):
        return g @ b.data.T, a.data.T @ g

    return _same_tape(a, b)._record(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a: Value) -> Value:
    return a.tape._record(np.ascontiguousarray(a.data.T), "transpose", (a,),
                          lambda g: (np.ascontiguousarray(g.T),))


def concat_cols(a: Value, b: Value) -> Value:
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: row counts {a.data.shape[0]} and {b.data.shape[0]} differ")
    na = a.data.shape[1]

    def vjp(g: Mat):
        return np.ascontiguousarray(g[:, :na]), np.ascontiguousarray(g[:, na:])

    return _same_tape(a, b)._record(np.hstack([a.data, b.data]), "concat_cols", (a, b), vjp)


def mean_stack(ms: Sequence[Value]) -> Value:
    if len(ms) == 0:
        raise ValueError("mean_stack: empty list")
    shape = ms[0].data.shape
    for m in ms[1:]:
        if m.data.shape != shape:
            raise ShapeError(f"mean_stack: shapes {shape} and {m.data.shape} differ")
    k = len(ms)
    out = ms[0].data.copy()
    for m in ms[1:]:
        out += m.data
    out /= k

    def vjp(g: Mat):
        share = g / k
        return tuple(share for _ in ms)

    return _same_tape(*ms)._record(out, "mean_stack", tuple(ms), vjp)


def sum_all(a: Value) -> Value:
    """Sum of all entries, as a 1x1 matrix."""
    ones_shape = a.data.shape
    out = np.array([[a.data.sum()]])
    return a.tape._record(out, "sum_all", (a,),
                          lambda g: (np.full(ones_shape, g[0, 0]),))


def add_rowvec(a: Value, row: Value) -> Value:
    """Add a 1xD bias row to every row of an NxD matrix."""
    if row.data.shape != (1, a.data.shape[1]):
        raise ShapeError(f"add_rowvec: bias shape {row.data.shape} does not match columns of {a.data.shape}")
    return _same_tape(a, row)._record(a.data + row.data, "add_rowvec", (a, row),
                                      lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale_var(s: Value, m: Value) -> Value:
    """Multiply a matrix by a trainable 1x1 scalar; gradient reaches both."""
    if s.data.shape != (1, 1):
        raise ShapeError(f"scale_var: scalar operand has shape {s.data.shape}, not 1x1")

    def vjp(g: Mat):
        return np.array([[float((g * m.data).sum())]]), g * s.data[0, 0]

    return _same_tape(s, m)._record(s.data[0, 0] * m.data, "scale_var", (s, m), vjp)


def clamp(a: Value, lo: float, hi: float) -> Value:
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return a.tape._record(y, "clamp", (a,), lambda g: (g * inside,))


def l2_normalize_rows(m: Value, s: Value) -> Value:
    """Scale each row to norm |s|; near-zero rows use a clamped denominator.

    Row i of the output is s * m_i / max(||m_i||, EPS_NORM).  Differentiable
    in both the matrix and the trainable 1x1 scale.
    """
    if s.data.shape != (1, 1):
        raise ShapeError(f"l2_normalize_rows: scale has shape {s.data.shape}, not 1x1")
    if m.data.size == 0:
        raise ShapeError("l2_normalize_rows: empty matrix")
    sval = s.data[0, 0]
    norms = np.linalg.norm(m.data, axis=1, keepdims=True)
    denom = np.maximum(norms, EPS_NORM)
    unit = m.data / denom
    out = sval * unit

    def vjp(g: Mat):
        grad_s = np.array([[float((g * unit).sum())]])
        # active rows: d(m_i/n_i)/dm_i = (I - u u^T)/n_i; clamped rows: I/eps
        dot = (g * m.data).sum(axis=1, keepdims=True)
        grad_m = sval * (g - m.data * (dot / denom**2)) / denom
        clamped = norms <= EPS_NORM
        if clamped.any():
            rows = clamped[:, 0]
            grad_m[rows] = sval * g[rows] / EPS_NORM
        return grad_s, grad_m

    return _same_tape(m, s)._record(out, "l2_normalize_rows", (s, m), vjp)


def masked_softmax_columns(values: Value, mask: Mat) -> Value:
    """Column-wise softmax restricted to mask=1 entries.

    Masked-out entries get probability exactly 0; columns whose mask is
    all zero come out as zero columns.  The max of each column's
    surviving entries is subtracted before exponentiation for stability.
    Gradients flow to `values` only (the mask is data).
    """
    mask = as_mat(mask)
    if mask.shape != values.data.shape:
        raise ShapeError(f"masked_softmax_columns: shapes {values.data.shape} and {mask.shape} differ")
    on = mask != 0.0
    # column max over surviving entries; fully masked columns use 0
    shifted = np.where(on, values.data, -np.inf)
    colmax = shifted.max(axis=0)
    colmax = np.where(np.isfinite(colmax), colmax, 0.0)
    # surviving entries have values - colmax <= 0, so exp never overflows
    e = np.exp(np.where(on, values.data - colmax, 0.0)) * on
    colsum = e.sum(axis=0)
    safe = np.where(colsum > 0.0, colsum, 1.0)
    p = e / safe

    def vjp(g: Mat):
        dot = (p * g).sum(axis=0)
        return (p * (g - dot),)

    return values.tape._record(p, "masked_softmax_columns", (values,), vjp)


def bce_with_logits_masked(logits: Value, targets: Mat, mask: Mat,
                           pos_weight: float | None = None) -> Value:
    """Mean binary cross-entropy with logits over mask=1 entries (1x1).

    Stable softplus form: w*y*softplus(-x) + (1-y)*softplus(x), averaged
    over the masked entry count.  `pos_weight` multiplies the positive
    term (default 1).
    """
    targets = as_mat(targets)
    mask = as_mat(mask)
    if targets.shape != logits.data.shape or mask.shape != logits.data.shape:
        raise ShapeError(
            f"bce_with_logits_masked: logits {logits.data.shape}, targets {targets.shape}, mask {mask.shape}")
    count = float(mask.sum())
    if count <= 0:
        raise ValueError("bce_with_logits_masked: mask selects no entries")
    w = 1.0 if pos_weight is None else float(pos_weight)
    x = logits.data
    softplus_pos = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    softplus_neg = softplus_pos - x  # softplus(-x) = softplus(x) - x
    per_entry = w * targets * softplus_neg + (1.0 - targets) * softplus_pos
    out = np.array([[float((per_entry * mask).sum() / count)]])

    def vjp(g: Mat):
        sig = _sigmoid(x)
        dx = sig * (1.0 + (w - 1.0) * targets) - w * targets
        return (g[0, 0] / count * mask * dx,)

    return logits.tape._record(out, "bce_with_logits", (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Value) -> None:
    """Populate Param gradients for everything reachable from `loss`.

    The loss must be 1x1.  Each node is visited exactly once, in
    reverse recording order; Params not reachable from the loss keep
    whatever gradient they already had (zero after `zero_grad`).
    """
    if loss.tape is not tape:
        raise ValueError("loss was recorded on a different tape")
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.data.shape}")
    if not np.isfinite(loss.data[0, 0]):
        raise NumericError("backward: loss is non-finite")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.idx + 1]):
        if node.grad is None or node.vjp is None:
            continue
        parent_grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g
    for param, leaf in tape._param_leaves.values():
        if leaf.grad is not None:
            param.grad += leaf.grad
