"""Reverse-mode automatic differentiation on dense float64 arrays.

Everything the library differentiates goes through the Tape defined here. A
tape is an append-only list of primitive records. Gradients are produced by
walking the records backwards and emitting the adjoint arithmetic as new
records on the same tape, so an input-gradient can itself appear inside a
loss expression and be differentiated once more with respect to parameters
(double backprop). That second pass is exactly what an explanation-matching
loss needs.

Conventions:

* values are numpy float64 arrays; matrices are 2-d, scalars have shape ().
* relu is differentiated with relu'(0) = 0, and its second derivative is 0
  everywhere: the active-unit mask is captured as a constant leaf, which
  implements the almost-everywhere convention for the kink.
* the primitive set is intentionally small; richer functions (softmax with
  a detached row max, bias broadcast, cross-entropy) are composed from it
  in models.py.

The flat-buffer value carrier required by the external contracts is the
numpy ndarray itself (row-major float64); ``as_array`` is the single entry
point that validates shape and finiteness for data coming from outside.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tape",
    "Var",
    "as_array",
    "grad",
    "svd",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "addc",
    "recip",
    "matmul",
    "transpose",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sum_all",
    "sum_rows",
    "sum_cols",
    "expand_rows",
    "expand_cols",
    "expand_scalar",
    "project_rows",
]

_F64 = np.float64


class ContractError(ValueError):
    """An operation was invoked outside its documented contract."""


def as_array(data, check_finite: bool = True) -> np.ndarray:
    """Coerce to float64 ndarray, rejecting NaN/Inf unless told otherwise."""
    arr = np.asarray(data, dtype=_F64)
    if check_finite:
        finite = np.isfinite(arr)
        if not bool(finite.all()):
            n_bad = int(arr.size - np.count_nonzero(finite))
            raise ContractError(f"tensor has {n_bad} non-finite element(s)")
    return arr


# ---------------------------------------------------------------------------
# forward evaluation table (shared between recording and replay)
# ---------------------------------------------------------------------------

_EVAL = {}


def _op(name):
    def register(fn):
        _EVAL[name] = fn
        return fn

    return register


@_op("leaf")
def _ev_leaf(vals, aux):
    return aux


@_op("neg")
def _ev_neg(vals, aux):
    return -vals[0]


@_op("add")
def _ev_add(vals, aux):
    return vals[0] + vals[1]


@_op("sub")
def _ev_sub(vals, aux):
    return vals[0] - vals[1]


@_op("mul")
def _ev_mul(vals, aux):
    return vals[0] * vals[1]


@_op("scale")
def _ev_scale(vals, aux):
    return vals[0] * aux


@_op("addc")
def _ev_addc(vals, aux):
    return vals[0] + aux


@_op("recip")
def _ev_recip(vals, aux):
    return 1.0 / vals[0]


@_op("matmul")
def _ev_matmul(vals, aux):
    return vals[0] @ vals[1]


@_op("transpose")
def _ev_transpose(vals, aux):
    return np.ascontiguousarray(vals[0].T)


@_op("relu")
def _ev_relu(vals, aux):
    return np.maximum(vals[0], 0.0)


@_op("softplus")
def _ev_softplus(vals, aux):
    z = aux * vals[0]
    return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / aux


@_op("sigmoid")
def _ev_sigmoid(vals, aux):
    x = vals[0]
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))  # exponent is always <= 0
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


@_op("exp")
def _ev_exp(vals, aux):
    return np.exp(vals[0])


@_op("log")
def _ev_log(vals, aux):
    return np.log(vals[0])


@_op("sum_all")
def _ev_sum_all(vals, aux):
    return np.asarray(vals[0].sum(), dtype=_F64)


@_op("sum_rows")
def _ev_sum_rows(vals, aux):
    return vals[0].sum(axis=1, keepdims=True)


@_op("sum_cols")
def _ev_sum_cols(vals, aux):
    return vals[0].sum(axis=0, keepdims=True)


@_op("expand_rows")
def _ev_expand_rows(vals, aux):
    return np.broadcast_to(vals[0], (aux, vals[0].shape[1])).copy()


@_op("expand_cols")
def _ev_expand_cols(vals, aux):
    return np.broadcast_to(vals[0], (vals[0].shape[0], aux)).copy()


@_op("expand_scalar")
def _ev_expand_scalar(vals, aux):
    return np.full(aux, float(vals[0]))


@_op("project_rows")
def _ev_project_rows(vals, aux):
    # aux is a constant stack of bases, shape (batch, D, d); row b of the
    # output is Q_b Q_b^T h_b.
    h = vals[0]
    t = np.einsum("bdk,bd->bk", aux, h)
    return np.einsum("bdk,bk->bd", aux, t)


# ---------------------------------------------------------------------------
# tape and variable handles
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("op", "value", "parents", "aux")

    def __init__(self, op, value, parents, aux):
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux


class Tape:
    """Append-only record of primitive evaluations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, parents, aux=None) -> "Var":
        vals = [self.nodes[p].value for p in parents]
        value = _EVAL[op](vals, aux)
        self.nodes.append(Node(op, value, parents, aux))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, data, check_finite: bool = True) -> "Var":
        arr = as_array(data, check_finite=check_finite).copy()
        arr.setflags(write=False)
        return self._record("leaf", (), arr)

    def replay(self) -> list:
        """Recompute every node from its parents and return the fresh values.

        Replay goes through the same evaluation functions as recording did,
        so the results must match the stored values bit for bit; tests assert
        exact equality.
        """
        fresh: list[np.ndarray] = []
        for node in self.nodes:
            vals = [fresh[p] for p in node.parents]
            fresh.append(_EVAL[node.op](vals, node.aux))
        return fresh


class Var:
    """Handle to one tape slot."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var(idx={self.idx}, op={node.op!r}, shape={node.value.shape})"

    # arithmetic sugar; the module-level functions are the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_same_tape(a: Var, b: Var, op: str):
    if a.tape is not b.tape:
        raise ContractError(f"{op}: operands live on different tapes")


def _check_same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_2d(a: Var, op: str):
    if a.value.ndim != 2:
        raise ContractError(f"{op}: expected a 2-d operand, got shape {a.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    _check_same_tape(a, b, "add")
    _check_same_shape(a, b, "add")
    return a.tape._record("add", (a.idx, b.idx))


def sub(a: Var, b: Var) -> Var:
    _check_same_tape(a, b, "sub")
    _check_same_shape(a, b, "sub")
    return a.tape._record("sub", (a.idx, b.idx))


def mul(a: Var, b: Var) -> Var:
    _check_same_tape(a, b, "mul")
    _check_same_shape(a, b, "mul")
    return a.tape._record("mul", (a.idx, b.idx))


def neg(a: Var) -> Var:
    return a.tape._record("neg", (a.idx,))


def scale(a: Var, c: float) -> Var:
    return a.tape._record("scale", (a.idx,), float(c))


def addc(a: Var, c: float) -> Var:
    return a.tape._record("addc", (a.idx,), float(c))


def recip(a: Var) -> Var:
    return a.tape._record("recip", (a.idx,))


def matmul(a: Var, b: Var) -> Var:
    _check_same_tape(a, b, "matmul")
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return a.tape._record("matmul", (a.idx, b.idx))


def transpose(a: Var) -> Var:
    _check_2d(a, "transpose")
    return a.tape._record("transpose", (a.idx,))


def relu(a: Var) -> Var:
    return a.tape._record("relu", (a.idx,))


def softplus(a: Var, beta: float = 10.0) -> Var:
    beta = float(beta)
    if beta <= 0:
        raise ContractError("softplus: beta must be positive")
    return a.tape._record("softplus", (a.idx,), beta)


def sigmoid(a: Var) -> Var:
    return a.tape._record("sigmoid", (a.idx,))


def exp(a: Var) -> Var:
    return a.tape._record("exp", (a.idx,))


def log(a: Var) -> Var:
    return a.tape._record("log", (a.idx,))


def sum_all(a: Var) -> Var:
    return a.tape._record("sum_all", (a.idx,))


def sum_rows(a: Var) -> Var:
    _check_2d(a, "sum_rows")
    return a.tape._record("sum_rows", (a.idx,))


def sum_cols(a: Var) -> Var:
    _check_2d(a, "sum_cols")
    return a.tape._record("sum_cols", (a.idx,))


def expand_rows(a: Var, m: int) -> Var:
    _check_2d(a, "expand_rows")
    if a.shape[0] != 1:
        raise ContractError(f"expand_rows: expected a (1, n) operand, got {a.shape}")
    if m < 1:
        raise ContractError("expand_rows: m must be >= 1")
    return a.tape._record("expand_rows", (a.idx,), int(m))


def expand_cols(a: Var, n: int) -> Var:
    _check_2d(a, "expand_cols")
    if a.shape[1] != 1:
        raise ContractError(f"expand_cols: expected an (m, 1) operand, got {a.shape}")
    if n < 1:
        raise ContractError("expand_cols: n must be >= 1")
    return a.tape._record("expand_cols", (a.idx,), int(n))


def expand_scalar(a: Var, shape) -> Var:
    if a.shape != ():
        raise ContractError(f"expand_scalar: expected a scalar operand, got {a.shape}")
    return a.tape._record("expand_scalar", (a.idx,), tuple(int(s) for s in shape))


def project_rows(h: Var, basis) -> Var:
    """Row-wise orthogonal projection h_b -> Q_b Q_b^T h_b.

    ``basis`` is a constant (batch, D, d) stack; it is captured on the tape
    and never differentiated. The operation is self-adjoint, which makes its
    backward rule the same projection applied to the incoming adjoint.
    """
    _check_2d(h, "project_rows")
    q = as_array(basis)
    if q.ndim != 3 or q.shape[0] != h.shape[0] or q.shape[1] != h.shape[1]:
        raise ContractError(
            f"project_rows: basis shape {q.shape} does not match rows {h.shape}"
        )
    q = q.copy()
    q.setflags(write=False)
    return h.tape._record("project_rows", (h.idx,), q)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

_VJP = {}


def _vjp(name):
    def register(fn):
        _VJP[name] = fn
        return fn

    return register


@_vjp("neg")
def _vjp_neg(node, out, g, pv):
    return [(node.parents[0], neg(g))]


@_vjp("add")
def _vjp_add(node, out, g, pv):
    return [(node.parents[0], g), (node.parents[1], g)]


@_vjp("sub")
def _vjp_sub(node, out, g, pv):
    return [(node.parents[0], g), (node.parents[1], neg(g))]


@_vjp("mul")
def _vjp_mul(node, out, g, pv):
    return [(node.parents[0], mul(g, pv[1])), (node.parents[1], mul(g, pv[0]))]


@_vjp("scale")
def _vjp_scale(node, out, g, pv):
    return [(node.parents[0], scale(g, node.aux))]


@_vjp("addc")
def _vjp_addc(node, out, g, pv):
    return [(node.parents[0], g)]


@_vjp("recip")
def _vjp_recip(node, out, g, pv):
    return [(node.parents[0], neg(mul(g, mul(out, out))))]


@_vjp("matmul")
def _vjp_matmul(node, out, g, pv):
    return [
        (node.parents[0], matmul(g, transpose(pv[1]))),
        (node.parents[1], matmul(transpose(pv[0]), g)),
    ]


@_vjp("transpose")
def _vjp_transpose(node, out, g, pv):
    return [(node.parents[0], transpose(g))]


@_vjp("relu")
def _vjp_relu(node, out, g, pv):
    # the active-set mask is a constant: relu'' = 0 almost everywhere, and
    # exactly 0 at the kink by the relu'(0) = 0 convention
    mask = (pv[0].value > 0.0).astype(_F64)
    return [(node.parents[0], mul(g, g.tape.leaf(mask, check_finite=False)))]


@_vjp("softplus")
def _vjp_softplus(node, out, g, pv):
    return [(node.parents[0], mul(g, sigmoid(scale(pv[0], node.aux))))]


@_vjp("sigmoid")
def _vjp_sigmoid(node, out, g, pv):
    one_minus = addc(neg(out), 1.0)
    return [(node.parents[0], mul(g, mul(out, one_minus)))]


@_vjp("exp")
def _vjp_exp(node, out, g, pv):
    return [(node.parents[0], mul(g, out))]


@_vjp("log")
def _vjp_log(node, out, g, pv):
    return [(node.parents[0], mul(g, recip(pv[0])))]


@_vjp("sum_all")
def _vjp_sum_all(node, out, g, pv):
    return [(node.parents[0], expand_scalar(g, pv[0].shape))]


@_vjp("sum_rows")
def _vjp_sum_rows(node, out, g, pv):
    return [(node.parents[0], expand_cols(g, pv[0].shape[1]))]


@_vjp("sum_cols")
def _vjp_sum_cols(node, out, g, pv):
    return [(node.parents[0], expand_rows(g, pv[0].shape[0]))]


@_vjp("expand_rows")
def _vjp_expand_rows(node, out, g, pv):
    return [(node.parents[0], sum_cols(g))]


@_vjp("expand_cols")
def _vjp_expand_cols(node, out, g, pv):
    return [(node.parents[0], sum_rows(g))]


@_vjp("expand_scalar")
def _vjp_expand_scalar(node, out, g, pv):
    return [(node.parents[0], sum_all(g))]


@_vjp("project_rows")
def _vjp_project_rows(node, out, g, pv):
    return [(node.parents[0], project_rows(g, node.aux))]


def grad(out: Var, wrt: Sequence[Var]) -> list:
    """Reverse-mode gradients of a recorded scalar with respect to ``wrt``.

    The adjoint arithmetic is emitted onto the same tape, so the returned
    Vars can participate in further recorded expressions and be
    differentiated again. Vars that the output does not depend on get a
    zero-filled leaf of their own shape.
    """
    tape = out.tape
    if out.shape != ():
        raise ContractError(
            "grad needs a scalar seed; reduce the output or select one component first"
        )
    for w in wrt:
        if w.tape is not tape:
            raise ContractError("grad: wrt variable lives on a different tape")

    limit = out.idx
    adjoint: dict[int, Var] = {limit: tape.leaf(np.ones(()), check_finite=False)}
    for idx in range(limit, -1, -1):
        g = adjoint.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op == "leaf":
            continue
        pv = [Var(tape, p) for p in node.parents]
        for pidx, contrib in _VJP[node.op](node, Var(tape, idx), g, pv):
            prev = adjoint.get(pidx)
            adjoint[pidx] = contrib if prev is None else add(prev, contrib)

    results = []
    for w in wrt:
        gw = adjoint.get(w.idx) if w.idx <= limit else None
        if gw is None:
            gw = tape.leaf(np.zeros(w.shape), check_finite=False)
        results.append(gw)
    return results


# ---------------------------------------------------------------------------
# singular value decomposition
# ---------------------------------------------------------------------------


def svd(m) -> tuple:
    """Thin SVD, m = U diag(s) V^T with orthonormal columns in U and V.

    Singular values come back sorted descending and non-negative. Degenerate
    and rank-deficient inputs are fine. Backed by LAPACK through numpy, which
    meets the reconstruction and orthonormality tolerances the callers check;
    the matrices involved here are small.
    """
    arr = as_array(m)
    if arr.ndim != 2:
        raise ContractError(f"svd: expected a matrix, got shape {arr.shape}")
    u, s, vh = np.linalg.svd(arr, full_matrices=False)
    return u, s, np.ascontiguousarray(vh.T)
