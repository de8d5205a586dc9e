"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The engine records every forward operation on a :class:`Tape` and computes
gradients by walking the tape backwards.  It is deliberately small: 2-D
matrices, 1-D vectors and 0-d scalars in 64-bit floats, no broadcasting
beyond scalar constants, no views.  Non-tensor operands (plain numbers or
ndarrays) are treated as constants and receive no gradient.

Reductions over the node axis of a graph (softmax normalizers, attention
aggregation) sort their addends before summing, so node-permuted inputs
produce bit-identical results.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested kernel."""


class ContractError(ValueError):
    """An operation was invoked outside its documented domain."""


class GradientCheckError(RuntimeError):
    """A finite-difference probe produced a non-finite value."""


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("value", "parents", "grad_fn", "fwd_fn")

    def __init__(self, value, parents, grad_fn, fwd_fn):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.fwd_fn = fwd_fn


class Tensor:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "nid")

    # force ndarray <op> Tensor to defer to the reflected operators below
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.nid].value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, nid={self.nid})"


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so every node's parents precede
    it; :meth:`replay` recomputes all interior values bit-exactly.  A tape
    and its tensors belong to a single thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = _as_const(value)
        nid = len(self.nodes)
        self.nodes.append(_Node(arr, (), None, None))
        self.params[name] = nid
        return Tensor(self, nid)

    def leaf(self, value) -> Tensor:
        """Record a constant input as an (unnamed, gradient-free) node."""
        nid = len(self.nodes)
        self.nodes.append(_Node(_as_const(value), (), None, None))
        return Tensor(self, nid)

    def record(self, value, parents, grad_fn, fwd_fn) -> Tensor:
        nid = len(self.nodes)
        self.nodes.append(_Node(value, parents, grad_fn, fwd_fn))
        return Tensor(self, nid)

    def replay(self) -> None:
        """Recompute every interior node from the leaves, in order."""
        nodes = self.nodes
        for node in nodes:
            if node.fwd_fn is not None:
                node.value = node.fwd_fn(*(nodes[p].value for p in node.parents))


def _tape_of(*operands) -> Tape:
    for x in operands:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("operation requires at least one Tensor operand")


def _val(x):
    return x.value if isinstance(x, Tensor) else _as_const(x)


def _check_same_shape(kernel: str, a, b) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kernel}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise DimensionError(f"add: shapes {av.shape} and {bv.shape} differ")
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    parents = tuple(x.nid for x in (a, b) if isinstance(x, Tensor))

    def grad_fn(g):
        out = []
        if a_t:
            out.append(_shrink(g, av.shape))
        if b_t:
            out.append(_shrink(g, bv.shape))
        return tuple(out)

    if a_t and b_t:
        fwd = lambda x, y: x + y
    elif a_t:
        fwd = lambda x, c=bv: x + c
    else:
        fwd = lambda y, c=av: c + y
    return tape.record(av + bv, parents, grad_fn, fwd)


def _shrink(g, shape):
    # Gradient of a scalar operand broadcast against an array: sum everything.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise DimensionError(f"sub: shapes {av.shape} and {bv.shape} differ")
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    parents = tuple(x.nid for x in (a, b) if isinstance(x, Tensor))

    def grad_fn(g):
        out = []
        if a_t:
            out.append(_shrink(g, av.shape))
        if b_t:
            out.append(_shrink(-g, bv.shape))
        return tuple(out)

    if a_t and b_t:
        fwd = lambda x, y: x - y
    elif a_t:
        fwd = lambda x, c=bv: x - c
    else:
        fwd = lambda y, c=av: c - y
    return tape.record(av - bv, parents, grad_fn, fwd)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise DimensionError(f"mul: shapes {av.shape} and {bv.shape} differ")
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    parents = tuple(x.nid for x in (a, b) if isinstance(x, Tensor))

    def grad_fn(g):
        out = []
        if a_t:
            out.append(_shrink(g * bv, av.shape))
        if b_t:
            out.append(_shrink(g * av, bv.shape))
        return tuple(out)

    if a_t and b_t:
        fwd = lambda x, y: x * y
    elif a_t:
        fwd = lambda x, c=bv: x * c
    else:
        fwd = lambda y, c=av: c * y
    return tape.record(av * bv, parents, grad_fn, fwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a python scalar constant."""
    c = float(c)
    av = a.value

    def grad_fn(g):
        return (g * c,)

    return a.tape.record(av * c, (a.nid,), grad_fn, lambda x, c=c: x * c)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    av = a.value
    keep = av >= 0.0
    factor = np.where(keep, 1.0, slope)

    def grad_fn(g):
        return (g * factor,)

    fwd = lambda x, s=slope: np.where(x >= 0.0, x, s * x)
    return a.tape.record(np.where(keep, av, slope * av), (a.nid,), grad_fn, fwd)


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_val(a.value)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return a.tape.record(out, (a.nid,), grad_fn, _sigmoid_val)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return a.tape.record(out, (a.nid,), grad_fn, np.tanh)


# ---------------------------------------------------------------------------
# structural kernels


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise DimensionError(
            f"matmul: operands must be 1-D or 2-D, got {av.shape} and {bv.shape}"
        )
    if transpose_b and bv.ndim != 2:
        raise DimensionError("matmul: transpose_b requires a 2-D right operand")
    b_eff = bv.T if transpose_b else bv
    inner_a = av.shape[-1]
    inner_b = b_eff.shape[0]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul: inner extents {av.shape} x "
            f"{'T' if transpose_b else ''}{bv.shape} do not conform"
        )
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    parents = tuple(x.nid for x in (a, b) if isinstance(x, Tensor))
    value = av @ b_eff

    def grad_fn(g):
        out = []
        if a_t:
            if av.ndim == 2 and b_eff.ndim == 2:
                ga = g @ b_eff.T
            elif av.ndim == 2:  # (m,n) @ (n,) -> (m,)
                ga = np.outer(g, b_eff)
            elif b_eff.ndim == 2:  # (n,) @ (n,k) -> (k,)
                ga = b_eff @ g
            else:  # dot product -> ()
                ga = g * b_eff
            out.append(ga)
        if b_t:
            if av.ndim == 2 and b_eff.ndim == 2:
                gbe = av.T @ g
            elif av.ndim == 2:
                gbe = av.T @ g
            elif b_eff.ndim == 2:
                gbe = np.outer(av, g)
            else:
                gbe = g * av
            out.append(gbe.T if transpose_b else gbe)
        return tuple(out)

    if a_t and b_t:
        fwd = lambda x, y, tb=transpose_b: x @ (y.T if tb else y)
    elif a_t:
        fwd = lambda x, c=b_eff: x @ c
    else:
        fwd = lambda y, c=av, tb=transpose_b: c @ (y.T if tb else y)
    return tape.record(value, parents, grad_fn, fwd)


def row_concat(parts: Sequence) -> Tensor:
    """Concatenate 1-D vectors into one 1-D vector."""
    tape = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    for v in vals:
        if v.ndim != 1:
            raise DimensionError(f"row-concat: expected 1-D parts, got shape {v.shape}")
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])
    tensor_slots = [
        (i, p.nid) for i, p in enumerate(parts) if isinstance(p, Tensor)
    ]
    parents = tuple(nid for _, nid in tensor_slots)

    def grad_fn(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i, _ in tensor_slots)

    consts = {i: v for i, (p, v) in enumerate(zip(parts, vals)) if not isinstance(p, Tensor)}

    def fwd(*tensor_vals):
        pieces, it = [], iter(tensor_vals)
        for i in range(len(vals)):
            pieces.append(consts[i] if i in consts else next(it))
        return np.concatenate(pieces)

    return tape.record(np.concatenate(vals), parents, grad_fn, fwd)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D vectors into a matrix, one row each."""
    tape = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    n = vals[0].shape
    for v in vals:
        if v.ndim != 1 or v.shape != n:
            raise DimensionError("stack-rows: parts must be equal-length 1-D vectors")
    parents = tuple(p.nid for p in parts)

    def grad_fn(g):
        return tuple(g[i] for i in range(len(parts)))

    return tape.record(np.stack(vals), parents, grad_fn, lambda *vs: np.stack(vs))


def take_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D vector."""
    av = a.value
    if av.ndim != 1:
        raise DimensionError(f"take-slice: expected 1-D, got shape {av.shape}")

    def grad_fn(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return (full,)

    return a.tape.record(
        av[start:stop].copy(), (a.nid,), grad_fn, lambda x: x[start:stop].copy()
    )


def take_row(a: Tensor, row: int) -> Tensor:
    """One row of a matrix as a 1-D vector."""
    av = a.value
    if av.ndim != 2 or not 0 <= row < av.shape[0]:
        raise DimensionError(f"take-row: row {row} invalid for shape {av.shape}")

    def grad_fn(g):
        full = np.zeros_like(av)
        full[row] = g
        return (full,)

    return a.tape.record(av[row].copy(), (a.nid,), grad_fn, lambda x: x[row].copy())


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column block of a matrix."""
    av = a.value
    if av.ndim != 2:
        raise DimensionError(f"take-cols: expected 2-D, got shape {av.shape}")

    def grad_fn(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record(
        av[:, start:stop].copy(), (a.nid,), grad_fn, lambda x: x[:, start:stop].copy()
    )


def take_col(a: Tensor, col: int) -> Tensor:
    """One column of a matrix as a 1-D vector."""
    av = a.value
    if av.ndim != 2 or not 0 <= col < av.shape[1]:
        raise DimensionError(f"take-col: column {col} invalid for shape {av.shape}")

    def grad_fn(g):
        full = np.zeros_like(av)
        full[:, col] = g
        return (full,)

    return a.tape.record(av[:, col].copy(), (a.nid,), grad_fn, lambda x: x[:, col].copy())


def add_rowvec(m: Tensor, v) -> Tensor:
    """Add a length-F vector to every row of an A x F matrix."""
    tape = _tape_of(m, v)
    mv, vv = _val(m), _val(v)
    if mv.ndim != 2 or vv.ndim != 1 or mv.shape[1] != vv.shape[0]:
        raise DimensionError(f"add-rowvec: shapes {mv.shape} and {vv.shape} do not conform")
    m_t, v_t = isinstance(m, Tensor), isinstance(v, Tensor)
    parents = tuple(x.nid for x in (m, v) if isinstance(x, Tensor))

    def grad_fn(g):
        out = []
        if m_t:
            out.append(g)
        if v_t:
            out.append(g.sum(axis=0))
        return tuple(out)

    if m_t and v_t:
        fwd = lambda x, y: x + y
    elif m_t:
        fwd = lambda x, c=vv: x + c
    else:
        fwd = lambda y, c=mv: c + y
    return tape.record(mv + vv, parents, grad_fn, fwd)


def outer_add(u: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = u[i] + v[j] for 1-D u, v."""
    tape = _tape_of(u, v)
    uv, vv = _val(u), _val(v)
    if uv.ndim != 1 or vv.ndim != 1:
        raise DimensionError(f"outer-add: expected 1-D operands, got {uv.shape}, {vv.shape}")
    u_t, v_t = isinstance(u, Tensor), isinstance(v, Tensor)
    parents = tuple(x.nid for x in (u, v) if isinstance(x, Tensor))

    def grad_fn(g):
        out = []
        if u_t:
            out.append(g.sum(axis=1))
        if v_t:
            out.append(g.sum(axis=0))
        return tuple(out)

    fwd = lambda x, y: x[:, None] + y[None, :]
    if not u_t:
        fwd = lambda y, c=uv: c[:, None] + y[None, :]
    elif not v_t:
        fwd = lambda x, c=vv: x[:, None] + c[None, :]
    return tape.record(uv[:, None] + vv[None, :], parents, grad_fn, fwd)


# ---------------------------------------------------------------------------
# reductions


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the unmasked entries; masked entries get 0.

    Normalizers are summed in ascending value order, so permuting rows and
    columns consistently permutes the output bit-exactly.
    """
    av = a.value
    mask = np.asarray(mask, dtype=bool)
    if av.ndim != 2 or mask.shape != av.shape:
        raise DimensionError(
            f"masked-softmax: logits {av.shape} and mask {mask.shape} must be equal 2-D"
        )
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ContractError(f"masked-softmax: row {bad} has no unmasked entries")

    def compute(x):
        neg = np.where(mask, x, -np.inf)
        rowmax = neg.max(axis=1, keepdims=True)
        ex = np.exp(neg - rowmax)  # exp(-inf) = 0 for masked entries
        denom = np.sort(ex, axis=1).sum(axis=1, keepdims=True)
        return ex / denom

    out = compute(av)

    def grad_fn(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return a.tape.record(out, (a.nid,), grad_fn, compute)


def columnwise_max(a: Tensor) -> Tensor:
    """Per-column maximum of a matrix; gradients go to the first maximal row."""
    av = a.value
    if av.ndim != 2 or av.shape[0] < 1:
        raise ContractError(f"columnwise-max: expected nonempty 2-D input, got {av.shape}")
    rows = np.argmax(av, axis=0)

    def grad_fn(g):
        full = np.zeros_like(av)
        full[rows, np.arange(av.shape[1])] = g
        return (full,)

    return a.tape.record(av.max(axis=0), (a.nid,), grad_fn, lambda x: x.max(axis=0))


def attend(attn: Tensor, values) -> Tensor:
    """Aggregate node values by attention weights: out = attn @ values.

    The sum over the neighbor axis is taken in sorted order so that node
    permutations move output rows without changing their bits.
    """
    tape = _tape_of(attn, values)
    av, vv = _val(attn), _val(values)
    if av.ndim != 2 or vv.ndim != 2 or av.shape[1] != vv.shape[0]:
        raise DimensionError(f"attend: shapes {av.shape} and {vv.shape} do not conform")
    a_t, v_t = isinstance(attn, Tensor), isinstance(values, Tensor)
    parents = tuple(x.nid for x in (attn, values) if isinstance(x, Tensor))

    def compute(a_arr, v_arr):
        prods = a_arr[:, :, None] * v_arr[None, :, :]
        prods.sort(axis=1)
        return prods.sum(axis=1)

    def grad_fn(g):
        out = []
        if a_t:
            out.append(g @ vv.T)
        if v_t:
            out.append(av.T @ g)
        return tuple(out)

    if a_t and v_t:
        fwd = compute
    elif a_t:
        fwd = lambda x, c=vv: compute(x, c)
    else:
        fwd = lambda y, c=av: compute(c, y)
    return tape.record(compute(av, vv), parents, grad_fn, fwd)


def sum_of_squares(a: Tensor) -> Tensor:
    av = a.value

    def grad_fn(g):
        return (g * 2.0 * av,)

    fwd = lambda x: np.asarray(np.sum(x * x))
    return a.tape.record(np.asarray(np.sum(av * av)), (a.nid,), grad_fn, fwd)


# ---------------------------------------------------------------------------
# kernel dispatch, backward pass, gradient checking

KERNELS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scalar-scale": scale,
    "row-concat": lambda *parts: row_concat(parts),
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "masked-softmax": masked_softmax,
    "columnwise-max": columnwise_max,
    "sum-of-squares": sum_of_squares,
}


def apply_kernel(op: str, *inputs, **kwargs) -> Tensor:
    """Run a named forward kernel, recording it on the operands' tape."""
    try:
        fn = KERNELS[op]
    except KeyError:
        raise ContractError(f"unknown kernel {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every named parameter.

    Unused parameters map to zero tensors.  Calling twice without new
    forward work returns identical results.
    """
    if loss.tape is not tape:
        raise ContractError("loss does not belong to the given tape")
    if loss.value.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = tape.nodes
    grads: list = [None] * (loss.nid + 1)
    grads[loss.nid] = np.ones((), dtype=np.float64)
    for nid in range(loss.nid, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.grad_fn is None:
            continue
        for pid, pg in zip(node.parents, node.grad_fn(g)):
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    out = {}
    for name, nid in tape.params.items():
        g = grads[nid] if nid <= loss.nid else None
        if g is None:
            g = np.zeros_like(nodes[nid].value)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(nodes[nid].value.shape)
        out[name] = g
    return out


def finite_difference_check(
    f: Callable[[dict[str, np.ndarray]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a dict of parameter arrays to a scalar Tensor on a fresh tape.
    The error for one entry is |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    loss = f(params)
    analytic = backward(loss.tape, loss)
    worst = 0.0
    for name, arr in params.items():
        grad = analytic[name]
        for idx in np.ndindex(arr.shape if arr.shape else (1,)):
            key = idx if arr.shape else ()
            probes = []
            for sign in (+1.0, -1.0):
                bumped = {k: v.copy() for k, v in params.items()}
                bumped[name][key] += sign * eps
                val = float(f(bumped).value)
                if not np.isfinite(val):
                    raise GradientCheckError(
                        f"non-finite probe at parameter {name!r} index {key}"
                    )
                probes.append(val)
            numeric = (probes[0] - probes[1]) / (2.0 * eps)
            a = float(grad[key]) if arr.shape else float(grad)
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst
