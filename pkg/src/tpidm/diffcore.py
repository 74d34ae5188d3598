"""Reverse-mode differentiation on an explicit tape, plus Adam.

A :class:`Tape` records every operation in execution order, which is also a
topological order, so :func:`backward` is a single reverse sweep.  Values are
plain float64 numpy arrays; a :class:`Var` is a handle (tape, node id).

The primitive set is deliberately small: linear map, sigmoid, tanh, SiLU,
exp, add, multiply, concatenate, slice, mean and sum of squares.  The fused
``lstm`` node is a performance shortcut whose backward pass is checked
against the same recurrence composed from primitives (see
``tpidm.seqnet.lstm_cell``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, NumericError

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")
    # make numpy defer to our reflected operators instead of broadcasting over the handle
    __array_ufunc__ = None

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.op(self)!r}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.mul(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(other, self.tape.mul(self, -1.0))

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __getitem__(self, index):
        return self.tape.slice(self, index)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.tanh(0.5 * x)


class Tape:
    """Append-only record of operations.

    Nodes are immutable once recorded.  After :meth:`backward` has run the
    tape is frozen and further recording raises :class:`ContractError`.
    """

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._grad_fns: list[GradFn | None] = []
        self._requires: list[bool] = []
        self._frozen = False

    def __len__(self) -> int:
        return len(self._values)

    def value(self, var: Var) -> np.ndarray:
        return self._values[var.id]

    def op(self, var: Var) -> str:
        return self._ops[var.id]

    def requires_grad(self, var: Var) -> bool:
        return self._requires[var.id]

    # -- recording ---------------------------------------------------------

    def _push(self, op: str, value: np.ndarray, inputs: tuple[Var, ...], grad_fn: GradFn | None) -> Var:
        if self._frozen:
            raise ContractError("tape is finalized; record a new tape instead")
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        requires = any(self._requires[v.id] for v in inputs)
        self._values.append(value)
        self._ops.append(op)
        self._inputs.append(tuple(v.id for v in inputs))
        self._grad_fns.append(grad_fn if requires else None)
        self._requires.append(requires)
        return Var(self, len(self._values) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        if self._frozen:
            raise ContractError("tape is finalized; record a new tape instead")
        arr.flags.writeable = False
        self._values.append(arr)
        self._ops.append("leaf")
        self._inputs.append(())
        self._grad_fns.append(None)
        self._requires.append(bool(requires_grad))
        return Var(self, len(self._values) - 1)

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def _as_var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("operand belongs to a different tape")
            return x
        return self.const(x)

    # -- primitives --------------------------------------------------------

    def linear(self, x, w, b=None) -> Var:
        """``x @ w + b`` with ``x`` of shape (..., in) and ``w`` of shape (in, out)."""
        x, w = self._as_var(x), self._as_var(w)
        xv, wv = x.value, w.value
        if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
            raise ContractError(f"linear: cannot map {xv.shape} with weight {wv.shape}")
        out = xv @ wv
        inputs = [x, w]
        if b is not None:
            b = self._as_var(b)
            if b.value.shape != (wv.shape[1],):
                raise ContractError(f"linear: bias shape {b.value.shape} != ({wv.shape[1]},)")
            out = out + b.value
            inputs.append(b)

        def grad(g):
            g2 = g.reshape(-1, wv.shape[1])
            grads = [g @ wv.T, xv.reshape(-1, wv.shape[0]).T @ g2]
            if b is not None:
                grads.append(g2.sum(axis=0))
            return grads

        return self._push("linear", out, tuple(inputs), grad)

    def sigmoid(self, x) -> Var:
        x = self._as_var(x)
        s = _sigmoid(x.value)
        return self._push("sigmoid", s, (x,), lambda g: [g * s * (1.0 - s)])

    def tanh(self, x) -> Var:
        x = self._as_var(x)
        y = np.tanh(x.value)
        return self._push("tanh", y, (x,), lambda g: [g * (1.0 - y * y)])

    def silu(self, x) -> Var:
        x = self._as_var(x)
        xv = x.value
        s = _sigmoid(xv)
        return self._push("silu", xv * s, (x,), lambda g: [g * s * (1.0 + xv * (1.0 - s))])

    def exp(self, x) -> Var:
        x = self._as_var(x)
        y = np.exp(x.value)
        return self._push("exp", y, (x,), lambda g: [g * y])

    def add(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        sa, sb = a.value.shape, b.value.shape
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise ContractError(f"add: shapes {sa} and {sb} do not broadcast") from exc
        return self._push("add", out, (a, b), lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])

    def mul(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        av, bv = a.value, b.value
        try:
            out = av * bv
        except ValueError as exc:
            raise ContractError(f"mul: shapes {av.shape} and {bv.shape} do not broadcast") from exc
        return self._push(
            "mul", out, (a, b), lambda g: [_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)]
        )

    def concat(self, xs: Sequence, axis: int = -1) -> Var:
        xs = [self._as_var(x) for x in xs]
        if not xs:
            raise ContractError("concat of nothing")
        values = [x.value for x in xs]
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError as exc:
            raise ContractError(f"concat: {exc}") from exc
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._push("concat", out, tuple(xs), lambda g: np.split(g, bounds, axis=axis))

    def slice(self, x, index) -> Var:
        """Basic (view) indexing only: ints, slices and Ellipsis."""
        x = self._as_var(x)
        if not isinstance(index, tuple):
            index = (index,)
        for item in index:
            if not (item is Ellipsis or isinstance(item, (int, slice, np.integer))):
                raise ContractError(f"slice: unsupported index {item!r}")
        shape = x.value.shape
        out = np.array(x.value[index])

        def grad(g):
            full = np.zeros(shape)
            full[index] = g
            return [full]

        return self._push("slice", out, (x,), grad)

    def mean(self, x) -> Var:
        x = self._as_var(x)
        shape, n = x.value.shape, x.value.size
        return self._push("mean", np.array(x.value.mean()), (x,), lambda g: [np.full(shape, g / n)])

    def sumsq(self, x) -> Var:
        x = self._as_var(x)
        xv = x.value
        return self._push("sumsq", np.array(np.sum(xv * xv)), (x,), lambda g: [2.0 * g * xv])

    # -- fused -------------------------------------------------------------

    def lstm(self, x, w_x, w_h, b) -> Var:
        """Whole-sequence LSTM layer on a time-major input (L, B, in), zero initial state."""
        x, w_x, w_h, b = (self._as_var(v) for v in (x, w_x, w_h, b))
        xv, wxv, whv, bv = x.value, w_x.value, w_h.value, b.value
        hidden = whv.shape[0]
        if xv.ndim != 3 or wxv.shape != (xv.shape[2], 4 * hidden) or whv.shape != (hidden, 4 * hidden) or bv.shape != (4 * hidden,):
            raise ContractError(
                f"lstm: input {xv.shape}, w_x {wxv.shape}, w_h {whv.shape}, b {bv.shape} are inconsistent"
            )
        out, cache = _kernels.lstm_forward(xv, wxv, whv, bv)

        def grad(g):
            d_x, d_wx, d_wh, d_b, _, _ = _kernels.lstm_backward(cache, wxv, whv, g)
            return [d_x, d_wx, d_wh, d_b]

        return self._push("lstm", np.ascontiguousarray(out), (x, w_x, w_h, b), grad)

    # -- gradients ---------------------------------------------------------

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every grad-requiring leaf.

    Returns a map from leaf node id to gradient array.  Shared
    subexpressions accumulate by summation.
    """
    loss_value = tape.value(loss)
    if loss_value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_value.shape}")
    if tape._frozen:
        raise ContractError("backward already ran on this tape")
    tape._frozen = True
    try:
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss_value)}
        leaves: dict[int, np.ndarray] = {}
        for node in range(loss.id, -1, -1):
            g = grads.pop(node, None)
            if g is None or not tape._requires[node]:
                continue
            fn = tape._grad_fns[node]
            if fn is None:
                leaves[node] = g
                continue
            for parent, pg in zip(tape._inputs[node], fn(g)):
                if pg is None or not tape._requires[parent]:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient flowing out of node {node} ({tape._ops[node]})", where=node)
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
    finally:
        # the closures close over the tape; dropping them lets refcounting free it
        tape._grad_fns = [None] * len(tape._grad_fns)
    return leaves


def grad_check(fn: Callable[[Tape, Var], Var], params, h: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``fn`` builds a scalar loss on the given tape from the leaf holding ``params``.
    Non-finite comparisons report ``inf``.
    """
    params = np.array(params, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(params)
    try:
        analytic = backward(tape, fn(tape, leaf)).get(leaf.id, np.zeros_like(params))
    except NumericError:
        return float("inf")

    def value_at(p):
        t = Tape()
        return float(t.value(fn(t, t.leaf(p))))

    flat = params.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (value_at(up.reshape(params.shape)) - value_at(down.reshape(params.shape))) / (2.0 * h)
    a = analytic.ravel()
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max()) if err.size else 0.0


@dataclass
class AdamState:
    """Moments and hyperparameters for :func:`adam_step`."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    l2: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-4, l2: float = 1e-6) -> AdamState:
        return cls(m=np.zeros(size), v=np.zeros(size), lr=lr, l2=l2)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update followed by decoupled ``lr * l2 * params`` shrinkage.

    Inputs are not modified; new arrays and a new state are returned.
    """
    if params.shape != grads.shape or params.shape != state.m.shape or state.v.shape != params.shape:
        raise ContractError(
            f"adam_step: params {params.shape}, grads {grads.shape}, moments {state.m.shape}/{state.v.shape} disagree"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.l2 * params
    return new, replace(state, m=m, v=v, step=step)
