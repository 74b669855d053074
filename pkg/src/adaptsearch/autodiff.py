"""Minimal reverse-mode autodiff over dense float64 arrays.

The network here is a chain of dense layers plus a small fixed set of loss
ops, so a full graph engine is unnecessary: each op optionally records a
vector-Jacobian callback on a :class:`Tape`, and ``Tape.backward`` replays
the recorded ops in reverse. Ops called with ``tape=None`` run as plain
numpy forward computations (used for evaluation-only passes).

Parameters live in :class:`ParamBlock` objects. Frozen blocks participate
in forward passes but never receive gradient; their ``grad`` buffer stays
bit-identical to zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class GradcheckError(AssertionError):
    """Raised by gradcheck when analytic and numeric gradients disagree."""


def _as_f64(data) -> np.ndarray:
    # np.asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d.
    arr = np.asarray(data, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (no NaN/Inf)")
    return arr


class Tensor:
    """A dense float64 array plus a gradient buffer filled in by backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, grad: np.ndarray, fresh: bool = False) -> None:
        # ``fresh`` marks a newly allocated array the tensor may own outright;
        # borrowed buffers are copied so later accumulation cannot alias them.
        if self.grad is None:
            self.grad = grad if fresh else grad.copy()
        else:
            self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap an op-produced float64 array without re-validating it.

    Internal ops only combine finite inputs with bounded operations, so the
    construction-time finiteness check is redundant on this path.
    """
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    return t


@dataclass
class ParamBlock:
    """A named parameter array with its gradient accumulator.

    ``trainable=False`` marks a frozen block: forward passes read its value
    but backward never writes to it and ``sgd_step`` never moves it.
    """

    id: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = _as_f64(self.value)
        self.grad = np.zeros_like(self.value)

    def clone(self, trainable: bool = True) -> "ParamBlock":
        return ParamBlock(self.id, self.value.copy(), trainable=trainable)


class Tape:
    """Records ops of one forward pass; single-use for one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def _record(self, out: Tensor, vjp: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, vjp))

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of ``root`` into every trainable block on the tape."""
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape; record a new forward pass")
        if root.data.shape != ():
            raise ValueError(f"backward root must be a scalar, got shape {root.data.shape}")
        if not np.isfinite(root.data):
            raise ValueError("backward root is not finite")
        self._consumed = True
        root._accumulate(np.ones((), dtype=np.float64))
        for out, vjp in reversed(self._nodes):
            if out.grad is not None:
                vjp(out.grad)


def _param_accumulate(block: ParamBlock, grad: np.ndarray) -> None:
    if block.trainable:
        block.grad += grad


def forward_linear(
    x: Tensor,
    w: ParamBlock,
    b: ParamBlock,
    activation: str = "identity",
    tape: Tape | None = None,
) -> Tensor:
    """y = act(x @ W + b) with W: [d_in, d_out], b: [d_out], x: [n, d_in]."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.data.ndim != 2 or x.data.shape[1] != w.value.shape[0]:
        raise ValueError(
            f"shape mismatch: x {x.data.shape} vs W {w.value.shape}"
        )
    if b.value.shape != (w.value.shape[1],):
        raise ValueError(f"shape mismatch: b {b.value.shape} vs W {w.value.shape}")
    pre = x.data @ w.value + b.value
    if activation == "relu":
        data = np.maximum(pre, 0.0)
    elif activation == "tanh":
        data = np.tanh(pre)
    else:
        data = pre
    out = _wrap(data)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            if activation == "relu":
                d_pre = dy * (pre > 0.0)
            elif activation == "tanh":
                d_pre = dy * (1.0 - out.data * out.data)
            else:
                d_pre = dy
            x._accumulate(d_pre @ w.value.T, fresh=True)
            _param_accumulate(w, x.data.T @ d_pre)
            _param_accumulate(b, d_pre.sum(axis=0))

        tape._record(out, vjp)
    return out


def adapted_linear(
    x: Tensor,
    w: ParamBlock,
    b: ParamBlock,
    activation: str,
    adapter: ParamBlock | None = None,
    adapter_kind: str = "residual",
    tape: Tape | None = None,
) -> Tensor:
    """One supernet layer, fused: act(x @ W + b) plus an optional adapter term.

    ``residual`` adds x @ A (a linear map of the layer input); ``offset``
    adds a broadcast vector. Equivalent to composing forward_linear with
    matmul_param/add or add_bias_param, recorded as a single tape node.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.data.ndim != 2 or x.data.shape[1] != w.value.shape[0]:
        raise ValueError(f"shape mismatch: x {x.data.shape} vs W {w.value.shape}")
    pre = x.data @ w.value + b.value
    if activation == "relu":
        acted = np.maximum(pre, 0.0)
    elif activation == "tanh":
        acted = np.tanh(pre)
    else:
        acted = pre
    if adapter is None:
        data = acted
    elif adapter_kind == "residual":
        data = acted + x.data @ adapter.value
    elif adapter_kind == "offset":
        data = acted + adapter.value
    else:
        raise ValueError(f"unknown adapter kind {adapter_kind!r}")
    out = _wrap(data)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            if activation == "relu":
                d_pre = dy * (pre > 0.0)
            elif activation == "tanh":
                d_pre = dy * (1.0 - acted * acted)
            else:
                d_pre = dy
            dx = d_pre @ w.value.T
            if adapter is not None and adapter_kind == "residual":
                dx += dy @ adapter.value.T
            x._accumulate(dx, fresh=True)
            _param_accumulate(w, x.data.T @ d_pre)
            _param_accumulate(b, d_pre.sum(axis=0))
            if adapter is not None and adapter.trainable:
                if adapter_kind == "residual":
                    adapter.grad += x.data.T @ dy
                else:
                    adapter.grad += dy.sum(axis=0)

        tape._record(out, vjp)
    return out


def matmul_param(x: Tensor, a: ParamBlock, tape: Tape | None = None) -> Tensor:
    """y = x @ A (the residual-adapter linear map)."""
    if x.data.shape[1] != a.value.shape[0]:
        raise ValueError(f"shape mismatch: x {x.data.shape} vs A {a.value.shape}")
    out = _wrap(x.data @ a.value)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            x._accumulate(dy @ a.value.T, fresh=True)
            _param_accumulate(a, x.data.T @ dy)

        tape._record(out, vjp)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _wrap(a.data + b.data)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            a._accumulate(dy)
            b._accumulate(dy)

        tape._record(out, vjp)
    return out


def add_bias_param(x: Tensor, v: ParamBlock, tape: Tape | None = None) -> Tensor:
    """y = x + v broadcast over rows (the offset-adapter op)."""
    if v.value.shape != (x.data.shape[1],):
        raise ValueError(f"shape mismatch: x {x.data.shape} vs offset {v.value.shape}")
    out = _wrap(x.data + v.value)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            x._accumulate(dy)
            _param_accumulate(v, dy.sum(axis=0))

        tape._record(out, vjp)
    return out


def matmul_const(m: np.ndarray, x: Tensor, tape: Tape | None = None) -> Tensor:
    """y = M @ x for a constant matrix M (used for class-centroid averaging)."""
    if m.shape[1] != x.data.shape[0]:
        raise ValueError(f"shape mismatch: M {m.shape} vs x {x.data.shape}")
    out = _wrap(m @ x.data)
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            x._accumulate(m.T @ dy, fresh=True)

        tape._record(out, vjp)
    return out


def cosine_distance_matrix(q: Tensor, c: Tensor, tape: Tape | None = None) -> Tensor:
    """D[i, j] = 1 - cos(q_i, c_j); zero-norm rows yield distance 1 with zero gradient."""
    if q.data.shape[1] != c.data.shape[1]:
        raise ValueError(f"shape mismatch: {q.data.shape} vs {c.data.shape}")
    qn = np.linalg.norm(q.data, axis=1)
    cn = np.linalg.norm(c.data, axis=1)
    qs = np.where(qn == 0.0, 1.0, qn)
    cs = np.where(cn == 0.0, 1.0, cn)
    denom = qs[:, None] * cs[None, :]
    cos = (q.data @ c.data.T) / denom
    zero_mask = (qn == 0.0)[:, None] | (cn == 0.0)[None, :]
    if zero_mask.any():
        cos = np.where(zero_mask, 0.0, cos)
    out = _wrap(1.0 - cos)
    if tape is not None:
        def vjp(dd: np.ndarray) -> None:
            dcos = -dd
            if zero_mask.any():
                dcos = np.where(zero_mask, 0.0, dcos)
            scaled = dcos / denom
            q._accumulate(scaled @ c.data - ((dcos * cos).sum(axis=1) / qs**2)[:, None] * q.data, fresh=True)
            c._accumulate(scaled.T @ q.data - ((dcos * cos).sum(axis=0) / cs**2)[:, None] * c.data, fresh=True)

        tape._record(out, vjp)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Scalar sum of all entries; the minimal loss for wiring tests."""
    out = _wrap(np.asarray(x.data.sum()))
    if tape is not None:
        def vjp(dy: np.ndarray) -> None:
            x._accumulate(np.broadcast_to(dy, x.data.shape).copy(), fresh=True)

        tape._record(out, vjp)
    return out


def softmax_nll_from_distances(
    d: Tensor, targets: np.ndarray, tape: Tape | None = None
) -> Tensor:
    """Mean negative log softmax(-D) at the target column of each row."""
    if d.data.ndim != 2:
        raise ValueError(f"distance matrix must be 2-d, got shape {d.data.shape}")
    n = d.data.shape[0]
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} rows")
    logits = -d.data
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    total = exp.sum(axis=1)
    log_probs = shift - np.log(total)[:, None]
    rows = np.arange(n)
    out = _wrap(np.asarray(-log_probs[rows, targets].mean()))
    if tape is not None:
        def vjp(dl: np.ndarray) -> None:
            d_logits = exp / total[:, None]
            d_logits[rows, targets] -= 1.0
            d._accumulate(-d_logits * (float(dl) / n), fresh=True)

        tape._record(out, vjp)
    return out


def sgd_step(blocks, lr: float) -> None:
    """value <- value - lr * grad for trainable blocks; zero the grads of all given blocks."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for block in blocks:
        if block.trainable:
            block.value -= lr * block.grad
            # a non-finite entry makes the full sum non-finite, so one
            # reduction suffices as a divergence probe
            if not math.isfinite(float(block.value.sum())):
                raise FloatingPointError(f"parameter {block.id!r} diverged to non-finite values")
        block.grad[...] = 0.0


def zero_grads(blocks) -> None:
    for block in blocks:
        block.grad[...] = 0.0


def gradcheck(
    loss_fn: Callable[[], float],
    blocks,
    analytic: dict[str, np.ndarray],
    eps: float = 1e-6,
    rel_tol: float = 1e-4,
) -> float:
    """Compare analytic grads against central finite differences, coordinate by coordinate.

    ``loss_fn`` re-evaluates the loss from current block values. Returns the
    max relative error seen; raises GradcheckError beyond ``rel_tol``.
    """
    worst = 0.0
    for block in blocks:
        got = analytic[block.id]
        flat = block.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            expected = got.reshape(-1)[i]
            # Floor the denominator: below ~1e-3 the central-difference
            # quotient is dominated by roundoff, not by gradient error.
            scale = max(abs(numeric), abs(expected), 1e-3)
            err = abs(numeric - expected) / scale
            worst = max(worst, err)
            if err > rel_tol:
                raise GradcheckError(
                    f"gradient mismatch on {block.id}[{i}]: analytic {expected!r}, "
                    f"numeric {numeric!r}, rel err {err:.3e}"
                )
    return worst
