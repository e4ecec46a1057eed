"""Minimal reverse-mode autodiff over numpy float64 arrays.

Every forward op builds a node that remembers its parents and a vector-
Jacobian closure. ``backward`` on a scalar loss walks the graph once in
reverse topological order and accumulates gradients into ``.grad`` of every
node that requires them. Graph construction and the backward pass are
single-threaded and deterministic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError


class Tensor:
    """Dense float64 array participating in the differentiation graph.

    ``data`` is row-major; ``grad`` (when populated) always matches its
    shape. Tensors produced by ops are treated as immutable: optimizers are
    the only code that writes ``data`` in place, and only on leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractError(f"add: shapes {a.shape} and {b.shape} do not conform") from None
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ContractError(f"sub: shapes {a.shape} and {b.shape} do not conform") from None
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not conform") from None
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (no batched matmul)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        elif ad.ndim == 1 and bd.ndim == 2:
            ga = g @ bd.T if a.requires_grad else None
            gb = np.outer(ad, g) if b.requires_grad else None
        elif ad.ndim == 2 and bd.ndim == 1:
            ga = np.outer(g, bd) if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        else:  # 1-D @ 1-D -> scalar
            ga = g * bd if a.requires_grad else None
            gb = g * ad if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign for stability on large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed to non-finite values")
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ContractError("log: non-positive input (domain error)")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(data, (a,), vjp)


def sumsq(a, axis: int | None = None) -> Tensor:
    """Squared L2 norm, over everything or along one axis."""
    a = as_tensor(a)
    if axis is None:
        data = np.asarray((a.data * a.data).sum())
        return _node(data, (a,), lambda g: (2.0 * g * a.data,))
    data = (a.data * a.data).sum(axis=axis)

    def vjp(g):
        return (2.0 * np.expand_dims(g, axis) * a.data,)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# softmax family (last axis)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# indexing and shaping


def embedding(table, ids) -> Tensor:
    """Row lookup: ids of shape (n,) pick rows of a (V, e) table."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError(f"embedding: ids must be 1-D, got shape {idx.shape}")
    if table.data.ndim != 2:
        raise ContractError(f"embedding: table must be 2-D, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    data = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(data, (table,), vjp)


def take_last(a, ids) -> Tensor:
    """Per-row pick along the last axis: (n, V) with ids (n,) -> (n,)."""
    a = as_tensor(a)
    idx = np.asarray(ids, dtype=np.intp)
    if a.data.ndim == 1:
        if idx.ndim != 0 and idx.size != 1:
            raise ContractError("take_last: scalar index required for 1-D input")
        j = int(idx)
        if not 0 <= j < a.data.shape[0]:
            raise ContractError(f"take_last: index {j} out of range for shape {a.shape}")
        data = np.asarray(a.data[j])

        def vjp(g):
            ga = np.zeros_like(a.data)
            ga[j] = g
            return (ga,)

        return _node(data, (a,), vjp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ContractError(f"take_last: got data {a.shape} with ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractError("take_last: index out of range")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _node(data, (a,), vjp)


def narrow(a, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along the last axis."""
    a = as_tensor(a)
    width = a.data.shape[-1]
    if not (0 <= start and start + length <= width):
        raise ContractError(f"narrow: [{start}, {start + length}) outside last axis of {a.shape}")
    data = a.data[..., start : start + length]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[..., start : start + length] = g
        return (ga,)

    return _node(data, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat: empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ContractError(
            "concat: shapes do not conform: " + ", ".join(str(p.shape) for p in parts)
        ) from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node(data, parts, vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# fused composites (hot-path ops with hand-written backward rules)


def affine(x, w, b) -> Tensor:
    """x @ w + b with broadcast bias, as a single node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ContractError(f"affine: inner dimensions differ, {x.shape} @ {w.shape}")
    data = x.data @ w.data + b.data

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = (x.data.T @ g if g.ndim == 2 else np.outer(x.data, g)) if w.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return gx, gw, gb

    return _node(data, (x, w, b), vjp)


def gru_cell(h, gx, gh) -> Tensor:
    """One GRU update from precomputed input/state gate pre-activations.

    gx and gh are (B, 3H) splits [reset, update, candidate]:
      r = sigmoid(gx_r + gh_r), u = sigmoid(gx_u + gh_u),
      c = tanh(gx_c + r * gh_c), h' = u * h + (1 - u) * c.
    """
    h, gx, gh = as_tensor(h), as_tensor(gx), as_tensor(gh)
    hw = h.data.shape[-1]
    if gx.data.shape[-1] != 3 * hw or gh.data.shape[-1] != 3 * hw:
        raise ContractError(
            f"gru_cell: gate width must be 3x state width, got {gx.shape}/{gh.shape} for state {h.shape}"
        )
    xr, xu, xc = gx.data[..., :hw], gx.data[..., hw : 2 * hw], gx.data[..., 2 * hw :]
    hr, hu, hc = gh.data[..., :hw], gh.data[..., hw : 2 * hw], gh.data[..., 2 * hw :]
    r = _np_sigmoid(xr + hr)
    u = _np_sigmoid(xu + hu)
    c = np.tanh(xc + r * hc)
    out = u * h.data + (1.0 - u) * c

    def vjp(g):
        dc_pre = g * (1.0 - u) * (1.0 - c * c)
        dr_pre = dc_pre * hc * r * (1.0 - r)
        du_pre = g * (h.data - c) * u * (1.0 - u)
        dh = _unbroadcast(g * u, h.shape) if h.requires_grad else None
        dgx = (
            _unbroadcast(np.concatenate([dr_pre, du_pre, dc_pre], axis=-1), gx.shape)
            if gx.requires_grad
            else None
        )
        dgh = (
            _unbroadcast(np.concatenate([dr_pre, du_pre, dc_pre * r], axis=-1), gh.shape)
            if gh.requires_grad
            else None
        )
        return dh, dgx, dgh

    return _node(out, (h, gx, gh), vjp)


def token_log_prob(logits, ids) -> Tensor:
    """Row-wise log softmax picked at ids: (B, V) logits, (B,) ids -> (B,)."""
    logits = as_tensor(logits)
    idx = np.asarray(ids, dtype=np.intp)
    if logits.data.ndim != 2 or idx.shape != (logits.data.shape[0],):
        raise ContractError(f"token_log_prob: got logits {logits.shape} with ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.data.shape[1]):
        raise ContractError("token_log_prob: id out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(idx.shape[0])
    data = logp[rows, idx]

    def vjp(g):
        gl = -np.exp(logp) * g[:, None]
        gl[rows, idx] += g
        return (gl,)

    return _node(data, (logits,), vjp)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requires_grad node.

    Repeated calls keep accumulating; callers reset via ``zero_grad`` or
    ``ParamStore.zero_grads``.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg
