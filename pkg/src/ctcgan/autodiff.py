"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operators the 3D cGAN needs are provided.  Every op returns a
``Node``; calling ``backward()`` on a scalar node accumulates ``.grad`` on
all upstream nodes that require gradients.

Precision is a global setting: float32 for training, float64 for
finite-difference verification (see ``precision``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatchError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True, "kinks": None}
_corrupted: set = set()


def set_precision(mode: str) -> None:
    _state["dtype"] = _DTYPES[mode]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    old = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def corrupt_backward(op: str):
    """Test hook: scale the gradients produced by ``op`` by 1.5."""
    _corrupted.add(op)
    try:
        yield
    finally:
        _corrupted.discard(op)


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward: Optional[Callable] = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Node":
        return Node(self.value)

    def item(self) -> float:
        return float(self.value)

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this node into every upstream node."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeMismatchError("backward() without a seed needs a scalar node")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                pending[key] = pg if key not in pending else pending[key] + pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_node(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"


class Parameter(Node):
    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.asarray(value, dtype=get_dtype()), requires_grad=True, op="param")
        self.name = name


def tensor(value, requires_grad: bool = False) -> Node:
    """Wrap an array as a leaf node in the current precision."""
    return Node(np.asarray(value, dtype=get_dtype()), requires_grad=requires_grad)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=get_dtype()))


def _topo_order(root: Node) -> List[Node]:
    """Nodes reachable from ``root`` that need gradients, root first."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(value, parents: Sequence[Node], backward: Callable, op: str) -> Node:
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    if op in _corrupted:
        inner = backward

        def backward(g, _inner=inner):
            return tuple(None if x is None else 1.5 * x for x in _inner(g))

    return Node(value, parents, backward, requires_grad=True, op=op)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape and b.value.size != 1 and a.value.size != 1:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g if a.value.size == g.size else np.sum(g).reshape(a.shape)
        gb = g if b.value.size == g.size else np.sum(g).reshape(b.shape)
        return ga, gb

    return _make(a.value + b.value, (a, b), backward, "add")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * a.value.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def sum_all(a: Node) -> Node:
    return _make(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Node) -> Node:
    n = a.value.size
    return _make(np.mean(a.value), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.value.dtype),), "mean")


def weighted_sum(a: Node, w: np.ndarray) -> Node:
    """sum(a * w) for a constant array ``w``; handy for gradient checks."""
    w = np.asarray(w, dtype=a.value.dtype)
    return _make(np.sum(a.value * w), (a,), lambda g: (g * w,), "weighted_sum")


def _record_kinks(pos: np.ndarray) -> None:
    if _state["kinks"] is not None:
        _state["kinks"].append(pos)


@contextlib.contextmanager
def record_kinks():
    """Collect the sign masks of every relu-family op evaluated inside the block."""
    old = _state["kinks"]
    masks: List[np.ndarray] = []
    _state["kinks"] = masks
    try:
        yield masks
    finally:
        _state["kinks"] = old


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    pos = x.value > 0
    _record_kinks(pos)
    d = np.where(pos, 1.0, slope).astype(x.value.dtype)
    return _make(x.value * d, (x,), lambda g: (g * d,), "leaky_relu")


def relu(x: Node) -> Node:
    pos = x.value > 0
    _record_kinks(pos)
    d = pos.astype(x.value.dtype)
    return _make(x.value * d, (x,), lambda g: (g * d,), "relu")


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Node) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def concat_channels(a: Node, b: Node) -> Node:
    if a.value.ndim != b.value.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeMismatchError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def slice_channels(x: Node, start: int, stop: int) -> Node:
    def backward(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return _make(x.value[:, start:stop].copy(), (x,), backward, "slice")


# ---------------------------------------------------------------------------
# losses


def bce_loss(pred: Node, target, eps: float = 1e-7) -> Node:
    """Mean binary cross entropy; predictions clamped to [eps, 1 - eps]."""
    p = pred.value
    t = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    pc = np.clip(p, eps, 1 - eps)
    n = p.size
    loss = -np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    inside = (p >= eps) & (p <= 1 - eps)

    def backward(g):
        d = (-(t / pc) + (1 - t) / (1 - pc)) / n
        return (g * np.where(inside, d, 0).astype(p.dtype),)

    return _make(np.asarray(loss, dtype=p.dtype), (pred,), backward, "bce")


def l1_loss(a: Node, b) -> Node:
    bv = b.value if isinstance(b, Node) else np.asarray(b)
    if a.shape != bv.shape:
        raise ShapeMismatchError(f"l1_loss: {a.shape} vs {bv.shape}")
    diff = a.value - bv.astype(a.value.dtype)
    n = diff.size

    def backward(g):
        return (g * np.sign(diff) / a.value.dtype.type(n),)

    return _make(np.asarray(np.mean(np.abs(diff)), dtype=a.value.dtype), (a,), backward, "l1")


# ---------------------------------------------------------------------------
# convolutions


def _out_extent(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _im2col(xpad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[N, C, D, H, W] -> contiguous columns [k*k*k*C, N*Do*Ho*Wo]."""
    n, c = xpad.shape[:2]
    do, ho, wo = (_out_extent(s, k, stride) for s in xpad.shape[2:])
    xt = xpad.transpose(1, 0, 2, 3, 4)
    cols = np.empty((k, k, k, c, n, do, ho, wo), dtype=xpad.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[i, j, l] = xt[:, :, i:i + stride * (do - 1) + 1:stride,
                                   j:j + stride * (ho - 1) + 1:stride,
                                   l:l + stride * (wo - 1) + 1:stride]
    return cols.reshape(k * k * k * c, n * do * ho * wo)


def _col2im(cols: np.ndarray, full_shape, k: int, stride: int, out_sp) -> np.ndarray:
    """Adjoint of ``_im2col``: sum columns back into an [N, C, D, H, W] array."""
    n, c = full_shape[:2]
    do, ho, wo = out_sp
    cols = cols.reshape(k, k, k, c, n, do, ho, wo)
    out = np.zeros((c, n) + tuple(full_shape[2:]), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[:, :, i:i + stride * (do - 1) + 1:stride,
                    j:j + stride * (ho - 1) + 1:stride,
                    l:l + stride * (wo - 1) + 1:stride] += cols[i, j, l]
    return out.transpose(1, 0, 2, 3, 4)


def _flat_weight(w: np.ndarray) -> np.ndarray:
    """[O, C, k, k, k] -> [O, k*k*k*C] matching the ``_im2col`` row order."""
    return w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)


def _unflat_weight(w2: np.ndarray, c: int, k: int) -> np.ndarray:
    return w2.reshape(w2.shape[0], k, k, k, c).transpose(0, 4, 1, 2, 3)


def _to_rows(a: np.ndarray) -> np.ndarray:
    """[N, O, D, H, W] -> [O, N*D*H*W]."""
    return a.transpose(1, 0, 2, 3, 4).reshape(a.shape[1], -1)


def _from_rows(rows: np.ndarray, n: int, sp) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape((rows.shape[0], n) + tuple(sp)).transpose(1, 0, 2, 3, 4))


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _crop(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return a[:, :, p:-p, p:-p, p:-p]


def _check_conv(x: Node, w: Node, b: Optional[Node], cin_axis: int, name: str) -> None:
    if x.value.ndim != 5 or w.value.ndim != 5:
        raise ShapeMismatchError(f"{name}: expected 5D input and weight, got {x.shape}, {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeMismatchError(f"{name}: kernel must be cubic, got {w.shape[2:]}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeMismatchError(f"{name}: input has {x.shape[1]} channels, weight expects {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[1 - cin_axis],):
        raise ShapeMismatchError(f"{name}: bias shape {b.shape} does not match weight {w.shape}")


def conv3d(x: Node, w: Node, b: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    """3D cross-correlation. ``x`` [N, Cin, D, H, W], ``w`` [Cout, Cin, k, k, k]."""
    _check_conv(x, w, b, 1, "conv3d")
    k = w.shape[2]
    n, c = x.shape[:2]
    xpad = _pad(x.value, padding)
    if min(xpad.shape[2:]) < k:
        raise ShapeMismatchError(f"conv3d: padded input {xpad.shape[2:]} smaller than kernel {k}")
    sp = tuple(_out_extent(s, k, stride) for s in xpad.shape[2:])
    cols = _im2col(xpad, k, stride)
    w2 = _flat_weight(w.value)
    out = _from_rows(w2 @ cols, n, sp)
    if b is not None:
        out += b.value[None, :, None, None, None]

    def backward(g):
        g2 = _to_rows(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _crop(_col2im(w2.T @ g2, xpad.shape, k, stride, sp), padding)
        if w.requires_grad:
            gw = _unflat_weight(g2 @ cols.T, c, k)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv3d")


def conv_transpose3d(x: Node, w: Node, b: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    """Adjoint of ``conv3d``. ``x`` [N, Cin, S...], ``w`` [Cin, Cout, k, k, k];
    output extent is ``(S - 1) * stride - 2 * padding + k``."""
    _check_conv(x, w, b, 0, "conv_transpose3d")
    k = w.shape[2]
    n, cin = x.shape[:2]
    cout = w.shape[1]
    sp = x.shape[2:]
    full = tuple((s - 1) * stride + k for s in sp)
    if min(full) - 2 * padding < 1:
        raise ShapeMismatchError("conv_transpose3d: padding removes the whole output")
    w2 = _flat_weight(w.value)  # [Cin, k*k*k*Cout]
    x2 = _to_rows(x.value)
    out = _crop(_col2im(w2.T @ x2, (n, cout) + full, k, stride, sp), padding).copy()
    if b is not None:
        out += b.value[None, :, None, None, None]

    def backward(g):
        cols = _im2col(_pad(g, padding), k, stride)
        gx = _from_rows(w2 @ cols, n, sp) if x.requires_grad else None
        gw = _unflat_weight(x2 @ cols.T, cout, k) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: Dict[str, Tuple[np.ndarray, np.ndarray]],
              t: int, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. ``state`` maps name -> (m, v)."""
    if t < 1:
        raise ValueError("adam step index t must be >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.value)
        m, v = state.get(p.name) or (np.zeros_like(p.value), np.zeros_like(p.value))
        if m.shape != p.shape or v.shape != p.shape or g.shape != p.shape:
            raise ShapeMismatchError(f"adam state for {p.name} has shape {m.shape}, param {p.shape}")
        dt = p.value.dtype.type
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        p.value = p.value - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        state[p.name] = (m, v)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.state, self.t,
                  self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# verification


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(fn: Callable[[], Node], node: Node, h: float = 1e-4,
                 skip_kinks: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` with respect to ``node.value``.

    Returns ``(grad, valid)``.  With ``skip_kinks`` an element is marked
    invalid when the +h and -h evaluations see different relu sign masks than
    the unperturbed point, i.e. the difference quotient straddles a kink.
    """
    grad = np.zeros(node.value.shape, dtype=np.float64)
    valid = np.ones(node.value.shape, dtype=bool)
    flat = node.value.reshape(-1)
    base = None
    if skip_kinks:
        with record_kinks() as base:
            fn()
    for i in range(flat.size):
        orig = flat[i]
        with record_kinks() as plus:
            flat[i] = orig + h
            fp = float(fn().value)
        with record_kinks() as minus:
            flat[i] = orig - h
            fm = float(fn().value)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
        if skip_kinks and not (_same_masks(base, plus) and _same_masks(base, minus)):
            valid.reshape(-1)[i] = False
    return grad, valid


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def grad_check_report(fn: Callable[[], Node], wrt: Iterable[Node], h: float = 1e-4,
                      skip_kinks: bool = False) -> GradCheckReport:
    """Compare backward() against central differences over every element of
    every node in ``wrt``.  Nodes must be float64."""
    wrt = list(wrt)
    for node in wrt:
        if node.value.dtype != np.float64:
            raise TypeError("grad_check requires float64 nodes; use precision('f64')")
        node.value = np.ascontiguousarray(node.value)
        node.grad = None
    fn().backward()
    analytic = [np.zeros_like(n.value) if n.grad is None else n.grad.copy() for n in wrt]
    worst, checked, skipped = 0.0, 0, 0
    for node, a in zip(wrt, analytic):
        num, valid = numeric_grad(fn, node, h, skip_kinks)
        worst = max(worst, relative_error(a[valid], num[valid]))
        checked += int(valid.sum())
        skipped += int((~valid).sum())
    return GradCheckReport(worst, checked, skipped)


def grad_check(fn: Callable[[], Node], wrt: Iterable[Node], h: float = 1e-4, skip_kinks: bool = False) -> float:
    """Max relative error, denominator ``max(|analytic|, |numeric|, 1e-8)``."""
    return grad_check_report(fn, wrt, h, skip_kinks).max_rel_error
