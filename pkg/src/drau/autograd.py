"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to one gradient per parent. Node ids
come from a global counter, so creation order is a topological order and
:func:`backward` simply walks reachable nodes by descending id.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError

DTYPE = np.float64
L2_EPS = 1e-12
ROUGHNESS = 1e-3

_ids = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# -- kink tracking -----------------------------------------------------------
# Piecewise ops (PReLU, signed sqrt) report which branch each element took
# while a tracker is active. grad_check compares branch patterns between the
# two finite-difference evaluations and drops coordinates that cross a kink.

@contextmanager
def track_kinks():
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def _record_kink(branch):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(np.packbits(branch.ravel()))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op",
                 "node_id", "_parents", "_backward", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.node_id = next(_ids)
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} do not broadcast") from None


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), bw, "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), bw, "mul")


def tanh(a):
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a):
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def prelu(x, slope, channel_axis=-1):
    """Parametric ReLU with one learnable slope per channel.

    ``slope`` is 1-d and indexes ``channel_axis`` of ``x`` (scalar slopes are
    accepted too). At exactly zero the positive branch is used.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.ndim > 1:
        raise DimensionError(f"prelu: slope must be 1-d, got shape {slope.shape}")
    if slope.ndim == 1 and slope.shape[0] != 1:
        if x.ndim == 0 or x.shape[channel_axis] != slope.shape[0]:
            raise DimensionError(
                f"prelu: {slope.shape[0]} slopes for input shape {x.shape}")
    bshape = [1] * x.ndim
    if slope.ndim == 1 and x.ndim:
        bshape[channel_axis] = slope.shape[0]
    a = slope.data.reshape(bshape) if x.ndim else slope.data.reshape(())
    pos = x.data >= 0
    _record_kink(pos)
    y = np.where(pos, x.data, a * x.data)

    def bw(g):
        gx = np.where(pos, g, a * g)
        ga = np.where(pos, 0.0, g * x.data)
        return gx, _unbroadcast(ga, a.shape).reshape(slope.shape)
    return _node(y, (x, slope), bw, "prelu")


def signed_sqrt(x):
    """sign(x) * sqrt(|x|); the derivative at 0 is taken as 0."""
    x = as_tensor(x)
    r = np.sqrt(np.abs(x.data))
    _record_kink(x.data >= 0)
    y = np.sign(x.data) * r

    def bw(g):
        with np.errstate(divide="ignore"):
            d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
        return (g * d,)
    return _node(y, (x,), bw, "signed_sqrt")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul: scalar operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 1:   # vector @ matrix, as numpy does
        out = matmul(reshape(a, (1, ka)), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (kb, 1))), a.shape[:-1])
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(out, (a, b), bw, "matmul")


# -- reductions and shape ops -------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise DegenerateInputError("mean over an empty axis")
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast: {a.shape} -> {shape}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _is_basic_index(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer))
               for k in items)


def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_index(key)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)
    return _node(np.array(out, dtype=DTYPE), (a,), bw, "slice")


def take_rows(table, ids):
    """Gather rows ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)
    return _node(table.data[ids], (table,), bw, "take")


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat: no inputs")
    if len(xs) == 1:
        return xs[0]
    nd = xs[0].ndim
    ax = axis % nd if nd else 0
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: extents {[t.shape for t in xs]} differ off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    ax = axis if axis >= 0 else axis + xs[0].ndim + 1
    return concat([reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs], axis=ax)


# -- normalisation -------------------------------------------------------------

def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0.

    ``mask`` broadcasts against ``x``. A slice with every position masked
    raises :class:`DegenerateInputError`.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateInputError("softmax: every position masked")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _node(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _node(y, (x,), bw, "log_softmax")


def l2_normalize(x, axis=-1):
    """x / (||x||_2 + 1e-12) along ``axis`` (``None`` normalises everything)."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=axis is not None))
    d = norm + L2_EPS
    y = x.data / d

    def bw(g):
        inner = (g * x.data).sum(axis=axis, keepdims=axis is not None)
        safe = np.where(norm > 0, norm, 1.0)
        corr = np.where(norm > 0, inner / (d * d * safe), 0.0)
        return (g / d - x.data * corr,)
    return _node(y, (x,), bw, "l2_normalize")


def dropout(x, p, training, rng):
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return as_tensor(x)
    keep = rng.random(x.shape) >= p
    return mul(x, keep / (1.0 - p))


# -- graph ---------------------------------------------------------------------

@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple
    output: int


def topo_order(root):
    """Nodes reachable from ``root`` through differentiable edges, oldest first."""
    seen = {}
    stack_ = [root]
    while stack_:
        n = stack_.pop()
        if n.node_id in seen:
            continue
        seen[n.node_id] = n
        stack_.extend(n._parents)
    return [seen[k] for k in sorted(seen)]


def graph(root):
    """Op records of the graph feeding ``root`` in topological order."""
    return [OpRecord(n.op, tuple(p.node_id for p in n._parents), n.node_id)
            for n in topo_order(root)]


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Gradients add up across fan-out. Returns ``{leaf: grad}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return leaves


def grad_check(f, params, eps=1e-5, max_coords=None, rng=None, skip_kinks=True,
               stencil=2, stats=None):
    """Largest relative error between backprop and central differences.

    ``f`` maps nothing to a scalar Tensor and reads ``params`` (a Tensor or a
    list of Tensors with ``requires_grad``). The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. With ``max_coords`` only that many
    randomly chosen coordinates per tensor are probed. Coordinates whose
    perturbation flips a PReLU / signed-sqrt branch are skipped when
    ``skip_kinks`` is set.

    ``stencil=4`` uses the fourth-order central difference
    ``(8 (f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / (12 e)``, which allows a
    larger ``eps`` (less round-off) for deep graphs whose gradients span many
    orders of magnitude. With it, a coordinate also counts as kink-adjacent
    when the second- and fourth-order estimates differ by more than 0.1%.

    If ``stats`` is a dict it receives ``checked``, ``skipped_branch`` and
    ``skipped_rough`` counts.
    """
    if stencil not in (2, 4):
        raise ContractError(f"stencil must be 2 or 4, got {stencil}")
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
    with track_kinks() as base_kinks:
        out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    base_pattern = list(base_kinks)
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)

    def evaluate():
        with no_grad(), track_kinks() as kinks:
            val = float(f().data)
        return val, kinks

    def same(pattern):
        return len(pattern) == len(base_pattern) and all(
            np.array_equal(a, b) for a, b in zip(pattern, base_pattern))

    worst = 0.0
    checked = skipped_branch = skipped_rough = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            vals, patterns = {}, []
            for k in ((1, -1) if stencil == 2 else (1, -1, 2, -2)):
                flat[i] = orig + k * eps
                vals[k], kinks = evaluate()
                patterns.append(kinks)
            flat[i] = orig
            if skip_kinks and not all(same(kp) for kp in patterns):
                skipped_branch += 1
                continue
            num2 = (vals[1] - vals[-1]) / (2 * eps)
            if stencil == 2:
                num = num2
            else:
                num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * eps)
                # the two numeric estimates disagree only when f is not
                # smooth on the scale of eps, i.e. next to a kink
                if skip_kinks and abs(num - num2) > ROUGHNESS * max(abs(num), 1e-8):
                    skipped_rough += 1
                    continue
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(1e-8, abs(ai) + abs(num))
            worst = max(worst, err)
            checked += 1
    for p in params:
        p.grad = None
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped_branch"] = stats.get("skipped_branch", 0) + skipped_branch
        stats["skipped_rough"] = stats.get("skipped_rough", 0) + skipped_rough
    return worst
