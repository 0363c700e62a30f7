"""Reverse-mode automatic differentiation over dense float64 tensors.

Small tape-free graph engine: values are numpy arrays, each differentiable
operation records its parents and a backward rule, and `backward` walks the
graph once in reverse topological order. Gradients accumulate into the
`grad` slot of leaf tensors, so calling `backward` twice without a reset
sums contributions.

Conventions baked in here (the rest of the package relies on them):

* everything is float64,
* relu/clamp use subgradient 0 at their kinks,
* sqrt emits gradient 0 at an exactly-zero input instead of +inf,
* no broadcasting beyond scalar-with-tensor; use explicit expansion
  (e.g. a matmul against a ones row) where a framework would broadcast.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-8

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (values still computed)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes incompatible with an op; carries op name and shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class Tensor:
    """Dense float64 array with an optional gradient slot and graph node.

    Tensors are immutable after creation except for `grad`. Leaf tensors
    created with requires_grad=True receive gradients from `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward_fn", "_mask")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._mask = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.op or ("leaf" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, op={tag})"

    # light operator sugar; constants are lifted automatically
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """Leaf tensor that never wants gradients."""
    return Tensor(data, requires_grad=False)


def _node(data, op, parents, backward_fn, mask=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._mask = mask
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward_fn = None
    return out


def _as0d(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / scalar ops

def _binary(op_name, a, b, fwd, back_aa, back_bb):
    """Shared plumbing for binary elementwise ops.

    Allowed pairings: identical shapes, or one operand is a scalar
    (shape ()). Anything else is a ShapeError.
    """
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(op_name, a.shape, b.shape)
    data = fwd(a.data, b.data)

    def backward_fn(g):
        ga = back_aa(g, a.data, b.data)
        gb = back_bb(g, a.data, b.data)
        if a.shape == () and ga is not None and np.ndim(ga) != 0:
            ga = _as0d(ga.sum())
        if b.shape == () and gb is not None and np.ndim(gb) != 0:
            gb = _as0d(gb.sum())
        return ga, gb

    return _node(data, op_name, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)
    return _node(data, "relu", (a,), lambda g: (g * mask,), mask=mask)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    mask = (a.data > lo) & (a.data < hi)
    data = np.clip(a.data, lo, hi)
    return _node(data, "clamp", (a,), lambda g: (g * mask,), mask=mask)


def log(a) -> Tensor:
    a = _lift(a)
    data = np.log(a.data)
    return _node(data, "log", (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)
    return _node(data, "exp", (a,), lambda g: (g * data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    data = np.sqrt(a.data)

    def backward_fn(g):
        # zero subgradient at exactly 0 keeps graphs finite where the
        # mathematical derivative blows up (same spirit as relu at 0)
        denom = 2.0 * data
        out = np.divide(g, denom, out=np.zeros_like(denom), where=denom != 0.0)
        return (out,)

    return _node(data, "sqrt", (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions

def tsum(a) -> Tensor:
    a = _lift(a)
    data = _as0d(a.data.sum())
    return _node(data, "sum", (a,), lambda g: (np.full(a.shape, g),))


def mean(a) -> Tensor:
    a = _lift(a)
    return scale(tsum(a), 1.0 / a.size)


def mean_axis(a, axis: int) -> Tensor:
    a = _lift(a)
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def backward_fn(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _node(data, "mean-axis", (a,), backward_fn)


def std_axis(a, axis: int, floor: float = VAR_FLOOR) -> Tensor:
    """Biased (population) std along an axis, variance floored before sqrt.

    The floor keeps pooling of constant maps differentiable; below the
    floor the gradient is 0.
    """
    a = _lift(a)
    n = a.shape[axis]
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=axis)
    data = np.sqrt(np.maximum(var, floor))
    active = var > floor

    def backward_fn(g):
        coef = np.where(active, g / (n * data), 0.0)
        return (np.expand_dims(coef, axis) * centered,)

    return _node(data, "std-axis", (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape ops

def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no inputs")
    nd = ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != nd:
            raise ShapeError("concat", *(t.shape for t in ts))
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _node(data, "concat", tuple(ts), backward_fn)


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    a = _lift(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ValueError(f"slice: [{start}:{stop}) out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def backward_fn(g):
        gx = np.zeros(a.shape)
        gx[sl] = g
        return (gx,)

    return _node(data, "slice", (a,), backward_fn)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    data = np.ascontiguousarray(a.data.T)
    return _node(data, "transpose", (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    data = np.ascontiguousarray(a.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _node(data, "reshape", (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra / convolution / framing

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    if b.data.ndim == 2:
        def backward_fn(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb
    else:
        def backward_fn(g):
            ga = np.outer(g, b.data) if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

    return _node(data, "matmul", (a, b), backward_fn)


def conv1d(x, w, dilation: int = 1) -> Tensor:
    """Length-preserving 1-D convolution over the time axis.

    x is (channels_in, time), w is (channels_out, channels_in, kernel).
    Edge-replication padding, so a time-constant input map stays exactly
    constant in time at the output.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    c_in, t_len = x.shape
    c_out, _, k = w.shape
    d = int(dilation)
    pad = d * (k - 1)
    left = pad // 2
    right = pad - left
    if pad:
        xp = np.empty((c_in, t_len + pad))
        xp[:, left:left + t_len] = x.data
        xp[:, :left] = x.data[:, :1]
        xp[:, left + t_len:] = x.data[:, -1:]
    else:
        xp = x.data
    y = np.zeros((c_out, t_len))
    for kk in range(k):
        y += w.data[:, :, kk] @ xp[:, kk * d:kk * d + t_len]

    def backward_fn(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros((c_in, t_len + pad))
            for kk in range(k):
                gxp[:, kk * d:kk * d + t_len] += w.data[:, :, kk].T @ g
            gx = gxp[:, left:left + t_len].copy()
            if left:
                gx[:, 0] += gxp[:, :left].sum(axis=1)
            if right:
                gx[:, -1] += gxp[:, left + t_len:].sum(axis=1)
        if w.requires_grad:
            gw = np.empty((c_out, c_in, k))
            for kk in range(k):
                gw[:, :, kk] = g @ xp[:, kk * d:kk * d + t_len].T
        return gx, gw

    return _node(y, "conv1d", (x, w), backward_fn)


def frame(x, frame_len: int, hop: int, window=None) -> Tensor:
    """Slice a 1-D signal into overlapping frames, optionally windowed.

    Frame i covers samples [i*hop, i*hop + frame_len). No padding: the
    number of frames is floor((len - frame_len)/hop) + 1.
    """
    x = _lift(x)
    if x.data.ndim != 1:
        raise ShapeError("frame", x.shape)
    n = x.shape[0]
    if n < frame_len:
        raise ValueError(f"frame: input length {n} < frame_len {frame_len}")
    if hop < 1:
        raise ValueError(f"frame: hop must be >= 1, got {hop}")
    n_frames = (n - frame_len) // hop + 1
    s = x.data.strides[0]
    view = np.lib.stride_tricks.as_strided(x.data, (n_frames, frame_len), (hop * s, s))
    data = view * window if window is not None else view.copy()

    def backward_fn(g):
        gf = g * window if window is not None else g
        gx = np.zeros(n)
        end = (n_frames - 1) * hop + 1
        for j in range(frame_len):
            gx[j:j + end:hop] += gf[:, j]
        return (gx,)

    return _node(data, "frame", (x,), backward_fn)


# ---------------------------------------------------------------------------
# generic dispatch per the op-kind contract

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv1d": conv1d,
    "relu": relu,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "mean-axis": mean_axis,
    "std-axis": std_axis,
    "sum": tsum,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "scale": scale,
    "clamp": clamp,
    "transpose": transpose,
    "reshape": reshape,
    "frame": frame,
}


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Apply an op by name. Raises ValueError for unknown kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        known = ", ".join(sorted(_OPS))
        raise ValueError(f"unknown op kind {kind!r}; known kinds: {known}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss; returns {leaf tensor: gradient}.

    Gradients accumulate into each leaf's `grad` slot. If `params` is
    given, every tensor in it is guaranteed an entry (zeros when the loss
    does not reach it).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (no reachable graph)")
    order = _topo(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    if params is not None:
        for p in params:
            if p not in leaves:
                if p.grad is None:
                    p.grad = np.zeros(p.shape)
                leaves[p] = p.grad
    return leaves


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of a finite-difference check.

    max_rel_error is over the checked coordinates; `excluded` lists
    coordinates skipped because a relu/clamp kink sits within the
    +-h probe interval (where central differences are meaningless).
    """
    max_rel_error: float
    excluded: tuple[int, ...]
    n_checked: int


def _activation_signature(out: Tensor) -> list[bytes]:
    sig = []
    for node in _topo(out):
        if node._mask is not None:
            sig.append(node._mask.tobytes())
    return sig


def grad_check(f, x: np.ndarray, h: float = 1e-5, coords=None) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar f against central differences.

    Relative error per coordinate is |ad - cd| / max(1, |cd|). Coordinates
    whose relu/clamp activation pattern differs between the x+h and x-h
    evaluations are excluded and reported. Must not be called under
    no_grad (the probes need recorded graphs to see activation patterns).
    """
    x = np.asarray(x, dtype=np.float64)
    base = Tensor(x, requires_grad=True)
    out = f(base)
    if out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    if not np.isfinite(out.data):
        raise ValueError("grad_check: f(x) is not finite")
    backward(out)
    ad = base.grad if base.grad is not None else np.zeros(x.shape)
    ad = ad.ravel()
    if not np.all(np.isfinite(ad)):
        raise ValueError("grad_check: autodiff gradient is not finite")

    if coords is None:
        coords = range(x.size)
    max_err = 0.0
    excluded = []
    n_checked = 0
    flat = x.ravel()
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        out_p = f(Tensor(xp.reshape(x.shape), requires_grad=True))
        out_m = f(Tensor(xm.reshape(x.shape), requires_grad=True))
        fp, fm = float(out_p.data), float(out_m.data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"grad_check: non-finite probe value at coordinate {i}")
        if _activation_signature(out_p) != _activation_signature(out_m):
            excluded.append(i)
            continue
        cd = (fp - fm) / (2.0 * h)
        err = abs(ad[i] - cd) / max(1.0, abs(cd))
        if err > max_err:
            max_err = err
        n_checked += 1
    return GradCheckResult(max_rel_error=max_err, excluded=tuple(excluded), n_checked=n_checked)
