"""Reverse-mode automatic differentiation over numpy arrays.

Every value is a :class:`Tensor` wrapping a float64 ndarray. Operations build
a graph by storing parent references and a backward closure on the output
node; ``backward()`` walks the graph once in reverse topological order and
accumulates gradients into ``.grad``. The walk is iterative, so graph depth
is bounded by memory rather than the interpreter recursion limit.

Broadcasting in elementwise ops is deliberately narrow: one operand's shape
must be a trailing suffix of the other's (a bias of shape [D] may be added
to [B, N, D], but size-1 axes are never stretched). Anything wider goes
through :func:`tile_axis` or :func:`add_mask` so shape bugs fail loudly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(RuntimeError):
    """An API was used outside its documented contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block. Ops return plain values."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient and graph bookkeeping.

    ``data`` must not be mutated while a graph built from this tensor is
    still alive; optimizers update parameters by replacing ``data`` between
    steps, after gradients have been consumed.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same data with no graph history."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "detach"
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def backward(self):
        """Accumulate dL/dx into .grad for every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a graph with no gradient-tracked inputs")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar; the module-level functions hold the real logic
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor(shape={self.data.shape}, op={tag}, requires_grad={self.requires_grad})"


def _topo_order(root):
    """Parents-before-children ordering, computed without recursion."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _acc(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.op = op
    out.name = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after suffix or batch broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_suffix(sa, sb, op):
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) and big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shape {sa} does not suffix-broadcast with {sb}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    _check_suffix(a.shape, b.shape, "add")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b):
    _check_suffix(a.shape, b.shape, "sub")
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(-g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b):
    _check_suffix(a.shape, b.shape, "mul")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
            _acc(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a):
    out = _node(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw(g):
            _acc(a, -g)
        out._backward = _bw
    return out


def scale(a, s):
    s = float(s)
    out = _node(a.data * s, (a,), "scale")
    if out.requires_grad:
        def _bw(g):
            _acc(a, g * s)
        out._backward = _bw
    return out


def add_scalar(a, s):
    s = float(s)
    out = _node(a.data + s, (a,), "add_scalar")
    if out.requires_grad:
        def _bw(g):
            _acc(a, g)
        out._backward = _bw
    return out


def matmul(a, b):
    """Matrix product with numpy batch semantics over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        out._backward = _bw
    return out


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = _node(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _bw(g):
            _acc(a, np.transpose(g, inverse))
        out._backward = _bw
    return out


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(a.data.shape)) != int(abs(np.prod(shape))) and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = _node(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        orig = a.data.shape

        def _bw(g):
            _acc(a, g.reshape(orig))
        out._backward = _bw
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum(sizes)[:-1]

        def _bw(g):
            for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
                _acc(t, piece)
        out._backward = _bw
    return out


def tile_axis(a, axis, reps):
    """Repeat a size-1 axis ``reps`` times; the explicit form of stretching."""
    if a.shape[axis] != 1:
        raise ShapeError(f"tile_axis: axis {axis} of {a.shape} must have size 1")
    out = _node(np.repeat(a.data, reps, axis=axis), (a,), "tile_axis")
    if out.requires_grad:
        def _bw(g):
            _acc(a, g.sum(axis=axis, keepdims=True))
        out._backward = _bw
    return out


def tensor_sum(a, axis=None, keepdims=False):
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        shape = a.data.shape
        kd = _keepdims_shape(shape, axis)

        def _bw(g):
            _acc(a, np.broadcast_to(g.reshape(kd), shape))
        out._backward = _bw
    return out


def tensor_mean(a, axis=None, keepdims=False):
    out = _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        shape = a.data.shape
        kd = _keepdims_shape(shape, axis)
        count = a.data.size / max(out.data.size, 1)

        def _bw(g):
            _acc(a, np.broadcast_to(g.reshape(kd), shape) / count)
        out._backward = _bw
    return out


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def relu(a):
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        gate = (a.data > 0.0).astype(np.float64)

        def _bw(g):
            _acc(a, g * gate)
        out._backward = _bw
    return out


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _node(p, (a,), "softmax")
    if out.requires_grad:
        def _bw(g):
            inner = (g * p).sum(axis=axis, keepdims=True)
            _acc(a, p * (g - inner))
        out._backward = _bw
    return out


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = _node(ls, (a,), "log_softmax")
    if out.requires_grad:
        p = np.exp(ls)

        def _bw(g):
            _acc(a, g - p * g.sum(axis=axis, keepdims=True))
        out._backward = _bw
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine-map.

    ``gamma`` and ``beta`` have shape [D] where D is the trailing axis of x.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},) for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bw(g):
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * term)
            _acc(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            _acc(beta, g.reshape(-1, d).sum(axis=0))
        out._backward = _bw
    return out


def make_dropout_mask(shape, rate, rng):
    """Draw a keep mask of zeros and ones for :func:`dropout`."""
    return (rng.random(shape) >= rate).astype(np.float64)


def dropout(x, rate, mask=None, rng=None):
    """Inverted-scaling dropout: kept entries are divided by the keep rate.

    A precomputed ``mask`` makes the op reproducible; otherwise one is drawn
    from ``rng``. With rate 0 the input passes through untouched.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ContractError("dropout: need a mask or an rng when rate > 0")
        mask = make_dropout_mask(x.shape, rate, rng)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} does not match input {x.shape}")
    keep = 1.0 - rate
    scaled = mask / keep
    out = _node(x.data * scaled, (x,), "dropout")
    if out.requires_grad:
        def _bw(g):
            _acc(x, g * scaled)
        out._backward = _bw
    return out


def gather_rows(x, idx):
    """Select rows of x (first axis) at integer positions ``idx`` (1-D)."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows: idx must be a 1-D integer array, got {idx.dtype} {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = _node(x.data[idx], (x,), "gather_rows")
    if out.requires_grad:
        def _bw(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _acc(x, gx)
        out._backward = _bw
    return out


def scatter_add_rows(x, idx, num_rows):
    """Sum rows of x into an output of ``num_rows`` rows at positions ``idx``."""
    idx = np.asarray(idx)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"scatter_add_rows: idx {idx.shape} must match first axis of {x.shape}")
    data = np.zeros((num_rows,) + x.shape[1:], dtype=np.float64)
    np.add.at(data, idx, x.data)
    out = _node(data, (x,), "scatter_add_rows")
    if out.requires_grad:
        def _bw(g):
            _acc(x, g[idx])
        out._backward = _bw
    return out


def embedding_lookup(table, idx):
    """Row lookup into a parameter table; alias of :func:`gather_rows`."""
    return gather_rows(table, idx)


def add_mask(x, mask):
    """Add a constant array (no gradient) that broadcasts to x's exact shape.

    This is how attention masks enter the graph: size-1 axes in ``mask`` may
    stretch, but the output shape must equal x's shape so the adjoint is the
    identity.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ShapeError(f"add_mask: mask {mask.shape} does not broadcast onto {x.shape}")
    out = _node(x.data + mask, (x,), "add_mask")
    if out.requires_grad:
        def _bw(g):
            _acc(x, g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# diagnostics


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def find_first_nonfinite(root):
    """Name the earliest node (in forward order) whose value is not finite.

    Returns ``None`` when the whole graph is finite. Used by the training
    loop to turn a NaN loss into an actionable message.
    """
    for node in _topo_order(root):
        if not np.isfinite(node.data).all():
            return node.name or node.op
    return None


@dataclass
class GradCheckReport:
    """Worst-case relative error between analytic and central-difference grads."""

    per_param: dict = field(default_factory=dict)
    checked: int = 0

    @property
    def max_rel_err(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def worst_param(self):
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)

    def passes(self, tol):
        return self.max_rel_err <= tol

    def summary(self):
        return (f"grad_check: {self.checked} entries, max rel err "
                f"{self.max_rel_err:.3e} at {self.worst_param}")


def grad_check(fn, params, eps=1e-5, floor=1e-3, samples_per_param=None, rng=None,
               refine_tol=1e-6):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` takes no arguments, reads the current ``.data`` of the tensors in
    ``params`` (a name -> Tensor dict), and returns a scalar Tensor. It must
    be deterministic; this is verified by evaluating it twice before any
    perturbation. Relative error per entry is |a - n| / max(|a|, |n|, floor).
    ``samples_per_param`` caps how many entries of each parameter are
    perturbed (chosen without replacement via ``rng``); by default every
    entry is checked.

    Central differences assume the loss is smooth across the probe interval,
    which piecewise-linear ops like relu violate when a pre-activation sits
    within ``eps`` of its seam. Entries whose relative error exceeds
    ``refine_tol`` are therefore re-probed at progressively halved steps down
    to eps/16: a crossed seam falls out of the shrinking interval, while a
    wrong adjoint stays wrong at every step size.
    """
    first = fn().item()
    second = fn().item()
    if first != second:
        raise ContractError(
            f"grad_check: fn is not deterministic ({first!r} vs {second!r})")

    zero_grads(params)
    loss = fn()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else np.array(p.grad)

    if samples_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            positions = np.arange(n)
        else:
            positions = rng.choice(n, size=samples_per_param, replace=False)
        ana_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in positions:
            orig = flat[i]

            def central(step):
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                return (up - down) / (2.0 * step)

            a = ana_flat[i]
            rel = None
            for halvings in range(5):
                numeric = central(eps / 2.0 ** halvings)
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if rel <= refine_tol:
                    break
            worst = max(worst, rel)
            report.checked += 1
        report.per_param[name] = worst
    return report
