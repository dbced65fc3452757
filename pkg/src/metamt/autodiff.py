"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a define-by-run tape: every primitive records its inputs and a
vector-Jacobian closure, and the closure itself is written in terms of the
same primitives.  Gradients are therefore ordinary tensors on the tape and
can be differentiated again, which is what makes exact differentiation
through an inner gradient-descent step possible.

Everything is float64.  Any primitive that produces a NaN or Inf raises
immediately rather than propagating silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    """Numerical or usage error inside the autodiff engine."""


class ShapeError(AutodiffError):
    """Operands with incompatible shapes were given to a primitive."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (evaluation paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Immutable dense array plus its position in the computation graph."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "op", "_backward_done")

    def __init__(self, data, parents=(), vjp=None, op="leaf", requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite values produced by op '{op}'")
        self.data = arr
        self.op = op
        self._backward_done = False
        track = _grad_enabled and (requires_grad or any(p.requires_grad for p in parents))
        if track:
            self.parents = tuple(parents)
            self.vjp = vjp
            self.requires_grad = True
        else:
            self.parents = ()
            self.vjp = None
            self.requires_grad = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, power(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return power(self, float(p))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that participates in differentiation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        op="add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(
        data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
        op="mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    return Tensor(a.data * s, (a,), lambda g: (scale(g, s),), op="scale")


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return permute(t, axes)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.shape)
        gb = _unbroadcast(matmul(_swap_last(a), g), b.shape)
        return ga, gb

    return Tensor(data, (a, b), vjp, op="matmul")


def power(a: Tensor, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    return Tensor(
        a.data ** p,
        (a,),
        lambda g: (mul(g, scale(power(a, p - 1.0), p)),),
        op="power",
    )


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data), (a,), None, op="exp")
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return Tensor(data, (a,), lambda g: (mul(g, power(a, -1.0)),), op="log")


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return Tensor(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), op="relu")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            kept = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        gk = g if keepdims and axis is not None else reshape(g, kept)
        return (broadcast_to(gk, a.shape),)

    return Tensor(data, (a,), vjp, op="sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    return Tensor(data, (a,), lambda g: (_unbroadcast(g, a.shape),), op="broadcast_to")


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    old = a.shape
    return Tensor(data, (a,), lambda g: (reshape(g, old),), op="reshape")


def permute(a: Tensor, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), (a,), lambda g: (permute(g, inv),), op="permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (matrix transpose)."""
    return _swap_last(_wrap(a))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]

    def vjp(g):
        outs, ofs = [], 0
        for sz in sizes:
            key = [slice(None)] * g.ndim
            key[axis] = slice(ofs, ofs + sz)
            outs.append(getitem(g, tuple(key)))
            ofs += sz
        return tuple(outs)

    return Tensor(data, tuple(parts), vjp, op="concat")


def getitem(a: Tensor, key) -> Tensor:
    a = _wrap(a)
    data = a.data[key]
    shape = a.shape
    return Tensor(data, (a,), lambda g: (_scatter_key(g, shape, key),), op="slice")


def _scatter_key(g: Tensor, shape, key) -> Tensor:
    g = _wrap(g)
    buf = np.zeros(shape)
    buf[key] = g.data
    return Tensor(buf, (g,), lambda gg: (getitem(gg, key),), op="scatter_key")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` (linear, so twice differentiable)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutodiffError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) in {ids}"
        )
    n_rows = table.shape[0]
    return Tensor(
        table.data[ids],
        (table,),
        lambda g: (scatter_rows(g, n_rows, ids),),
        op="embedding_lookup",
    )


def scatter_rows(src: Tensor, n_rows: int, ids) -> Tensor:
    """Sum rows of `src` into an (n_rows, ...) buffer at `ids` (adjoint of lookup)."""
    src = _wrap(src)
    ids = np.asarray(ids, dtype=np.int64)
    buf = np.zeros((n_rows,) + src.shape[ids.ndim:])
    np.add.at(buf, ids, src.data)
    return Tensor(buf, (src,), lambda g: (embedding_lookup(g, ids),), op="scatter_rows")


# ---------------------------------------------------------------------------
# composites (their vjps come for free from the primitives above)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))  # constant, grad-free
    e = exp(a - broadcast_to(shift, a.shape))
    return e / broadcast_to(sum_(e, axis=axis, keepdims=True), a.shape)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = a - broadcast_to(shift, a.shape)
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return z - broadcast_to(lse, a.shape)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = _wrap(a)
    m = mean(a, axis=-1, keepdims=True)
    centered = a - broadcast_to(m, a.shape)
    var = mean(centered * centered, axis=-1, keepdims=True)
    inv = power(var + Tensor(np.full(var.shape, eps)), -0.5)
    return centered * broadcast_to(inv, a.shape)


_FORWARD_OPS: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "embedding_lookup": embedding_lookup,
    "concat": concat,
    "slice": getitem,
    "sum": sum_,
    "mean": mean,
    "scale": scale,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (uniform entry point for tooling/tests)."""
    if kind not in _FORWARD_OPS:
        raise AutodiffError(f"unknown primitive kind '{kind}'")
    return _FORWARD_OPS[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor], allow_rerun: bool = False) -> list[Tensor]:
    """Gradients of a scalar `loss` with respect to each tensor in `wrt`.

    The returned gradients are tensors on the tape, so they can be fed back
    into further differentiable computation.  Tensors that do not participate
    in the loss get explicit zeros.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise AutodiffError(f"grad: loss must be scalar, got shape {loss.shape}")
    if loss._backward_done and not allow_rerun:
        raise AutodiffError("grad: backward already ran on this loss; reset or pass allow_rerun")
    loss._backward_done = True

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else add(acc, pg)

    out = []
    for t in wrt:
        out.append(grads.get(id(t), Tensor(np.zeros(t.shape))))
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradient map keyed by parameter name; absent parameters get zeros."""
    names = list(params.keys())
    gs = grad(loss, [params[n] for n in names])
    return dict(zip(names, gs))


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> dict:
    """Compare analytic gradients of `f` against central finite differences.

    Returns a report with per-parameter max relative error, the worst
    offender, and an overall pass flag.  `f` must be deterministic.
    """
    if step <= 0:
        raise AutodiffError("grad_check: step must be positive")
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise AutodiffError("grad_check: non-finite loss")
    analytic = backward(loss, params)

    report = {"per_param": {}, "passed": True, "worst": None, "tolerance": tolerance}
    worst_err = -1.0
    for name, p in params.items():
        a = analytic[name].data
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(f(params).data)
            flat[i] = orig - step
            lm = float(f(params).data)
            flat[i] = orig
            nflat[i] = (lp - lm) / (2.0 * step)
        denom = np.maximum(np.abs(a) + np.abs(num), 1.0)
        err = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
        ok = err <= tolerance
        report["per_param"][name] = {"max_rel_err": err, "passed": ok}
        if not ok:
            report["passed"] = False
        if err > worst_err:
            worst_err = err
            report["worst"] = name
    return report
