"""
Minimal reverse-mode autodiff on top of NumPy.

Every differentiable operator records a node holding its inputs and an
adjoint rule.  ``backward`` gathers the nodes that lead to the loss into an
:class:`OpGraph`, replays their adjoints in reverse execution order and then
releases the graph, so intermediates are freed and a second ``backward`` on
the same loss is refused.

Precision follows the data: float32 arrays stay float32, float64 arrays stay
float64.  Training uses the former, gradient checks the latter.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence]

_seq = itertools.count()
_grad_enabled = True
_detect_anomaly = False
_kink_log: Optional[list] = None


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN/inf while anomaly detection is on."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value in {where} of operator '{op}'")
        self.op = op


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Check every operator output (and adjoint) for non-finite values."""
    global _detect_anomaly
    prev, _detect_anomaly = _detect_anomaly, True
    try:
        yield
    finally:
        _detect_anomaly = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken at every non-differentiable point (leaky_relu, abs)."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_branch(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))


class _Node:
    __slots__ = ("seq", "name", "inputs", "adjoint")

    def __init__(self, name: str, inputs: tuple, adjoint: Callable):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.adjoint = adjoint

    def release(self) -> None:
        self.inputs = ()
        self.adjoint = None


class Tensor:
    """N-dimensional array that can take part in gradient recording."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return tabs(self)

    def backward(self) -> None:
        backward(self)


def _bad_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(name: str, data: np.ndarray, inputs: tuple, adjoint: Callable) -> Tensor:
    if _detect_anomaly and not np.all(np.isfinite(data)):
        raise NonFiniteError(name)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(name, inputs, adjoint)
    return out


# -- graph replay -------------------------------------------------------------
class OpGraph:
    """Ordered record of the operations that produced a loss."""

    def __init__(self, nodes: list, outputs: dict):
        self.nodes = nodes  # ascending execution order
        self._outputs = outputs  # node seq -> tensor produced by that node

    @classmethod
    def from_loss(cls, loss: Tensor) -> "OpGraph":
        nodes, outputs = [], {}
        seen = set()
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in seen:
                continue
            if node.adjoint is None:
                raise GraphError(
                    f"graph behind operator '{node.name}' was already released; "
                    "re-run the forward pass before calling backward again"
                )
            seen.add(node.seq)
            nodes.append(node)
            outputs[node.seq] = t
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes, outputs)

    def replay(self, loss: Tensor, seed: np.ndarray) -> list:
        """Run adjoints in reverse execution order; returns visited op names."""
        grads = {id(loss): seed}
        visited = []
        for node in reversed(self.nodes):
            out = self._outputs[node.seq]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited.append(node.name)
            in_grads = node.adjoint(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if _detect_anomaly and not np.all(np.isfinite(ig)):
                    raise NonFiniteError(node.name, "adjoint")
                if inp._node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
        return visited

    def clear(self) -> None:
        for node in self.nodes:
            node.release()
        for t in self._outputs.values():
            t._node = None
        self.nodes = []
        self._outputs = {}


def backward(loss: Tensor) -> list:
    """Populate ``.grad`` of every requires-grad leaf feeding ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this loss; re-run the forward pass")
    if loss._node is None:
        if loss.requires_grad:  # a leaf
            loss.grad = np.ones_like(loss.data)
            loss._consumed = True
            return []
        raise GraphError("loss was not produced by recorded operations")
    graph = OpGraph.from_loss(loss)
    visited = graph.replay(loss, np.ones_like(loss.data))
    graph.clear()
    loss._consumed = True
    return visited


# -- broadcasting helpers -----------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- element-wise arithmetic --------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def tabs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    _note_branch(sgn > 0)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, C, H, W) input with (O, C, kh, kw) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {w.shape} expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    p, s = padding, stride
    hp, wp = h + 2 * p, wd + 2 * p
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    # channels-last im2col; columns ordered (kh, kw, C), kept for the adjoint
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    win = sliding_window_view(xp.transpose(0, 2, 3, 1), (kh, kw), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out += b.data[None, :, None, None]

    def adjoint(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if s == 1 and p < min(kh, kw):
            # full correlation of the output gradient with the flipped kernel
            q = ((kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p))
            gp = np.pad(g.transpose(0, 2, 3, 1), ((0, 0),) + q + ((0, 0),))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = gwin.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, kh * kw * o)
            wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gx = (gcols @ wflip).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        else:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += \
                        gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, np.ascontiguousarray(gw), gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _result("conv2d", out, inputs, adjoint)


# -- resampling / shape ---------------------------------------------------------
def upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result("upsample2x", out, (x,),
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def mean_pool(x: Tensor) -> Tensor:
    """Average over the spatial axes: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    return _result("mean_pool", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis)), (x,), adjoint)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    inv = x.dtype.type(1.0 / count)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _result("mean", np.asarray(x.data.mean(axis=axis)), (x,), adjoint)


# -- activations ---------------------------------------------------------------
def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slope = x.dtype.type(slope)
    pos = x.data > 0
    _note_branch(pos)
    out = np.where(pos, x.data, x.data * slope)
    return _result("leaky_relu", out, (x,), lambda g: (np.where(pos, g, g * slope),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return _result("softplus", out, (x,), lambda g: (g * _sigmoid(d),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1 / (1 + e), e / (1 + e))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardisation over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected (N, C, H, W), got {x.shape}")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    var = d.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (d - mu) * inv_std

    def adjoint(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return _result("instance_norm", xhat, (x,), adjoint)


# -- finite-difference checker ------------------------------------------------
def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Iterable[Tensor]],
               step: float = 1e-3, *, n_samples: Optional[int] = None,
               seed: int = 0, kink_retries: int = 3) -> float:
    """Max relative error between recorded gradients and central differences.

    ``x`` may be one tensor or several; ``f`` receives them positionally.  A
    non-scalar output is reduced by a fixed random projection.  With
    ``n_samples`` only that many randomly chosen components are checked.

    A central difference whose interval straddles a kink (a leaky_relu or
    abs input changing sign) does not estimate the derivative; such a
    component is retried with the step divided by 10, up to
    ``kink_retries`` times.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    # own stream, so the projection never coincides with data drawn from default_rng(seed)
    rng = np.random.default_rng([seed, 0x67636B])
    proj = None

    def scalar() -> Tensor:
        nonlocal proj
        out = f(*inputs)
        if out.size != 1:
            if proj is None:
                proj = rng.standard_normal(out.shape).astype(out.dtype)
            out = tsum(mul(out, Tensor(proj)))
        return out

    def same(a: list, b: list) -> bool:
        return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))

    saved = [(t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            # perturbations below write through a flat view
            t.data = np.ascontiguousarray(t.data)
            t.requires_grad = True
            t.grad = None
        with detect_anomaly(), record_kinks() as base:
            loss = scalar()
            backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        slots = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
        if n_samples is not None and n_samples < len(slots):
            pick = rng.choice(len(slots), size=n_samples, replace=False)
            slots = [slots[k] for k in sorted(pick)]

        worst = 0.0
        with no_grad(), detect_anomaly():
            for i, j in slots:
                flat = inputs[i].data.reshape(-1)
                orig = flat[j]
                h = step
                for attempt in range(kink_retries + 1):
                    flat[j] = orig + h
                    with record_kinks() as plus:
                        fp = float(scalar().data)
                    flat[j] = orig - h
                    with record_kinks() as minus:
                        fm = float(scalar().data)
                    flat[j] = orig
                    if same(plus, base) and same(minus, base):
                        break
                    h /= 10
                else:
                    h *= 10  # every retry crossed a kink; keep the last difference
                num = (fp - fm) / (2 * h)
                ana = float(analytic[i].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = g
