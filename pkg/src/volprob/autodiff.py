"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new Tensor that records its parent tensors and
a closure computing the parents' gradients from the output gradient.
Tensors carry creation-order ids; an op's inputs always exist before its
output, so ascending id order is a topological order of any reachable
subgraph and backward() never needs an explicit sort beyond that.

Gradient accumulation walks nodes in one fixed order, so repeated
backward passes over the same graph produce bit-identical gradients.

Binary ops accept operands of identical shape, or one operand with a
single element, which is broadcast; nothing more general. That rule
keeps gradient bookkeeping trivial and covers every use in the networks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError, UsageError

_node_ids = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], tuple] | None = None
        self._nid = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, id={self._nid})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that skips graph construction, for inference."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into .grad over the reachable graph.

    root must hold a single element. Existing .grad values on reachable
    nodes are cleared first, so each call reports exactly one pass.
    """
    if root.data.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.data.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._nid)
    for t in nodes:
        t.grad = None
    root.grad = np.ones_like(root.data)
    for t in reversed(nodes):
        if t._backprop is None or t.grad is None:
            continue
        grads = t._backprop(t.grad)
        for parent, g in zip(t._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal "
                     "nor scalar-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def backprop(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def backprop(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")

    def backprop(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backprop)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "div")
    out_data = a.data / b.data

    def backprop(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backprop)


def neg(a: Tensor) -> Tensor:
    def backprop(g):
        return (-g,)

    return _make(-a.data, (a,), backprop)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backprop(g):
        return (g * out_data,)

    return _make(out_data, (a,), backprop)


def log(a: Tensor) -> Tensor:
    def backprop(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backprop)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backprop(g):
        return (g / (2.0 * out_data),)

    return _make(out_data, (a,), backprop)


def absolute(a: Tensor) -> Tensor:
    def backprop(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), backprop)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backprop(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), backprop)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def backprop(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), backprop)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backprop(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backprop)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed as logaddexp(0, x) so large |x| cannot overflow
    out_data = np.logaddexp(0.0, a.data)

    def backprop(g):
        return (g * _sigmoid_np(a.data),)

    return _make(out_data, (a,), backprop)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise UsageError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    inside = (a.data > lo) & (a.data < hi)

    def backprop(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), backprop)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus}


def activation(a: Tensor, kind: str) -> Tensor:
    """Apply a named pointwise nonlinearity."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}, expected one of "
                         f"{sorted(_ACTIVATIONS)}") from None
    return fn(a)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # piecewise form is stable for large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------

def reduce(a: Tensor, op: str) -> Tensor:
    """Collapse a tensor to a scalar by 'sum' or 'mean'."""
    if op == "sum":
        def backprop(g):
            return (np.full(a.shape, float(g)),)

        return _make(np.asarray(a.data.sum()), (a,), backprop)
    if op == "mean":
        n = a.data.size

        def backprop(g):
            return (np.full(a.shape, float(g) / n),)

        return _make(np.asarray(a.data.mean()), (a,), backprop)
    raise UsageError(f"unknown reduction {op!r}, expected 'sum' or 'mean'")


def sum_all(a: Tensor) -> Tensor:
    return reduce(a, "sum")


def mean_all(a: Tensor) -> Tensor:
    return reduce(a, "mean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return sum_all(mul(a, b))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (C, D, H, W) maps along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 operands")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_channels: spatial grids {a.data.shape[1:]} and "
                         f"{b.data.shape[1:]} differ")
    ca = a.data.shape[0]

    def backprop(g):
        return g[:ca], g[ca:]

    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), backprop)


def broadcast_latent(z: Tensor, spatial: tuple[int, int, int]) -> Tensor:
    """Tile a latent vector [L] to a constant (L, D, H, W) volume."""
    if z.data.ndim != 1:
        raise ShapeError(f"broadcast_latent expects a vector, got shape {z.shape}")
    d, h, w = spatial
    if min(d, h, w) < 1:
        raise ShapeError(f"broadcast_latent: bad spatial extents {spatial}")
    data = np.broadcast_to(z.data.reshape(-1, 1, 1, 1), (z.size, d, h, w)).copy()

    def backprop(g):
        return (g.sum(axis=(1, 2, 3)),)

    return _make(data, (z,), backprop)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of a (C, D, H, W) map, giving [C]."""
    if a.data.ndim != 4:
        raise ShapeError("global_avg_pool expects a rank-4 map")
    n = a.data.shape[1] * a.data.shape[2] * a.data.shape[3]

    def backprop(g):
        return (np.broadcast_to(g.reshape(-1, 1, 1, 1) / n, a.shape).copy(),)

    return _make(a.data.mean(axis=(1, 2, 3)), (a,), backprop)


def rescale_spatial(a: Tensor, mode: str, factor: int) -> Tensor:
    """Average-pool ('down') or nearest-repeat ('up') all spatial axes."""
    if a.data.ndim != 4:
        raise ShapeError("rescale_spatial expects a rank-4 map")
    if factor < 1:
        raise UsageError(f"rescale factor must be >= 1, got {factor}")
    c, d, h, w = a.data.shape
    f = factor
    if mode == "down":
        for axis_name, extent in (("depth", d), ("height", h), ("width", w)):
            if extent % f != 0:
                raise ShapeError(f"rescale down: {axis_name} extent {extent} is not "
                                 f"divisible by factor {f}")
        out_data = a.data.reshape(c, d // f, f, h // f, f, w // f, f).mean(axis=(2, 4, 6))

        def backprop(g):
            gin = np.repeat(np.repeat(np.repeat(g, f, axis=1), f, axis=2), f, axis=3)
            return (gin / float(f**3),)

        return _make(out_data, (a,), backprop)
    if mode == "up":
        out_data = np.repeat(np.repeat(np.repeat(a.data, f, axis=1), f, axis=2), f, axis=3)

        def backprop(g):
            return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)

        return _make(out_data, (a,), backprop)
    raise UsageError(f"unknown rescale mode {mode!r}, expected 'down' or 'up'")


# ---------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a vector x: (m,n) x (n,) + (m,) -> (m,)."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("affine expects x (n,), weight (m,n), bias (m,)")
    m, n = weight.data.shape
    if x.data.shape[0] != n or bias.data.shape[0] != m:
        raise ShapeError(f"affine: weight {weight.shape} incompatible with "
                         f"x {x.shape} and bias {bias.shape}")

    def backprop(g):
        return weight.data.T @ g, np.outer(g, x.data), g.copy()

    return _make(weight.data @ x.data + bias.data, (x, weight, bias), backprop)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D correlation of x (Cin,D,H,W) with weight (Cout,Cin,k,k,k).

    Cubic odd-sized kernels, uniform stride and zero padding. bias, when
    given, is a per-output-channel vector.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d input must be rank 4, got shape {x.shape}")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got shape {weight.shape}")
    cout, cin, k = weight.data.shape[0], weight.data.shape[1], weight.data.shape[2]
    if weight.data.shape[3] != k or weight.data.shape[4] != k:
        raise ShapeError(f"conv3d kernel must be cubic, got {weight.data.shape[2:]}")
    if k % 2 == 0:
        raise UsageError(f"conv3d kernel size must be odd, got {k}")
    if cin != x.data.shape[0]:
        raise ShapeError(f"conv3d: weight expects {cin} input channels, "
                         f"input has {x.data.shape[0]}")
    if stride < 1:
        raise UsageError(f"conv3d stride must be >= 1, got {stride}")
    if padding < 0:
        raise UsageError(f"conv3d padding must be >= 0, got {padding}")
    for axis_name, extent in zip(("depth", "height", "width"), x.data.shape[1:]):
        if (extent + 2 * padding - k) // stride + 1 < 1:
            raise ShapeError(f"conv3d: {axis_name} extent {extent} too small for "
                             f"k={k}, stride={stride}, padding={padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv3d bias must have shape ({cout},), got {bias.shape}")

    out_data = kernels.conv3d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out_data = out_data + bias.data.reshape(-1, 1, 1, 1)
    x_shape = x.data.shape

    if bias is None:
        def backprop(g):
            gx = kernels.conv3d_backward_input(g, weight.data, x_shape, stride, padding)
            gw = kernels.conv3d_backward_kernel(g, x.data, k, stride, padding)
            return gx, gw

        return _make(out_data, (x, weight), backprop)

    def backprop_b(g):
        gx = kernels.conv3d_backward_input(g, weight.data, x_shape, stride, padding)
        gw = kernels.conv3d_backward_kernel(g, x.data, k, stride, padding)
        return gx, gw, g.sum(axis=(1, 2, 3))

    return _make(out_data, (x, weight, bias), backprop_b)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------

def bce_with_logits_sum(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed binary cross entropy on raw logits.

    Per element: log(1 + e^z) - z*y, the stable fused form; gradient is
    sigmoid(z) - y. targets is a plain array of 0/1 values.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce targets shape {t.shape} != logits shape {logits.shape}")
    per_elem = np.logaddexp(0.0, logits.data) - logits.data * t

    def backprop(g):
        return (float(g) * (_sigmoid_np(logits.data) - t),)

    return _make(np.asarray(per_elem.sum()), (logits,), backprop)


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_entries: int
    tol: float

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"grad_check {state}: max rel err {self.max_rel_err:.3e} over "
                f"{self.n_entries} entries (tol {self.tol:.1e})")


def grad_check(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
               tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare backward() gradients of scalar f against central differences.

    point is the tensor (or tensors) f is differentiated with respect to;
    requires_grad is forced on. Relative error per entry uses
    |a - n| / max(|a|, |n|, 1), so near-zero gradients are judged on
    absolute error.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    if not pts:
        raise UsageError("grad_check needs at least one tensor")
    for t in pts:
        t.requires_grad = True
    out = f(*pts)
    if out.data.size != 1:
        raise UsageError("grad_check target must return a scalar tensor")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in pts]

    max_rel = 0.0
    n_entries = 0
    for t, a in zip(pts, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*pts).item()
            flat[i] = orig - h
            f_minus = f(*pts).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1.0)
            if rel > max_rel:
                max_rel = rel
            n_entries += 1
    return GradCheckReport(passed=max_rel < tol, max_rel_err=max_rel,
                           n_entries=n_entries, tol=tol)
