"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous ``float64`` ndarray. Operations on
tensors that require gradients record their parents and a closure mapping the
output adjoint to parent adjoints; :func:`backward` walks that graph once in
reverse topological order. Adjoints live in a dict local to each call, so the
same graph can be differentiated repeatedly with identical results.

Activations use N x C x H x W layout and convolution kernels
C_out x C_in/groups x k x k.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf from finite inputs."""


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # make ndarray <op> Tensor defer to the reflected methods below
    __array_ufunc__ = None

    # arithmetic sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _adjoints(root: Tensor) -> dict[int, np.ndarray]:
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if not root.requires_grad:
        return adj
    for node in reversed(_topo_order(root)):
        g = adj.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return adj


def backward(root: Tensor, params: Iterable[Tensor] | dict | None = None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` keyed by parameter name.

    ``params`` (a dict name -> Tensor or an iterable of named tensors) lists
    the parameters to report; any that the graph does not reach get a zero
    gradient. Without ``params`` every named leaf reachable from ``root`` is
    reported.
    """
    adj = _adjoints(root)
    if params is None:
        leaves = [n for n in _topo_order(root) if not n._parents and n.name is not None]
        return {n.name: adj.get(id(n), np.zeros_like(n.data)) for n in leaves}
    items = params.items() if isinstance(params, dict) else ((p.name, p) for p in params)
    return {name: adj.get(id(p), np.zeros_like(p.data)) for name, p in items}


def gradients(root: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Adjoint of ``root`` with respect to each tensor (leaf or intermediate)."""
    adj = _adjoints(root)
    return [adj.get(id(t), np.zeros_like(t.data)) for t in tensors]


# ----------------------------------------------------------------------------
# element-wise arithmetic and reductions
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, "div", (a, b), back)


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a scalar exponent.

    For exponents below one the derivative at 0 is infinite; it is taken as 0
    there, which only matters at an exact perfect prediction.
    """
    a = as_tensor(a)
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, exponent)

    def back(g):
        if exponent == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(a.data, exponent - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _node(out, "pow", (a,), back)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), "sum", (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def channel_slice(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), "channel_slice", (a,), back)


# ----------------------------------------------------------------------------
# network primitives
# ----------------------------------------------------------------------------

def _conv_out(extent: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (extent + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, dilation: int = 1, groups: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``groups == C_in == C_out`` selects the channel-wise kernel. Output extent
    per axis is ``floor((H + 2p - d(k-1) - 1)/s) + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_per_group, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d needs a square kernel, got {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} dilation={dilation} padding={padding}")
    if groups < 1 or c_in % groups or c_out % groups or c_per_group * groups != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}, groups={groups}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")
    out_h = _conv_out(h, k, stride, dilation, padding)
    out_w = _conv_out(w, k, stride, dilation, padding)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d input {x.shape} too small for kernel {weight.shape}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    depthwise = groups == c_in and c_out == c_in and c_per_group == 1
    pointwise = k == 1 and stride == 1 and padding == 0 and groups == 1

    if depthwise:
        out = kernels.depthwise_forward(xp, weight.data[:, 0], stride, dilation, out_h, out_w)
    elif pointwise:
        out = np.einsum("oc,nchw->nohw", weight.data[:, :, 0, 0], x.data, optimize=True)
    else:
        cols = kernels.im2col(xp, k, stride, dilation, out_h, out_w)
        g_in, g_out = c_in // groups, c_out // groups
        out = np.empty((n, c_out, out_h, out_w))
        for gi in range(groups):
            wg = weight.data[gi * g_out:(gi + 1) * g_out].reshape(g_out, -1)
            cg = cols[:, gi * g_in:(gi + 1) * g_in].reshape(n, g_in * k * k, out_h * out_w)
            out[:, gi * g_out:(gi + 1) * g_out] = np.matmul(wg, cg).reshape(n, g_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if depthwise:
            gxp, gw = kernels.depthwise_backward(xp, weight.data[:, 0], g, stride, dilation)
            gw = gw[:, None]
        elif pointwise:
            w2 = weight.data[:, :, 0, 0]
            gxp = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
        else:
            g_in, g_out = c_in // groups, c_out // groups
            gcols = np.empty_like(cols)
            gw = np.empty_like(weight.data)
            for gi in range(groups):
                wg = weight.data[gi * g_out:(gi + 1) * g_out].reshape(g_out, -1)
                gg = g[:, gi * g_out:(gi + 1) * g_out].reshape(n, g_out, -1)
                cg = cols[:, gi * g_in:(gi + 1) * g_in].reshape(n, g_in * k * k, -1)
                gw[gi * g_out:(gi + 1) * g_out] = np.einsum(
                    "nol,nkl->ok", gg, cg, optimize=True).reshape(g_out, g_in, k, k)
                gcols[:, gi * g_in:(gi + 1) * g_in] = np.matmul(wg.T, gg).reshape(
                    n, g_in, k, k, out_h, out_w)
            gxp = kernels.col2im(gcols, xp.shape, stride, dilation)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (np.ascontiguousarray(gx), gw)
        return grads + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _node(out, "conv2d", parents, back)


def batchnorm2d(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    Training mode normalises by the biased batch variance and updates the
    running buffers in place (running_var tracks the unbiased estimate). Eval
    mode uses the buffers and leaves them untouched.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects N x C x H x W, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batchnorm2d scale/shift {scale.shape}/{shift.shape} vs channels {c}")
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise DimensionError(f"batchnorm2d got an empty batch/spatial extent {x.shape}")
    axes = (0, 2, 3)
    gamma = scale.data[None, :, None, None]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + shift.data[None, :, None, None]

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * gamma
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return _node(out, "batchnorm2d", (x, scale, shift), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def prelu(x, slope) -> Tensor:
    """``x if x > 0 else slope * x`` with a per-channel ``slope``."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.shape != (x.shape[1],):
        raise DimensionError(f"prelu slope {slope.shape} vs channels {x.shape[1]}")
    mask = x.data > 0
    a = slope.data[None, :, None, None]
    out = np.where(mask, x.data, a * x.data)

    def back(g):
        gx = np.where(mask, g, a * g)
        gs = np.where(mask, 0.0, g * x.data).sum(axis=(0, 2, 3))
        return gx, gs

    return _node(out, "prelu", (x, slope), back)


def activation(x, kind: str = "relu", slope=None) -> Tensor:
    if kind == "relu":
        if slope is not None:
            raise ValueError("relu takes no slope")
        return relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a per-channel slope")
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool expects non-empty N x C x H x W, got {x.shape}")
    return tmean(x, axis=(2, 3), keepdims=True)


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) interpolation weights, half-pixel centres.

    Output index o samples source coordinate ``(o + 0.5)/factor - 0.5``,
    clamped to ``[0, n_in - 1]``; the two neighbouring source cells get
    weights ``1 - t`` and ``t``.
    """
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        mat[o, i0] += 1.0 - t
        mat[o, i1] += t
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _node(x.data.copy(), "upsample", (x,), lambda g: (g,))
    ah = bilinear_matrix(x.shape[2], factor)
    aw = bilinear_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _node(out, "upsample", (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise DimensionError(f"concat_channels needs matching N,H,W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _node(np.concatenate([a.data, b.data], axis=1), "concat", (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(logits) -> Tensor:
    """Softmax over axis 1 with max subtraction."""
    z = as_tensor(logits)
    e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, "softmax", (z,), back)
