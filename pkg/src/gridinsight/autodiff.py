"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough of an autograd engine to express a convolutional hierarchical
VAE and its training loop: every op records a vector-Jacobian closure on the
output tensor, ``backward`` walks the graph once in reverse topological
order. All arithmetic is float64 and every forward result is checked for
NaN/Inf (a non-finite value raises immediately instead of poisoning the
graph).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError

Array = np.ndarray


def _as_f64(data) -> Array:
    return np.asarray(data, dtype=np.float64)


def _check_finite(values: Array, op: str) -> Array:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return values


class Tensor:
    """N-dimensional float64 array, optionally tracked by the autograd graph.

    ``requires_grad`` marks a leaf whose gradient should be retained: ``grad``
    is lazily allocated by :func:`backward` and accumulates across calls until
    :meth:`zero_grad`. Tensors produced by ops propagate gradients through to
    such leaves without retaining their own.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_as_f64(data), "tensor construction")
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def tracked(self) -> bool:
        """Whether gradients flow into or through this tensor."""
        return self.requires_grad or self._vjp is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; tensor*tensor is elementwise, tensor*number is scaling
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_scalar(self, -1.0)


def _make(out_data: Array, op: str, parents: tuple[Tensor, ...],
          vjp: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    out = Tensor(_check_finite(out_data, op))
    if any(p.tracked for p in parents):
        out._parents = parents
        out._vjp = vjp
    return out


def toposort(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (parents before users).

    Iterative so deep graphs never hit the recursion limit; each node is
    visited exactly once.
    """
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf with
    ``requires_grad``.

    ``loss`` must be scalar. Repeated calls without ``zero_grad`` add up.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = toposort(loss)
    flows: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        flow = flows.pop(id(node), None)
        if flow is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += flow
        if node._vjp is None:
            continue
        for parent, pgrad in zip(node._parents, node._vjp(flow)):
            if pgrad is None or not parent.tracked:
                continue
            key = id(parent)
            if key in flows:
                # allocate: vjps may hand the same array to several parents
                flows[key] = flows[key] + pgrad
            else:
                flows[key] = pgrad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, "mul_scalar", (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data + s, "add_scalar", (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (g * (2.0 * a.data),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes a NonFiniteError below
        out_data = np.exp(a.data)
    return _make(out_data, "exp", (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])  # stable for very negative inputs
    out_data[~pos] = ex / (1.0 + ex)
    return _make(out_data, "sigmoid", (a,),
                 lambda g: (g * out_data * (1.0 - out_data),))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,),
                 lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), "mean", (a,),
                 lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def dense_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x:[N,D], weight:[D,E], bias:[E]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("dense_affine: expected x[N,D], weight[D,E], bias[E]")
    n, d = x.data.shape
    dw, e = weight.data.shape
    if d != dw or bias.data.shape[0] != e:
        raise ValueError(
            f"dense_affine: dimension mismatch x{x.data.shape} w{weight.data.shape} b{bias.data.shape}")
    out_data = x.data @ weight.data + bias.data

    def vjp(g: Array):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))

    return _make(out_data, "dense_affine", (x, weight, bias), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 (the channel axis for NCHW, features for ND)."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ValueError("concat_channels: rank mismatch or rank < 2")
    for ax in range(a.data.ndim):
        if ax != 1 and a.data.shape[ax] != b.data.shape[ax]:
            raise ValueError(
                f"concat_channels: non-channel dims must match, got {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out_data = np.concatenate((a.data, b.data), axis=1)

    def vjp(g: Array):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return _make(out_data, "concat_channels", (a, b), vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums over each block."""
    if x.data.ndim != 4:
        raise ValueError("upsample_nearest: expected NCHW input")
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be >= 1")
    f = int(factor)
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def vjp(g: Array):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out_data, "upsample_nearest", (x,), vjp)


def _pad_hw(x: Array, ph: int, pw: int) -> Array:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(x: Array, kh: int, kw: int, stride: int, padding: int) -> tuple[Array, int, int]:
    """Patch matrix of shape [C*kh*kw, N*OH*OW] (one GEMM handles the batch)."""
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    x = _pad_hw(x, padding, padding)
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, n, oh, ow), (s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False)
    return windows.reshape(c * kh * kw, n * oh * ow), oh, ow


def _col2im(gcols: Array, x_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, oh: int, ow: int) -> Array:
    """Scatter-add the patch-matrix gradient back onto the input grid."""
    n, c, h, w = x_shape
    gp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    gwin = gcols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, i, j]
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return gp.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x:[N,C,H,W] with kernel:[F,C,kh,kw].

    Output spatial size is floor((H + 2p - kh)/stride) + 1 (same for W).
    Implemented as im2col + GEMM so the heavy lifting stays inside BLAS.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d: expected x[N,C,H,W] and kernel[F,C,kh,kw]")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch input C={c}, kernel C={ck}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    kflat = kernel.data.reshape(f, c * kh * kw)
    out_flat = kflat @ cols  # [F, N*OH*OW]
    out_data = out_flat.reshape(f, n, oh, ow).transpose(1, 0, 2, 3)

    def vjp(g: Array):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        gk = (gflat @ cols.T).reshape(f, c, kh, kw) if kernel.tracked else None
        if not x.tracked:
            return (None, gk)
        if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
            # input gradient as a full correlation with the flipped kernel:
            # one fat GEMM instead of a thin GEMM plus scatter-add
            gpad = _pad_hw(np.ascontiguousarray(g), kh - 1 - padding, kw - 1 - padding)
            gcols2, gh, gw = _im2col(gpad, kh, kw, 1, 0)
            krot = np.ascontiguousarray(
                kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, f * kh * kw)
            gx = (krot @ gcols2).reshape(c, n, gh, gw).transpose(1, 0, 2, 3)
        else:
            gcols = kflat.T @ gflat
            gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding, oh, ow)
        return (gx, gk)

    return _make(out_data, "conv2d", (x, kernel), vjp)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.data.shape[0] != x.data.shape[1]:
        raise ValueError("add_channel_bias: bias length must equal channel count")
    out_data = x.data + bias.data[None, :, None, None]

    def vjp(g: Array):
        return (g, g.sum(axis=(0, 2, 3)))

    return _make(out_data, "add_channel_bias", (x, bias), vjp)
