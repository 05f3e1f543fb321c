"""Dense tensors with a reverse-mode gradient tape.

The tape is define-by-run: every operation that touches a gradient-requiring
tensor records a closure that propagates the upstream gradient to its inputs.
Calling ``backward`` on a scalar walks the recorded graph once in reverse
topological order. Repeated backward calls accumulate into ``.grad``.

Everything is float64. Only two broadcasting patterns are supported for
binary ops: equal shapes, and scalar-vs-tensor. That covers every loss and
network in this package and keeps gradient bookkeeping trivial.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape, dtype=DTYPE), requires_grad)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, no tape participation. Shares the data buffer."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._grad_fn = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- backward ----------------------------------------------------------------

    def backward(self):
        """Accumulate dSelf/dNode into ``.grad`` of every reachable tensor.

        Only scalar roots are supported. Gradients of one pass are computed in
        a scratch map and added to the persistent ``.grad`` buffers at the end,
        so repeated calls accumulate leaf gradients as a running sum.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        if not self.requires_grad:
            return {}

        topo = _toposort(self)
        scratch: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = scratch.get(id(node))
            if g is None or node._grad_fn is None:
                continue
            for parent, pg in node._grad_fn(g):
                if not parent.requires_grad:
                    continue
                acc = scratch.get(id(parent))
                if acc is None:
                    # own the buffer: closures may hand back views, read-only
                    # broadcasts, or the upstream gradient itself
                    if pg is g or pg.base is not None or not pg.flags.writeable:
                        pg = np.array(pg, dtype=DTYPE)
                    scratch[id(parent)] = pg
                else:
                    acc += pg
        grads = {}
        for node in topo:
            g = scratch.get(id(node))
            if g is None:
                continue
            if node.grad is None:
                node.grad = g
            else:
                node.grad += g
            grads[node] = node.grad
        return grads


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents, grad_fn) -> Tensor:
    """Build an op result; record on the tape only if some input needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _binary_shapes(a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"unsupported broadcast: {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # inverse of scalar-vs-tensor broadcasting: the scalar side sums
    if grad.shape == tuple(shape):
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


# -- elementwise suite ------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    out = a.data + b.data

    def grad_fn(g):
        return ((a, _reduce_to(g, a.data.shape)), (b, _reduce_to(g, b.data.shape)))

    return _make(out, (a, b), grad_fn)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    out = a.data - b.data

    def grad_fn(g):
        return ((a, _reduce_to(g, a.data.shape)), (b, _reduce_to(-g, b.data.shape)))

    return _make(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    out = a.data * b.data

    def grad_fn(g):
        return ((a, _reduce_to(g * b.data, a.data.shape)), (b, _reduce_to(g * a.data, b.data.shape)))

    return _make(out, (a, b), grad_fn)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ((a, ga), (b, gb))

    return _make(out, (a, b), grad_fn)


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def absolute(a):
    a = _wrap(a)
    # subgradient at exactly 0 takes the negative branch, matching leaky_relu
    sign = np.where(a.data > 0, 1.0, -1.0)
    return _make(np.abs(a.data), (a,), lambda g: ((a, g * sign),))


def log(a):
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: ((a, g * (0.5 / out)),))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def sigmoid(a):
    a = _wrap(a)
    z = a.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def grad_fn(g):
        return ((a, g * out * (1.0 - out)),)

    return _make(out, (a,), grad_fn)


def cos(a):
    a = _wrap(a)
    return _make(np.cos(a.data), (a,), lambda g: ((a, -g * np.sin(a.data)),))


def sin(a):
    a = _wrap(a)
    return _make(np.sin(a.data), (a,), lambda g: ((a, g * np.cos(a.data)),))


def clamp(a, lo: float, hi: float):
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    passthrough = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: ((a, g * passthrough),))


def mean(a):
    a = _wrap(a)
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g / n, a.data.shape)),))


def tsum(a):
    a = _wrap(a)
    out = np.asarray(a.data.sum())
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g, a.data.shape)),))


def getitem(a, idx):
    a = _wrap(a)
    out = a.data[idx]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return ((a, ga),)

    return _make(np.array(out, dtype=DTYPE), (a,), grad_fn)


def stack(tensors, axis: int = 0):
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        slabs = np.split(g, len(tensors), axis=axis)
        return tuple((t, s.reshape(t.data.shape)) for t, s in zip(tensors, slabs))

    return _make(out, tuple(tensors), grad_fn)


def concat(tensors, axis: int = 0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(sl)]))
        return tuple(pieces)

    return _make(out, tuple(tensors), grad_fn)


def detach(a: Tensor) -> Tensor:
    return _wrap(a).detach()


# -- activations -------------------------------------------------------------------


def leaky_relu(a, slope: float = 0.01):
    """x for x > 0, slope*x otherwise; slope 0 gives plain ReLU.

    The branch at exactly 0 is the negative one, so the subgradient there is
    ``slope`` (deterministic tests depend on this).
    """
    a = _wrap(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: ((a, g * factor),))


def relu(a):
    return leaky_relu(a, 0.0)


# -- dense / pooling / normalization ------------------------------------------------


def dense(x, w, b):
    """w @ x + b for 1-d x; w is (n_out, n_in)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise ValueError(f"dense shape mismatch: w{w.data.shape} x{x.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"dense bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out = w.data @ x.data + b.data

    def grad_fn(g):
        return ((x, w.data.T @ g), (w, np.outer(g, x.data)), (b, g))

    return _make(out, (x, w, b), grad_fn)


def global_avg_pool(x):
    """(C,H,W) -> (C,) per-channel spatial mean."""
    x = _wrap(x)
    c, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def grad_fn(g):
        return ((x, np.broadcast_to(g[:, None, None] / (h * w), x.data.shape)),)

    return _make(out, (x,), grad_fn)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5):
    """Zero mean / unit variance per channel group, then per-channel affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c, h, w = x.data.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    xg = x.data.reshape(groups, cg, h, w)
    mu = xg.mean(axis=(1, 2, 3), keepdims=True)
    var = xg.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(c, h, w)
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def grad_fn(g):
        dbeta = g.sum(axis=(1, 2))
        dgamma = (g * xhat).sum(axis=(1, 2))
        dxhat = (g * gamma.data[:, None, None]).reshape(groups, cg, h, w)
        xh = xhat.reshape(groups, cg, h, w)
        m1 = dxhat.mean(axis=(1, 2, 3), keepdims=True)
        m2 = (dxhat * xh).mean(axis=(1, 2, 3), keepdims=True)
        dx = (inv * (dxhat - m1 - xh * m2)).reshape(c, h, w)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return _make(out, (x, gamma, beta), grad_fn)


# -- convolutions --------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int):
    """Unfold (C,H,W) into a (C*k*k, Ho*Wo) patch matrix for BLAS matmuls.

    Copies one kernel offset at a time; each copy is a plain strided 3-d
    block, which is much cheaper than transposing a 5-d window view.
    """
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = np.empty((c, k, k, ho * wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            src = x[:, a:a + (ho - 1) * stride + 1:stride, b:b + (wo - 1) * stride + 1:stride]
            np.copyto(cols[:, a, b].reshape(c, ho, wo), src)
    return cols.reshape(c * k * k, ho * wo), ho, wo


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlate (C_in,H,W) with (C_out,C_in,k,k); no padding."""
    c_out, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride)
    return (w.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)


def _col2im(cols: np.ndarray, k: int, ho: int, wo: int, stride: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col: fold a (C*k*k, Ho*Wo) matrix back onto (C, h, w),
    summing overlapping contributions."""
    c = cols.shape[0] // (k * k)
    view = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, h, w), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, a:a + (ho - 1) * stride + 1:stride, b:b + (wo - 1) * stride + 1:stride] += view[:, a, b]
    return out


def _corr2d_wgrad(x: np.ndarray, go: np.ndarray, k: int, stride: int) -> np.ndarray:
    cols, ho, wo = _im2col(x, k, stride)
    c_out = go.shape[0]
    return (go.reshape(c_out, -1) @ cols.T).reshape(c_out, -1, k, k)


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlation of (C_in,H,W) with (C_out,C_in,k,k), zero padding."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    c_out, c_in, k, k2 = w.data.shape
    if k != k2:
        raise ValueError("only square kernels supported")
    if x.data.ndim != 3 or x.data.shape[0] != c_in:
        raise ValueError(f"conv2d input {x.data.shape} incompatible with weight {w.data.shape}")
    h, wd = x.data.shape[1:]
    if (h + 2 * padding - k) % stride or (wd + 2 * padding - k) % stride:
        raise ValueError(f"non-integral output extent for input {x.data.shape}, k={k}, stride={stride}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, k, stride)
    out = (w.data.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo) + b.data[:, None, None]

    def grad_fn(g):
        gb = g.sum(axis=(1, 2))
        gw = (g.reshape(c_out, -1) @ cols.T).reshape(w.data.shape)
        # input gradient: patch-space matmul, folded back onto the image
        gcols = w.data.reshape(c_out, -1).T @ g.reshape(c_out, -1)
        gxp = _col2im(gcols, k, ho, wo, stride, h + 2 * padding, wd + 2 * padding)
        gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
        return ((x, np.ascontiguousarray(gx)), (w, gw), (b, gb))

    return _make(out, (x, w, b), grad_fn)


def conv_transpose2d(x, w, b, stride: int = 2):
    """Exact adjoint of the matching strided conv2d (plus bias).

    Weight layout is (C_in, C_out, k, k), i.e. the same array that the paired
    conv2d would use with its in/out roles swapped.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    c_in, c_out, k, k2 = w.data.shape
    if k != k2:
        raise ValueError("only square kernels supported")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if x.data.ndim != 3 or x.data.shape[0] != c_in:
        raise ValueError(f"conv_transpose2d input {x.data.shape} incompatible with weight {w.data.shape}")

    hi, wi = x.data.shape[1:]
    out_h = (hi - 1) * stride + k
    out_w = (wi - 1) * stride + k
    ocols = w.data.reshape(c_in, -1).T @ x.data.reshape(c_in, -1)
    out = _col2im(ocols, k, hi, wi, stride, out_h, out_w) + b.data[:, None, None]

    def grad_fn(g):
        gb = g.sum(axis=(1, 2))
        gx = _corr2d(g, w.data, stride)
        gw = _ct_wgrad(x.data, g, k, stride)
        return ((x, gx), (w, gw), (b, gb))

    return _make(out, (x, w, b), grad_fn)


def _ct_wgrad(x: np.ndarray, go: np.ndarray, k: int, stride: int) -> np.ndarray:
    """d out / d w for conv_transpose2d: correlate upstream grad with inputs."""
    # out[o, i*s + a, j*s + b] += x[c, i, j] * w[c, o, a, b]
    # => gw[c, o, a, b] = sum_{i,j} x[c, i, j] * go[o, i*s+a, j*s+b]
    win = np.lib.stride_tricks.sliding_window_view(go, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    c_out, hi, wi = win.shape[:3]
    g = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(hi * wi, c_out * k * k)
    return (x.reshape(x.shape[0], -1) @ g).reshape(x.shape[0], c_out, k, k)


# -- bilinear sampling ----------------------------------------------------------------


def _corner_data(coords: np.ndarray, h: int, w: int, border: str):
    """Shared corner/weight bookkeeping for sampling a (.., h, w) grid."""
    cy, cx = coords[0], coords[1]
    if border == "clamp":
        cy = np.clip(cy, 0.0, h - 1.0)
        cx = np.clip(cx, 0.0, w - 1.0)
    y0 = np.floor(cy)
    x0 = np.floor(cx)
    fy = cy - y0
    fx = cx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    in_y0 = (y0 >= 0) & (y0 < h)
    in_y1 = (y1 >= 0) & (y1 < h)
    in_x0 = (x0 >= 0) & (x0 < w)
    in_x1 = (x1 >= 0) & (x1 < w)
    return cy, cx, y0, x0, y1, x1, fy, fx, in_y0, in_y1, in_x0, in_x1


def bilinear_sample(image, coords, border: str = "zeros"):
    """Sample (C,H,W) at pixel coordinates (2,H',W'), order (row, col).

    ``border="zeros"``: out-of-range corners contribute zero (validity is the
    caller's concern, tracked by masks). ``border="clamp"``: coordinates are
    clipped to the grid first; used for resampling displacement fields, where
    constant extension is the right model. Gradients flow to both the image
    values and the coordinates.
    """
    image, coords = _wrap(image), _wrap(coords)
    c, h, w = image.data.shape
    cy, cx, y0, x0, y1, x1, fy, fx, in_y0, in_y1, in_x0, in_x1 = _corner_data(coords.data, h, w, border)

    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)

    img = image.data
    v00 = img[:, y0c, x0c] * (in_y0 & in_x0)
    v01 = img[:, y0c, x1c] * (in_y0 & in_x1)
    v10 = img[:, y1c, x0c] * (in_y1 & in_x0)
    v11 = img[:, y1c, x1c] * (in_y1 & in_x1)

    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    if border == "clamp":
        # flat beyond the border: no coordinate gradient where we clipped
        gy_open = (coords.data[0] > 0.0) & (coords.data[0] < h - 1.0)
        gx_open = (coords.data[1] > 0.0) & (coords.data[1] < w - 1.0)
    else:
        gy_open = gx_open = None

    def grad_fn(g):
        gimg = np.zeros_like(img)
        flat = gimg.reshape(c, -1)
        npix = h * w
        for yc, xc, inb, wt in (
            (y0c, x0c, in_y0 & in_x0, w00),
            (y0c, x1c, in_y0 & in_x1, w01),
            (y1c, x0c, in_y1 & in_x0, w10),
            (y1c, x1c, in_y1 & in_x1, w11),
        ):
            idx = (yc * w + xc).ravel()
            contrib = (g * (wt * inb)).reshape(c, -1)
            for ch in range(c):
                flat[ch] += np.bincount(idx, weights=contrib[ch], minlength=npix)
        d_dy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
        d_dx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
        gcy = (g * d_dy).sum(axis=0)
        gcx = (g * d_dx).sum(axis=0)
        if border == "clamp":
            gcy = gcy * gy_open
            gcx = gcx * gx_open
        return ((image, gimg), (coords, np.stack([gcy, gcx])))

    return _make(out, (image, coords), grad_fn)


def sample_validity(mask: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Strict mask lookup: every interpolation corner that would carry weight
    must be in bounds and valid. Returns a boolean (H',W') array; no tape."""
    h, w = mask.shape
    _, _, y0, x0, y1, x1, fy, fx, in_y0, in_y1, in_x0, in_x1 = _corner_data(coords, h, w, "zeros")
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
    m = mask.astype(bool)
    need_y1 = fy > 0
    need_x1 = fx > 0
    ok = in_y0 & in_x0 & m[y0c, x0c]
    ok &= ~need_x1 | (in_y0 & in_x1 & m[y0c, x1c])
    ok &= ~need_y1 | (in_y1 & in_x0 & m[y1c, x0c])
    ok &= ~(need_y1 & need_x1) | (in_y1 & in_x1 & m[y1c, x1c])
    return ok


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments for one parameter list. Defaults follow common practice;
    the training description names the optimizer but not its betas."""

    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float):
    """One in-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin convenience wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- spectral normalization ----------------------------------------------------------


@dataclass
class PowerIterState:
    u: np.ndarray | None = None


def spectral_normalize(w: Tensor, state: PowerIterState, update: bool = True) -> Tensor:
    """Divide w by its leading singular value, estimated by power iteration.

    The weight is viewed as (out_features, rest). One iteration runs per call
    when ``update`` is true; the u-vector persists in ``state``. The estimate
    is treated as a constant during backprop.
    """
    w = _wrap(w)
    mat = w.data.reshape(w.data.shape[0], -1)
    if state.u is None:
        u = np.ones(mat.shape[0], dtype=DTYPE)
        state.u = u / np.linalg.norm(u)
    if update:
        v = mat.T @ state.u
        v /= np.linalg.norm(v) + 1e-12
        u = mat @ v
        u /= np.linalg.norm(u) + 1e-12
        state.u = u
    else:
        v = mat.T @ state.u
        v /= np.linalg.norm(v) + 1e-12
        u = state.u
    sigma = float(u @ (mat @ v))
    return mul(w, 1.0 / max(sigma, 1e-12))


# -- gradient checking ----------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar Tensor and must be deterministic. When
    ``coords`` is given, only those flat indices are probed (keeps big checks
    cheap). Relative error uses an absolute floor of 1e-8 on the denominator.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = float(f(Tensor(flat.reshape(x.data.shape))).data)
        flat[i] = orig - eps
        with no_grad():
            fm = float(f(Tensor(flat.reshape(x.data.shape))).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
