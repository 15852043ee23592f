"""Dense tensor arithmetic with reverse-mode differentiation.

Small tape-based engine backed by numpy. Tensors are float32 by default;
float64 arrays are kept as-is so the finite-difference harness can run the
same graph in double precision. No broadcasting beyond scalar-tensor: all
shape adaptation is explicit (channel_affine, select_row, ...).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DegenerateEmbeddingError(ValueError):
    """A zero-norm vector reached cosine_similarity."""


def _as_array(data, like=None):
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A node in the computation graph.

    ``requires_grad`` marks differentiable leaves; interior nodes carry a
    backward closure installed by the op that produced them. Data is treated
    as immutable once the tensor participates in a graph (training updates
    replace ``.data`` between graph builds, never mid-graph).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    # -- scalar / elementwise arithmetic ------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return add(_wrap(other, self), -self)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(opname, a, b):
    if a.data.shape != b.data.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        ga = g if a.data.shape == out.data.shape else np.sum(g).reshape(a.data.shape)
        gb = g if b.data.shape == out.data.shape else np.sum(g).reshape(b.data.shape)
        _accum(a, ga)
        _accum(b, gb)

    out._backward = backward
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.shape != out.data.shape:
            ga = np.sum(ga).reshape(a.data.shape)
        if b.data.shape != out.data.shape:
            gb = np.sum(gb).reshape(b.data.shape)
        _accum(a, ga)
        _accum(b, gb)

    out._backward = backward
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))

    def backward(g):
        _accum(x, g * (x.data > 0))

    out._backward = backward
    return out


def square(x):
    out = Tensor(x.data * x.data, _parents=(x,))

    def backward(g):
        _accum(x, g * 2 * x.data)

    out._backward = backward
    return out


def tsum(x):
    out = Tensor(np.sum(x.data).reshape(()), _parents=(x,))

    def backward(g):
        _accum(x, np.full_like(x.data, 1.0) * g)

    out._backward = backward
    return out


def tmean(x):
    n = x.size
    out = Tensor(np.sum(x.data).reshape(()) / n, _parents=(x,))

    def backward(g):
        _accum(x, np.full_like(x.data, 1.0 / n) * g)

    out._backward = backward
    return out


def select_row(x, index):
    """Row ``index`` of a 2-d tensor, as a 1-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"select_row: expected 2-d operand, got {x.data.shape}")
    if not 0 <= index < x.data.shape[0]:
        raise ShapeError(f"select_row: index {index} out of range for {x.data.shape}")
    out = Tensor(x.data[index], _parents=(x,))

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)

    out._backward = backward
    return out


# -- network building blocks ------------------------------------------------


def _conv_out_dim(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    hp = _conv_out_dim(h, kh, stride, padding)
    wp = _conv_out_dim(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, hp, wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :, :] = xp[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride]
    return cols.reshape(n, c * kh * kw, hp * wp), hp, wp


def _col2im(dcols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    hp = _conv_out_dim(h, kh, stride, padding)
    wp = _conv_out_dim(w, kw, stride, padding)
    dcols = dcols.reshape(n, c, kh, kw, hp, wp)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride] += dcols[:, :, i, j, :, :]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def conv2d(x, kernels, stride=1, padding=0):
    """Cross-correlation (no kernel flip) with zero padding.

    Accepts ``[C,H,W]`` or batched ``[N,C,H,W]`` input; kernels are
    ``[C_out,C_in,kH,kW]``.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    kd = kernels.data
    if kd.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be 4-d, got {kd.shape}")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = kd.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    cols, hp, wp = _im2col(xd, kh, kw, stride, padding)
    km = kd.reshape(cout, cin * kh * kw)
    y = np.matmul(km[None], cols).reshape(n, cout, hp, wp)
    out = Tensor(y if batched else y[0], _parents=(x, kernels))

    def backward(g):
        gd = g if batched else g[None]
        gflat = gd.reshape(n, cout, hp * wp)
        if kernels.requires_grad or kernels._parents:
            dk = np.einsum("nop,ncp->oc", gflat, cols, optimize=True).reshape(kd.shape)
            _accum(kernels, dk)
        if x.requires_grad or x._parents:
            dcols = np.matmul(km.T[None], gflat)
            dx = _col2im(dcols, xd.shape, kh, kw, stride, padding)
            _accum(x, dx if batched else dx[0])

    out._backward = backward
    return out


def channel_affine(x, scale, offset):
    """Per-channel ``x*scale + offset`` for ``[C,H,W]`` or ``[N,C,H,W]`` input."""
    batched = x.data.ndim == 4
    c = x.data.shape[1] if batched else x.data.shape[0]
    if scale.data.shape != (c,) or offset.data.shape != (c,):
        raise ShapeError(f"channel_affine: expected per-channel ({c},) params, got {scale.data.shape}/{offset.data.shape}")
    sview = scale.data[:, None, None]
    oview = offset.data[:, None, None]
    out = Tensor(x.data * sview + oview, _parents=(x, scale, offset))

    def backward(g):
        axes = (0, 2, 3) if batched else (1, 2)
        _accum(scale, np.sum(g * x.data, axis=axes))
        _accum(offset, np.sum(g, axis=axes))
        _accum(x, g * sview)

    out._backward = backward
    return out


def batch_norm_train(x, scale, offset, eps=1e-5):
    """Batch normalization over (N,H,W) per channel, training semantics.

    Used only inside training steps; the trained model folds running
    statistics into plain per-channel affine parameters, so inference
    networks never execute this op.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm_train: expected [N,C,H,W], got {x.data.shape}")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or offset.data.shape != (c,):
        raise ShapeError(f"batch_norm_train: expected ({c},) params, got {scale.data.shape}/{offset.data.shape}")
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(xhat * scale.data[None, :, None, None] + offset.data[None, :, None, None], _parents=(x, scale, offset))

    def backward(g):
        _accum(scale, np.sum(g * xhat, axis=axes))
        _accum(offset, np.sum(g, axis=axes))
        gs = g * scale.data[None, :, None, None]
        gmean = gs.mean(axis=axes)
        gxhat = (gs * xhat).mean(axis=axes)
        dx = inv[None, :, None, None] * (gs - gmean[None, :, None, None] - xhat * gxhat[None, :, None, None])
        _accum(x, dx)

    out._backward = backward
    return out, mu, var


def global_avg_pool(x):
    """Spatial mean per channel; ``[C,H,W]`` -> ``[C]`` or ``[N,C,H,W]`` -> ``[N,C]``."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected 3-d or 4-d input, got {x.data.shape}")
    h, w = x.data.shape[-2:]
    out = Tensor(np.mean(x.data, axis=(-2, -1)), _parents=(x,))

    def backward(g):
        _accum(x, np.repeat(np.repeat(g[..., None, None], h, axis=-2), w, axis=-1) / (h * w))

    out._backward = backward
    return out


def linear_no_bias(x, weights):
    """``weights[D,C] @ x[C]`` (or row-wise for ``[N,C]``); no additive term."""
    if weights.data.ndim != 2:
        raise ShapeError(f"linear_no_bias: weights must be 2-d, got {weights.data.shape}")
    d, c = weights.data.shape
    if x.data.shape[-1] != c:
        raise ShapeError(f"linear_no_bias: input dim {x.data.shape} incompatible with weights {weights.data.shape}")
    out = Tensor(x.data @ weights.data.T, _parents=(x, weights))

    def backward(g):
        if weights.requires_grad or weights._parents:
            if x.data.ndim == 1:
                _accum(weights, np.outer(g, x.data))
            else:
                _accum(weights, g.T @ x.data)
        _accum(x, g @ weights.data)

    out._backward = backward
    return out


def cosine_similarity(a, b):
    """Cosine similarity of two 1-d tensors; rejects zero-norm arguments."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity: expected matching 1-d operands, got {a.data.shape}/{b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("cosine_similarity: zero-norm embedding")
    s = float(np.dot(a.data.astype(np.float64), b.data.astype(np.float64)) / (na * nb))
    out = Tensor(np.asarray(s, dtype=a.data.dtype).reshape(()), _parents=(a, b))

    def backward(g):
        _accum(a, g * (b.data / (na * nb) - s * a.data / (na * na)))
        _accum(b, g * (a.data / (na * nb) - s * b.data / (nb * nb)))

    out._backward = backward
    return out


# -- reverse pass -----------------------------------------------------------


def _topo_order(output):
    order = []
    seen = set()
    stack = [(output, False)]
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


def backward(output, leaves=None):
    """Reverse-mode gradients of a scalar ``output``.

    Returns a dict mapping each requested leaf tensor to its gradient array
    (same shape as the leaf). Leaves not connected to ``output`` get zeros.
    Accumulation runs in a fixed topological order for bit-reproducibility.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.data.shape}")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if leaves is None:
        leaves = [n for n in order if n.requires_grad]
    return {leaf: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for leaf in leaves}


def grad_of(output, leaf):
    return backward(output, leaves=[leaf])[leaf]


def finite_difference_check(f, x0, h=1e-3, sample=50, seed=0, full=False):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a leaf Tensor to a scalar Tensor and is re-executed at
    perturbed points. Everything runs in float64 so the oracle does not mask
    real errors. Returns ``(max_relative_error, checked)`` where ``checked``
    is False when no coordinates were sampled; with ``full=True`` a third
    element carries the per-coordinate relative errors.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    analytic = backward(f(leaf), leaves=[leaf])[leaf]
    if sample <= 0:
        return (0.0, False, np.empty(0)) if full else (0.0, False)
    rng = np.random.default_rng(seed)
    idx = rng.choice(x0.size, size=min(sample, x0.size), replace=False)
    errors = []
    flat = x0.reshape(-1)
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xm = flat.copy()
        xm[i] -= h
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    errors = np.asarray(errors)
    worst = float(errors.max())
    if full:
        return worst, True, errors
    return worst, True
