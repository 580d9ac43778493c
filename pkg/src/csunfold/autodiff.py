"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the operations the reconstruction network needs: 2-D
convolution (lowered to a matrix product via patch flattening), bilinear
resampling, deformable convolution, a handful of elementwise ops, matrix
multiply, row softmax, batch normalization and some shape plumbing
(reshape/transpose/concat/pooling/tiling).

Gradients accumulate by addition into ``Tensor.grad``; call
:func:`zero_grad` (or ``Tensor.zero_grad``) between backward passes.  The
graph is retained after ``backward`` -- calling ``backward`` twice without
zeroing doubles every gradient.  Scalars are float32 by default; pass
float64 data everywhere for verification runs (ops preserve the input
dtype and refuse to mix the two).

Threading: forward and backward over one graph are single-threaded.
Tensors with requires_grad=False are never mutated by ops and are safe to
share across threads; accumulating into shared parameter gradients needs
exclusive access.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array plus optional gradient and a link into the backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        else:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        """Fresh leaf tensor with the same payload in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(*tensors):
    d0 = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != d0:
            raise TypeError(f"mixed tensor dtypes {d0} vs {t.data.dtype}; cast explicitly")


def _node(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss):
    """Reverse-mode sweep from a scalar; accumulates into ``.grad`` (+=)."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # iterative topological order (graphs are deep for many-phase models)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf: record the gradient (accumulating across backward calls)
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise ops (broadcasting limited to equal shapes and size-1 scalars)


def _binary_shapes(a, b, op_name):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op_name}: incompatible shapes {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    # undo scalar broadcasting: collapse everything back onto the size-1 operand
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


def add(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))


def sub(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))


def mul(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)),
    )


def scale(a, s):
    s = float(s)
    return _node(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def add_scalar(a, s):
    s = a.data.dtype.type(float(s))
    return _node(a.data + s, (a,), lambda g: (g,))


def relu(a):
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    return _node(out, (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sum_all(a):
    out = np.asarray(a.data.sum(dtype=a.data.dtype))
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner mismatch: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    return _node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.data.shape}")
    return _node(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis."""
    _check_same_dtype(*tensors)
    splits = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + splits)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _node(out, tuple(tensors), vjp)


def concat_leading(tensors):
    """Concatenate along axis 0 (used to stack kernels for fused ops)."""
    _check_same_dtype(*tensors)
    splits = [t.data.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + splits)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _node(out, tuple(tensors), vjp)


def slice_channels(x, start, stop):
    """View of channels [start, stop) of an NCHW tensor."""
    out = np.ascontiguousarray(x.data[:, start:stop])

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _node(out, (x,), vjp)


# floor on shifted logits: exp() of anything lower is dwarfed by the row
# max (always 0) yet lands in the subnormal range, which is ~10x slower
_SOFTMAX_CLAMP = {np.dtype(np.float32): -60.0, np.dtype(np.float64): -700.0}


def softmax_rows(a):
    """Row-wise softmax of a matrix, computed with max subtraction."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    p = a.data - a.data.max(axis=1, keepdims=True)
    np.maximum(p, _SOFTMAX_CLAMP[a.data.dtype], out=p)
    np.exp(p, out=p)
    p /= p.sum(axis=1, keepdims=True)

    def vjp(g):
        return ((g - (g * p).sum(axis=1, keepdims=True)) * p,)

    return _node(p, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution via patch flattening


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    sn, sc, sy, sx = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sy, sx, sy * sh, sx * sw),
        writeable=False,
    )
    col = windows.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def _col2im(dcol, x_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcol.dtype)
    dwin = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += dwin[:, :, i, j]
    if ph or pw:
        return dxp[:, :, ph:ph + h, pw:pw + w]
    return dxp


def _conv_dx_stride1(g, w, x_shape, ph, pw):
    # input gradient of a stride-1 convolution as one full correlation
    # with the rotated kernel (gemm path, cheaper than scatter-add)
    cout, cin, kh, kw = w.shape
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(cin, -1)
    col, oh2, ow2 = _im2col(g, kh, kw, 1, 1, kh - 1, kw - 1)
    n = g.shape[0]
    out = (col @ wt.T).reshape(n, oh2, ow2, cin).transpose(0, 3, 1, 2)
    h, w_ = x_shape[2], x_shape[3]
    return np.ascontiguousarray(out[:, :, ph:ph + h, pw:pw + w_])


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution (really cross-correlation, the network convention).

    x: [N, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or None.
    Zero padding, output H' = floor((H + 2p - kh)/stride) + 1.
    """
    _check_same_dtype(*([x, weight] + ([bias] if bias is not None else [])))
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be >= 0, got {(ph, pw)}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/kernel, got {x.data.shape} and {weight.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = weight.data.shape
    if cin != cin_k:
        raise ValueError(
            f"conv2d channel mismatch: input has Cin={cin} {x.data.shape}, "
            f"kernel expects Cin={cin_k} {weight.data.shape}"
        )

    parents = (x, weight) if bias is None else (x, weight, bias)

    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        # pointwise conv: plain channel mixing, no patch flattening needed
        wmat = weight.data.reshape(cout, cin)
        xflat = x.data.reshape(n, cin, h * w)
        out = np.matmul(wmat, xflat)
        if bias is not None:
            out = out + bias.data[None, :, None]
        out = out.reshape(n, cout, h, w)

        def vjp_pointwise(g):
            gflat = g.reshape(n, cout, h * w)
            dx = np.matmul(wmat.T, gflat).reshape(x.data.shape)
            dw = np.einsum("nop,ncp->oc", gflat, xflat).reshape(weight.data.shape)
            if bias is None:
                return dx, dw
            return dx, dw, g.sum(axis=(0, 2, 3))

        return _node(out, parents, vjp_pointwise)

    col, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    wmat = weight.data.reshape(cout, -1)
    out = col @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        dw = (g2.T @ col).reshape(weight.data.shape)
        if sh == 1 and sw == 1:
            dx = _conv_dx_stride1(g, weight.data, x.data.shape, ph, pw)
        else:
            dx = _col2im(g2 @ wmat, x.data.shape, kh, kw, sh, sw, ph, pw, oh, ow)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _node(out, parents, vjp)


# ---------------------------------------------------------------------------
# bilinear resampling and deformable convolution


def _bilinear_pieces(ys, xs, h, w):
    """Corner indices, weights and validity masks for zero-padded reads."""
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    wy = ys - y0
    wx = xs - x0
    corners = []
    for yc, xc, cw in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    ):
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        corners.append((np.clip(yc, 0, h - 1), np.clip(xc, 0, w - 1), cw, valid))
    return corners, wy, wx


def bilinear_sample(feature_map, coords):
    """Sample [N, C, H, W] at fractional (y, x) positions -> [N, C, P].

    Out-of-range reads contribute zero.  ``coords`` may be a Tensor of
    shape [P, 2] (differentiable) or any array-like of (y, x) pairs.
    """
    coords_t = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, dtype=feature_map.dtype))
    if coords_t.data.ndim != 2 or coords_t.data.shape[1] != 2:
        raise ValueError(f"coords must be [P, 2], got {coords_t.data.shape}")
    n, c, h, w = feature_map.data.shape
    ys = coords_t.data[:, 0]
    xs = coords_t.data[:, 1]
    corners, _, _ = _bilinear_pieces(ys, xs, h, w)
    dtype = feature_map.data.dtype

    out = np.zeros((n, c, ys.size), dtype=dtype)
    vals = []
    for yc, xc, cw, valid in corners:
        v = feature_map.data[:, :, yc, xc] * valid  # [N, C, P]
        vals.append(v)
        out += v * cw.astype(dtype)

    def vjp(g):
        dmap = np.zeros_like(feature_map.data)
        for (yc, xc, cw, valid) in corners:
            np.add.at(dmap, (slice(None), slice(None), yc, xc), g * (cw * valid).astype(dtype))
        # d value / d y and / d x from the closed bilinear form
        fy = ys - np.floor(ys)
        fx = xs - np.floor(xs)
        dval_dy = (-(vals[0] * (1 - fx) + vals[1] * fx)
                   + (vals[2] * (1 - fx) + vals[3] * fx))
        dval_dx = (-(vals[0] * (1 - fy) + vals[2] * fy)
                   + (vals[1] * (1 - fy) + vals[3] * fy))
        dy = (g * dval_dy).sum(axis=(0, 1))
        dx = (g * dval_dx).sum(axis=(0, 1))
        dcoords = np.stack([dy, dx], axis=1)
        return dmap, dcoords

    return _node(out, (feature_map, coords_t), vjp)


def deformable_conv2d(x, weight, offsets):
    """Deformable convolution: taps read at grid + regular offset + learned offset.

    x: [N, Cin, H, W]; weight: [Cout, Cin, d, d] (no bias); offsets:
    [N, 2*d*d, H, W] interleaved per tap as (dy, dx) in row-major tap
    order.  Stride 1; spatial size preserved; reads past the border see
    zeros (matching a zero-padded ordinary convolution).
    """
    _check_same_dtype(x, weight, offsets)
    n, cin, h, w = x.data.shape
    cout, cin_k, d, d2 = weight.data.shape
    if cin != cin_k or d != d2:
        raise ValueError(f"deformable_conv2d kernel shape {weight.data.shape} incompatible with input {x.data.shape}")
    ntaps = d * d
    if offsets.data.shape != (n, 2 * ntaps, h, w):
        raise ValueError(
            f"offsets must be [N, {2 * ntaps}, H, W] for a {d}x{d} kernel, got {offsets.data.shape}"
        )
    pad = d // 2
    dtype = x.data.dtype

    yy = np.arange(h, dtype=dtype)[:, None]
    xx = np.arange(w, dtype=dtype)[None, :]
    base_dy = np.array([r - pad for r in range(d) for _ in range(d)], dtype=dtype)
    base_dx = np.array([c - pad for _ in range(d) for c in range(d)], dtype=dtype)

    ys = yy[None, None] + base_dy[None, :, None, None] + offsets.data[:, 0::2]  # [N, T, H, W]
    xs = xx[None, None] + base_dx[None, :, None, None] + offsets.data[:, 1::2]

    corners, _, _ = _bilinear_pieces(ys, xs, h, w)
    flat_x = x.data.reshape(n, cin, h * w)
    # gather all four corners in one indexed read
    idx_all = np.stack([(yc * w + xc) for yc, xc, _, _ in corners], axis=1)  # [N, 4, T, H, W]
    gathered = np.take_along_axis(flat_x, idx_all.reshape(n, 1, -1), axis=2)
    gathered = gathered.reshape(n, cin, 4, ntaps, h, w)
    corner_vals = []
    sampled = np.zeros((n, cin, ntaps, h, w), dtype=dtype)
    for k, (yc, xc, cw, valid) in enumerate(corners):
        v = gathered[:, :, k] * valid[:, None]
        corner_vals.append(v)
        sampled += v * cw[:, None].astype(dtype)

    wmat = weight.data.reshape(cout, cin * ntaps)
    out = np.matmul(wmat, sampled.reshape(n, cin * ntaps, h * w)).reshape(n, cout, h, w)

    def vjp(g):
        gr = g.reshape(n, cout, h * w)
        sr = sampled.reshape(n, cin * ntaps, h * w)
        dw = np.einsum("nop,ncp->oc", gr, sr).reshape(weight.data.shape)
        dsampled = np.matmul(wmat.T, gr).reshape(n, cin, ntaps, h, w)

        # one fused scatter over all four corners and all channels
        chan_base = (np.arange(cin, dtype=np.int64) * (h * w))[:, None]
        dx_map = np.zeros_like(x.data)
        per_corner = ntaps * h * w
        idx_cat = np.empty((n, 4 * per_corner), dtype=np.int64)
        wgt_cat = np.empty((n, cin, 4 * per_corner), dtype=dtype)
        for k, (yc, xc, cw, valid) in enumerate(corners):
            sl = slice(k * per_corner, (k + 1) * per_corner)
            idx_cat[:, sl] = (yc * w + xc).reshape(n, -1)
            wgt_cat[:, :, sl] = (dsampled * (cw * valid)[:, None].astype(dtype)).reshape(n, cin, -1)
        for b in range(n):
            flat = np.bincount(
                (idx_cat[b][None, :] + chan_base).ravel(),
                weights=wgt_cat[b].ravel(),
                minlength=cin * h * w,
            )
            dx_map[b] = flat.reshape(cin, h, w).astype(dtype)

        fy = ys - np.floor(ys)
        fx = xs - np.floor(xs)
        dval_dy = (-(corner_vals[0] * (1 - fx)[:, None] + corner_vals[1] * fx[:, None])
                   + (corner_vals[2] * (1 - fx)[:, None] + corner_vals[3] * fx[:, None]))
        dval_dx = (-(corner_vals[0] * (1 - fy)[:, None] + corner_vals[2] * fy[:, None])
                   + (corner_vals[1] * (1 - fy)[:, None] + corner_vals[3] * fy[:, None]))
        doff = np.zeros_like(offsets.data)
        doff[:, 0::2] = (dsampled * dval_dy).sum(axis=1)
        doff[:, 1::2] = (dsampled * dval_dx).sum(axis=1)
        return dx_map, dw, doff

    return _node(out, (x, weight, offsets), vjp)


# ---------------------------------------------------------------------------
# normalization and pooling


class BatchNormState:
    """Per-channel running statistics (buffers, not trained)."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def astype(self, dtype):
        out = BatchNormState(self.running_mean.size, dtype)
        out.running_mean = self.running_mean.astype(dtype)
        out.running_var = self.running_var.astype(dtype)
        return out


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(x, gamma, beta, state, training):
    """Per-channel batch norm over (N, H, W); biased variance throughout."""
    _check_same_dtype(x, gamma, beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm expects NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if n == 0:
        raise ValueError("batchnorm on an empty batch")
    dtype = x.data.dtype
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = ((1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mu).astype(dtype)
        state.running_var = ((1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var).astype(dtype)
        ivar = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gview * xhat + bview
        m = n * h * w

        def vjp(g):
            dxhat = g * gview
            xm = x.data - mu.reshape(1, c, 1, 1)
            iv = ivar.reshape(1, c, 1, 1)
            dvar = (dxhat * xm).sum(axis=(0, 2, 3)) * (-0.5) * ivar**3
            dmu = (dxhat * (-iv)).sum(axis=(0, 2, 3)) + dvar * (-2.0 / m) * xm.sum(axis=(0, 2, 3))
            dx = dxhat * iv + (2.0 / m) * dvar.reshape(1, c, 1, 1) * xm + dmu.reshape(1, c, 1, 1) / m
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx.astype(dtype), dgamma.astype(dtype), dbeta.astype(dtype)

        return _node(out.astype(dtype), (x, gamma, beta), vjp)

    ivar = 1.0 / np.sqrt(state.running_var + BN_EPS)
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
    out = gview * xhat + bview

    def vjp_eval(g):
        dx = g * gview * ivar.reshape(1, c, 1, 1)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return dx.astype(dtype), dgamma.astype(dtype), dbeta.astype(dtype)

    return _node(out.astype(dtype), (x, gamma, beta), vjp_eval)


def maxpool2d(x, factor):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped."""
    f = int(factor)
    n, c, h, w = x.data.shape
    oh, ow = h // f, w // f
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d factor {f} too large for input {x.data.shape}")
    view = x.data[:, :, :oh * f, :ow * f].reshape(n, c, oh, f, ow, f)
    windows = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, f * f)
    arg = windows.argmax(axis=4)
    out = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]

    def vjp(g):
        dwin = np.zeros((n, c, oh, ow, f * f), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=4)
        dview = dwin.reshape(n, c, oh, ow, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * f, ow * f)
        dx = np.zeros_like(x.data)
        dx[:, :, :oh * f, :ow * f] = dview
        return (dx,)

    return _node(np.ascontiguousarray(out), (x,), vjp)


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).astype(x.data.dtype),)

    return _node(out, (x,), vjp)


def tile_upsample(x, factor_h, factor_w=None):
    """Nearest-neighbor tiling: each pixel becomes an fh x fw constant tile."""
    fh = int(factor_h)
    fw = fh if factor_w is None else int(factor_w)
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)).astype(x.data.dtype),)

    return _node(out, (x,), vjp)


def image_to_blocks(x, block):
    """[N, 1, H, W] -> [B*B, N*nblocks]; columns are batch-major raster blocks."""
    b = int(block)
    n, c, h, w = x.data.shape
    if c != 1:
        raise ValueError(f"image_to_blocks expects a single channel, got {x.data.shape}")
    if h % b or w % b:
        raise ValueError(f"image dims {h}x{w} not multiples of block {b}")
    by, bx = h // b, w // b
    out = x.data.reshape(n, by, b, bx, b).transpose(2, 4, 0, 1, 3).reshape(b * b, n * by * bx)

    def vjp(g):
        return (g.reshape(b, b, n, by, bx).transpose(2, 3, 0, 4, 1).reshape(n, 1, h, w),)

    return _node(np.ascontiguousarray(out), (x,), vjp)


def blocks_to_image(m, block, blocks_y, blocks_x, batch=1):
    """[B*B, N*nblocks] -> [N, 1, H, W]; inverse of image_to_blocks."""
    b = int(block)
    n, by, bx = int(batch), int(blocks_y), int(blocks_x)
    if m.data.shape != (b * b, n * by * bx):
        raise ValueError(f"expected [{b * b}, {n * by * bx}] block matrix, got {m.data.shape}")
    out = m.data.reshape(b, b, n, by, bx).transpose(2, 3, 0, 4, 1).reshape(n, 1, by * b, bx * b)

    def vjp(g):
        return (g.reshape(n, by, b, bx, b).transpose(2, 4, 0, 1, 3).reshape(b * b, n * by * bx),)

    return _node(np.ascontiguousarray(out), (m,), vjp)


def channels_to_cols(x):
    """[N, C, H, W] -> [C, N*H*W] (batch-major columns per channel row)."""
    n, c, h, w = x.data.shape
    out = np.ascontiguousarray(np.moveaxis(x.data, 1, 0).reshape(c, n * h * w))

    def vjp(g):
        return (np.moveaxis(g.reshape(c, n, h, w), 0, 1),)

    return _node(out, (x,), vjp)


def take_batch(x, index):
    """Select one batch item: [N, C, H, W] -> [1, C, H, W]."""
    i = int(index)
    out = np.ascontiguousarray(x.data[i:i + 1])

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[i:i + 1] = g
        return (dx,)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# finite-difference verification


def _fd_error(analytic, numeric, zero_floor):
    # Central differences at step h carry rounding noise ~ |f|*eps/h
    # (~1e-10 |f| at h = 1e-6), so gradients smaller than that noise
    # divided by the 1e-4 target cannot be certified at all: a coordinate
    # whose analytic and numeric readings both sit under the floor counts
    # as agreeing.  This also covers structurally zero gradients, e.g. a
    # conv bias that batch normalization cancels exactly.
    if abs(analytic) < zero_floor and abs(numeric) < zero_floor:
        return 0.0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _fd_zero_floor(loss_magnitude):
    return max(1e-8, abs(loss_magnitude) * 4e-6)


def finite_diff_check(f, point, samples=100, rng=None):
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    Meant to run in float64.  Relative error uses max(|a|, |b|, 1e-8) as
    the denominator; step h = 1e-6 * max(1, |theta|) per coordinate.
    Coordinates where both readings fall below the method's noise floor
    (|f| * 4e-6, see _fd_error) are treated as exact zeros.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    probe = Tensor(point.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.reshape(-1).copy()
    zero_floor = _fd_zero_floor(out.item())

    size = point.data.size
    count = min(int(samples), size)
    coords = rng.choice(size, size=count, replace=False)
    worst = 0.0
    flat = point.data.reshape(-1)
    for i in coords:
        h = 1e-6 * max(1.0, abs(float(flat[i])))
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        plus = f(Tensor(bumped.reshape(point.data.shape))).item()
        bumped[i] = flat[i] - h
        minus = f(Tensor(bumped.reshape(point.data.shape))).item()
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, _fd_error(float(analytic[i]), numeric, zero_floor))
    return worst


def finite_diff_check_multi(f, points, samples=100, rng=None):
    """Finite-difference check across several tensors at once.

    ``f`` takes the list of tensors and returns a scalar Tensor; sampled
    coordinates are drawn over the concatenation of all entries.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    probes = [Tensor(p.data.copy(), requires_grad=True) for p in points]
    out = f(probes)
    backward(out)
    grads = [p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.data.size) for p in probes]
    zero_floor = _fd_zero_floor(out.item())

    sizes = [p.data.size for p in probes]
    total = sum(sizes)
    bounds = np.cumsum([0] + sizes)
    count = min(int(samples), total)
    coords = rng.choice(total, size=count, replace=False)
    worst = 0.0
    for flat_i in coords:
        t = int(np.searchsorted(bounds, flat_i, side="right") - 1)
        i = int(flat_i - bounds[t])
        base = probes[t].data.reshape(-1)
        theta = float(base[i])
        h = 1e-6 * max(1.0, abs(theta))

        def eval_at(value):
            trial = [Tensor(p.data) for p in probes]
            arr = trial[t].data.copy().reshape(-1)
            arr[i] = value
            trial[t] = Tensor(arr.reshape(probes[t].data.shape))
            return f(trial).item()

        numeric = (eval_at(theta + h) - eval_at(theta - h)) / (2 * h)
        worst = max(worst, _fd_error(float(grads[t][i]), numeric, zero_floor))
    return worst
