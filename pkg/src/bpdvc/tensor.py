"""Dense tensors with reverse-mode autodiff on a numpy backend.

Only the operators the codec networks need are implemented: elementwise
arithmetic and activations, reductions, 2D/3D convolution, bilinear warping,
channel concat/slice, and the pixel-shuffle style rearrangements used by the
residual coder. Forward values live in numpy arrays (float32 for
training/inference, float64 for gradient-check tests); every op preserves the
input dtype and is deterministic.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "absolute",
    "clamp",
    "tsum",
    "tmean",
    "concat",
    "narrow",
    "conv2d",
    "conv3d",
    "bilinear_warp",
    "depth_to_space",
    "space_to_depth",
    "upsample_nearest2",
    "avg_pool2",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


class Tensor:
    """A dense nd-array node in the gradient tape.

    `data` is always a numpy float array; `grad` is allocated lazily during
    the backward pass. Leaf tensors created with ``requires_grad=True`` are
    trainable parameters; interior nodes inherit the flag from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(loss):
    """Reverse-mode pass from a scalar loss.

    Builds the tape by topological sort so every recorded node's grad_fn
    runs exactly once, then propagates seeded with d(loss)/d(loss) = 1.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    out_data = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(out_data, True, (a, b), grad_fn)


def sub(a, b):
    _same_shape(a, b, "sub")
    out_data = a.data - b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor(out_data, True, (a, b), grad_fn)


def mul(a, b):
    _same_shape(a, b, "mul")
    out_data = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor(out_data, True, (a, b), grad_fn)


def scale(a, s):
    s = float(s)
    out_data = a.data * a.dtype.type(s)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * a.dtype.type(s))

    return Tensor(out_data, True, (a,), grad_fn)


def neg(a):
    return scale(a, -1.0)


def sigmoid(a):
    # evaluated via the stable branchless form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, True, (a,), grad_fn)


def tanh(a):
    out_data = np.tanh(a.data)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, True, (a,), grad_fn)


def relu(a):
    out_data = np.maximum(a.data, 0)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * (a.data > 0))

    return Tensor(out_data, True, (a,), grad_fn)


def absolute(a):
    out_data = np.abs(a.data)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, g * np.sign(a.data))

    return Tensor(out_data, True, (a,), grad_fn)


def clamp(a, lo, hi):
    out_data = np.clip(a.data, lo, hi)
    if not a.requires_grad:
        return Tensor(out_data)
    inside = (a.data > lo) & (a.data < hi)

    def grad_fn(g):
        _accumulate(a, g * inside)

    return Tensor(out_data, True, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def tsum(a):
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        _accumulate(a, np.full_like(a.data, g))

    return Tensor(out_data, True, (a,), grad_fn)


def tmean(a):
    out_data = np.asarray(a.data.mean(), dtype=a.dtype)
    if not a.requires_grad:
        return Tensor(out_data)
    inv_n = 1.0 / a.size

    def grad_fn(g):
        _accumulate(a, np.full_like(a.data, g * inv_n))

    return Tensor(out_data, True, (a,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors, axis=1):
    if not tensors:
        raise ShapeError("concat: empty input list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return Tensor(out_data)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor(out_data, True, tuple(tensors), grad_fn)


def narrow(a, axis, start, length):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl].copy()
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return Tensor(out_data, True, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(n, k, pad, stride, op):
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"{op}: input extent {n} with kernel {k}, padding {pad}, stride {stride} "
            f"does not divide exactly"
        )
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW weights.

    Odd kernels only; the output extent must divide exactly (no implicit
    floor), so callers pick padding that makes the geometry consistent.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be N,C,H,W, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout,Cin,kh,kw, got {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: bad padding {padding} / stride {stride}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = _conv_out_size(h, kh, padding, stride, "conv2d")
    wo = _conv_out_size(wdt, kw, padding, stride, "conv2d")

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wdt] = x.data
    else:
        xp = x.data

    # shift-and-matmul over kernel taps: kh*kw batched GEMMs
    out = np.zeros((n, cout, ho * wo), dtype=x.dtype)
    wd = w.data
    slices = []
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            xs = np.ascontiguousarray(xs.reshape(n, cin, ho * wo))
            slices.append(xs)
            out += np.matmul(wd[:, :, i, j], xs)
    out = out.reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    if not _needs_grad(*parents):
        return Tensor(out)

    def grad_fn(g):
        gd = g.reshape(n, cout, ho * wo)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for idx in range(kh * kw):
                i, j = divmod(idx, kw)
                # (N,Cout,P) x (N,Cin,P) -> Cout,Cin
                gw[:, :, i, j] = np.einsum("nop,ncp->oc", gd, slices[idx], optimize=True)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for idx in range(kh * kw):
                i, j = divmod(idx, kw)
                contrib = np.matmul(wd[:, :, i, j].T, gd).reshape(n, cin, ho, wo)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wdt]
            _accumulate(x, gxp)

    return Tensor(out, True, parents, grad_fn)


def conv3d(x, w, b=None, padding=0):
    """Cross-correlation of NCDHW input with OIDHW weights, stride 1."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be N,C,D,H,W, got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d: weight must be Cout,Cin,kd,kh,kw, got {w.shape}")
    n, cin, d, h, wdt = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input channels {cin} != weight channels {cin_w}")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be odd, got {kd}x{kh}x{kw}")
    do = _conv_out_size(d, kd, padding, 1, "conv3d")
    ho = _conv_out_size(h, kh, padding, 1, "conv3d")
    wo = _conv_out_size(wdt, kw, padding, 1, "conv3d")

    if padding:
        xp = np.zeros((n, cin, d + 2 * padding, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + d, padding:padding + h, padding:padding + wdt] = x.data
    else:
        xp = x.data

    out = np.zeros((n, cout, do * ho * wo), dtype=x.dtype)
    wd = w.data
    slices = []
    taps = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]
    for (i, j, k) in taps:
        xs = xp[:, :, i:i + do, j:j + ho, k:k + wo]
        xs = np.ascontiguousarray(xs.reshape(n, cin, do * ho * wo))
        slices.append(xs)
        out += np.matmul(wd[:, :, i, j, k], xs)
    out = out.reshape(n, cout, do, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    if not _needs_grad(*parents):
        return Tensor(out)

    def grad_fn(g):
        gd = g.reshape(n, cout, do * ho * wo)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for idx, (i, j, k) in enumerate(taps):
                gw[:, :, i, j, k] = np.einsum("nop,ncp->oc", gd, slices[idx], optimize=True)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for idx, (i, j, k) in enumerate(taps):
                contrib = np.matmul(wd[:, :, i, j, k].T, gd).reshape(n, cin, do, ho, wo)
                gxp[:, :, i:i + do, j:j + ho, k:k + wo] += contrib
            if padding:
                gxp = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + wdt]
            _accumulate(x, gxp)

    return Tensor(out, True, parents, grad_fn)


# ---------------------------------------------------------------------------
# warping


def bilinear_warp(source, flow):
    """Backward-warp: out(p) = source sampled at p + flow(p).

    `source` is N,C,H,W; `flow` is N,2,H,W with channel 0 = dx (width axis)
    and channel 1 = dy (height axis). Sample coordinates are clamped to the
    image border. Differentiable in both the source values and the flow.
    """
    if source.ndim != 4 or flow.ndim != 4:
        raise ShapeError("bilinear_warp: source and flow must be 4-D")
    n, c, h, w = source.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"bilinear_warp: flow shape {flow.shape} != {(n, 2, h, w)}")

    dt = source.dtype
    gy, gx = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    xs = np.clip(gx[None] + flow.data[:, 0], 0, w - 1)
    ys = np.clip(gy[None] + flow.data[:, 1], 0, h - 1)
    # zero flow gradient where the clamp is active
    x_free = (gx[None] + flow.data[:, 0] > 0) & (gx[None] + flow.data[:, 0] < w - 1)
    y_free = (gy[None] + flow.data[:, 1] > 0) & (gy[None] + flow.data[:, 1] < h - 1)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(dt)
    fy = (ys - y0).astype(dt)

    bi = np.arange(n)[:, None, None]
    s = source.data
    v00 = s[bi, :, y0, x0].transpose(0, 3, 1, 2)
    v01 = s[bi, :, y0, x1].transpose(0, 3, 1, 2)
    v10 = s[bi, :, y1, x0].transpose(0, 3, 1, 2)
    v11 = s[bi, :, y1, x1].transpose(0, 3, 1, 2)

    fx_ = fx[:, None]
    fy_ = fy[:, None]
    top = v00 * (1 - fx_) + v01 * fx_
    bot = v10 * (1 - fx_) + v11 * fx_
    out = top * (1 - fy_) + bot * fy_

    if not _needs_grad(source, flow):
        return Tensor(out)

    def grad_fn(g):
        if source.requires_grad:
            gs = np.zeros_like(s)
            w00 = ((1 - fx_) * (1 - fy_) * g).transpose(0, 2, 3, 1)
            w01 = (fx_ * (1 - fy_) * g).transpose(0, 2, 3, 1)
            w10 = ((1 - fx_) * fy_ * g).transpose(0, 2, 3, 1)
            w11 = (fx_ * fy_ * g).transpose(0, 2, 3, 1)
            np.add.at(gs, (bi, slice(None), y0, x0), w00)
            np.add.at(gs, (bi, slice(None), y0, x1), w01)
            np.add.at(gs, (bi, slice(None), y1, x0), w10)
            np.add.at(gs, (bi, slice(None), y1, x1), w11)
            _accumulate(source, gs)
        if flow.requires_grad:
            dvdx = ((v01 - v00) * (1 - fy_) + (v11 - v10) * fy_)
            dvdy = ((v10 - v00) * (1 - fx_) + (v11 - v01) * fx_)
            gx_flow = (g * dvdx).sum(axis=1) * x_free
            gy_flow = (g * dvdy).sum(axis=1) * y_free
            _accumulate(flow, np.stack([gx_flow, gy_flow], axis=1))

    return Tensor(out, True, (source, flow), grad_fn)


# ---------------------------------------------------------------------------
# resampling / rearrangement


def depth_to_space(a, block=2):
    """N,C*b*b,H,W -> N,C,H*b,W*b (inverse of space_to_depth)."""
    n, c, h, w = a.shape
    if c % (block * block) != 0:
        raise ShapeError(f"depth_to_space: {c} channels not divisible by {block * block}")
    co = c // (block * block)
    out_data = (
        a.data.reshape(n, co, block, block, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * block, w * block)
    )
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        gr = (
            g.reshape(n, co, h, block, w, block)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        _accumulate(a, gr)

    return Tensor(out_data, True, (a,), grad_fn)


def space_to_depth(a, block=2):
    """N,C,H*b,W*b -> N,C*b*b,H,W (inverse of depth_to_space)."""
    n, c, hb, wb = a.shape
    if hb % block or wb % block:
        raise ShapeError(f"space_to_depth: spatial dims {hb}x{wb} not divisible by {block}")
    h, w = hb // block, wb // block
    out_data = (
        a.data.reshape(n, c, h, block, w, block)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * block * block, h, w)
    )
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        gr = (
            g.reshape(n, c, block, block, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, hb, wb)
        )
        _accumulate(a, gr)

    return Tensor(out_data, True, (a,), grad_fn)


def upsample_nearest2(a):
    n, c, h, w = a.shape
    out_data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        gr = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        _accumulate(a, gr)

    return Tensor(out_data, True, (a,), grad_fn)


def avg_pool2(a):
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: odd spatial dims {h}x{w}")
    out_data = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if not a.requires_grad:
        return Tensor(out_data)

    def grad_fn(g):
        gr = (g * 0.25).repeat(2, axis=2).repeat(2, axis=3)
        _accumulate(a, gr)

    return Tensor(out_data, True, (a,), grad_fn)
