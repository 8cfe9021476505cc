"""Dense-tensor numerics with reverse-mode automatic differentiation.

Small on purpose: float32 for training, float64 for tests and oracles,
no broadcasting beyond the trailing bias of ``affine``. Ops executed
while a :class:`Tape` is active are recorded; :func:`backward` replays
the tape once in reverse.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf


class ShapeError(ValueError):
    """Operand extents do not conform."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


_TAPE_STACK: list["Tape"] = []

LN_EPS = 1e-5


class Tape:
    """Ordered record of executed primitive ops.

    Entries are appended in execution order, so inputs of an entry always
    precede it. A tape is confined to one thread.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class _Entry:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def _record(out: Tensor, inputs, bwd):
    tape = _active_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_Entry(tuple(inputs), out, bwd))


def backward(tape: Tape, loss: Tensor, params=()):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    Tensors in ``params`` that do not participate in the loss receive a
    zero gradient rather than None.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = acc.get(id(entry.out))
        if g is None:
            continue
        grads = entry.bwd(g)
        for inp, gi in zip(entry.inputs, grads):
            if not inp.requires_grad or gi is None:
                continue
            seen[id(inp)] = inp
            prev = acc.get(id(inp))
            acc[id(inp)] = gi if prev is None else prev + gi
    for t in seen.values():
        t.grad = acc[id(t)]
    for p in params:
        if p.requires_grad and id(p) not in seen:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    _record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.moveaxis(a.data, src, dst)))
    _record(out, (a,), lambda g: (np.moveaxis(g, dst, src),))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tuple(tensors), bwd)
    return out


def index_last(a: Tensor, i: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data[..., i]))

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[..., i] = g
        return (gx,)

    _record(out, (a,), bwd)
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.full(shape, g, dtype=g.dtype),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(ax % len(shape) for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    _record(out, (a,), bwd)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    # subgradient 0 at exactly zero would need a case split; a floor keeps
    # the L2-distance path finite when an input coincides with a centroid
    _record(out, (a,), lambda g: (g * (0.5 / np.maximum(y, 1e-12)),))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    _record(out, (a,), lambda g: (g * mask,))
    return out


def gelu(x: Tensor) -> Tensor:
    """Elementwise x * Phi(x) with the exact Gaussian CDF."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = Tensor(xd * phi_cdf)
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    _record(out, (x,), lambda g: (g * (phi_cdf + xd * pdf),))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ W (+ b), with b broadcast over all leading extents."""
    if x.data.shape[-1] != W.data.shape[0]:
        raise ShapeError(
            f"affine: x trailing extent {x.data.shape} does not match W {W.data.shape}"
        )
    if b is not None and b.data.shape != (W.data.shape[1],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match W {W.data.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    k, m = W.data.shape

    def bwd(g):
        gx = g @ W.data.T
        gW = x.data.reshape(-1, k).T @ g.reshape(-1, m)
        gb = None if b is None else g.reshape(-1, m).sum(axis=0)
        return (gx, gW, gb)

    inputs = (x, W) if b is None else (x, W, b)
    _record(out, inputs, bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int) -> Tensor:
    """Normalize each slice along ``axis`` to mean 0, population variance 1,
    then apply the gamma/beta affine."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"layer_norm: axis {axis} out of range for shape {x.data.shape}")
    axis = axis % nd
    n = x.data.shape[axis]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.data.shape} / beta {beta.data.shape} "
            f"do not match axis extent {n}"
        )
    bshape = [1] * nd
    bshape[axis] = n
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    out = Tensor(xhat * gb + bb)

    red = tuple(i for i in range(nd) if i != axis)

    def bwd(g):
        dxhat = g * gb
        # standard layer-norm backward over the normalized axis
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        gx = istd * (dxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        return (gx, ggamma, gbeta)

    _record(out, (x, gamma, beta), bwd)
    return out


# ---------------------------------------------------------------------------
# convolutions (NCHW layout)
# ---------------------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, sh, sw, ph, pw):
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv: kernel ({kh},{kw}) larger than padded input ({hp},{wp})"
        )
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def _im2col(x, kh, kw, sh, sw, ph, pw):
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    cols = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, xshape, kh, kw, sh, sw, ph, pw):
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    oh, ow = cols.shape[4], cols.shape[5]
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph : ph + h, pw : pw + w]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, x (N,C,H,W) with w (O,C,kh,kw)."""
    n, c, h, wid = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} vs kernel channels {ci}")
    sh, sw = stride
    ph, pw = padding
    _conv_geometry(h, wid, kh, kw, sh, sw, ph, pw)
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    mat = cols.reshape(n, c * kh * kw, oh * ow)
    y = np.einsum("ok,nkp->nop", w.data.reshape(o, -1), mat, optimize=True)
    y = y.reshape(n, o, oh, ow)
    if b is not None:
        if b.data.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.data.shape} does not match {o} maps")
        y = y + b.data[None, :, None, None]
    out = Tensor(y)

    def bwd(g):
        gm = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,nkp->ok", gm, mat, optimize=True).reshape(w.data.shape)
        gcols = np.einsum("ok,nop->nkp", w.data.reshape(o, -1), gm, optimize=True)
        gcols = gcols.reshape(n, c, kh, kw, oh, ow)
        gx = _col2im(gcols, x.data.shape, kh, kw, sh, sw, ph, pw)
        gb = None if b is None else g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    _record(out, inputs, bwd)
    return out


def depthwise_conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Per-channel 2-D cross-correlation, x (N,C,H,W) with k (C,kh,kw)."""
    n, c, h, w = x.data.shape
    ck, kh, kw = k.data.shape
    if ck != c:
        raise ShapeError(f"depthwise_conv2d: {c} input channels vs {ck} kernels")
    sh, sw = stride
    ph, pw = padding
    _conv_geometry(h, w, kh, kw, sh, sw, ph, pw)
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    y = np.einsum("nchwou,chw->ncou", cols, k.data, optimize=True)
    if b is not None:
        if b.data.shape != (c,):
            raise ShapeError(f"depthwise_conv2d: bias {b.data.shape} vs {c} channels")
        y = y + b.data[None, :, None, None]
    out = Tensor(y)

    def bwd(g):
        gk = np.einsum("ncou,nchwou->chw", g, cols, optimize=True)
        gcols = np.einsum("ncou,chw->nchwou", g, k.data, optimize=True)
        gx = _col2im(gcols, x.data.shape, kh, kw, sh, sw, ph, pw)
        gb = None if b is None else g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)

    inputs = (x, k) if b is None else (x, k, b)
    _record(out, inputs, bwd)
    return out


def depthwise_separable_conv(
    x: Tensor,
    depth_kernels: Tensor,
    point_kernel: Tensor,
    depth_bias: Tensor | None = None,
    point_bias: Tensor | None = None,
    stride=(1, 1),
    padding=(0, 0),
) -> Tensor:
    """Depthwise conv per channel followed by a 1x1 pointwise mix."""
    h = depthwise_conv2d(x, depth_kernels, depth_bias, stride=stride, padding=padding)
    return conv2d(h, point_kernel, point_bias, stride=(1, 1), padding=(0, 0))
