"""Dense tensors with reverse-mode automatic differentiation.

All network layers are composed from the operations in this module. Data is
stored as numpy float64 arrays (float32 available via ``Tensor(..., dtype=...)``
for forward-only use). Gradients are tracked on an explicit ``Tape``: while a
tape is active (``with tape:``), every operation appends a node with a backward
rule; ``tape.backward(loss)`` replays the nodes in reverse append order and
accumulates gradients additively.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes (or a Python scalar); shape changes must go through explicit ops
(``broadcast_to``, ``reshape``, ``concat_channels``). This catches wiring bugs
in module assembly early.
"""

from __future__ import annotations

import functools
import threading

import numpy as np

from .errors import ContractViolation

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """A dense n-d value (feature maps are [n, c, h, w] by convention)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy that never receives gradient (fresh array, no tape node)."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # convenience operators (same-shape or scalar, see elementwise())
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __rmul__(self, other):
        return elementwise(self, other, "mul")

    def __radd__(self, other):
        return elementwise(self, other, "add")

    def __rsub__(self, other):
        return elementwise(Tensor(np.full((), float(other))), self, "sub")


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


class GradientStore:
    """Gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._grads = {}
        self._keepalive = []

    def _accumulate(self, tensor, grad):
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad
            self._keepalive.append(tensor)

    def get(self, tensor):
        """Gradient of the loss wrt ``tensor``; zeros if unreachable."""
        key = id(tensor)
        if key in self._grads:
            return self._grads[key]
        return np.zeros_like(tensor.data)

    def __contains__(self, tensor):
        return id(tensor) in self._grads


class Tape:
    """Append-only record of operations; append order is topological order."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractViolation("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out, inputs, backward):
        # backward(grad_out) -> list of grads aligned with inputs (None allowed)
        self._nodes.append((out, inputs, backward))

    def backward(self, loss):
        """Reverse-replay from ``loss``; returns a GradientStore.

        Every tensor reachable from the loss holds the sum of all its
        contributions; two calls on the same graph are bit-identical.
        """
        if loss.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        store = GradientStore()
        store._accumulate(loss, np.ones_like(loss.data))
        for out, inputs, backward in reversed(self._nodes):
            if out not in store:
                continue
            grads = backward(store.get(out))
            for inp, g in zip(inputs, grads):
                if g is not None:
                    store._accumulate(inp, g)
        return store


def _record(out, inputs, backward):
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def _check_4d(x, name):
    if x.data.ndim != 4:
        raise ContractViolation(f"{name} must be 4-d [n,c,h,w], got {x.shape}")


# ---------------------------------------------------------------------------
# elementwise / unary


def elementwise(a, b, kind):
    """Elementwise add/sub/mul/div; shapes must match exactly or b is scalar."""
    if not isinstance(b, Tensor):
        b = Tensor(np.full((), float(b)))
    if not isinstance(a, Tensor):
        a = Tensor(np.full((), float(a)))
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ContractViolation(
            f"elementwise {kind}: shape mismatch {a.shape} vs {b.shape}"
        )

    def reduce_to(grad, ref):
        if grad.shape == ref.data.shape:
            return grad
        return np.sum(grad).reshape(ref.data.shape)

    if kind == "add":
        out = Tensor(a.data + b.data)
        bwd = lambda g: [reduce_to(g, a), reduce_to(g, b)]
    elif kind == "sub":
        out = Tensor(a.data - b.data)
        bwd = lambda g: [reduce_to(g, a), reduce_to(-g, b)]
    elif kind == "mul":
        out = Tensor(a.data * b.data)
        bwd = lambda g: [reduce_to(g * b.data, a), reduce_to(g * a.data, b)]
    elif kind == "div":
        out = Tensor(a.data / b.data)
        bwd = lambda g: [
            reduce_to(g / b.data, a),
            reduce_to(-g * a.data / (b.data * b.data), b),
        ]
    else:
        raise ContractViolation(f"unknown elementwise kind {kind!r}")
    return _record(out, [a, b], bwd)


def activation(x, kind):
    """relu / sigmoid elementwise, or softmax along the last axis."""
    if kind == "relu":
        out = Tensor(np.maximum(x.data, 0.0))
        mask = x.data > 0
        return _record(out, [x], lambda g: [g * mask])
    if kind == "sigmoid":
        # evaluated branch-wise so exp never overflows
        xd = x.data
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        s[~pos] = e / (1.0 + e)
        out = Tensor(s)
        return _record(out, [x], lambda g: [g * s * (1.0 - s)])
    if kind == "softmax_lastdim":
        z = x.data - np.max(x.data, axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / np.sum(e, axis=-1, keepdims=True)
        out = Tensor(s)

        def bwd(g):
            dot = np.sum(g * s, axis=-1, keepdims=True)
            return [(g - dot) * s]

        return _record(out, [x], bwd)
    raise ContractViolation(f"unknown activation kind {kind!r}")


def log(x):
    out = Tensor(np.log(x.data))
    return _record(out, [x], lambda g: [g / x.data])


def sqrt(x):
    r = np.sqrt(x.data)
    out = Tensor(r)
    return _record(out, [x], lambda g: [g * 0.5 / r])


def clamp(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)
    return _record(out, [x], lambda g: [g * mask])


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    src = x.data.shape
    return _record(out, [x], lambda g: [g.reshape(src)])


def transpose_last2(x):
    out = Tensor(np.swapaxes(x.data, -1, -2))
    return _record(out, [x], lambda g: [np.swapaxes(g, -1, -2)])


def broadcast_to(x, shape):
    """Explicit broadcast (numpy rules); backward sums over expanded axes."""
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ContractViolation(
            f"cannot broadcast {x.shape} to {shape}"
        ) from exc
    out = Tensor(data.copy())
    src = x.data.shape

    def bwd(g):
        ndiff = len(shape) - len(src)
        axes = tuple(range(ndiff)) + tuple(
            i + ndiff for i, s in enumerate(src) if s == 1 and shape[i + ndiff] != 1
        )
        return [np.sum(g, axis=axes).reshape(src)]

    return _record(out, [x], bwd)


def concat_channels(parts):
    """Concatenate [n,c_i,h,w] tensors along the channel axis."""
    if not parts:
        raise ContractViolation("concat_channels needs at least one part")
    for p in parts:
        _check_4d(p, "concat part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ContractViolation(
                f"concat_channels: incompatible shapes {ref} vs {p.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bwd(g):
        return list(np.split(g, splits, axis=1))

    return _record(out, list(parts), bwd)


def reduce(x, kind, axes="all"):
    """Sum or mean over axes ('all' | 'spatial' | 'channel' | tuple), keepdims."""
    if axes == "all":
        ax = tuple(range(x.data.ndim))
    elif axes == "spatial":
        ax = (2, 3)
    elif axes == "channel":
        ax = (1,)
    elif axes == "none":
        return x
    else:
        ax = tuple(axes)
    if kind == "sum":
        out = Tensor(np.sum(x.data, axis=ax, keepdims=True))
        scale = 1.0
    elif kind == "mean":
        out = Tensor(np.mean(x.data, axis=ax, keepdims=True))
        scale = 1.0 / np.prod([x.data.shape[a] for a in ax])
    else:
        raise ContractViolation(f"unknown reduce kind {kind!r}")
    src = x.data.shape

    def bwd(g):
        return [np.broadcast_to(g * scale, src).copy()]

    return _record(out, [x], bwd)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i * dh : i * dh + oh * sh : sh, j * dw : j * dw + ow * sw : sw
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, xp_shape, kh, kw, sh, sw, dh, dw, oh, ow):
    n, c = xp_shape[:2]
    grad = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            grad[
                :, :, i * dh : i * dh + oh * sh : sh, j * dw : j * dw + ow * sw : sw
            ] += cols[:, :, i, j]
    return grad


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-d convolution with stride/padding/dilation; im2col implementation.

    ``padding`` and the kernel may be asymmetric ((ph, pw) / kh != kw) to
    support factorized k x 1 / 1 x k branches.
    """
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    oc, ic, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ContractViolation(
            f"conv2d: input channels {c} != weight in-channels {ic} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    eff_h = (kh - 1) * dh + 1
    eff_w = (kw - 1) * dw + 1
    if eff_h > h + 2 * ph or eff_w > w + 2 * pw:
        raise ContractViolation(
            f"conv2d: effective kernel ({eff_h},{eff_w}) exceeds padded input "
            f"({h + 2 * ph},{w + 2 * pw})"
        )
    oh = (h + 2 * ph - eff_h) // sh + 1
    ow = (w + 2 * pw - eff_w) // sw + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv2d: degenerate output shape ({oh},{ow})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow)  # [n, ic*kh*kw, oh*ow]
    wmat = weight.data.reshape(oc, ic * kh * kw)
    out_data = np.einsum("ok,nkp->nop", wmat, cols, optimize=True)
    if bias is not None:
        if bias.data.size != oc:
            raise ContractViolation(
                f"conv2d: bias size {bias.data.size} != out channels {oc}"
            )
        out_data = out_data + bias.data.reshape(1, oc, 1)
    out = Tensor(out_data.reshape(n, oc, oh, ow))

    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bwd(g):
        gmat = g.reshape(n, oc, oh * ow)
        dw_ = np.einsum("nop,nkp->ok", gmat, cols, optimize=True).reshape(
            weight.shape
        )
        dcols = np.einsum("ok,nop->nkp", wmat, gmat, optimize=True)
        dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, dh, dw, oh, ow)
        dx = dxp[:, :, ph : ph + h, pw : pw + w]
        grads = [dx, dw_]
        if bias is not None:
            grads.append(np.sum(gmat, axis=(0, 2)).reshape(bias.data.shape))
        return grads

    return _record(out, inputs, bwd)


def mean_pool2d(x, kernel, padding):
    """Same-stride-1 mean pooling with zero padding (divisor = kernel area)."""
    _check_4d(x, "mean_pool2d input")
    k = int(kernel)
    n, c, h, w = x.shape
    xr = reshape(x, (n * c, 1, h, w))
    wt = Tensor(np.full((1, 1, k, k), 1.0 / (k * k)))
    out = conv2d(xr, wt, stride=1, padding=padding)
    return reshape(out, (n, c) + out.shape[2:])


# ---------------------------------------------------------------------------
# resampling


@functools.lru_cache(maxsize=128)
def _bilinear_matrix(src, dst):
    """[dst, src] interpolation matrix, align-corners-false convention."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        i0 = int(np.floor(pos))
        i1 = min(i0 + 1, src - 1)
        f = pos - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def upsample_bilinear(x, target_h, target_w):
    """Bilinear resize (align_corners=False); differentiable."""
    _check_4d(x, "upsample input")
    if target_h < 1 or target_w < 1:
        raise ContractViolation(f"upsample: bad target ({target_h},{target_w})")
    n, c, h, w = x.shape
    if (target_h, target_w) == (h, w):
        out = Tensor(x.data.copy())
        return _record(out, [x], lambda g: [g])
    mh = _bilinear_matrix(h, target_h)
    mw = _bilinear_matrix(w, target_w)
    out = Tensor(np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True))

    def bwd(g):
        return [np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True)]

    return _record(out, [x], bwd)


def resize_bilinear_array(arr, target_h, target_w):
    """Tape-free bilinear resize of a [..., h, w] numpy array (shared by IO)."""
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (target_h, target_w):
        return arr.copy()
    mh = _bilinear_matrix(h, target_h)
    mw = _bilinear_matrix(w, target_w)
    return np.einsum("ih,...hw,jw->...ij", mh, arr, mw, optimize=True)


# ---------------------------------------------------------------------------
# batched matmul


def matmul_batched(a, b):
    """Batched product of [b, m, k] x [b, k, p] -> [b, m, p]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ContractViolation(
            f"matmul_batched needs 3-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ContractViolation(
            f"matmul_batched: incompatible shapes {a.shape} x {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        return [
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        ]

    return _record(out, [a, b], bwd)
