"""Dense NCHW tensors with reverse-mode autodiff.

Every operation here is built directly on numpy and records a backward
closure, so gradients are exact (up to floating point) rather than
approximated.  Two precisions are supported: float32 for training and
float64 for verification (finite-difference checks need the headroom).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ValidationError(ValueError):
    """Raised when operand values violate an operation's contract."""


TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense array plus an optional gradient and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(TRAIN_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor through its graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _check_dtypes(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValidationError(f"mixed precisions in one graph: {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# convolution

def _correlate_same(x, w):
    """Stride-1 'same' cross-correlation of x [N,C,H,W] with w [Co,C,k,k].

    One GEMM over the channel axis of the padded input, followed by k*k
    shifted slice accumulations; avoids im2col's scattered copies.
    Returns (out [N,Co,H,W], xp [N,C,Hp,Wp]) with the padded input kept
    for the weight gradient.
    """
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    pad = (k - 1) // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    hp, wp = h + 2 * pad, wd + 2 * pad
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, n * hp * wp)
    wall = w.transpose(0, 2, 3, 1).reshape(co * k * k, c)
    z = (wall @ xt).reshape(co, k, k, n, hp, wp)
    out = np.zeros((co, n, h, wd), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out += z[:, dy, dx, :, dy:dy + h, dx:dx + wd]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), xp


def _correlate_weight_grad(xp, gy, k):
    """Weight gradient of the 'same' correlation: gw[co,c,dy,dx]."""
    n, co, h, wd = gy.shape
    c = xp.shape[1]
    gyt = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(co, n * h * wd)
    gw = np.empty((co, c, k, k), dtype=gy.dtype)
    for dy in range(k):
        for dx in range(k):
            s = xp[:, :, dy:dy + h, dx:dx + wd].transpose(1, 0, 2, 3).reshape(c, n * h * wd)
            gw[:, :, dy, dx] = gyt @ s.T
    return gw


def conv2d(x, weight, bias=None):
    """Stride-1 zero-padded 'same' convolution (odd square kernels).

    x: [N, Cin, H, W]; weight: [Cout, Cin, k, k]; bias: [Cout] or None.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    tensors = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        tensors.append(bias)
    _check_dtypes(*tensors)

    out, xp = _correlate_same(x.data, weight.data)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(gy):
        if weight.requires_grad:
            weight._accumulate(_correlate_weight_grad(xp, gy, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gy.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # input gradient = 'same' correlation with the flipped kernel,
            # channels swapped
            wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate_same(np.ascontiguousarray(gy), wt)
            x._accumulate(gx)

    return _result(out, tensors, backward)


def conv_transpose2d(x, weight, bias=None):
    """Transposed convolution with fixed 2x2 kernel and stride 2.

    x: [N, Cin, H, W]; weight: [Cin, Cout, 2, 2]; output [N, Cout, 2H, 2W].
    Adjoint of the stride-2 correlation with the same weight.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if (k, k2) != (2, 2):
        raise ShapeError(f"conv_transpose2d kernel must be 2x2, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {cin}, weight expects {wcin}")
    tensors = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({cout},)")
        tensors.append(bias)
    _check_dtypes(*tensors)

    t = np.tensordot(x.data, weight.data, axes=([1], [0]))  # [N,H,W,Cout,2,2]
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(gy):
        g6 = gy.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # [N,H,W,Cout,2,2]
        if x.requires_grad:
            gx = np.tensordot(g6, weight.data, axes=([3, 4, 5], [1, 2, 3]))
            x._accumulate(np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        if weight.requires_grad:
            gw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 1, 2]))
            weight._accumulate(np.ascontiguousarray(gw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gy.sum(axis=(0, 2, 3)))

    return _result(out, tensors, backward)


def conv2d_stride2(x, weight, bias=None):
    """Plain stride-2 2x2 correlation (no autodiff); the adjoint partner of
    conv_transpose2d.  Used for verification only."""
    x = np.asarray(x)
    weight = np.asarray(weight)  # [Cin, Cout, 2, 2]
    n, cout, h2, w2 = x.shape
    cin = weight.shape[0]
    if weight.shape[1] != cout:
        raise ShapeError(f"conv2d_stride2 channel mismatch: input {cout}, weight {weight.shape[1]}")
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"conv2d_stride2 needs even lateral size, got {h2}x{w2}")
    g6 = x.reshape(n, cout, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    out = np.tensordot(g6, weight, axes=([3, 4, 5], [1, 2, 3]))  # [N,H,W,Cin]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += np.asarray(bias)[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# pooling / activation

def maxpool2d(x):
    """Non-overlapping 2x2 max pooling; ties route gradient to the first
    maximal element in row-major window order."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even lateral size, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(gy):
        if x.requires_grad:
            gwin = np.zeros_like(win)
            np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
            gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(np.ascontiguousarray(gx).reshape(n, c, h, w))

    return _result(out, [x], backward)


def relu(x):
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(gy):
        if x.requires_grad:
            x._accumulate(gy * (x.data > 0))

    return _result(out, [x], backward)


# ---------------------------------------------------------------------------
# resampling / gating / concat

def _axis_interp_weights(src_len, dst_len, dtype):
    """Half-pixel-center source coordinates, clamped to the valid range."""
    t = np.arange(dst_len, dtype=np.float64)
    s = (t + 0.5) * (src_len / dst_len) - 0.5
    s = np.clip(s, 0.0, src_len - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i0 = np.minimum(i0, src_len - 1)
    i1 = np.minimum(i0 + 1, src_len - 1)
    f = (s - i0).astype(dtype)
    return i0, i1, f


def bilinear_resize(x, target):
    """Separable bilinear resize of [N,C,H,W] to lateral size target=(H',W').

    Half-pixel-center alignment; identity at equal size, exact on constants
    (each axis pass computes v0 + f*(v1-v0)).
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects 4-d input, got {x.shape}")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {(th, tw)}")
    n, c, h, w = x.shape
    dt = x.dtype
    r0, r1, rf = _axis_interp_weights(h, th, dt)
    c0, c1, cf = _axis_interp_weights(w, tw, dt)

    v0 = x.data[:, :, r0, :]
    rows = v0 + rf[None, None, :, None] * (x.data[:, :, r1, :] - v0)
    u0 = rows[:, :, :, c0]
    out = u0 + cf[None, None, None, :] * (rows[:, :, :, c1] - u0)

    def backward(gy):
        if not x.requires_grad:
            return
        grows = np.zeros((n, c, th, w), dtype=dt)
        np.add.at(grows, (slice(None), slice(None), slice(None), c0), gy * (1 - cf)[None, None, None, :])
        np.add.at(grows, (slice(None), slice(None), slice(None), c1), gy * cf[None, None, None, :])
        gx = np.zeros((n, c, h, w), dtype=dt)
        np.add.at(gx, (slice(None), slice(None), r0), grows * (1 - rf)[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), r1), grows * rf[None, None, :, None])
        x._accumulate(gx)

    return _result(out, [x], backward)


def broadcast_mul(features, attn):
    """features [N,C,H,W] scaled per pixel by a 1-channel map [N,1,H,W]."""
    features = _as_tensor(features)
    attn = _as_tensor(attn)
    if features.ndim != 4 or attn.ndim != 4:
        raise ShapeError(
            f"broadcast_mul expects 4-d operands, got {features.shape} and {attn.shape}"
        )
    if attn.shape[1] != 1:
        raise ShapeError(f"attention map must have 1 channel, got {attn.shape[1]}")
    if features.shape[0] != attn.shape[0] or features.shape[2:] != attn.shape[2:]:
        raise ShapeError(
            f"broadcast_mul resolution mismatch: {features.shape} vs {attn.shape}"
        )
    _check_dtypes(features, attn)
    out = features.data * attn.data

    def backward(gy):
        if features.requires_grad:
            features._accumulate(gy * attn.data)
        if attn.requires_grad:
            attn._accumulate((gy * features.data).sum(axis=1, keepdims=True))

    return _result(out, [features, attn], backward)


def concat_channels(a, b):
    """Channel-axis concatenation, a first."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels mismatch: {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(gy):
        if a.requires_grad:
            a._accumulate(gy[:, :ca])
        if b.requires_grad:
            b._accumulate(gy[:, ca:])

    return _result(out, [a, b], backward)


# ---------------------------------------------------------------------------
# loss

def softmax_channels(logits):
    """Channel softmax of a plain array [N,K,H,W] (no autodiff), stabilized
    by per-pixel max subtraction."""
    z = np.asarray(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Mean per-pixel 2-class cross-entropy.

    logits: Tensor [N,2,H,W]; target: binary array [N,1,H,W] where 1 marks
    the tumor class (channel 1).  Returns a scalar Tensor.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,2,H,W] logits, got {logits.shape}")
    if target.shape != (logits.shape[0], 1, logits.shape[2], logits.shape[3]):
        raise ShapeError(
            f"target shape {target.shape} incompatible with logits {logits.shape}"
        )
    if not np.isin(target, (0, 1)).all():
        raise ValidationError("target mask must contain only 0 and 1")
    dt = logits.dtype
    tgt = target.astype(np.intp)[:, 0]  # [N,H,W]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))  # [N,H,W]
    picked = np.take_along_axis(z, tgt[:, None], axis=1)[:, 0]
    npix = tgt.size
    loss = (lse - picked).sum() / npix

    def backward(gy):
        if logits.requires_grad:
            p = softmax_channels(logits.data)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, tgt[:, None], 1.0, axis=1)
            logits._accumulate((p - onehot) * (gy / npix))

    return _result(np.asarray(loss, dtype=dt), [logits], backward)
