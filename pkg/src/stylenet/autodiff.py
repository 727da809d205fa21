"""Dense tensors with reverse-mode automatic differentiation.

Operations run on numpy arrays and, while a Tape is active, append a backward
rule to it. `Tape.backward(loss)` then walks the recorded operations in
reverse, accumulating gradients into every tensor that participated (leaves
and intermediates alike), which is what the training loop, Grad-CAM, and the
receptive-field probe all rely on.

Every forward operation checks its output for NaN/Inf and raises NumericError
naming the producing op; overflow is an error here, never a silent value.
Training runs in float32; gradient checking uses float64 tensors.
"""

import threading

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional value with an optional gradient buffer.

    `data` is a row-major numpy array (float32 or float64). `grad` is filled
    by `Tape.backward` with an array of the same shape. `node_id` is the
    handle assigned by the tape that recorded this tensor, if any.
    """

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _OpRecord:
    __slots__ = ("name", "input_ids", "output_id", "backward")

    def __init__(self, name, input_ids, output_id, backward):
        self.name = name
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def current_tape():
    """The innermost active Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Recorded operation list in execution (hence topological) order.

    Use as a context manager around a forward pass; call `backward` on the
    scalar loss afterwards. Recording and backward are single-threaded; a
    model evaluated with no active tape records nothing and is safe to share
    read-only across threads.
    """

    def __init__(self):
        self._records = []
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def _node_id(self, t: Tensor) -> int:
        nid = t.node_id
        if nid is not None and nid < len(self._nodes) and self._nodes[nid] is t:
            return nid
        nid = len(self._nodes)
        self._nodes.append(t)
        t.node_id = nid
        return nid

    def record(self, name, inputs, output, backward):
        input_ids = tuple(self._node_id(t) for t in inputs)
        output_id = self._node_id(output)
        self._records.append(_OpRecord(name, input_ids, output_id, backward))

    def backward(self, loss: Tensor):
        """Fill `.grad` on every recorded tensor with d(loss)/d(tensor).

        Gradients from multiple consumers of one tensor accumulate; the
        buffers themselves are overwritten on each call.
        """
        if loss.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        self.backward_from(loss, np.ones_like(loss.data))

    def backward_from(self, output: Tensor, seed_grad: np.ndarray):
        """Backward pass seeded with an arbitrary gradient on `output`."""
        if not self._records:
            raise UsageError("backward on an empty tape")
        out_id = output.node_id
        if out_id is None or out_id >= len(self._nodes) or self._nodes[out_id] is not output:
            raise UsageError("output tensor was not recorded on this tape")
        if seed_grad.shape != output.shape:
            raise ShapeError(
                f"seed gradient shape {seed_grad.shape} != output shape {output.shape}")
        grads = {out_id: np.asarray(seed_grad, dtype=output.dtype)}
        for rec in reversed(self._records):
            g = grads.get(rec.output_id)
            if g is None:
                continue
            for nid, ig in zip(rec.input_ids, rec.backward(g)):
                if ig is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = ig if acc is None else acc + ig
        for nid, g in grads.items():
            self._nodes[nid].grad = np.asarray(g)


def _finish(name: str, out_data: np.ndarray, inputs, backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by {name}")
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None:
        tape.record(name, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(value):
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ShapeError(f"expected an int or pair, got {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("multiply", out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _finish("relu", out, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}: {e}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), bw)


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"flatten expects rank >= 2, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concatenate of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concatenate", out, tuple(tensors), bw)


def swap_last_axes(x) -> Tensor:
    """Transpose the last two axes (matrix transpose, batched)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"swap_last_axes expects rank >= 2, got shape {x.shape}")
    out = np.swapaxes(x.data, -1, -2).copy()

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _finish("swap_last_axes", out, (x,), bw)


def triu_flatten(x) -> Tensor:
    """Flatten the upper triangle (incl. diagonal) of square matrices.

    Accepts (C, C) or batched (N, C, C); returns (C*(C+1)/2,) or (N, ...).
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3) or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"triu_flatten expects square matrices, got {x.shape}")
    c = x.shape[-1]
    rows, cols = np.triu_indices(c)
    out = x.data[..., rows, cols]

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[..., rows, cols] = g
        return (dx,)

    return _finish("triu_flatten", out, (x,), bw)


def total_sum(x) -> Tensor:
    """Sum all elements to a scalar."""
    x = as_tensor(x)
    out = x.data.sum()

    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _finish("sum", np.asarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; both operands 2-D, or both 3-D with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(
            f"matmul expects two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shapes not conformable: {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _finish("matrix-multiply", out, (a, b), bw)


def linear(x, weight, bias) -> Tensor:
    """Affine map: x @ weight + bias, with x (N, in), weight (in, out)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear shapes not conformable: {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    return add(matmul(x, weight), bias)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", out, (x,), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy between logits (N, K) and integer class targets (N,).

    A single sample may be passed as logits (K,) with a scalar target.
    """
    logits = as_tensor(logits)
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects logits of rank 1 or 2, got {logits.shape}")
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, k = z.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} != ({n},)")
    if t.min() < 0 or t.max() >= k:
        raise UsageError(f"target labels must lie in 0..{k - 1}")
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    out = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        dz = (float(g) / n) * p
        return (dz.reshape(logits.shape),)

    return _finish("cross-entropy-loss", np.asarray(out), (logits,), bw)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _require_nchw(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name} expects rank-4 (N, C, H, W) input, got shape {x.shape}")


def _windows(xp: np.ndarray, kh, kw, sh, sw):
    """Strided read-only view (N, C, oh, ow, kh, kw) over a padded array."""
    n, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"window {kh}x{kw} stride {sh}x{sw} does not fit input {h}x{w}")
    sn, sc, sy, sx = xp.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, sy * sh, sx * sw, sy, sx)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _im2col(xp: np.ndarray, kh, kw, sh, sw):
    v = _windows(xp, kh, kw, sh, sw)
    n, c, oh, ow = v.shape[:4]
    col = v.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return col, oh, ow


def conv2d(x, weight, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, arbitrary kernel/stride/zero-padding, no bias.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw). Implemented as
    patch-unrolling plus one GEMM; tests hold a naive quadruple-loop
    reference against it.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _require_nchw("conv2d", x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d stride {stride!r} / padding {padding!r} out of range")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    col, oh, ow = _im2col(xp, kh, kw, sh, sw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (col @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        dw = (gmat.T @ col).reshape(weight.shape)
        # Input gradient = full correlation of the stride-dilated output
        # gradient with the spatially flipped kernel.
        hp, wp = h + 2 * ph, w + 2 * pw
        buf = np.zeros((n, cout, (oh - 1) * sh + 1 + 2 * (kh - 1),
                        (ow - 1) * sw + 1 + 2 * (kw - 1)), dtype=g.dtype)
        buf[:, :, kh - 1:kh - 1 + (oh - 1) * sh + 1:sh,
            kw - 1:kw - 1 + (ow - 1) * sw + 1:sw] = g
        col2, he, we = _im2col(buf, kh, kw, 1, 1)
        wt = weight.data[:, :, ::-1, ::-1].reshape(cout, cin, kh * kw)
        wt = wt.transpose(0, 2, 1).reshape(cout * kh * kw, cin)
        dxe = (col2 @ wt).reshape(n, he, we, cin).transpose(0, 3, 1, 2)
        if he != hp or we != wp:
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            dxp[:, :, :he, :we] = dxe
        else:
            dxp = dxe
        dx = dxp[:, :, ph:ph + h, pw:pw + w]
        return dx, dw

    return _finish("conv2d", out, (x, weight), bw)


def max_pool(x, kernel, stride=None, padding: int = 0) -> Tensor:
    """Max pooling over kh x kw windows; stride defaults to the kernel."""
    x = as_tensor(x)
    _require_nchw("max_pool", x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    v = _windows(xp, kh, kw, sh, sw)
    oh, ow = v.shape[2], v.shape[3]
    flat = v.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
        ni, ci, oi, oj = np.indices(arg.shape).reshape(4, -1)
        ky, kx = np.unravel_index(arg.reshape(-1), (kh, kw))
        np.add.at(dxp, (ni, ci, oi * sh + ky, oj * sw + kx), g.reshape(-1))
        return (dxp[:, :, ph:ph + h, pw:pw + w],)

    return _finish("max-pool", out, (x,), bw)


def spatial_mean(x) -> Tensor:
    """Mean over the two spatial axes: (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    _require_nchw("spatial_mean", x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(
            g.dtype, copy=False),)

    return _finish("spatial-mean", out, (x,), bw)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel, per-sample normalization over spatial dims + affine.

    Each (n, c) slice is shifted to zero mean and scaled to unit variance
    over H x W, then scaled by gamma[c] and shifted by beta[c]. No running
    statistics, so train and eval behave identically.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_nchw("instance_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = g * gb
        m1 = gx.mean(axis=(2, 3), keepdims=True)
        m2 = (gx * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _finish("instance-normalize", out, (x, gamma, beta), bw)
