"""Minimal n-dimensional float tensor with reverse-mode autodiff.

Tensors wrap a numpy array (float32 by default, float64 for shadow
evaluations used by the gradient checker).  Every differentiable operation
records a node on an implicit tape: the node holds references to the operand
tensors and a rule mapping the upstream gradient to operand gradients.
``backward`` replays the recorded nodes in reverse topological order,
accumulates gradients into every ``requires_grad`` leaf, and then clears the
tape, so a second backward without a new forward pass is an error.

Conventions fixed project-wide:

* Image layout is batch x channel x height x width.
* Bilinear upsampling uses half-pixel sample centers: output pixel j reads
  source coordinate ``s = (j + 0.5) / 2 - 0.5``; with ``f = floor(s)`` and
  ``t = s - f`` the value is ``(1 - t) * x[clip(f)] + t * x[clip(f + 1)]``.
* relu uses subgradient 0 at 0.
* Any non-finite value produced by a forward op raises ``NumericError``;
  NaN/Inf is never silent.

Forward ops are pure and deterministic (fixed reduction order), so repeated
runs on identical inputs are bit-identical.
"""

import numpy as np

from .errors import NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


class TapeNode:
    """One recorded operation: operand references plus a gradient rule."""

    __slots__ = ("op", "parents", "grad_fn")

    def __init__(self, op, parents, grad_fn):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn  # upstream grad array -> tuple of operand grads


class Tensor:
    """n-d float array, autodiff leaf or intermediate (rank <= 4)."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} > 4 not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.item())

    def detach(self):
        """Stop-gradient view: same values, no tape connection."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def dump(self):
        """Text form for oracle comparison: dims line, then one value per line."""
        lines = [" ".join(str(d) for d in self.data.shape)]
        lines.extend(repr(float(v)) for v in self.data.reshape(-1))
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands stay in the tensor's dtype
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

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set; use bounded_ratio or scalars")
        return mul(self, 1.0 / float(scalar))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((), x, dtype=like.dtype))


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _result(data, op, parents, grad_fn):
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad or p._node is not None for p in parents):
        out._node = TapeNode(op, tuple(parents), grad_fn)
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = b if isinstance(b, Tensor) else _wrap(b, a)
    if a.data.shape == () and b.data.shape != ():
        a, b = b, a
    scalar = b.data.shape == () and a.data.shape != ()
    if not scalar:
        _same_shape(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        gb = g.sum(dtype=g.dtype).reshape(()) if scalar else g
        return g, gb

    return _result(out, "add", (a, b), grad_fn)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = b if isinstance(b, Tensor) else _wrap(b, a)
    if a.data.shape == () and b.data.shape != ():
        a, b = b, a
    scalar = b.data.shape == () and a.data.shape != ()
    if not scalar:
        _same_shape(a, b, "mul")
    with np.errstate(over="ignore"):
        out = a.data * b.data

    def grad_fn(g):
        ga = g * b.data
        gb = (g * a.data).sum(dtype=g.dtype).reshape(()) if scalar else g * a.data
        return ga, gb

    return _result(out, "mul", (a, b), grad_fn)


def relu(x):
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(out, "relu", (x,), grad_fn)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _result(out, "log", (x,), grad_fn)


def clamp_min(x, floor):
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    floor = float(floor)
    out = np.maximum(x.data, floor)
    mask = x.data >= floor

    def grad_fn(g):
        return (g * mask,)

    return _result(out, "clamp_min", (x,), grad_fn)


def bounded_ratio(y, p):
    """Elementwise y*p / (y^2 + p^2) with the convention 0/0 := 0.

    Smooth away from (0, 0); at exactly (0, 0) both the value and both
    partial derivatives are defined as 0, which makes all-zero target
    entries fully inert.
    """
    _same_shape(y, p, "bounded_ratio")
    denom = y.data * y.data + p.data * p.data
    live = denom > 0
    safe = np.where(live, denom, 1)
    out = np.where(live, y.data * p.data / safe, 0)

    def grad_fn(g):
        sq = safe * safe
        gy = np.where(live, p.data * (p.data * p.data - y.data * y.data) / sq, 0) * g
        gp = np.where(live, y.data * (y.data * y.data - p.data * p.data) / sq, 0) * g
        return gy, gp

    return _result(out, "bounded_ratio", (y, p), grad_fn)


# ---------------------------------------------------------------------------
# reductions

def tsum(x):
    out = x.data.sum(dtype=x.data.dtype).reshape(())

    def grad_fn(g):
        return (np.full_like(x.data, g),)

    return _result(out, "sum", (x,), grad_fn)


def tmean(x):
    n = x.data.size
    out = (x.data.sum(dtype=x.data.dtype) / n).reshape(())

    def grad_fn(g):
        return (np.full_like(x.data, g / n),)

    return _result(out, "mean", (x,), grad_fn)


# ---------------------------------------------------------------------------
# structured ops

def concat_channels(parts):
    """Concatenate rank-4 tensors along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: empty input list")
    ref = parts[0]
    for p in parts[1:]:
        if p.data.ndim != 4 or ref.data.ndim != 4:
            raise ValueError("concat_channels: rank-4 tensors required")
        if p.data.shape[0] != ref.data.shape[0] or p.data.shape[2:] != ref.data.shape[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref.data.shape} vs {p.data.shape}")
        if p.data.dtype != ref.data.dtype:
            raise ValueError("concat_channels: dtype mismatch")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def grad_fn(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=1)
        return tuple(splits)

    return _result(out, "concat_channels", tuple(parts), grad_fn)


def softmax_channels(x):
    """Per-pixel softmax across the channel axis of a B x C x H x W tensor."""
    if x.data.ndim != 4:
        raise ValueError("softmax_channels: rank-4 tensor required")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _result(p, "softmax_channels", (x,), grad_fn)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation of B x Cin x H x W with Cout x Cin x k x k.

    Square kernels; stride 1 or 2.  With same-padding (k - 1) / 2 the output
    side is ceil(H / stride).  Gradients are recorded for input, kernel and
    bias.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: input and kernel must be rank 4")
    B, Cin, H, W = x.data.shape
    Cout, Ck, kh, kw = w.data.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if Ck != Cin:
        raise ValueError(f"conv2d: channel mismatch, input {Cin} vs kernel {Ck}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("conv2d: negative padding")
    if b is not None:
        if b.data.shape != (Cout,):
            raise ValueError(f"conv2d: bias shape {b.data.shape} != ({Cout},)")
        if b.data.dtype != x.data.dtype:
            raise ValueError("conv2d: bias dtype mismatch")
    if w.data.dtype != x.data.dtype:
        raise ValueError("conv2d: kernel dtype mismatch")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: non-positive output dims {Ho}x{Wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, Cin, k, k, Ho, Wo),
        (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    colm = cols.reshape(B, Cin * k * k, Ho * Wo)
    wm = w.data.reshape(Cout, Cin * k * k)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(wm, colm).reshape(B, Cout, Ho, Wo)
        if b is not None:
            out = out + b.data[None, :, None, None]

    def grad_fn(g):
        gm = g.reshape(B, Cout, Ho * Wo)
        gw = np.matmul(gm, colm.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(wm.T, gm).reshape(B, Cin, k, k, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv2d", parents, grad_fn)


def _up2x_taps(n, dtype):
    dst = np.arange(2 * n)
    src = (dst + 0.5) / 2 - 0.5
    f = np.floor(src)
    t = (src - f).astype(dtype)
    i0 = np.clip(f, 0, n - 1).astype(np.intp)
    i1 = np.clip(f + 1, 0, n - 1).astype(np.intp)
    return i0, i1, (1 - t), t


def upsample_bilinear2x(x):
    """Double H and W by bilinear interpolation with half-pixel centers.

    Exact linear operator; the gradient is its transpose (scatter-add of the
    same weights).
    """
    if x.data.ndim != 4:
        raise ValueError("upsample_bilinear2x: rank-4 tensor required")
    B, C, H, W = x.data.shape
    dt = x.data.dtype
    r0, r1, wr0, wr1 = _up2x_taps(H, dt)
    c0, c1, wc0, wc1 = _up2x_taps(W, dt)
    tmp = x.data[:, :, r0, :] * wr0[:, None] + x.data[:, :, r1, :] * wr1[:, None]
    out = tmp[:, :, :, c0] * wc0 + tmp[:, :, :, c1] * wc1

    def grad_fn(g):
        gtmp = np.zeros_like(tmp)
        np.add.at(gtmp, (slice(None), slice(None), slice(None), c0), g * wc0)
        np.add.at(gtmp, (slice(None), slice(None), slice(None), c1), g * wc1)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)), gtmp * wr0[:, None])
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)), gtmp * wr1[:, None])
        return (gx,)

    return _result(out, "upsample_bilinear2x", (x,), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Returns a dict mapping each such leaf tensor to its gradient array (the
    same array stored in ``leaf.grad``).  The tape is consumed: calling
    backward again without a fresh forward pass raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._node is None:
        raise ValueError("loss is not connected to a tape (no recorded ops, or backward already ran)")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaf_grads = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad += g
                leaf_grads[t] = t.grad
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        t._node = None
    return leaf_grads
