"""Rank-4 tensors with taped reverse-mode differentiation.

Everything in this package runs on dense (batch, channel, height, width)
arrays, so the autodiff core supports exactly that layout and nothing else.
Values are stored in float32 by default; float64 storage is accepted so tests
can re-run a forward pass in a higher-precision shadow mode and compare
against finite differences. Reductions (convolution, sums, means, softmax
normalisation) accumulate in float64 regardless of storage dtype, and so does
gradient accumulation during backward.

The tape is implicit: every tensor carries a creation-order index, and
backward() replays backward rules over the reachable subgraph in exact
reverse creation order. Replaying the same loss twice raises, because
gradients would silently double otherwise.
"""

import itertools
import struct
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DataError, ShapeError

_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block. Used for inference loops."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A (B, C, H, W) array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule",
                 "_order", "_needs_grad", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data if dtype is None else data.astype(dtype, copy=False)
        else:
            arr = np.asarray(data, dtype=(dtype or np.float32))
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._rule = None
        self._order = next(_counter)
        self._needs_grad = self.requires_grad
        self._spent = False

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A view of the same data with no tape history."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    # Arithmetic sugar used by the loss code. Scalars go through the
    # dedicated scalar ops so no rank-0 arrays sneak in.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}{flag})"


def _out_dtype(*tensors):
    # Storage stays float32 unless every operand is float64 (shadow mode).
    if all(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def _make(out_data, parents, rule):
    """Wrap an op result, recording the backward rule when the tape is live.

    ``rule`` takes the incoming float64 gradient and returns one float64
    array per parent (or None for a parent that gets nothing). Returned
    arrays may be views; the accumulator never mutates them in place.
    """
    needs = _grad_enabled and any(p._needs_grad for p in parents)
    out = Tensor(out_data)
    if needs:
        out._parents = tuple(parents)
        out._rule = rule
        out._needs_grad = True
    return out


def backward(loss):
    """Accumulate d(loss)/d(node) into .grad over the reachable graph.

    Traversal order is exact reverse creation order, which is a valid
    topological order because an op's output is always created after its
    inputs. Gradients are held in float64 while in flight and cast to each
    node's storage dtype when written.
    """
    if loss.dims != (1, 1, 1, 1):
        raise ShapeError(f"backward expects a scalar loss, got {loss.dims}")
    if loss._spent:
        raise ContractError("backward was already run through this loss; "
                            "rebuild the graph before differentiating again")
    loss._spent = True

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order, reverse=True)

    flight = {id(loss): np.ones((1, 1, 1, 1), dtype=np.float64)}
    for node in nodes:
        g = flight.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad or node._rule is not None:
            gs = g.astype(node.data.dtype, copy=False)
            if node.grad is None:
                node.grad = gs.copy()
            else:
                node.grad += gs
        if node._rule is None:
            continue
        parts = node._rule(g)
        for parent, pg in zip(node._parents, parts):
            if pg is None or not parent._needs_grad:
                continue
            held = flight.get(id(parent))
            # Plain + rather than += : one rule may hand the same buffer to
            # two parents, so stored arrays must never be mutated.
            flight[id(parent)] = pg if held is None else held + pg


def _f64(t):
    return t.data.astype(np.float64, copy=False)


def _bcast_mode(a, b):
    """Classify the one tolerated broadcast: a per-channel (1,C,1,1) vector
    against a full (B,C,H,W) map. Returns which side is the vector."""
    if a.dims == b.dims:
        return "same"
    if a.dims == (1, b.dims[1], 1, 1):
        return "a_vec"
    if b.dims == (1, a.dims[1], 1, 1):
        return "b_vec"
    raise ShapeError(f"incompatible dims {a.dims} and {b.dims}; only a "
                     f"(1,C,1,1) vector may broadcast against (B,C,H,W)")


def _reduce_to(g, dims):
    if g.shape == dims:
        return g
    return g.sum(axis=(0, 2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# pointwise and broadcast arithmetic


def add(a, b):
    _bcast_mode(a, b)
    out = (a.data + b.data).astype(_out_dtype(a, b), copy=False)

    def rule(g):
        return _reduce_to(g, a.dims), _reduce_to(g, b.dims)

    return _make(out, (a, b), rule)


def sub(a, b):
    _bcast_mode(a, b)
    out = (a.data - b.data).astype(_out_dtype(a, b), copy=False)

    def rule(g):
        return _reduce_to(g, a.dims), _reduce_to(-g, b.dims)

    return _make(out, (a, b), rule)


def mul(a, b):
    _bcast_mode(a, b)
    out = (a.data * b.data).astype(_out_dtype(a, b), copy=False)
    a64, b64 = _f64(a), _f64(b)

    def rule(g):
        return _reduce_to(g * b64, a.dims), _reduce_to(g * a64, b.dims)

    return _make(out, (a, b), rule)


def scale(x, k):
    k = float(k)
    out = x.data * x.data.dtype.type(k)

    def rule(g):
        return (g * k,)

    return _make(out, (x,), rule)


def add_scalar(x, s):
    s = float(s)
    out = x.data + x.data.dtype.type(s)

    def rule(g):
        return (g.copy(),)

    return _make(out, (x,), rule)


def abs_val(x):
    out = np.abs(x.data)
    sign = np.sign(_f64(x))  # sign(0) = 0, so ties get subgradient 0

    def rule(g):
        return (g * sign,)

    return _make(out, (x,), rule)


def exp_t(x):
    out64 = np.exp(_f64(x))
    out = out64.astype(_out_dtype(x))

    def rule(g):
        return (g * out64,)

    return _make(out, (x,), rule)


def log_t(x, floor=1e-12):
    """Natural log with the argument clamped below at ``floor``.

    The clamp keeps saturated probabilities from producing -inf; clamped
    positions get zero gradient, matching the flat clamp region.
    """
    if floor <= 0.0:
        raise ContractError(f"log floor must be positive, got {floor}")
    x64 = _f64(x)
    clamped = np.maximum(x64, floor)
    out = np.log(clamped).astype(_out_dtype(x))
    live = x64 >= floor

    def rule(g):
        return (g * live / clamped,)

    return _make(out, (x,), rule)


def power(x, p):
    """Elementwise x**p. Caller guarantees the base stays positive whenever
    p is non-integral (the package only uses it on variance + eps)."""
    p = float(p)
    x64 = _f64(x)
    out = (x64 ** p).astype(_out_dtype(x))

    def rule(g):
        return (g * p * x64 ** (p - 1.0),)

    return _make(out, (x,), rule)


def relu(x):
    out = np.maximum(x.data, 0)
    live = _f64(x) > 0

    def rule(g):
        return (g * live,)

    return _make(out, (x,), rule)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    total = _f64(x).sum()
    out = np.full((1, 1, 1, 1), total).astype(_out_dtype(x))
    shape = x.dims

    def rule(g):
        return (np.full(shape, float(g.reshape(()))),)

    return _make(out, (x,), rule)


def channel_mean(x):
    """Mean over batch and space, kept as a (1,C,1,1) vector."""
    b, c, h, w = x.dims
    m = b * h * w
    out64 = _f64(x).mean(axis=(0, 2, 3), keepdims=True)
    out = out64.astype(_out_dtype(x))

    def rule(g):
        return (np.broadcast_to(g / m, (b, c, h, w)).copy(),)

    return _make(out, (x,), rule)


def softmax_channel(x):
    """Softmax across the channel axis, computed with a max shift."""
    x64 = _f64(x)
    shifted = x64 - x64.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p64 = e / e.sum(axis=1, keepdims=True)
    out = p64.astype(_out_dtype(x))

    def rule(g):
        inner = (g * p64).sum(axis=1, keepdims=True)
        return (p64 * (g - inner),)

    return _make(out, (x,), rule)


# ---------------------------------------------------------------------------
# structural ops


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation with square odd kernels, plus a per-channel bias.

    ``w`` is (outC, inC, kH, kW) and ``b`` is a (1, outC, 1, 1) tensor.
    Output spatial dims follow floor((H + 2p - k) / stride) + 1. Lowered to
    a float64 matmul over an im2col matrix; the column matrix is kept alive
    for the backward rule.
    """
    bs, c, h, wd = x.dims
    oc, ic, kh, kw = w.dims
    if ic != c:
        raise ShapeError(f"kernel expects {ic} input channels, image has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
    if b.dims != (1, oc, 1, 1):
        raise ShapeError(f"bias dims {b.dims} do not match {oc} output channels")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty conv output {ho}x{wo} for input {h}x{wd}")

    x64 = _f64(x)
    if padding:
        x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x64, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bs * ho * wo, c * kh * kw)
    wmat = _f64(w).reshape(oc, -1)
    out = cols @ wmat.T
    out += _f64(b).reshape(oc)
    out = out.reshape(bs, ho, wo, oc).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out).astype(_out_dtype(x, w, b))

    def rule(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bs * ho * wo, oc)
        gw = (gmat.T @ cols).reshape(oc, ic, kh, kw)
        gb = gmat.sum(axis=0).reshape(1, oc, 1, 1)
        gcols = gmat @ wmat
        gwin = gcols.reshape(bs, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((bs, c, h + 2 * padding, wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += gwin[:, :, :, :, i, j]
        if padding:
            gx = np.ascontiguousarray(
                gxp[:, :, padding:padding + h, padding:padding + wd])
        else:
            gx = gxp
        return gx, gw, gb

    return _make(out, (x, w, b), rule)


def maxpool2x(x):
    """2x2 max pooling with stride 2. First maximum wins on ties, and only
    the winning position receives gradient."""
    bs, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    r = x.data.reshape(bs, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = np.ascontiguousarray(r).reshape(bs, c, h2, w2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        buf = np.zeros((bs, c, h2, w2, 4))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        gx = buf.reshape(bs, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx).reshape(bs, c, h, w),)

    return _make(out, (x,), rule)


def upsample_nearest2x(x):
    bs, c, h, w = x.dims
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def rule(g):
        return (g.reshape(bs, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), rule)


def concat_channels(a, b):
    if (a.dims[0], a.dims[2], a.dims[3]) != (b.dims[0], b.dims[2], b.dims[3]):
        raise ShapeError(f"concat needs matching B,H,W, got {a.dims} and {b.dims}")
    dt = _out_dtype(a, b)
    out = np.concatenate([a.data.astype(dt, copy=False),
                          b.data.astype(dt, copy=False)], axis=1)
    ca = a.dims[1]

    def rule(g):
        return (np.ascontiguousarray(g[:, :ca]),
                np.ascontiguousarray(g[:, ca:]))

    return _make(out, (a, b), rule)


def cross_entropy_pixelwise(logits, labels):
    """Mean per-pixel cross entropy against integer labels.

    ``labels`` is a numpy integer array of shape (B, H, W) or (B, 1, H, W).
    Softmax and log run fused in float64; the backward rule is the usual
    (softmax - onehot) / (B*H*W).
    """
    bs, n, h, w = logits.dims
    lab = np.asarray(labels)
    if lab.shape == (bs, 1, h, w):
        lab = lab[:, 0]
    if lab.shape != (bs, h, w):
        raise ShapeError(f"labels shape {np.asarray(labels).shape} does not "
                         f"match logits {logits.dims}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ContractError(f"labels must be integers, got {lab.dtype}")
    if lab.min() < 0 or lab.max() >= n:
        raise ContractError(f"label values must lie in [0, {n}), got "
                            f"[{lab.min()}, {lab.max()}]")

    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    m = bs * h * w
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    loss = -picked.sum() / m
    out = np.full((1, 1, 1, 1), loss).astype(_out_dtype(logits))
    p64 = np.exp(logp)

    def rule(g):
        gz = p64.copy()
        np.put_along_axis(gz, lab[:, None],
                          np.take_along_axis(gz, lab[:, None], axis=1) - 1.0,
                          axis=1)
        gz *= float(g.reshape(())) / m
        return (gz,)

    return _make(out, (logits,), rule)


# ---------------------------------------------------------------------------
# on-disk format: little-endian, fixed header, raw row-major payload

_TNS_MAGIC = b"TNS1"
_TNS_F32 = 0
_TNS_U8 = 1


def save_tns(path, array):
    """Write a float32 or uint8 ndarray of any rank to a .tns file."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = _TNS_F32
        payload = arr.astype("<f4", copy=False).tobytes()
    elif arr.dtype == np.uint8:
        code = _TNS_U8
        payload = arr.tobytes()
    else:
        raise ContractError(f".tns stores float32 or uint8, got {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_TNS_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(payload)


def load_tns(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_tns(blob, str(path))


def decode_tns(blob, origin="<bytes>"):
    if len(blob) < 6 or blob[:4] != _TNS_MAGIC:
        raise DataError(f"{origin}: not a .tns file (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    header = 6 + 8 * rank
    if len(blob) < header:
        raise DataError(f"{origin}: truncated .tns header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6)
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    if code == _TNS_F32:
        dtype, width = np.dtype("<f4"), 4
    elif code == _TNS_U8:
        dtype, width = np.dtype(np.uint8), 1
    else:
        raise DataError(f"{origin}: unknown .tns dtype code {code}")
    if len(blob) != header + count * width:
        raise DataError(f"{origin}: payload length {len(blob) - header} does "
                        f"not match dims {dims}")
    arr = np.frombuffer(blob[header:], dtype=dtype).reshape(dims)
    if code == _TNS_F32:
        arr = arr.astype(np.float32)
    return arr.copy()


def encode_tns(array):
    """The .tns byte string for an array, without touching disk."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code, payload = _TNS_F32, arr.astype("<f4", copy=False).tobytes()
    elif arr.dtype == np.uint8:
        code, payload = _TNS_U8, arr.tobytes()
    else:
        raise ContractError(f".tns stores float32 or uint8, got {arr.dtype}")
    head = _TNS_MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload
