"""Reverse-mode autodiff on numpy arrays, plus the layers built from it.

Small by design: exactly the primitives the two networks need, each with a
hand-written backward rule. Arrays keep whatever float dtype they are given
(models train in float32; gradient-check suites run the same code in
float64, where central differences are trustworthy).
"""

import struct
from contextlib import contextmanager

import numpy as np

from .errors import DataError, NumericError
from .fileio import atomic_write_bytes

# --- engine -----------------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference / metric computation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self):
        return float(self.data)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g


def backward(root, params=()):
    """Populate grads of everything reachable from the scalar `root`.

    Parameters listed in `params` that the graph never touched get explicit
    zero grads, so optimizer steps see a complete gradient set.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.grad = None


# --- primitives ---------------------------------------------------------------


def add(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _make(a.data * np.asarray(s, dtype=a.data.dtype), (a,), bwd)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a):
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)

    def bwd(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accum(a, g * local)

    return _make(0.5 * x * (1.0 + t), (a,), bwd)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bwd)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tabs(a):
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), bwd)


def pow_scalar(a, p):
    p = float(p)

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), bwd)


def max_over_axis(a, axis, keepdims=False):
    """Max along one axis; the subgradient routes to the FIRST argmax."""
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        gz = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gz, np.expand_dims(idx, axis), gg, axis=axis)
        _accum(a, gz)

    return _make(a.data.max(axis=axis, keepdims=keepdims), (a,), bwd)


def concat(tensors, axis=0):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        gz = np.zeros_like(a.data)
        gz[sl] = g
        _accum(a, gz)

    return _make(a.data[sl].copy(), (a,), bwd)


def reshape(a, shape):
    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes).copy(), (a,), bwd)


def dropout(a, rate, rng=None, train=False):
    """Inverted dropout; identity when not training or rate is 0."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, constant(mask))


def conv2d(x, w, b=None, stride=1, padding=0):
    """NCHW convolution via im2col; backward scatters through the same windows."""
    n, c, h, wd = x.data.shape
    out_ch, in_ch, kh, kw = w.data.shape
    if in_ch != c:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}, kernel {(kh, kw)}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(out_ch, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, out_ch).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, out_ch)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dwin[..., i, j]
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got shape {x.data.shape}")
    return tmean(x, axis=(2, 3))


# --- layers -------------------------------------------------------------------


def glorot_uniform(rng, shape, dtype, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        self.w = parameter(glorot_uniform(rng, (d_in, d_out), dtype, d_in, d_out))
        self.b = parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return matmul(x, self.w) + self.b

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv2d:
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.w = parameter(glorot_uniform(rng, (c_out, c_in, kernel, kernel), dtype, fan_in, fan_out))
        self.b = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    """Normalize the last axis; eps inside the square root keeps it NaN-free."""

    EPS = 1e-5

    def __init__(self, dim, dtype=np.float32):
        self.gain = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        mu = tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = tmean(mul(centered, centered), axis=-1, keepdims=True)
        inv = pow_scalar(var + constant(np.asarray(self.EPS, dtype=x.data.dtype)), -0.5)
        return mul(mul(centered, inv), self.gain) + self.bias

    def params(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product self-attention over (batch, tokens, model_dim).

    model_dim need not be divisible by heads: Q/K/V project model_dim ->
    heads*head_dim and the output projection maps back to model_dim.
    """

    def __init__(self, model_dim, heads, head_dim, rng, dtype=np.float32):
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.q = Linear(model_dim, inner, rng, dtype)
        self.k = Linear(model_dim, inner, rng, dtype)
        self.v = Linear(model_dim, inner, rng, dtype)
        self.out = Linear(inner, model_dim, rng, dtype)

    def __call__(self, x, return_weights=False):
        n, tokens, _ = x.data.shape

        def split_heads(t):
            return transpose(reshape(t, (n, tokens, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = split_heads(self.q(x))
        k = split_heads(self.k(x))
        v = split_heads(self.v(x))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        ctx = matmul(weights, v)
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, tokens, self.heads * self.head_dim))
        out = self.out(merged)
        if return_weights:
            return out, weights
        return out

    def params(self, prefix):
        out = {}
        for name, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            out.update(layer.params(f"{prefix}.{name}"))
        return out


class FeedForward:
    def __init__(self, model_dim, hidden, rng, dtype=np.float32):
        self.up = Linear(model_dim, hidden, rng, dtype)
        self.down = Linear(hidden, model_dim, rng, dtype)

    def __call__(self, x):
        return self.down(gelu(self.up(x)))

    def params(self, prefix):
        return {**self.up.params(f"{prefix}.up"), **self.down.params(f"{prefix}.down")}


class TransformerLayer:
    """Pre-norm block: x + attn(ln1(x)), then + ffn(ln2(.))."""

    def __init__(self, model_dim, heads, head_dim, ff_hidden, rng, dtype=np.float32):
        self.ln1 = LayerNorm(model_dim, dtype)
        self.attn = MultiHeadAttention(model_dim, heads, head_dim, rng, dtype)
        self.ln2 = LayerNorm(model_dim, dtype)
        self.ffn = FeedForward(model_dim, ff_hidden, rng, dtype)

    def __call__(self, x, rate=0.0, rng=None, train=False):
        h = x + dropout(self.attn(self.ln1(x)), rate, rng, train)
        return h + dropout(self.ffn(self.ln2(h)), rate, rng, train)

    def params(self, prefix):
        return {
            **self.ln1.params(f"{prefix}.ln1"),
            **self.attn.params(f"{prefix}.attn"),
            **self.ln2.params(f"{prefix}.ln2"),
            **self.ffn.params(f"{prefix}.ffn"),
        }


def sinusoidal_positions(max_len, dim, dtype=np.float32):
    """Classic sin/cos interleave; an odd trailing column takes the sin branch."""
    pos = np.arange(max_len)[:, None]
    pair = np.arange((dim + 1) // 2)
    angles = pos / (10000.0 ** (2.0 * pair / dim))
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table.astype(dtype)


# --- optimizer ------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a {name: Tensor} parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - (p.data.dtype.type(self.lr) * update).astype(p.data.dtype)

    def state_arrays(self):
        out = {"opt.t": np.float32(self.t)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, state):
        self.t = int(state["opt.t"])
        for name in self.params:
            self.m[name] = np.array(state[f"opt.m.{name}"], dtype=self.params[name].data.dtype)
            self.v[name] = np.array(state[f"opt.v.{name}"], dtype=self.params[name].data.dtype)


def clip_global_norm(params, max_norm):
    """Scale all grads so their joint L2 norm is at most max_norm; returns the raw norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    n, k = logits.data.shape
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    picked = tsum(mul(log_softmax(logits, axis=-1), constant(onehot)), axis=-1)
    return scale(tmean(picked), -1.0)


# --- CKPT1 checkpoint container ---------------------------------------------------
#
# "CKPT" u8 version, then two blocks (parameters, optimizer/extra state),
# each: u32 count, then per entry u32 name_len + name utf-8 + u32 rank +
# rank*u32 dims + float32 LE payload. Entries sorted by name.

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


def _pack_block(arrays):
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return parts


def save_checkpoint(path, params, state):
    """params/state: {name: array-like}; written atomically."""
    parts = [_CKPT_MAGIC, struct.pack("<B", _CKPT_VERSION)]
    parts.extend(_pack_block(params))
    parts.extend(_pack_block(state))
    atomic_write_bytes(path, b"".join(parts))


def _unpack_block(blob, pos, path):
    if pos + 4 > len(blob):
        raise DataError(f"{path}: truncated checkpoint block header")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        end = pos + 4 * size
        if end > len(blob):
            raise DataError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
    return out, pos


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version = blob[4]
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    params, pos = _unpack_block(blob, 5, path)
    state, pos = _unpack_block(blob, pos, path)
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes after checkpoint data")
    return params, state


def model_manifest_path(ckpt_path):
    import os

    return os.fspath(ckpt_path) + ".json"


def apply_params(targets, loaded, path):
    """Copy loaded checkpoint arrays into a model's named parameter Tensors."""
    missing = sorted(set(targets) - set(loaded))
    extra = sorted(set(loaded) - set(targets))
    if missing or extra:
        raise DataError(f"{path}: parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})")
    for name, tensor in targets.items():
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise DataError(f"{path}: {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
