"""Dense float64 tensors with a taped reverse-mode gradient.

Every model component is built from the functions in this module. A forward
pass records a graph of closures; ``backward`` walks it once in reverse
topological order and then drops the tape.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable

import numpy as np

DTYPE = np.float64
MAGIC = b"APTT"
_grad_enabled = True


@contextmanager
def no_grad():
    """Skip taping inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _node(data, parents, backward_fn) -> Tensor:
    """Build an output node; parents that need no gradient are not taped."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, True, parents, backward_fn)


def _accum(t: Tensor, g, owned=False):
    """Add ``g`` into ``t.grad``; ``owned`` marks a fresh array safe to adopt."""
    if not t.requires_grad:
        return
    if t.grad is None:
        g = _unbroadcast(g, t.data.shape)
        t.grad = g if owned and g.flags.writeable else np.array(g, dtype=DTYPE)
    else:
        t.grad += _unbroadcast(g, t.data.shape)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None

    def bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out = _node(a.data + b.data, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None

    def bw():
        _accum(a, out.grad)
        _accum(b, -out.grad, True)

    out = _node(a.data - b.data, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None

    def bw():
        if a.requires_grad:
            _accum(a, out.grad * b.data, True)
        if b.requires_grad:
            _accum(b, out.grad * a.data, True)

    out = _node(a.data * b.data, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None

    def bw():
        if a.requires_grad:
            _accum(a, out.grad / b.data, True)
        if b.requires_grad:
            _accum(b, -out.grad * a.data / (b.data * b.data), True)

    out = _node(a.data / b.data, (a, b), bw)
    return out


def power(a, p: float) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad * p * a.data ** (p - 1))

    out = _node(a.data ** p, (a,), bw)
    return out


def exp(a) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad * out.data, True)

    out = _node(np.exp(a.data), (a,), bw)
    return out


def log(a) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad / a.data)

    out = _node(np.log(a.data), (a,), bw)
    return out


def absolute(a) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad * np.sign(a.data))

    out = _node(np.abs(a.data), (a,), bw)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = None
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw():
        _accum(a, out.grad * out.data * (1.0 - out.data), True)

    out = _node(y, (a,), bw)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    a = tensor(a)
    out = None
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))

    def bw():
        d = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d *= 0.5 * x * (1.0 - th * th)
        d += 0.5 * (1.0 + th)
        d *= out.grad
        _accum(a, d, True)

    y = 1.0 + th
    y *= 0.5 * x
    out = _node(y, (a,), bw)
    return out


def relu(a) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad * (a.data > 0))

    out = _node(np.maximum(a.data, 0.0), (a,), bw)
    return out


def maximum(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None
    pick_a = a.data >= b.data

    def bw():
        _accum(a, out.grad * pick_a)
        _accum(b, out.grad * ~pick_a)

    out = _node(np.where(pick_a, a.data, b.data), (a, b), bw)
    return out


def minimum(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = None
    pick_a = a.data <= b.data

    def bw():
        _accum(a, out.grad * pick_a)
        _accum(b, out.grad * ~pick_a)

    out = _node(np.where(pick_a, a.data, b.data), (a, b), bw)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    out = None
    inside = (a.data >= lo) & (a.data <= hi)

    def bw():
        _accum(a, out.grad * inside)

    out = _node(np.clip(a.data, lo, hi), (a,), bw)
    return out


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out = _node(a.data.reshape(shape), (a,), bw)
    return out


def transpose(a, axes) -> Tensor:
    a = tensor(a)
    out = None
    inv = np.argsort(axes)

    def bw():
        _accum(a, out.grad.transpose(inv))

    out = _node(a.data.transpose(axes), (a,), bw)
    return out


def swapaxes(a, i, j) -> Tensor:
    axes = list(range(tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(parts, axis=0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = None
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def bw():
        for p, g in zip(parts, np.split(out.grad, sizes, axis=axis)):
            _accum(p, g)

    out = _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)
    return out


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    out = None

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    out = _node(a.data[idx], (a,), bw)
    return out


Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product; a 2-D right operand is shared over the batch."""
    a, b = tensor(a), tensor(b)
    out = None
    # shared 2-D weight: one flat GEMM instead of a loop of small ones
    flat = b.data.ndim == 2 and a.data.ndim > 2

    def bw():
        g = out.grad
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape), True)
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, a.data.shape[-1]).T @ g2, True)
            return
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2), True)
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g, True)

    if flat:
        y = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(a.data.shape[:-1] + (b.data.shape[1],))
    else:
        y = a.data @ b.data
    out = _node(y, (a, b), bw)
    return out


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------- normalization

def softmax(x, axis=-1) -> Tensor:
    x = tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite input")
    if axis >= x.ndim or axis < -x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    out = None
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw():
        g = out.grad
        s = out.data
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)), True)

    out = _node(y, (x,), bw)
    return out


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: channel mismatch, input has {c}, gamma {gamma.shape}, beta {beta.shape}")
    out = None
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx, True)

    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta), bw)
    return out


# ------------------------------------------------------------------ attention

def attention(q, k, v, heads=1, return_weights=False):
    """Multi-head scaled dot-product attention.

    ``q`` is (..., Nq, C), ``k`` and ``v`` are (..., Nk, C). Channels are split
    evenly over ``heads``; each head scales by the square root of its width.
    """
    q, k, v = tensor(q), tensor(k), tensor(v)
    c = q.shape[-1]
    nk = k.shape[-2]
    if nk == 0:
        raise ValueError("empty key set")
    if k.shape[-1] != c or v.shape[-1] != c or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if c % heads:
        raise ValueError(f"attention: {c} channels not divisible by {heads} heads")
    d = c // heads
    if heads == 1:
        logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
        w = softmax(logits, axis=-1)
        o = matmul(w, v)
    else:
        lead = q.shape[:-2]
        nq = q.shape[-2]
        r = len(lead)
        perm = tuple(range(r)) + (r + 1, r, r + 2)

        def split(t, n):
            return transpose(reshape(t, lead + (n, heads, d)), perm)

        qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
        logits = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(d))
        w = softmax(logits, axis=-1)
        o = reshape(transpose(matmul(w, vh), perm), lead + (nq, c))
    return (o, w) if return_weights else o


# ------------------------------------------------------------------- gradients

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "Params | None" = None):
    """Propagate d(loss)/d(.) to every leaf; free the tape afterwards.

    With ``params`` given, returns ``{name: grad}`` for every trainable entry,
    using zeros for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward()
                node._backward = None
                node._parents = ()
                if node is not loss:
                    node.grad = None
    if params is None:
        return None
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items() if params.is_trainable(name)}


class Params(dict):
    """Named parameter tensors; names listed in ``frozen`` are not trained."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.frozen = set()

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        super().__setitem__(name, value)

    def add(self, name, data, trainable=True) -> Tensor:
        t = Tensor(data, requires_grad=trainable)
        self[name] = t
        if not trainable:
            self.frozen.add(name)
        return t

    def is_trainable(self, name) -> bool:
        return name not in self.frozen

    def trainable(self):
        return {k: v for k, v in self.items() if k not in self.frozen}

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def subset(self, prefix) -> "Params":
        """View of the entries under ``prefix.``, with the prefix stripped."""
        out = Params()
        n = len(prefix) + 1
        for k, v in self.items():
            if k.startswith(prefix + "."):
                dict.__setitem__(out, k[n:], v)
                if k in self.frozen:
                    out.frozen.add(k[n:])
        return out

    def copy(self) -> "Params":
        out = Params()
        for k, v in self.items():
            dict.__setitem__(out, k, Tensor(v.data.copy(), v.requires_grad))
        out.frozen = set(self.frozen)
        return out

    def count(self) -> int:
        return int(np.sum([v.data.size for v in self.values()]))


def grad_check(f: Callable[[Params], Tensor], params: Params, h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between taped gradients and central differences.

    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_entries`` set, each tensor is probed at that many random entries.
    """
    names = [n for n in params if params.is_trainable(n)]
    if not names:
        return 0.0
    params.zero_grad()
    grads = backward(f(params), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        t = params[name]
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[i] - num) / max(1.0, abs(num)))
    params.zero_grad()
    return worst


# ------------------------------------------------------------------ file format

def write_tensor(fh, arr) -> int:
    """Write one APTT record; returns bytes written."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    fh.write(head)
    fh.write(arr.tobytes())
    return len(head) + arr.nbytes


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE)


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_params(params: Params, weights_path, manifest_path):
    """Concatenated APTT records plus a "name shape offset" manifest."""
    lines = []
    offset = 0
    with open(weights_path, "wb") as fh:
        for name in sorted(params):
            arr = params[name].data
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {offset} {int(params.is_trainable(name))}")
            offset += write_tensor(fh, arr)
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(weights_path, manifest_path) -> Params:
    params = Params()
    with open(manifest_path) as mf, open(weights_path, "rb") as fh:
        for line in mf:
            if not line.strip():
                continue
            name, shape, offset, *rest = line.split()
            fh.seek(int(offset))
            arr = read_tensor(fh)
            want = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            if arr.shape != want:
                raise ValueError(f"{name}: manifest shape {want} != stored {arr.shape}")
            params.add(name, arr, trainable=not rest or rest[0] == "1")
    return params

