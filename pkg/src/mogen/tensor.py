"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array. Every differentiable op records its parents and
a closure that pushes the output gradient back to them. ``backward`` walks
the recorded graph in reverse topological order.

Leading batch dimensions are allowed everywhere; the ``[L, d]`` contracts
documented on the ops refer to the trailing two axes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_check_finite = contextvars.ContextVar("check_finite", default=True)


class NumericError(ArithmeticError):
    pass


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    token = _check_finite.set(enabled)
    try:
        yield
    finally:
        _check_finite.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                                and data.dtype.kind == "f" else _DEFAULT_DTYPE))
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _make(data, parents, backward_fn) -> Tensor:
    if _check_finite.get() and not np.isfinite(data).all():
        raise NumericError("non-finite value produced")
    out = Tensor(data)
    if _grad_enabled.get():
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def _pair(a, b):
    # python scalars adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else _DEFAULT_DTYPE))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _make(out, (a,), bw)


# -- reductions and shape ops ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape``; the gradient is summed back."""
    def bw(g):
        _accum(a, g)

    return _make(np.broadcast_to(a.data, shape), (a,), bw)


def index(a: Tensor, idx) -> Tensor:
    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with the weight shared over all leading axes of x."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    xd = x.data
    out = xd @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, bw)


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(m: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if not np.isfinite(m.data).all():
        raise NumericError("softmax input is not finite")
    if m.ndim == 0 or m.shape[-1] == 0:
        raise ShapeError("softmax needs at least one column")
    p = _softmax_np(m.data)

    def bw(g):
        _accum(m, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (m,), bw)


def softmax_rows(m: Tensor) -> Tensor:
    if m.ndim != 2 or m.shape[0] < 1:
        raise ShapeError(f"softmax_rows expects [r, c] with r >= 1, got {m.shape}")
    return softmax(m)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, xd.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(out, (x, gamma, beta), bw)


def attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, return_weights=False, key_mask=None):
    """Multi-head softmax(QK^T / sqrt(d_head)) V on already-projected inputs.

    q: [..., Lq, D], k and v: [..., Lk, D]. Output [..., Lq, D]. With
    ``return_weights`` the head-resolved weights [..., H, Lq, Lk] are also
    returned (as a plain array). ``key_mask`` ([..., Lk], True = attend)
    excludes padded keys.
    """
    if k.shape[-2] == 0:
        raise ShapeError("attention over an empty key/value source")
    D = q.shape[-1]
    if D % n_heads or k.shape[-1] != D or v.shape[-1] != D or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} heads={n_heads}")
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)
    lead = q.shape[:-2]
    Lq, Lk = q.shape[-2], k.shape[-2]

    def split(a, L):
        return np.swapaxes(a.reshape(a.shape[:-2] + (L, n_heads, dh)), -2, -3)

    qh, kh, vh = split(q.data, Lq), split(k.data, Lk), split(v.data, Lk)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        scores = np.where(key_mask[..., None, None, :], scores, -np.inf)
    p = _softmax_np(scores)
    oh = p @ vh
    out = np.swapaxes(oh, -2, -3).reshape(lead + (Lq, D))

    def bw(g):
        gh = split(g, Lq)
        if v.requires_grad:
            _accum(v, np.swapaxes(np.swapaxes(p, -1, -2) @ gh, -2, -3).reshape(v.shape))
        if q.requires_grad or k.requires_grad:
            dp = gh @ np.swapaxes(vh, -1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                _accum(q, np.swapaxes(ds @ kh, -2, -3).reshape(q.shape))
            if k.requires_grad:
                _accum(k, np.swapaxes(np.swapaxes(ds, -1, -2) @ qh, -2, -3).reshape(k.shape))

    res = _make(out, (q, k, v), bw)
    return (res, p) if return_weights else res


# -- backward --------------------------------------------------------------------

def backward(loss: Tensor, grad=None):
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.array(grad, dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior nodes release their gradient buffers once consumed
            node.grad = None if node._parents else node.grad


# -- parameter containers ----------------------------------------------------------

class Module:
    """Walkable container of parameters (Tensors, Modules, lists of Modules)."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _init(rng, shape, scale):
    return rng.standard_normal(shape) * scale


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero=False):
        scale = 0.0 if zero else 1.0 / math.sqrt(d_in)
        self.w = parameter(_init(rng, (d_in, d_out), scale))
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FFN(Module):
    """linear(d -> mult*d) -> GELU -> linear(mult*d -> d)."""

    def __init__(self, rng, d, mult=4, zero_out=False):
        self.fc1 = Linear(rng, d, mult * d)
        self.fc2 = Linear(rng, mult * d, d, zero=zero_out)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class AttentionParams(Module):
    """Q/K/V/output projections of one attention layer.

    ``w_q`` may be a Linear shared with other AttentionParams (the same
    object), which is how shared query projections are expressed.
    """

    def __init__(self, rng, d_in, d_att, n_heads=4, d_kv=None, d_out=None,
                 w_q=None, zero_out=False):
        if d_att % n_heads:
            raise ShapeError(f"d_att={d_att} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.w_q = w_q if w_q is not None else Linear(rng, d_in, d_att)
        # no key bias: softmax is invariant to it, so it would never receive a gradient
        self.w_k = Linear(rng, d_kv or d_in, d_att, bias=False)
        self.w_v = Linear(rng, d_kv or d_in, d_att)
        self.w_out = Linear(rng, d_att, d_out or d_att, zero=zero_out)

    def named_parameters(self, prefix="", include_query=True):
        for name, p in super().named_parameters(prefix):
            if include_query or not name.startswith(prefix + "w_q."):
                yield name, p

    def kv_attend(self, q_proj, kv_src, return_weights=False, key_mask=None):
        """Attention with an already-projected query (used for shared queries)."""
        k = self.w_k(kv_src)
        v = self.w_v(kv_src)
        if return_weights:
            o, w = attend(q_proj, k, v, self.n_heads, return_weights=True, key_mask=key_mask)
            return self.w_out(o), w
        return self.w_out(attend(q_proj, k, v, self.n_heads, key_mask=key_mask))


def scaled_dot_attention(q: Tensor, kv_src: Tensor, p: AttentionParams, key_mask=None) -> Tensor:
    """Cross-attention of ``q`` over ``kv_src``; self-attention when q is kv_src."""
    return p.kv_attend(p.w_q(q), kv_src, key_mask=key_mask)


class SharedQueryAttention(AttentionParams):
    """AttentionParams whose query projection is owned elsewhere."""

    def named_parameters(self, prefix="", include_query=False):
        return super().named_parameters(prefix, include_query=include_query)


# -- gradient checking -------------------------------------------------------------

@dataclass
class CheckReport:
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __iter__(self):
        return iter(self.errors.items())


def _probe_indices(a, max_entries):
    n = a.size
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    picks = np.linspace(0, n - 1, max_entries - 1).astype(np.int64)
    return np.unique(np.append(picks, np.argmax(np.abs(a).reshape(-1))))


def grad_check(f, params, h=1e-5, names=None, max_entries=None) -> CheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    Per parameter the reported error is
    max|analytic - fd| / max(max|analytic|, max|fd|, 1e-8), taken over all
    entries or, with ``max_entries``, over evenly spaced entries plus the one
    with the largest analytic gradient.
    """
    report = CheckReport()
    if not params:
        return report
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    with no_grad():
        for name, p, a in zip(names, params, analytic):
            idx = _probe_indices(a, max_entries)
            flat = p.data.reshape(-1)
            fd = np.zeros(len(idx))
            for k, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(f().data)
                flat[i] = old - h
                fm = float(f().data)
                flat[i] = old
                fd[k] = (fp - fm) / (2 * h)
            a = a.reshape(-1)[idx]
            denom = max(np.abs(a).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-8)
            report.errors[name] = float(np.abs(a - fd).max(initial=0.0) / denom)
    for p in params:
        p.grad = None
    return report
