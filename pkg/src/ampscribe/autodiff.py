"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operations the tone encoder and the transcription transformer
need: strict-shape elementwise ops (no silent broadcasting; bias adds and
axis expansion are explicit), batched matmul, softmax/layer-norm/attention
building blocks, same-padded conv2d, BCE, Adam, and a central-difference
gradient checker.

Tensors carry whatever float dtype they are built with; float64 is the
default and is what every gradient check runs in. A single training thread
owns a graph; BLAS may parallelize inside a matmul.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- properties -------------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g):
        # first contribution keeps a reference (grads are never mutated in
        # place anywhere); later fan-out contributions add out of place
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Reverse pass; gradients accumulate additively across fan-out.

        Non-leaf grads are freed as soon as their node has propagated.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node.grad = None  # keep grads only on leaves
                node._backward = None
                node._parents = ()


def _result(data, parents, backward):
    """Wrap an op result; builds graph edges only when some parent needs them."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _result(x.data * c, (x,), backward)


def add_bias(x, b) -> Tensor:
    """x + b where b matches the trailing dims of x (bias / positional adds)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeMismatch(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=lead) if lead else g)

    return _result(x.data + b.data, (x, b), backward)


def expand(x, axis: int, n: int) -> Tensor:
    """Repeat a size-1 axis n times (explicit broadcast)."""
    x = _as_tensor(x)
    if x.shape[axis] != 1:
        raise ShapeMismatch(f"expand: axis {axis} of {x.shape} must have size 1")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=axis, keepdims=True))

    return _result(np.repeat(x.data, n, axis=axis), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))

    return _result(x.data.reshape(shape), (x,), backward)


def permute(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in ax]))

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.full(shape, 1.0 / count, dtype=x.data.dtype) * g)
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, shape) / count)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """a [..., m, k] @ b: b may be 2-D shared weights or match a's batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul requires at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(gb)

    return _result(out, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            d = g - (g * s).sum(axis=axis, keepdims=True)
            d *= s
            x._accumulate(d)

    return _result(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), backward)


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance along `axis` (eps inside the sqrt), then affine.

    gain and bias are 1-D of length x.shape[axis].
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    dim = x.shape[axis]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeMismatch(f"layer_norm: gain/bias must be ({dim},)")
    xm = np.moveaxis(x.data, axis, -1)
    mu = xm.mean(axis=-1, keepdims=True)
    xhat = xm - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = np.moveaxis(xhat * gain.data + bias.data, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        if gain.requires_grad:
            gain._accumulate((gm * xhat).reshape(-1, dim).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(gm.reshape(-1, dim).sum(axis=0))
        if x.requires_grad:
            dxhat = gm * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x._accumulate(np.moveaxis(dx, -1, axis))

    return _result(out, (x, gain, bias), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=axis, keepdims=True)
            x._accumulate(g / norm - x.data * (dot / norm**3))

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# Convolution / pooling
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None) -> Tensor:
    """Same-padded stride-1 conv: x [B,Cin,H,W] (or [Cin,H,W]), w [Cout,Cin,K,K]."""
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: got x {x.shape}, w {w.shape}")
    bsz, cin, h, wd = xd.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"conv2d: w {w.shape} incompatible with x {x.shape} (odd square kernel)")
    k, pad = kh, kh // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz, h, wd, cin * k * k
    )
    wmat = w.data.reshape(cout, -1).T
    out = cols @ wmat
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias must be ({cout},)")
        out = out + b.data
    out = out.transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gt = np.ascontiguousarray(gd.transpose(0, 2, 3, 1))
        if w.requires_grad:
            gw = cols.reshape(-1, cin * k * k).T @ gt.reshape(-1, cout)
            w._accumulate(gw.T.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gt.reshape(-1, cout).sum(axis=0))
        if x.requires_grad:
            dcols = (gt @ wmat.T).reshape(bsz, h, wd, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            dx = dxp[:, :, pad : pad + h, pad : pad + wd]
            x._accumulate(dx[0] if squeeze else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols that do not fill
    a window are dropped."""
    x = _as_tensor(x)
    *lead, h, w = x.shape
    h2, w2 = h // k, w // k
    trimmed = x.data[..., : h2 * k, : w2 * k]
    pooled = trimmed.reshape(*lead, h2, k, w2, k).mean(axis=(-3, -1))

    def backward(g):
        if not x.requires_grad:
            return
        gg = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        full = np.zeros_like(x.data)
        full[..., : h2 * k, : w2 * k] = gg
        x._accumulate(full)

    return _result(pooled, (x,), backward)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float64, bias: bool = True):
        self.w = glorot(rng, d_in, d_out, (d_in, d_out), dtype)
        self.b = zeros_param((d_out,), dtype) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.w)
        return add_bias(y, self.b) if self.b is not None else y

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class MultiHeadAttention:
    """Scaled dot-product attention with per-head splits and output projection.

    Accepts [L, F] or [B, L, F] inputs; self-attention is the q=k=v case,
    cross-attention the q!=k case.
    """

    def __init__(self, rng, dim: int, heads: int, dtype=np.float64):
        if dim % heads:
            raise ShapeMismatch(f"feature dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, dtype)
        # no key bias: softmax cancels a uniform score shift, so it would be
        # a structurally zero-gradient parameter
        self.wk = Linear(rng, dim, dim, dtype, bias=False)
        self.wv = Linear(rng, dim, dim, dtype)
        self.wo = Linear(rng, dim, dim, dtype)

    def _split(self, x, bsz, length):
        return permute(reshape(x, (bsz, length, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q, k, v) -> Tensor:
        q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
        squeeze = q.ndim == 2
        if squeeze:
            q = reshape(q, (1,) + q.shape)
            k = reshape(k, (1,) + k.shape)
            v = reshape(v, (1,) + v.shape)
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ShapeMismatch(f"attention dim {self.dim}, got {q.shape}/{k.shape}/{v.shape}")
        if k.shape[1] != v.shape[1]:
            raise ShapeMismatch("key/value lengths differ")
        bsz, lq = q.shape[0], q.shape[1]
        lk = k.shape[1]
        # scale the (smaller) query tensor rather than the score matrix
        qh = scale(self._split(self.wq(q), bsz, lq), 1.0 / math.sqrt(self.head_dim))
        kh = self._split(self.wk(k), bsz, lk)
        vh = self._split(self.wv(v), bsz, lk)
        scores = matmul(qh, permute(kh, (0, 1, 3, 2)))
        attended = matmul(softmax(scores, axis=-1), vh)
        merged = reshape(permute(attended, (0, 2, 1, 3)), (bsz, lq, self.dim))
        out = self.wo(merged)
        return reshape(out, out.shape[1:]) if squeeze else out

    def params(self, prefix: str) -> dict:
        out = {}
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


def multi_head_attention(q, k, v, attn: MultiHeadAttention) -> Tensor:
    return attn(q, k, v)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7


def binary_cross_entropy(pred, target) -> Tensor:
    """Mean of -[t log p + (1-t) log(1-p)], p clamped to [1e-7, 1-1e-7]."""
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tgt.shape:
        raise ShapeMismatch(f"bce: pred {pred.shape} vs target {tgt.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(tgt * np.log(p) + (1.0 - tgt) * np.log1p(-p)).mean()

    def backward(g):
        if pred.requires_grad:
            inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)
            dp = (p - tgt) / (p * (1.0 - p)) / p.size
            pred._accumulate(g * dp * inside)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment estimates, shaped like their parameters."""

    def __init__(self, shapes_like, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in shapes_like]
        self.v = [np.zeros_like(p) for p in shapes_like]
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state: AdamState, params, grads, lr_scale: float = 1.0):
    """In-place bias-corrected Adam update on raw arrays."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = state.lr * lr_scale
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ShapeMismatch(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Tensor-facing Adam over a {name: Tensor} parameter dict."""

    def __init__(self, params: dict, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.state = AdamState([p.data for p in self.params], lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0):
        adam_step(
            self.state,
            [p.data for p in self.params],
            [p.grad for p in self.params],
            lr_scale,
        )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn,
    params,
    eps: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    denom_floor: float = 1e-8,
):
    """Max relative error between analytic and central-difference gradients:
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor).

    `loss_fn()` must rebuild the graph from the given parameter Tensors on
    every call; tensors larger than `max_coords` are spot-checked on a
    seeded coordinate subset.

    The central difference carries ~ulp(|loss|)/(2 eps) of rounding noise
    (~2e-10 for an O(1) double-precision loss), so coordinates whose true
    gradient sits below that are unmeasurable; callers checking whole models
    can raise `denom_floor` toward the noise scale to keep the metric
    meaningful there while leaving every measurable coordinate strict.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = loss_fn().item()
            flat[idx] = orig - eps
            lo = loss_fn().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(ga.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Parameter initializers
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float64):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float64, value: float = 0.0):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def normal_param(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64):
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)
