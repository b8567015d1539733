"""Minimal reverse-mode autodiff over numpy arrays.

A Var wraps an ndarray and remembers how it was made; backward() walks
the tape in reverse topological order accumulating gradients. Only the
operations this project needs exist: 3x3 same-padding convolution,
rectifier, 2x pooling/upsampling, global average pooling, a vector
affine head, gathers, a masked log-softmax, and elementwise/reduction
arithmetic. Gradients are exact (verified against central finite
differences in the test suite), deterministic, and dtype-preserving:
feed float64 leaves for gradient checking, float32 for training.

Raw forward kernels (conv3x3_raw etc.) are shared with the gradient-free
inference paths so there is exactly one implementation of the math.
"""

from __future__ import annotations

import numpy as np

MASK_FILL = -1e9


class Var:
    """Tape node. `needs_grad` prunes gradient work for constants."""

    __slots__ = ("data", "grad", "parents", "bw", "needs_grad")

    def __init__(self, data, parents=(), bw=None, needs_grad=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.bw = bw
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def value(self):
        return self.data


def leaf(data, needs_grad=False):
    return Var(np.asarray(data), needs_grad=needs_grad)


def param(data):
    return Var(np.asarray(data), needs_grad=True)


def _accum(var, grad):
    if not var.needs_grad:
        return
    if var.grad is None:
        var.grad = grad.astype(var.data.dtype, copy=True)
    else:
        var.grad += grad


def backward(root):
    """Backprop from a scalar root; fills .grad on every needs_grad Var."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.bw is not None and node.grad is not None:
            node.bw(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    out = Var(a.data + b.data, (a, b))
    def bw(g):
        _accum(a, g)
        _accum(b, g)
    out.bw = bw
    return out


def sub(a, b):
    out = Var(a.data - b.data, (a, b))
    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    out.bw = bw
    return out


def mul(a, b):
    out = Var(a.data * b.data, (a, b))
    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    out.bw = bw
    return out


def add_const(a, c):
    out = Var(a.data + c, (a,))
    out.bw = lambda g: _accum(a, g)
    return out


def mul_const(a, c):
    out = Var(a.data * c, (a,))
    out.bw = lambda g: _accum(a, g * c)
    return out


def square(a):
    out = Var(a.data * a.data, (a,))
    out.bw = lambda g: _accum(a, g * (2.0 * a.data))
    return out


def exp(a):
    e = np.exp(a.data)
    out = Var(e, (a,))
    out.bw = lambda g: _accum(a, g * e)
    return out


def relu(a):
    pos = a.data > 0
    out = Var(np.where(pos, a.data, 0.0).astype(a.dtype), (a,))
    out.bw = lambda g: _accum(a, g * pos)
    return out


def minimum(a, b):
    take_a = a.data <= b.data
    out = Var(np.where(take_a, a.data, b.data), (a, b))
    def bw(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)
    out.bw = bw
    return out


def clip(a, lo, hi):
    inside = (a.data > lo) & (a.data < hi)
    out = Var(np.clip(a.data, lo, hi), (a,))
    out.bw = lambda g: _accum(a, g * inside)
    return out


def mean(a):
    out = Var(np.asarray(a.data.mean(), dtype=a.dtype), (a,))
    n = a.data.size
    out.bw = lambda g: _accum(a, np.full_like(a.data, g / n))
    return out


def reshape(a, shape):
    out = Var(a.data.reshape(shape), (a,))
    out.bw = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def gather(a, idx):
    """Pick one entry per row: a (B, N), idx (B,) -> (B,)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Var(a.data[rows, idx], (a,))
    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)
    out.bw = bw
    return out


# ---------------------------------------------------------------------------
# convolution and friends


def conv3x3_raw(x, w, b):
    """3x3 stride-1 same-padding convolution, channels-last.

    x: (B, H, W, Ci), w: (3, 3, Ci, Co), b: (Co,) -> (B, H, W, Co).
    Implemented as nine shifted matmuls; no im2col buffer.
    """
    B, H, W, Ci = x.shape
    Co = w.shape[3]
    pad = np.zeros((B, H + 2, W + 2, Ci), dtype=x.dtype)
    pad[:, 1:-1, 1:-1, :] = x
    out = np.empty((B, H, W, Co), dtype=x.dtype)
    out[:] = b
    for dy in range(3):
        for dx in range(3):
            seg = pad[:, dy : dy + H, dx : dx + W, :].reshape(-1, Ci)
            out += (seg @ w[dy, dx]).reshape(B, H, W, Co)
    return out


def conv3x3_grads(x, w, g, need_dx):
    """Gradients of conv3x3_raw: returns (dx or None, dw, db)."""
    B, H, W, Ci = x.shape
    Co = w.shape[3]
    gflat = g.reshape(-1, Co)
    db = gflat.sum(axis=0)
    pad = np.zeros((B, H + 2, W + 2, Ci), dtype=x.dtype)
    pad[:, 1:-1, 1:-1, :] = x
    dw = np.empty_like(w)
    for dy in range(3):
        for dx in range(3):
            seg = pad[:, dy : dy + H, dx : dx + W, :].reshape(-1, Ci)
            dw[dy, dx] = seg.T @ gflat
    dx_out = None
    if need_dx:
        dpad = np.zeros((B, H + 2, W + 2, Ci), dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                dpad[:, dy : dy + H, dx : dx + W, :] += (gflat @ w[dy, dx].T).reshape(
                    B, H, W, Ci
                )
        dx_out = dpad[:, 1:-1, 1:-1, :]
    return dx_out, dw, db


def conv3x3(x, w, b):
    out = Var(conv3x3_raw(x.data, w.data, b.data), (x, w, b))
    def bw(g):
        dx, dw, db = conv3x3_grads(x.data, w.data, g, x.needs_grad)
        if dx is not None:
            _accum(x, dx)
        _accum(w, dw)
        _accum(b, db)
    out.bw = bw
    return out


def avg_pool2_raw(x):
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def avg_pool2(x):
    out = Var(avg_pool2_raw(x.data), (x,))
    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _accum(x, up.astype(x.dtype))
    out.bw = bw
    return out


def upsample2_raw(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2(x):
    out = Var(upsample2_raw(x.data), (x,))
    def bw(g):
        B, H, W, C = g.shape
        _accum(x, g.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4)))
    out.bw = bw
    return out


def global_mean_pool(x):
    """(B, H, W, C) -> (B, C)."""
    B, H, W, C = x.shape
    out = Var(x.data.mean(axis=(1, 2)), (x,))
    def bw(g):
        _accum(x, np.broadcast_to(g[:, None, None, :] / (H * W), x.data.shape))
    out.bw = bw
    return out


def affine_vec(x, w, b):
    """(B, C) @ (C,) + b -> (B,). The scalar head."""
    out = Var(x.data @ w.data + b.data, (x, w, b))
    def bw(g):
        if x.needs_grad:
            _accum(x, np.outer(g, w.data))
        _accum(w, g @ x.data)
        _accum(b, np.asarray(g.sum(), dtype=b.dtype))
    out.bw = bw
    return out


# ---------------------------------------------------------------------------
# masked categorical pieces


def masked_log_softmax_raw(logits, mask):
    z = np.where(mask, logits, np.asarray(MASK_FILL, dtype=logits.dtype))
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    e[~mask] = 0.0
    total = e.sum(axis=-1, keepdims=True)
    logp = z - (zmax + np.log(total))
    probs = e / total
    return logp, probs


def masked_log_softmax(logits, mask):
    """Row-wise log softmax over valid entries only.

    logits: Var (B, N); mask: bool ndarray (B, N). Masked entries get
    log-probability log(0) in value terms (a huge negative number via
    the fill) and exactly zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    logp, probs = masked_log_softmax_raw(logits.data, mask)
    out = Var(logp, (logits,))
    def bw(g):
        gm = np.where(mask, g, 0.0)
        rowsum = gm.sum(axis=-1, keepdims=True)
        _accum(logits, (gm - probs * rowsum).astype(logits.dtype))
    out.bw = bw
    return out


def masked_entropy(logp, mask):
    """Shannon entropy per row from log-probabilities: -sum p*logp over
    the valid set. logp: Var (B, N); returns Var (B,)."""
    mask = np.asarray(mask, dtype=bool)
    p = np.where(mask, np.exp(logp.data), 0.0)
    plogp = np.where(mask, p * logp.data, 0.0)
    out = Var(-plogp.sum(axis=-1), (logp,))
    def bw(g):
        # d(-sum p logp)/dlogp_k = -(p_k logp_k + p_k) on valid entries
        grad = -np.where(mask, p * (logp.data + 1.0), 0.0)
        _accum(logp, (g[:, None] * grad).astype(logp.dtype))
    out.bw = bw
    return out
