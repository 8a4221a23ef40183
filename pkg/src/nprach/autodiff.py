"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float32 (or float64, for high-precision test oracles) numpy
arrays and record backward closures; calling backward() on a scalar loss
accumulates gradients into every upstream tensor. The operator set is
exactly what the synchronizer model needs: affine maps, a kernel-3
depthwise separable convolution along the leading axis, relu/sigmoid,
elementwise add, gathers along hopping patterns, shape moves, and the two
loss terms. Explicit reductions accumulate in float64 before casting back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    # order="C" keeps 0-d scalars 0-d (ascontiguousarray would make them 1-d)
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """A node in the computation graph: data plus gradient plumbing."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse sweep from a scalar: fills .grad of upstream tensors."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", dtype=None, trainable: bool = True):
        super().__init__(data, dtype)
        self.name = name
        self.trainable = trainable


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS, reversed: consumers before producers
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    order.reverse()
    return order


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False):
    # fresh=True promises g is a newly allocated array no other tensor owns
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _sum64(arr: np.ndarray, axis, dtype) -> np.ndarray:
    return arr.sum(axis=axis, dtype=np.float64).astype(dtype)


# --- operators ---------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    din, dout = w.shape
    x2 = x.data.reshape(-1, din)
    out_data = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (dout,))
    out = Tensor(out_data, _parents=(x, w, b))

    def backward(g):
        g2 = g.reshape(-1, dout)
        _accum(w, x2.T @ g2, fresh=True)
        _accum(b, _sum64(g2, 0, b.dtype), fresh=True)
        _accum(x, (g2 @ w.data.T).reshape(x.shape), fresh=True)

    out._backward = backward
    return out


def depthwise_separable_conv1d(x: Tensor, dw: Tensor, pw: Tensor, b: Tensor) -> Tensor:
    """Kernel-3 depthwise + pointwise convolution along axis 0.

    x is [L, ..., C_in] (any middle axes); dw is [3, C_in] with zero
    padding at both ends of axis 0; pw is [C_in, C_out]; b is [C_out].

    y[n] = [x[n-1], x[n], x[n+1]] W3 + b with W3[t] = (dw[t] 1^T) o pw, so
    the whole layer is one [L*M, 3*C_in] x [3*C_in, C_out] matmul per pass
    and stays inside BLAS instead of looping over taps.
    """
    if dw.shape[0] != 3:
        raise ValueError("only kernel size 3 is supported")
    length = x.shape[0]
    cin, cout = pw.shape
    pad = np.zeros((1,) + x.shape[1:], dtype=x.dtype.type)
    xp = np.concatenate([pad, x.data, pad], axis=0)
    rows = length * (x.data.size // (length * cin))
    x3 = np.empty((rows, 3 * cin), dtype=x.dtype.type)
    for t in range(3):
        x3[:, t * cin:(t + 1) * cin] = xp[t:t + length].reshape(rows, cin)
    w3 = (dw.data[:, :, None] * pw.data[None, :, :]).reshape(3 * cin, cout)
    out2 = x3 @ w3
    out2 += b.data
    out = Tensor(out2.reshape(x.shape[:-1] + (cout,)), _parents=(x, dw, pw, b))

    def backward(g):
        g2 = g.reshape(-1, cout)
        _accum(b, _sum64(g2, 0, b.dtype), fresh=True)
        g3 = (x3.T @ g2).reshape(3, cin, cout)
        # dpw = sum_t dw[t] 1^T o G_t; ddw[t] = rowsum(pw o G_t)
        _accum(pw, np.einsum("tc,tcd->cd", dw.data, g3), fresh=True)
        _accum(dw, np.einsum("cd,tcd->tc", pw.data, g3), fresh=True)
        dx3 = g2 @ w3.T
        gxp = np.zeros_like(xp)
        for t in range(3):
            gxp[t:t + length] += dx3[:, t * cin:(t + 1) * cin].reshape(
                (length,) + xp.shape[1:])
        _accum(x, gxp[1:length + 1], fresh=True)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))

    def backward(g):
        _accum(x, g * (x.data > 0), fresh=True)

    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    # keep outputs strictly inside (0, 1) even where float rounding would
    # saturate, so downstream logs always see a nonzero argument
    info = np.finfo(out_data.dtype)
    np.clip(out_data, info.tiny, 1.0 - info.epsneg, out=out_data)
    out = Tensor(out_data, _parents=(x,))

    def backward(g):
        _accum(x, g * out_data * (1.0 - out_data), fresh=True)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (skip connections, loss sums)."""
    if a.shape != b.shape:
        raise ValueError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = backward
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), _parents=(x,))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)), fresh=True)

    out._backward = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,))

    def backward(g):
        _accum(x, g.reshape(x.shape))

    out._backward = backward
    return out


def gather_rows(x: Tensor, pattern: np.ndarray) -> Tensor:
    """Pick one subcarrier row per SG: out[m, ...] = x[pattern[m], m, ...]."""
    pattern = np.asarray(pattern)
    s = x.shape[1]
    if pattern.shape != (s,):
        raise ValueError(f"pattern must have shape ({s},)")
    cols = np.arange(s)
    out = Tensor(x.data[pattern, cols], _parents=(x,))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[pattern, cols] = g   # one cell per SG, no collisions
        _accum(x, gx, fresh=True)

    out._backward = backward
    return out


def gather_patterns(x: Tensor, patterns: np.ndarray) -> Tensor:
    """Gather every pattern at once: out[k, m, ...] = x[patterns[k, m], m, ...]."""
    patterns = np.asarray(patterns)
    n_rows, s = x.shape[0], x.shape[1]
    if patterns.ndim != 2 or patterns.shape[1] != s:
        raise ValueError(f"patterns must be [n_patterns, {s}]")
    cols = np.arange(s)[None, :]
    out = Tensor(x.data[patterns, cols], _parents=(x,))

    # orthogonal pattern sets make each column a permutation, so the
    # scatter in the backward pass is collision-free and vectorizes
    perm_cols = (patterns.shape[0] == n_rows
                 and all(len(np.unique(patterns[:, m])) == n_rows for m in range(s)))

    def backward(g):
        gx = np.zeros_like(x.data)
        if perm_cols:
            inv = np.argsort(patterns, axis=0)          # [n_rows, S]
            gx[:] = g[inv, cols]
        else:
            np.add.at(gx, (patterns, cols), g)
        _accum(x, gx, fresh=True)

    out._backward = backward
    return out


def bce_loss(probs: Tensor, targets: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Binary cross-entropy, clamped, normalized by the batch (last) axis.

    L = -(1/B) sum_{k,b} [t ln p + (1-t) ln(1-p)], p clipped to
    [clamp, 1-clamp] so ln never sees 0.
    """
    t = np.asarray(targets, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ValueError("targets must match probs shape")
    batch = probs.shape[-1] if probs.data.ndim else 1
    p = np.clip(probs.data, clamp, 1.0 - clamp)
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum(dtype=np.float64) / batch
    out = Tensor(np.asarray(val, dtype=probs.dtype), _parents=(probs,))

    def backward(g):
        inside = (probs.data > clamp) & (probs.data < 1.0 - clamp)
        gp = (-(t / p) + (1.0 - t) / (1.0 - p)) * inside / batch
        _accum(probs, (g * gp).astype(probs.dtype, copy=False), fresh=True)

    out._backward = backward
    return out


def weighted_sq_loss(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """Weighted squared error, normalized by the batch (last) axis:
    L = (1/B) sum w * (pred - target)^2."""
    t = np.asarray(target, dtype=pred.dtype)
    w = np.asarray(weight, dtype=pred.dtype)
    if t.shape != pred.shape or w.shape != pred.shape:
        raise ValueError("target and weight must match pred shape")
    batch = pred.shape[-1] if pred.data.ndim else 1
    diff = pred.data - t
    val = (w * diff * diff).sum(dtype=np.float64) / batch
    out = Tensor(np.asarray(val, dtype=pred.dtype), _parents=(pred,))

    def backward(g):
        _accum(pred, (g * 2.0 * w * diff / batch).astype(pred.dtype, copy=False),
               fresh=True)

    out._backward = backward
    return out


# --- optimizer ---------------------------------------------------------------

class Adam:
    """Adam with bias correction; grads are consumed and zeroed by step()."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                p.grad = None
                continue
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.grad = None


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(fn, params: list[Parameter], h: float = 1e-3, tol: float = 1e-3,
               max_entries_per_param: int | None = None,
               seed: int = 0, denom_floor: float = 0.1) -> GradCheckReport:
    """Compare reverse-mode gradients of fn() against central differences.

    fn must rebuild its graph on every call (closing over params) and
    return a scalar Tensor. Relative error uses
    |ad - fd| / max(|ad|, |fd|, denom_floor); the floor turns the test
    into an absolute comparison for near-zero gradient entries, where
    float32 central differences are pure roundoff.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [np.array(p.grad, dtype=np.float64) if p.grad is not None
                else np.zeros(p.shape) for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, tol=tol, n_checked=0)
    for p, a in zip(params, analytic):
        if not p.data.flags.c_contiguous:
            raise ValueError("grad_check needs contiguous parameter data "
                             "(reshape(-1) must be a view)")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            lp = float(fn().data)
            flat[i] = keep - h
            lm = float(fn().data)
            flat[i] = keep
            fd = (lp - lm) / (2.0 * h)
            ad = a.reshape(-1)[i]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), denom_floor)
            worst = max(worst, rel)
        name = getattr(p, "name", "") or f"param{params.index(p)}"
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        report.n_checked += len(idx)
    return report
