"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors wrap ndarrays and record a backward closure per op. Gradients are
accumulated by walking the graph in reverse topological order. Ops keep the
dtype of their inputs, so float64 graphs (used by gradient checks) and
float32 graphs (normal training) run through identical code.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}, name={self.name})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward_fn) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad or p.parents)
    if tracked:
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def backward(root: Tensor, seed_grad=None) -> None:
    """Accumulate gradients of ``root`` into every reachable tensor."""
    topo: list[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.accumulate(np.ones_like(root.data) if seed_grad is None else seed_grad)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] > 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        if a.requires_grad or a.parents:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        if a.requires_grad or a.parents:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        if a.requires_grad or a.parents:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a.accumulate(g * s)

    return _make(a.data * s, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def back(g):
        if a.requires_grad or a.parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b.parents:
            if b.data.ndim == 2 and g.ndim > 2:
                # batched activations against a shared 2D weight
                gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                b.accumulate(gb)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def back(g):
        a.accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def narrow(a, start: int, stop: int) -> Tensor:
    """Slice along the first axis."""
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate(full)

    return _make(a.data[start:stop], (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t.parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(s, e)
                t.accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), back)


def gather(a, idx) -> Tensor:
    """Index along the first axis (duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return _make(a.data[idx], (a,), back)


def permute_rows(a, perm) -> Tensor:
    """Reorder rows by a bijective permutation (faster backward than gather)."""
    a = as_tensor(a)
    perm = np.asarray(perm)

    def back(g):
        full = np.empty_like(a.data)
        full[perm] = g
        a.accumulate(full)

    return _make(a.data[perm], (a,), back)


def sum_axis(a, axis, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), back)


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a.accumulate(np.full_like(a.data, g))

    return _make(a.data.sum(), (a,), back)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_axis0(a, keepdims=True) -> Tensor:
    a = as_tensor(a)
    return scale(sum_axis(a, 0, keepdims=keepdims), 1.0 / a.data.shape[0])


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out_data = a.data * phi

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a.accumulate(g * (phi + a.data * pdf))

    return _make(out_data, (a,), back)


def softmax_last(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate(y * (g - inner))

    return _make(y, (a,), back)


def logsumexp_last(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(s)).squeeze(-1)

    def back(g):
        a.accumulate(np.expand_dims(g, -1) * (e / s))

    return _make(out_data, (a,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def back(g):
        if x.requires_grad or x.parents:
            gh = g * gamma.data
            t1 = gh.mean(axis=-1, keepdims=True)
            t2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gh - t1 - xhat * t2))
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, n).sum(axis=0))

    return _make(out_data, (x, gamma, beta), back)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    a = as_tensor(a)
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    denom = np.maximum(norm, eps)
    y = a.data / denom

    def back(g):
        free = (norm > eps).astype(a.data.dtype)
        inner = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate(g / denom - free * y * inner / denom)

    return _make(y, (a,), back)


def segment_mean(a, seg_ids: np.ndarray, n_segments: int) -> Tensor:
    """Mean of rows grouped by segment id; every segment must be non-empty."""
    a = as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=n_segments).astype(a.data.dtype)
    if (counts == 0).any():
        raise ValueError("segment_mean requires non-empty segments")
    sums = np.zeros((n_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(sums, seg_ids, a.data)
    out_data = sums / counts[:, None]

    def back(g):
        a.accumulate((g / counts[:, None])[seg_ids])

    return _make(out_data, (a,), back)


def indexed_mean(a, targets: np.ndarray, sources: np.ndarray, counts: np.ndarray, n_out: int) -> Tensor:
    """Sparse row averaging: out[t] = mean over pairs (t, s) of a[s].

    ``counts[t]`` must equal the number of pairs with target t (> 0 for all).
    Used for the voxel-neighborhood feature averaging.
    """
    a = as_tensor(a)
    counts = counts.astype(a.data.dtype)
    sums = np.zeros((n_out,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(sums, targets, a.data[sources])
    out_data = sums / counts[:, None]

    def back(g):
        scaled = g / counts[:, None]
        full = np.zeros_like(a.data)
        np.add.at(full, sources, scaled[targets])
        a.accumulate(full)

    return _make(out_data, (a,), back)


def linear(x, w, b=None) -> Tensor:
    """Fused x @ w.T + b with w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    out_data = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        out_data += b.data
    n_in = x.data.shape[-1]
    n_out = w.data.shape[0]

    def back(g):
        if x.requires_grad or x.parents:
            x.accumulate(g @ w.data)
        if w.requires_grad or w.parents:
            w.accumulate(g.reshape(-1, n_out).T @ x.data.reshape(-1, n_in))
        if b is not None and (b.requires_grad or b.parents):
            b.accumulate(g.reshape(-1, n_out).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, back)


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))
