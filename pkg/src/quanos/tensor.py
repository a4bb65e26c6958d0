"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything is numpy under the hood. A forward pass records a graph of
Tensor nodes; ``Tensor.backward()`` walks it once in reverse topological
order and accumulates gradients on every reachable leaf, including input
tensors (needed for gradient-sign attacks, not just parameter updates).

float32 is the working precision; pass float64 data to run the whole
graph in 64-bit (the gradient-check suites do).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class GraphStateError(RuntimeError):
    """Backward called on a non-scalar or on an already-consumed graph."""


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if a.dtype not in (np.float32, np.float64):
        return a.astype(np.float32)
    return a


class Tensor:
    """N-dimensional array node in a dynamically built compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- backward pass --------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every leaf reachable from this scalar.

        The recorded graph is single-use: a second backward without a new
        forward pass raises GraphStateError.
        """
        if self.data.size != 1:
            raise GraphStateError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise GraphStateError("graph already consumed by a previous backward; rerun the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._consumed = True
                if node is not self:
                    node.grad = None  # interior grads are transient
        self._consumed = True

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data + other.data

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data * other.data

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * np.asarray(-1.0, dtype=self.dtype)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype)) * -1.0)

    def sum(self) -> "Tensor":
        out_data = self.data.sum(dtype=self.dtype).reshape(())

        def backward(g):
            self._accumulate(np.broadcast_to(g, self.data.shape).astype(self.dtype))

        return Tensor._node(out_data, (self,), backward)

    def mean(self) -> "Tensor":
        return self.sum() * np.asarray(1.0 / self.data.size, dtype=self.dtype)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(old))

        return Tensor._node(out_data, (self,), backward)

    def flatten2d(self) -> "Tensor":
        """Collapse all trailing axes into features: (B, ...) -> (B, F)."""
        return self.reshape(self.data.shape[0], -1)


def _unbroadcast(g, shape):
    """Sum gradient g down to ``shape`` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- layer operations ----------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map y = x @ W.T + b with x:(B,F), W:(C,F), b:(C)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d operands, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"dense inner dims disagree: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"dense bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        bias._accumulate(g.sum(axis=0))

    return Tensor._node(out_data, (x, weight, bias), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-d cross-correlation, NCHW layout.

    x: (B, I, N, N), kernel: (O, I, k, k), bias: (O,). Output spatial size
    M = floor((N + 2*padding - k) / stride) + 1.
    """
    B, I, H, W = x.data.shape
    O, Ik, kh, kw = kernel.data.shape
    if Ik != I:
        raise ShapeError(f"conv2d channels disagree: input has {I}, kernel expects {Ik}")
    if bias.data.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({O},)")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    s, p = int(stride), int(padding)
    Mh = (H + 2 * p - kh) // s + 1
    Mw = (W + 2 * p - kw) // s + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # windows: (B, I, Mh, Mw, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out_data = np.einsum("bimnuv,oiuv->bomn", win, kernel.data, optimize=True)
    out_data += bias.data[None, :, None, None]

    def backward(g):
        kernel._accumulate(np.einsum("bomn,bimnuv->oiuv", g, win, optimize=True))
        bias._accumulate(g.sum(axis=(0, 2, 3)))
        gpad = np.zeros_like(padded)
        for u in range(kh):
            for v in range(kw):
                gpad[:, :, u : u + s * Mh : s, v : v + s * Mw : s] += np.einsum(
                    "bomn,oi->bimn", g, kernel.data[:, :, u, v], optimize=True
                )
        x._accumulate(gpad[:, :, p : p + H, p : p + W] if p else gpad)

    return Tensor._node(out_data, (x, kernel, bias), backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out_data = np.where(mask, x.data, np.asarray(0, dtype=x.dtype))

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._node(out_data, (x,), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    B, C, H, W = x.data.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2 needs spatial extents >= 2, got {H}x{W}")
    cropped = x.data[:, :, : Ho * 2, : Wo * 2]
    blocks = cropped.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : Ho * 2, : Wo * 2] = (
            gb.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * 2, Wo * 2)
        )
        x._accumulate(gx)

    return Tensor._node(out_data, (x,), backward)


def avg_pool(x: Tensor) -> Tensor:
    """Global average pooling over the spatial axes: (B,C,H,W) -> (B,C,1,1)."""
    B, C, H, W = x.data.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        x._accumulate(np.broadcast_to(g / (H * W), x.data.shape).astype(x.dtype))

    return Tensor._node(out_data, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W) for NCHW input.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (EMA, unbiased variance). Eval mode is a fixed affine
    transform using the running buffers, which keeps attack-time forward
    passes from polluting statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got shape {x.data.shape}")
    B, C, H, W = x.data.shape
    axes = (0, 2, 3)
    n = B * H * W

    if training:
        if B < 2:
            raise ShapeError("batch_norm in training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            # standard batch-norm input gradient with batch statistics
            t1 = gxhat.sum(axis=axes, keepdims=True)
            t2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std[None, :, None, None] / n) * (n * gxhat - t1 - xhat * t2)
            x._accumulate(gx.astype(x.dtype))
        else:
            x._accumulate(gxhat * inv_std[None, :, None, None])

    return Tensor._node(out_data, (x, gamma, beta), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer class labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, C) logits, got {logits.data.shape}")
    B, C = logits.data.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    loss = -log_probs[np.arange(B), labels].mean(dtype=z.dtype)
    probs = ez / sez

    def backward(g):
        gz = probs.copy()
        gz[np.arange(B), labels] -= 1.0
        logits._accumulate(gz * (g / B))

    return Tensor._node(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), backward)


def straight_through(x: Tensor, forward_fn) -> Tensor:
    """Apply ``forward_fn`` to the values while the gradient passes unchanged."""
    out_data = forward_fn(x.data)
    if out_data.shape != x.data.shape:
        raise ShapeError("straight_through mapping must preserve shape")

    def backward(g):
        x._accumulate(g)

    return Tensor._node(out_data, (x,), backward)
