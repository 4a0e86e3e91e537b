"""Deterministic float64 layer arithmetic with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Reductions never go through BLAS or numpy's pairwise summation: contractions
run in a compiled loop that adds terms in ascending index order, and
:func:`ordered_sum` uses ``numpy.add.accumulate``. Neither path reassociates
or fuses multiply-adds, so every op is bitwise equal to the obvious nested
loop written in the same order.

Batched ops take a leading batch axis; rows never interact, so a sample's
result does not depend on what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .errors import DimensionError, StateError


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right sum along ``axis``, starting from +0.0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis % x.ndim), dtype=np.float64)
    acc = np.add.accumulate(x, axis=axis)
    # the trailing +0.0 reproduces `acc = 0.0; acc += t` exactly, signed zeros included
    return np.take(acc, -1, axis=axis) + 0.0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the inner index summed in ascending order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if k == 0 or m == 0 or n == 0:
        if k == 0:
            raise DimensionError("matmul over an empty inner dimension")
        return np.zeros((m, n), dtype=np.float64)
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b.T))


@njit(cache=True)
def _matmul_kernel(a, bt):
    # compiled without fastmath: no reassociation and no multiply-add contraction
    m, k = a.shape
    n = bt.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * bt[j, t]
            out[i, j] = acc
    return out


# ---------------------------------------------------------------- layers


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"expected {ndim}-D or batched {ndim + 1}-D tensor, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, H, W) -> (N*H'*W', C*kh*kw) with columns ordered (c, di, dj)
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    ho, wo = h - kh + 1, w - kw + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``kernels`` is ``(F, C, kh, kw)``.
    Each output is ``sum over (c, di, dj) ascending`` then ``+ bias``.
    """
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x, 3)
    if kernels.ndim != 4 or bias.shape != (kernels.shape[0],):
        raise DimensionError(f"bad kernel/bias shapes {kernels.shape}, {bias.shape}")
    f, c, kh, kw = kernels.shape
    n, cx, h, w = xb.shape
    if cx != c:
        raise DimensionError(f"input has {cx} channels, kernels expect {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if xb.size == 0:
        raise DimensionError("empty input")
    ho, wo = h - kh + 1, w - kw + 1
    cols = _im2col(xb, kh, kw)
    out = matmul(cols, kernels.reshape(f, -1).T) + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray, want_params: bool = True):
    """Gradients ``(dx, dkernels, dbias)`` for a batched conv2d_forward.

    With ``want_params=False`` the parameter gradients are ``None``.
    """
    f, c, kh, kw = kernels.shape
    n, _, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
    dk = db = None
    if want_params:
        dk = matmul(g.T, _im2col(x, kh, kw)).reshape(kernels.shape)
        db = ordered_sum(g, axis=0)
    dcols = matmul(g, kernels.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros_like(x)
    for di in range(kh):
        for dj in range(kw):
            dx[:, :, di:di + ho, dj:dj + wo] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dx, dk, db


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DimensionError("empty input")
    return np.where(x > 0.0, x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad, 0.0)


def _windows(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"maxpool2x2 needs at least 2x2 input, got {h}x{w}")
    v = x[..., : 2 * h2, : 2 * w2].reshape(*lead, h2, 2, w2, 2)
    return np.moveaxis(v, -3, -2).reshape(*lead, h2, w2, 4)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2 over the last two axes (odd edges dropped)."""
    return _windows(np.asarray(x, dtype=np.float64)).max(axis=-1)


def maxpool2x2_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    win = _windows(x)
    # gradient goes to the first maximal element in window order
    first = win.argmax(axis=-1)
    routed = (np.arange(4) == first[..., None]) * grad[..., None]
    *lead, h2, w2, _ = routed.shape
    routed = np.moveaxis(routed.reshape(*lead, h2, w2, 2, 2), -2, -3).reshape(*lead, 2 * h2, 2 * w2)
    dx = np.zeros_like(x)
    dx[..., : 2 * h2, : 2 * w2] = routed
    return dx


def flatten(x: np.ndarray) -> np.ndarray:
    """Collapse everything but the leading batch axis."""
    if x.size == 0:
        raise DimensionError("empty input")
    return x.reshape(x.shape[0], -1)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x, 1)
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: input {xb.shape[1:]} vs weight {weight.shape}, bias {bias.shape}")
    if xb.size == 0:
        raise DimensionError("empty input")
    out = matmul(xb, weight.T) + bias
    return out[0] if single else out


def dense_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray, want_params: bool = True):
    if not want_params:
        return matmul(grad, weight), None, None
    return matmul(grad, weight), matmul(grad.T, x), ordered_sum(grad, axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("softmax of an empty tensor")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / ordered_sum(e, axis=-1)[..., None]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("log_softmax of an empty tensor")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(ordered_sum(np.exp(shifted), axis=-1))[..., None]


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Per-example ``-log softmax(logits)[label]``; logits are ``(N, K)`` or ``(K,)``."""
    logits = np.asarray(logits, dtype=np.float64)
    zb, single = _batched(logits, 1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (zb.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {zb.shape[0]} rows")
    out = -log_softmax(zb)[np.arange(zb.shape[0]), labels]
    return out[0] if single else out


def cross_entropy_backward(logits: np.ndarray, labels) -> np.ndarray:
    """Gradient of ``sum(cross_entropy(logits, labels))`` with respect to batched logits."""
    g = softmax(logits)
    g[np.arange(g.shape[0]), np.asarray(labels, dtype=np.int64)] -= 1.0
    return g


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Records backward closures during a forward pass.

    Each entry maps ``grad_out -> (grad_in, param_grads)``; ``param_grads`` is
    ``None`` for parameter-free layers.
    """

    entries: list = field(default_factory=list)
    params: bool = True  # False: record only what the input gradient needs

    def push(self, key, backward_fn: Callable) -> None:
        self.entries.append((key, backward_fn))

    def __len__(self) -> int:
        return len(self.entries)


def backward(tape: Tape, loss_grad: np.ndarray) -> dict:
    """Run the tape in reverse.

    Returns a dict with one entry per parametric layer key (a tuple of
    gradients in parameter order) plus ``"input"`` for the input gradient.
    """
    if tape is None or len(tape) == 0:
        raise StateError("backward called without a recorded forward pass")
    grads: dict = {}
    g = np.asarray(loss_grad, dtype=np.float64)
    for key, fn in reversed(tape.entries):
        g, pgrads = fn(g)
        if pgrads is not None and pgrads[0] is not None:
            grads[key] = pgrads
    grads["input"] = g
    return grads
