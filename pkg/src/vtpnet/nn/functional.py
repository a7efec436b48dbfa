"""Differentiable operators used by every layer of the network.

All feature tensors are channels-last: ``(..., C)``. Reductions that must be
independent of row order (mean pooling) sum sorted values so that a row
permutation gives a bitwise-identical result.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_result

# Single switch point for the nonlinearity used throughout the network.
ACTIVATION = "relu"


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W (+ b)`` applied over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    cin, cout = W.shape
    if x.shape[-1] != cin:
        raise ValueError(f"linear: input has {x.shape[-1]} channels, weight expects {cin}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    y = x2 @ W.data
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"linear: bias shape {b.shape} != ({cout},)")
        y = y + b.data
    y = y.reshape(*lead, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return make_result(y, parents, backward, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax_rows")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def activation(x: Tensor) -> Tensor:
    if ACTIVATION == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {ACTIVATION!r}")


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
    """Normalize over every axis but the last (channel) axis.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode only the running buffers are read.
    """
    x = as_tensor(x)
    C = x.shape[-1]
    if gamma.shape != (C,):
        raise ValueError(f"batch_norm: {C} channels but state has {gamma.shape[0]}")
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = (xc * xc).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        xc = x2 - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        ggamma = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g2 * gamma.data
            if training:
                gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            else:
                gx = gxhat * inv_std
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return make_result(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")


def pool_max(x: Tensor, axis: int = -2, keepdims: bool = True) -> Tensor:
    """Max over ``axis``; the gradient goes to the first row holding the max."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("pool_max over an empty axis")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    if not keepdims:
        y = np.squeeze(y, axis)
    return make_result(y, (x,), backward, "pool_max")


def pool_mean(x: Tensor, axis: int = -2, keepdims: bool = True) -> Tensor:
    """Mean over ``axis`` with a row-order independent summation."""
    x = as_tensor(x)
    k = x.shape[axis]
    if k == 0:
        raise ValueError("pool_mean over an empty axis")
    y = np.sort(x.data, axis=axis).sum(axis=axis, keepdims=keepdims) / k

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / k, x.shape).copy(),)

    return make_result(y.astype(x.dtype, copy=False), (x,), backward, "pool_mean")


def _scatter_rows(flat_index: np.ndarray, values: np.ndarray, num_rows: int,
                  weights: np.ndarray | None = None) -> np.ndarray:
    """``out[flat_index[i]] += weights[i] * values[i]`` via a sparse product."""
    n = flat_index.size
    data = np.ones(n, dtype=values.dtype) if weights is None else weights.astype(values.dtype, copy=False)
    m = sp.csr_matrix((data, (flat_index, np.arange(n))), shape=(num_rows, n))
    return np.asarray(m @ values)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``x (B, S, C)``, ``index (B, ...)`` -> ``(B, ..., C)``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    B, S, C = x.shape
    if index.shape[0] != B:
        raise ValueError("gather: batch size mismatch")
    flat = (index.reshape(B, -1) + (np.arange(B) * S)[:, None]).ravel()
    y = x.data.reshape(B * S, C)[flat].reshape(*index.shape, C)

    def backward(g):
        return (_scatter_rows(flat, g.reshape(-1, C), B * S).reshape(x.shape),)

    return make_result(y, (x,), backward, "gather")


def permute_along(x: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder ``x`` along ``axis`` with a per-slice permutation (``take_along_axis``)."""
    x = as_tensor(x)
    perm = np.asarray(perm, dtype=np.intp)
    y = np.take_along_axis(x.data, perm, axis=axis)

    def backward(g):
        return (np.take_along_axis(g, np.argsort(perm, axis=axis), axis=axis),)

    return make_result(y, (x,), backward, "permute_along")


def weighted_gather(src: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[b, n] = sum_j weights[b, n, j] * src[b, index[b, n, j]]``.

    ``src`` is ``(B, S, C)``; ``index`` and ``weights`` are ``(B, N, J)``.
    Used by trilinear devoxelization (J=8) and nearest-neighbor upsampling.
    """
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    weights = np.asarray(weights, dtype=src.dtype)
    B, S, C = src.shape
    _, N, J = index.shape
    flat = index + (np.arange(B) * S)[:, None, None]
    rows = src.data.reshape(B * S, C)
    y = np.zeros((B, N, C), dtype=src.dtype)
    for j in range(J):
        y += weights[:, :, j, None] * rows[flat[:, :, j]]

    def backward(g):
        rep = np.broadcast_to(g[:, :, None, :], (B, N, J, C)).reshape(-1, C)
        return (_scatter_rows(flat.ravel(), rep, B * S, weights.ravel()).reshape(src.shape),)

    return make_result(y, (src,), backward, "weighted_gather")


def scatter_mean(x: Tensor, cell: np.ndarray, num_cells: int, order: np.ndarray | None = None):
    """Average rows of ``x (B, N, C)`` into ``num_cells`` bins per batch item.

    ``cell`` is ``(B, N)`` bin ids. ``order`` optionally fixes, per batch item,
    the summation order inside each bin (pass a canonical order for results
    that do not depend on input row order). Returns ``(means, counts)``.
    """
    x = as_tensor(x)
    B, N, C = x.shape
    cell = np.asarray(cell, dtype=np.intp)
    if order is None:
        order = np.argsort(cell, axis=1, kind="stable")
    flat_cell = (cell + (np.arange(B) * num_cells)[:, None])
    sorted_cell = np.take_along_axis(flat_cell, order, axis=1).ravel()
    sorted_rows = np.take_along_axis(x.data, order[..., None], axis=1).reshape(-1, C)
    counts = np.bincount(flat_cell.ravel(), minlength=B * num_cells)
    sums = np.zeros((B * num_cells, C), dtype=x.dtype)
    # sorted_cell is grouped per bin because order sorts by bin first
    starts = np.flatnonzero(np.r_[True, sorted_cell[1:] != sorted_cell[:-1]])
    if starts.size:
        sums[sorted_cell[starts]] = np.add.reduceat(sorted_rows, starts, axis=0)
    safe = np.maximum(counts, 1)[:, None].astype(x.dtype)
    y = (sums / safe).reshape(B, num_cells, C)

    def backward(g):
        g2 = g.reshape(B * num_cells, C) / safe
        return (g2[flat_cell.ravel()].reshape(x.shape),)

    return make_result(y, (x,), backward, "scatter_mean"), counts.reshape(B, num_cells)


def conv3d(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1, channels-last.

    ``x`` is ``(B, R, R, R, Cin)``; ``W`` is ``(3, 3, 3, Cin, Cout)``.
    Computed as 27 shifted matrix products, one per kernel tap.
    """
    x, W = as_tensor(x), as_tensor(W)
    B, D, H, Wd, cin = x.shape
    if W.shape[:4] != (3, 3, 3, cin):
        raise ValueError(f"conv3d: weight {W.shape} incompatible with input channels {cin}")
    cout = W.shape[4]
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    rows = B * D * H * Wd
    y = np.zeros((rows, cout), dtype=x.dtype)
    taps = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    for i, j, k in taps:
        patch = padded[:, i:i + D, j:j + H, k:k + Wd, :].reshape(rows, cin)
        y += patch @ W.data[i, j, k]
    if b is not None:
        y += b.data
    y = y.reshape(B, D, H, Wd, cout)

    def backward(g):
        g2 = g.reshape(rows, cout)
        gW = np.zeros_like(W.data) if W.requires_grad else None
        gpad = np.zeros_like(padded) if x.requires_grad else None
        for i, j, k in taps:
            if gW is not None:
                patch = padded[:, i:i + D, j:j + H, k:k + Wd, :].reshape(rows, cin)
                gW[i, j, k] = patch.T @ g2
            if gpad is not None:
                gpad[:, i:i + D, j:j + H, k:k + Wd, :] += (g2 @ W.data[i, j, k].T).reshape(B, D, H, Wd, cin)
        gx = gpad[:, 1:-1, 1:-1, 1:-1, :] if gpad is not None else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return make_result(y, parents, backward, "conv3d")


def log_softmax(x: Tensor) -> np.ndarray:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(..., C)``; ``labels`` has the leading shape of ``logits``.
    """
    logits = as_tensor(logits)
    C = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label outside [0, {C})")
    logp = log_softmax(logits).reshape(-1, C)
    flat = labels.reshape(-1).astype(np.intp)
    n = flat.size
    loss = -logp[np.arange(n), flat].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), flat] -= 1.0
        return ((g * p / n).reshape(logits.shape).astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
