"""Differentiable ops for the residual-adapter CNN.

Conventions:
  - images are [B, H, W, C] with channels last; H is the mel-band axis and W
    is time for this model,
  - convolutions use "same" padding realizing output dim ceil(in/stride),
    with the total pad split floor-left,
  - non-differentiable arguments (strides, lengths, masks, labels, rngs,
    running statistics) are plain numpy / python values, differentiable ones
    are Tensors.
"""

from __future__ import annotations

import numpy as np

from ..errors import AllMasked, LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, accumulate


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# --- convolution ------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Bias-free 2-d cross-correlation, "same" padding, output ceil(in/s).

    Implemented as one matmul per kernel offset so BLAS does the heavy
    lifting: for each (i, j) a strided slice of the padded input is
    contracted with kernel[i, j].
    """
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input/kernel, got {xv.shape}, {kv.shape}")
    batch, in_h, in_w, c_in = xv.shape
    kh, kw, kc, c_out = kv.shape
    if kc != c_in:
        raise ShapeMismatch(f"kernel expects {kc} input channels, input has {c_in}")

    out_h, out_w = _ceil_div(in_h, stride), _ceil_div(in_w, stride)
    pad_h = max((out_h - 1) * stride + kh - in_h, 0)
    pad_w = max((out_w - 1) * stride + kw - in_w, 0)
    top, left = pad_h // 2, pad_w // 2
    padded = np.pad(xv, ((0, 0), (top, pad_h - top), (left, pad_w - left), (0, 0)))

    out = np.zeros((batch, out_h, out_w, c_out), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :]
            out += patch @ kv[i, j]

    def backward_fn(grad):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kv)
        for i in range(kh):
            for j in range(kw):
                patch = padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :]
                grad_kernel[i, j] = np.tensordot(patch, grad, axes=([0, 1, 2], [0, 1, 2]))
                grad_padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += (
                    grad @ kv[i, j].T
                )
        accumulate(x, grad_padded[:, top : top + in_h, left : left + in_w, :])
        accumulate(kernel, grad_kernel)

    return Tensor(out, parents=(x, kernel), backward_fn=backward_fn)


# --- batch normalization ------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-3,
    momentum: float = 0.99,
) -> Tensor:
    """Normalize over all non-channel axes (channels last), then scale/shift.

    Train mode uses batch statistics and updates the running arrays in place
    (running = momentum*running + (1-momentum)*batch); eval mode uses the
    running statistics.
    """
    xv = x.value
    channels = xv.shape[-1]
    if gamma.value.shape != (channels,) or beta.value.shape != (channels,):
        raise ShapeMismatch(
            f"batch_norm over {channels} channels, gamma/beta are "
            f"{gamma.value.shape}/{beta.value.shape}"
        )
    if running_mean.shape != (channels,) or running_var.shape != (channels,):
        raise ShapeMismatch("running statistics do not match channel count")
    axes = tuple(range(xv.ndim - 1))

    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean[...] = momentum * running_mean + (1.0 - momentum) * mean
        running_var[...] = momentum * running_var + (1.0 - momentum) * var
    else:
        mean = running_mean.astype(xv.dtype, copy=False)
        var = running_var.astype(xv.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xv - mean) * inv_std
    out = gamma.value * x_hat + beta.value

    count = xv.size // channels

    def backward_fn(grad):
        accumulate(gamma, np.sum(grad * x_hat, axis=axes))
        accumulate(beta, np.sum(grad, axis=axes))
        grad_hat = grad * gamma.value
        if training:
            centered = xv - mean
            grad_var = np.sum(grad_hat * centered, axis=axes) * (-0.5) * inv_std**3
            grad_mean = -np.sum(grad_hat, axis=axes) * inv_std
            grad_x = (
                grad_hat * inv_std
                + centered * (2.0 / count) * grad_var
                + grad_mean / count
            )
        else:
            grad_x = grad_hat * inv_std
        accumulate(x, grad_x)

    return Tensor(out, parents=(x, gamma, beta), backward_fn=backward_fn)


# --- elementwise and linear --------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.value, 0)

    def backward_fn(grad):
        accumulate(x, grad * (x.value > 0))

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)

    def backward_fn(grad):
        accumulate(x, grad * (1.0 - out * out))

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"add of {a.value.shape} and {b.value.shape}")
    out = a.value + b.value

    def backward_fn(grad):
        accumulate(a, grad)
        accumulate(b, grad)

    return Tensor(out, parents=(a, b), backward_fn=backward_fn)


def matmul_last(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of x with a 2-d weight: [..., D] @ [D, K]."""
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeMismatch(f"matmul_last of {xv.shape} and {wv.shape}")
    out = xv @ wv

    def backward_fn(grad):
        accumulate(x, grad @ wv.T)
        batch_axes = tuple(range(xv.ndim - 1))
        accumulate(w, np.tensordot(xv, grad, axes=(batch_axes, batch_axes)))

    return Tensor(out, parents=(x, w), backward_fn=backward_fn)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.value.shape != (x.value.shape[-1],):
        raise ShapeMismatch(f"bias {b.value.shape} on input {x.value.shape}")
    out = x.value + b.value

    def backward_fn(grad):
        accumulate(x, grad)
        accumulate(b, np.sum(grad, axis=tuple(range(grad.ndim - 1))))

    return Tensor(out, parents=(x, b), backward_fn=backward_fn)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return bias_add(matmul_last(x, w), b)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.value.reshape(shape)

    def backward_fn(grad):
        accumulate(x, grad.reshape(x.value.shape))

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = x.value

        def backward_identity(grad):
            accumulate(x, grad)

        return Tensor(out, parents=(x,), backward_fn=backward_identity)

    keep = (rng.random(x.value.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
    out = x.value * keep

    def backward_fn(grad):
        accumulate(x, grad * keep)

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


# --- pooling, channel padding, time masking -----------------------------------

def _pool_counts(dim: int, out_dim: int, dtype) -> np.ndarray:
    # cells of each 2-wide window that fall inside [0, dim)
    return np.clip(dim - 2 * np.arange(out_dim), 0, 2).astype(dtype)


def avg_pool2x2(x: Tensor, lengths: np.ndarray | None = None) -> Tensor:
    """2x2 stride-2 average pooling, output ceil(in/2) per spatial dim.

    Edge windows average over the cells that exist. When ``lengths`` gives
    per-sample valid widths, columns at or beyond a sample's length are
    treated as nonexistent: they get weight 0 in the average and the output
    columns past ceil(length/2) are exactly 0. This keeps padded batches
    consistent with per-sample computation.
    """
    xv = x.value
    batch, in_h, in_w, channels = xv.shape
    out_h, out_w = _ceil_div(in_h, 2), _ceil_div(in_w, 2)

    if lengths is None:
        valid_w = np.full(batch, in_w, dtype=np.int64)
    else:
        valid_w = np.asarray(lengths, dtype=np.int64)
        if valid_w.shape != (batch,):
            raise ShapeMismatch(f"lengths {valid_w.shape} for batch of {batch}")

    padded = np.pad(xv, ((0, 0), (0, 2 * out_h - in_h), (0, 2 * out_w - in_w), (0, 0)))
    if lengths is not None:
        # invalid columns must not leak into the window sums
        keep = (np.arange(2 * out_w)[None, :] < valid_w[:, None]).astype(xv.dtype)
        padded = padded * keep[:, None, :, None]
    total = (
        padded[:, 0::2, 0::2] + padded[:, 1::2, 0::2]
        + padded[:, 0::2, 1::2] + padded[:, 1::2, 1::2]
    )

    rows = _pool_counts(in_h, out_h, xv.dtype)  # [out_h]
    cols = np.clip(valid_w[:, None] - 2 * np.arange(out_w)[None, :], 0, 2).astype(xv.dtype)  # [B, out_w]
    divisor = rows[None, :, None, None] * cols[:, None, :, None]
    inv = np.zeros_like(divisor)
    np.divide(1.0, divisor, out=inv, where=divisor > 0)
    out = total * inv

    def backward_fn(grad):
        grad_cell = grad * inv
        grad_padded = np.zeros_like(padded)
        row_idx = 2 * np.arange(out_h)
        col_idx = 2 * np.arange(out_w)
        for di in (0, 1):
            row_ok = (row_idx + di < in_h).astype(xv.dtype)[None, :, None, None]
            for dj in (0, 1):
                col_ok = ((col_idx[None, :] + dj) < valid_w[:, None]).astype(xv.dtype)[:, None, :, None]
                grad_padded[:, di::2, dj::2] += grad_cell * row_ok * col_ok
        accumulate(x, grad_padded[:, :in_h, :in_w, :])

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


def concat_zero_channels(x: Tensor, extra: int) -> Tensor:
    """Append ``extra`` all-zero channels along the last axis."""
    out = np.pad(x.value, ((0, 0),) * (x.value.ndim - 1) + ((0, extra),))

    def backward_fn(grad):
        accumulate(x, grad[..., : x.value.shape[-1]])

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


def mask_time(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Zero out time columns at or beyond each sample's valid length."""
    xv = x.value
    batch, _, width, _ = xv.shape
    valid = np.asarray(lengths, dtype=np.int64)
    if valid.shape != (batch,):
        raise ShapeMismatch(f"lengths {valid.shape} for batch of {batch}")
    mask = (np.arange(width)[None, :] < valid[:, None]).astype(xv.dtype)[:, None, :, None]
    out = xv * mask

    def backward_fn(grad):
        accumulate(x, grad * mask)

    return Tensor(out, parents=(x,), backward_fn=backward_fn)


# --- attention pooling ----------------------------------------------------------

def masked_softmax(e: Tensor, lam: float, mask: np.ndarray) -> Tensor:
    """alpha_i = exp(lam*e_i) / sum over valid j of exp(lam*e_j).

    mask is a [B, N] boolean array of valid positions; masked positions get
    weight exactly 0. lam = 0 yields uniform weights over valid positions.
    """
    ev = e.value
    valid = np.asarray(mask, dtype=bool)
    if valid.shape != ev.shape:
        raise ShapeMismatch(f"mask {valid.shape} for scores {ev.shape}")
    if not valid.any(axis=1).all():
        raise AllMasked("a sample has no valid attention position")

    scores = np.where(valid, lam * ev, -np.inf)
    shift = scores.max(axis=1, keepdims=True)
    expd = np.exp(scores - shift)
    expd[~valid] = 0.0
    alpha = (expd / expd.sum(axis=1, keepdims=True)).astype(ev.dtype)

    def backward_fn(grad):
        inner = np.sum(grad * alpha, axis=1, keepdims=True)
        accumulate(e, lam * alpha * (grad - inner))

    return Tensor(alpha, parents=(e,), backward_fn=backward_fn)


def weighted_sum(x: Tensor, alpha: Tensor) -> Tensor:
    """Pool positions: out[b] = sum_n alpha[b,n] * x[b,n,:]."""
    xv, av = x.value, alpha.value
    if xv.ndim != 3 or av.shape != xv.shape[:2]:
        raise ShapeMismatch(f"weighted_sum of {xv.shape} with weights {av.shape}")
    out = np.einsum("bn,bnc->bc", av, xv)

    def backward_fn(grad):
        accumulate(alpha, np.einsum("bc,bnc->bn", grad, xv))
        accumulate(x, av[:, :, None] * grad[:, None, :])

    return Tensor(out, parents=(x, alpha), backward_fn=backward_fn)


def attention_pool(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    u: Tensor,
    lam: float,
    mask: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Soft attention over flattened positions (row-vector convention).

    x: [B, Nf, Nt, C] or already-flat [B, N, C]. Scores
    e_i = u . tanh(x_i @ w + b); weights are the lam-scaled masked softmax;
    returns (pooled [B, C], weights [B, N]).
    """
    if x.value.ndim == 4:
        batch, nf, nt, channels = x.value.shape
        x = reshape(x, (batch, nf * nt, channels))
    if x.value.ndim != 3:
        raise ShapeMismatch(f"attention_pool expects [B,N,C], got {x.value.shape}")
    hidden = tanh(bias_add(matmul_last(x, w), b))
    scores = reshape(matmul_last(hidden, reshape(u, (-1, 1))), x.value.shape[:2])
    alpha = masked_softmax(scores, lam, mask)
    return weighted_sum(x, alpha), alpha


# --- loss --------------------------------------------------------------------

def softmax_xent(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of weight(y_i) * (-log softmax(logits_i)[y_i])."""
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeMismatch(f"logits must be [B, K], got {lv.shape}")
    batch, k = lv.shape
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ShapeMismatch(f"labels {y.shape} for batch of {batch}")
    if y.min() < 0 or y.max() >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    if weights is None:
        w = np.ones(batch, dtype=lv.dtype)
    else:
        w = np.asarray(weights, dtype=lv.dtype)[y]

    shifted = lv - lv.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(w * log_probs[np.arange(batch), y]).mean()

    def backward_fn(grad):
        probs = np.exp(log_probs)
        probs[np.arange(batch), y] -= 1.0
        accumulate(logits, grad * probs * (w / batch)[:, None])

    return Tensor(np.asarray(loss, dtype=lv.dtype), parents=(logits,), backward_fn=backward_fn)


def project_sum(x: Tensor, r: np.ndarray) -> Tensor:
    """Scalar sum(x * r); reduces any output to a scalar for grad checks."""
    rv = np.asarray(r, dtype=x.value.dtype)
    if rv.shape != x.value.shape:
        raise ShapeMismatch(f"projection {rv.shape} on {x.value.shape}")
    out = np.asarray((x.value * rv).sum(), dtype=x.value.dtype)

    def backward_fn(grad):
        accumulate(x, grad * rv)

    return Tensor(out, parents=(x,), backward_fn=backward_fn)
