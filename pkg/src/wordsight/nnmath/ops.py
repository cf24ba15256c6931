"""Differentiable operations on the tape.

Everything the model needs and nothing more: elementwise arithmetic with
broadcasting, (stacked) matmul, gather/concat/slicing for sequence assembly,
and the fused neural-net kernels (linear, softmax, layer norm, GeLU,
multi-head attention, cross entropy). Backward formulas are hand-written and
covered by finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, constant, result, unbroadcast

SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi) for the tanh GeLU
GELU_CUBIC = 0.044715


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.data.shape), unbroadcast(g, b.data.shape)

    return result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return unbroadcast(g, a.data.shape), unbroadcast(-g, b.data.shape)

    return result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return (
            unbroadcast(g * b.data, a.data.shape),
            unbroadcast(g * a.data, b.data.shape),
        )

    return result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        return (
            unbroadcast(g / b.data, a.data.shape),
            unbroadcast(-g * out / b.data, b.data.shape),
        )

    return result(out, (a, b), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return result(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return result(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return result(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return result(out, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return result(out, tuple(tensors), backward)


def take_rows(a, indices) -> Tensor:
    """Select rows along axis 0 by integer index; duplicates accumulate on
    the way back."""
    a = _wrap(a)
    idx = np.asarray(indices)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return result(out, (a,), backward)


def gather(table, ids) -> Tensor:
    """Embedding lookup: table[ids] for an integer id array."""
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.data.shape), unbroadcast(gb, b.data.shape)

    return result(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """Affine map x W^T + b with x of shape [..., d_in] and w [d_out, d_in]."""
    x, w = _wrap(x), _wrap(w)
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ValueError(
            f"linear: input shape {x.data.shape} does not match weight shape {w.data.shape}"
        )
    out_data = np.matmul(x.data, w.data.T)
    if b is not None:
        b = _wrap(b)
        if b.data.shape != (w.data.shape[0],):
            raise ValueError(
                f"linear: bias shape {b.data.shape} does not match weight shape {w.data.shape}"
            )
        out_data = out_data + b.data

    def backward(g):
        gx = np.matmul(g, w.data)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return result(out_data, parents, backward)


def head_project(x, w) -> Tensor:
    """Per-head projection: x [n, d_in] with stacked heads w [M, d_head, d_in]
    gives [M, n, d_head]."""
    x, w = _wrap(x), _wrap(w)
    # batched matmul of x against each head's transposed weight block; this
    # is einsum("nd,mhd->mnh") but with far less per-call overhead
    out = np.matmul(x.data[None, :, :], w.data.transpose(0, 2, 1))

    def backward(g):
        gx = np.matmul(g, w.data).sum(axis=0)
        gw = np.matmul(g.transpose(0, 2, 1), x.data)
        return gx, gw

    return result(out, (x, w), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x, axis=-1) -> Tensor:
    """Probability rows via max-subtracted exponentials."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last axis must have length >= 2, got {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gain.data * xhat + bias.data

    def backward(g):
        g_xhat = g * gain.data
        # d xhat / d x folded analytically
        gx = inv_std * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return result(out, (x, gain, bias), backward)


def gelu(x) -> Tensor:
    """GeLU, tanh approximation."""
    x = _wrap(x)
    x3 = x.data * x.data * x.data
    inner = SQRT_2_OVER_PI * (x.data + GELU_CUBIC * x3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x.data * x.data)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
        return (g * dx,)

    return result(out, (x,), backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def multi_head_attention(q_in, k_in, v_in, wq, wk, wv, mask=None):
    """Scaled dot-product attention with per-head projections.

    q_in [n_q, dq_in], k_in [n_k, dk_in], v_in [n_k, dv_in];
    wq [M, d_head, dq_in], wk [M, d_head, dk_in], wv [M, d_out, dv_in].
    Heads are concatenated (no output projection). `mask` is an optional
    boolean [n_q, n_k] array; True entries get -inf logits.

    Returns (output [n_q, M * d_out], probs [M, n_q, n_k] as plain ndarray).
    """
    wq_t, wk_t, wv_t = _wrap(wq), _wrap(wk), _wrap(wv)
    if wq_t.data.shape[0] != wk_t.data.shape[0] or wq_t.data.shape[0] != wv_t.data.shape[0]:
        raise ValueError(
            "multi_head_attention: head counts disagree: "
            f"{wq_t.data.shape[0]}, {wk_t.data.shape[0]}, {wv_t.data.shape[0]}"
        )
    if wq_t.data.shape[1] != wk_t.data.shape[1]:
        raise ValueError(
            "multi_head_attention: query head dim "
            f"{wq_t.data.shape[1]} != key head dim {wk_t.data.shape[1]}"
        )
    n_heads, d_head = wq_t.data.shape[0], wq_t.data.shape[1]

    q = head_project(q_in, wq_t)  # [M, n_q, d_head]
    k = head_project(k_in, wk_t)  # [M, n_k, d_head]
    v = head_project(v_in, wv_t)  # [M, n_k, d_out]

    logits = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d_head))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        fill = np.where(mask, -np.inf, 0.0)
        logits = add(logits, constant(fill[None, :, :]))
    probs = softmax(logits, axis=-1)  # [M, n_q, n_k]
    per_head = matmul(probs, v)  # [M, n_q, d_out]
    out = reshape(transpose(per_head, (1, 0, 2)), (q_in.data.shape[0], n_heads * wv_t.data.shape[1]))
    return out, probs.data.copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood over rows.

    `targets` is either an integer class-id array [n] or a probability-row
    array [n, k] (soft targets, -sum p log q per row).
    """
    logits = _wrap(logits)
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-d, got shape {z.shape}")
    n, k = z.shape
    if n == 0:
        raise ValueError("cross_entropy: no rows to score (nothing was masked?)")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sum_e = e.sum(axis=1, keepdims=True)
    log_probs = (z - m) - np.log(sum_e)
    q = e / sum_e

    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ValueError(
                f"cross_entropy: {targets.shape[0]} targets for {n} logit rows"
            )
        if np.issubdtype(targets.dtype, np.floating):
            targets = targets.astype(np.int64)
        if targets.min() < 0 or targets.max() >= k:
            raise ValueError(f"cross_entropy: class id out of range for {k} classes")
        loss = -log_probs[np.arange(n), targets].mean()

        def backward_hard(g):
            grad = q.copy()
            grad[np.arange(n), targets] -= 1.0
            return (g * grad / n,)

        return result(np.asarray(loss, dtype=z.dtype), (logits,), backward_hard)

    if targets.shape != z.shape:
        raise ValueError(
            f"cross_entropy: soft targets shape {targets.shape} != logits shape {z.shape}"
        )
    row_sums = targets.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-3):
        raise ValueError("cross_entropy: soft target rows must sum to 1")
    p = targets.astype(z.dtype)
    loss = -(p * log_probs).sum(axis=1).mean()

    def backward_soft(g):
        return (g * (q - p) / n,)

    return result(np.asarray(loss, dtype=z.dtype), (logits,), backward_soft)


__all__ = [
    "Parameter",
    "Tensor",
    "add",
    "concat",
    "constant",
    "cross_entropy",
    "div",
    "gather",
    "gelu",
    "head_project",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "reshape",
    "softmax",
    "sqrt",
    "sub",
    "take_rows",
    "tensor_sum",
    "transpose",
]
