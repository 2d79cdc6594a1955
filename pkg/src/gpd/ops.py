"""Neural-network primitives on the gradient tape.

Convolution uses an im2col layout with fixed loop nesting so that repeated
runs with one seed produce bit-identical results on the same platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Tensor


@dataclass
class ConvWeight:
    """A conv layer's parameters: kernel [C_out, C_in, K, K], optional bias [C_out]."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d, got shape {self.kernel.shape}")
        if self.kernel.shape[2] != self.kernel.shape[3] or self.kernel.shape[2] < 1:
            raise ShapeError(f"conv kernel must be square K>=1, got {self.kernel.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride/padding ({self.stride}, {self.padding})")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} != C_out {self.kernel.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


@dataclass
class BNParams:
    """Batch-norm parameters: learnable affine plus running statistics buffers."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if not (self.beta.shape == (c,) and self.running_mean.shape == (c,) and self.running_var.shape == (c,)):
            raise ShapeError("batch-norm parameter vectors must share one channel count")
        if not 0.0 < self.momentum < 1.0:
            raise ShapeError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ShapeError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0.0):
            raise NumericError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] padded input -> [N, C, K, K, Ho, Wo] patch tensor."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(dcols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add the patch-tensor gradient back onto the padded input."""
    dxp = np.zeros(padded_shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: ConvWeight) -> Tensor:
    """2-d cross-correlation of [N, C_in, H, W] with w, tape-aware."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [N,C,H,W], got shape {x.shape}")
    n, c, h, wd = x.data.shape
    kernel, bias, stride, pad = w.kernel, w.bias, w.stride, w.padding
    c_out, c_in, k, _ = kernel.data.shape
    if c != c_in:
        raise ShapeError(f"conv2d input has {c} channels, kernel expects {c_in}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"spatial dims {h}x{wd} (pad {pad}) smaller than kernel {k}")

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    wmat = kernel.data.reshape(c_out, c_in * k * k)

    if k == 1 and stride == 1 and pad == 0:
        # pointwise conv is a per-pixel channel mix; skip patch extraction
        x3 = x.data.reshape(n, c_in, h * wd)
        out = np.matmul(wmat, x3).reshape(n, c_out, h, wd)
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def bw(g):
            g2 = g.reshape(n, c_out, h * wd)
            if kernel.requires_grad:
                dw = np.tensordot(g2, x3, axes=([0, 2], [0, 2]))
                kernel.accumulate_grad(dw.reshape(c_out, c_in, 1, 1))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x.accumulate_grad(np.matmul(wmat.T, g2).reshape(x.data.shape))

        return Tensor(out, _parents=parents, _backward_fn=bw, _op="conv2d")

    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, ho, wo).reshape(n, c_in * k * k, ho * wo)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def bw(g):
        g2 = g.reshape(n, c_out, ho * wo)
        if kernel.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            kernel.accumulate_grad(dw.reshape(c_out, c_in, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c_in, k, k, ho, wo)
            dxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
            dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
            x.accumulate_grad(np.ascontiguousarray(dx))

    return Tensor(out, _parents=parents, _backward_fn=bw, _op="conv2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of [N, D_in] by weight [D_out, D_in] plus optional bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape} / {weight.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear input width {x.shape[1]} != weight width {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return Tensor(out, _parents=parents, _backward_fn=bw, _op="linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return Tensor(np.maximum(x.data, 0.0), _parents=(x,), _backward_fn=bw, _op="relu")


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over all spatial positions: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool_global expects 4-d input, got shape {x.shape}")
    n, c, h, w = x.data.shape

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy())

    return Tensor(x.data.mean(axis=(2, 3)), _parents=(x,), _backward_fn=bw, _op="avgpool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    mode: str,
) -> Tensor:
    """Per-channel normalization of [N, C, H, W].

    Train mode normalizes by batch statistics (biased variance over N, H, W)
    and updates the supplied running buffers in place via an exponential
    moving average. Eval mode is a pure function of the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch-norm mode '{mode}'")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-d input, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if c != gamma.shape[0]:
        raise ShapeError(f"batch_norm input has {c} channels, parameters have {gamma.shape[0]}")
    if n < 1:
        raise ShapeError("batch_norm on an empty batch")

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            if mode == "train":
                # Batch statistics depend on x, so the normalization itself
                # contributes mean-removal terms.
                m0 = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                m1 = (dxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = (dxhat - m0 - xhat * m1) * inv_std.reshape(1, c, 1, 1)
            else:
                dx = dxhat * inv_std.reshape(1, c, 1, 1)
            x.accumulate_grad(dx)

    return Tensor(out, _parents=(x, gamma, beta), _backward_fn=bw, _op="batch_norm")


def batchnorm(x: Tensor, p: BNParams, mode: str) -> Tensor:
    """Batch normalization driven by a BNParams record."""
    return batch_norm(x, p.gamma, p.beta, p.running_mean, p.running_var, p.momentum, p.eps, mode)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N, K], got shape {logits.shape}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumexp = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sumexp)
    loss = -log_probs[np.arange(n), labels].mean()

    def bw(g):
        if logits.requires_grad:
            grad = ez / sumexp
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(float(g.reshape(())) * grad / n)

    return Tensor(loss, _parents=(logits,), _backward_fn=bw, _op="cross_entropy")


def kd_kl_divergence(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Distillation loss: T^2 * mean KL(soft teacher || soft student).

    The teacher argument never receives gradient: it is consumed as raw
    values only, which makes the stop-gradient rule structural rather than
    a caller obligation.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape or student_logits.data.ndim != 2:
        raise ShapeError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}"
        )

    n = student_logits.shape[0]
    tau = float(temperature)
    ps, log_ps = _softmax_with_log(student_logits.data / tau)
    pt, log_pt = _softmax_with_log(teacher_logits.data / tau)
    kl = (pt * (log_pt - log_ps)).sum(axis=1).mean()
    loss = tau * tau * kl

    def bw(g):
        if student_logits.requires_grad:
            student_logits.accumulate_grad(float(g.reshape(())) * tau * (ps - pt) / n)

    return Tensor(loss, _parents=(student_logits,), _backward_fn=bw, _op="kd_kl")


def _softmax_with_log(z: np.ndarray):
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumexp = ez.sum(axis=1, keepdims=True)
    p = ez / sumexp
    return p, (z - zmax) - np.log(sumexp)


def compose_1x1_kxk(w1: Tensor, w2: Tensor) -> Tensor:
    """Fold a 1x1 conv followed by a KxK conv into one KxK kernel.

    merged[o, i, :, :] = sum_m w2[o, m, :, :] * w1[m, i, 0, 0]; convolving
    with the result (padding on the KxK stage only) equals running the two
    convolutions sequentially.
    """
    if w1.data.ndim != 4 or w1.shape[2] != 1 or w1.shape[3] != 1:
        raise ShapeError(f"first kernel must be 1x1, got shape {w1.shape}")
    if w2.data.ndim != 4:
        raise ShapeError(f"second kernel must be 4-d, got shape {w2.shape}")
    if w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"channel chain mismatch: {w1.shape[0]} -> {w2.shape[1]}")

    a = w1.data[:, :, 0, 0]  # [mid, in]
    out = np.einsum("omhw,mi->oihw", w2.data, a)

    def bw(g):
        if w2.requires_grad:
            w2.accumulate_grad(np.einsum("oihw,mi->omhw", g, a))
        if w1.requires_grad:
            d1 = np.einsum("omhw,oihw->mi", w2.data, g)
            w1.accumulate_grad(d1[:, :, None, None])

    return Tensor(out, _parents=(w1, w2), _backward_fn=bw, _op="compose_1x1_kxk")


def sgd_momentum_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
):
    """One SGD step: v <- momentum*v + g + wd*w; w <- w - lr*v. Pure."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError(
            f"param/grad/velocity shapes differ: {param.shape}/{grad.shape}/{velocity.shape}"
        )
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v
