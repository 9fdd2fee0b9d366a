"""Naive reference implementations of every layer type, plus backward passes.

These are the oracles the fast backend is verified against, so they stay
deliberately simple: zero-pad the input, walk output pixels, and evaluate the
convolution sums with elementwise multiply + sum. No im2col, no GEMM. All
forward ops preserve the input dtype (float32 in the engine, float64 when the
gradient checker re-runs them).

Shape convention: feature maps (batch, h, w, channels); standard kernels
(kh, kw, in_ch, out_ch); depthwise kernels (kh, kw, channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depthsep.tensor import ShapeError

SAME = "same"
VALID = "valid"


@dataclass(frozen=True)
class ConvConfig:
    stride: int = 1
    padding: str = SAME

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in (SAME, VALID):
            raise ShapeError(f"padding must be '{SAME}' or '{VALID}'")


def conv_out_size(in_size: int, k: int, cfg: ConvConfig) -> int:
    if cfg.padding == SAME:
        return -(-in_size // cfg.stride)  # ceil(in/stride)
    if in_size < k:
        raise ShapeError(f"valid padding needs input >= kernel ({in_size} < {k})")
    return (in_size - k) // cfg.stride + 1


def same_pad(in_size: int, k: int, stride: int) -> tuple[int, int]:
    """(pad_before, pad_after); ties pad more on the after side."""
    out = -(-in_size // stride)
    total = max((out - 1) * stride + k - in_size, 0)
    before = total // 2
    return before, total - before


def _pad_input(x: np.ndarray, kh: int, kw: int, cfg: ConvConfig):
    """Zero-padded copy plus the (before_h, before_w) offsets."""
    if cfg.padding == VALID:
        return x, 0, 0
    ph = same_pad(x.shape[1], kh, cfg.stride)
    pw = same_pad(x.shape[2], kw, cfg.stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    return xp, ph[0], pw[0]


def conv2d_std_ref(x: np.ndarray, kernel: np.ndarray, cfg: ConvConfig) -> np.ndarray:
    """out[b,i,j,n] = sum_{di,dj,m} kernel[di,dj,m,n] * x[b, i*s+di-pad, j*s+dj-pad, m]."""
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, tensor has {cin}")
    oh = conv_out_size(h, kh, cfg)
    ow = conv_out_size(w, kw, cfg)
    xp, _, _ = _pad_input(x, kh, kw, cfg)
    s = cfg.stride
    out = np.zeros((n, oh, ow, cout), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, i * s : i * s + kh, j * s : j * s + kw, :]
                out[b, i, j, :] = np.sum(patch[..., None] * kernel, axis=(0, 1, 2))
    return out


def conv2d_depthwise_ref(x: np.ndarray, kernel: np.ndarray, cfg: ConvConfig) -> np.ndarray:
    """One spatial filter per channel; output channel m sees input channel m only."""
    n, h, w, cin = x.shape
    kh, kw, kc = kernel.shape
    if kc != cin:
        raise ShapeError(f"depthwise kernel has {kc} channels, tensor has {cin}")
    oh = conv_out_size(h, kh, cfg)
    ow = conv_out_size(w, kw, cfg)
    xp, _, _ = _pad_input(x, kh, kw, cfg)
    s = cfg.stride
    out = np.zeros((n, oh, ow, cin), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, i * s : i * s + kh, j * s : j * s + kw, :]
                out[b, i, j, :] = np.sum(patch * kernel, axis=(0, 1))
    return out


def conv2d_pointwise_ref(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """1x1 convolution: per-pixel linear combination across channels."""
    if kernel.ndim != 4 or kernel.shape[0] != 1 or kernel.shape[1] != 1:
        raise ShapeError(f"pointwise kernel must be 1x1xMxN, got {kernel.shape}")
    n, h, w, cin = x.shape
    _, _, m, cout = kernel.shape
    if m != cin:
        raise ShapeError(f"kernel expects {m} input channels, tensor has {cin}")
    kmat = kernel[0, 0]  # (M, N)
    out = np.zeros((n, h, w, cout), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                out[b, i, j, :] = np.sum(x[b, i, j, :, None] * kmat, axis=0)
    return out


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"batchnorm {name} must have shape ({c},)")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, epsilon: float = 1e-3) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
        )


def batchnorm_fwd(x: np.ndarray, p: BatchNormParams, training: bool = False):
    """Per-channel affine normalization.

    Inference scales by running stats and returns the tensor. Training uses
    batch mean and biased batch variance over (batch, h, w) and returns
    (out, batch_mean, batch_var) for the backward pass.
    """
    c = x.shape[-1]
    if p.gamma.shape[0] != c:
        raise ShapeError(f"batchnorm has {p.gamma.shape[0]} channels, tensor has {c}")
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mean = p.running_mean.astype(x.dtype)
        var = p.running_var.astype(x.dtype)
    denom = var + x.dtype.type(p.epsilon)
    if np.any(denom <= 0):
        raise ShapeError("variance + epsilon must be positive")
    y = p.gamma.astype(x.dtype) * (x - mean) / np.sqrt(denom) + p.beta.astype(x.dtype)
    if training:
        return y, mean, var
    return y


def update_running_stats(p: BatchNormParams, batch_mean, batch_var, momentum: float = 0.99) -> None:
    p.running_mean[:] = momentum * p.running_mean + (1.0 - momentum) * batch_mean
    p.running_var[:] = momentum * p.running_var + (1.0 - momentum) * batch_var


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def avgpool_global(x: np.ndarray) -> np.ndarray:
    """Mean over all spatial positions per channel; (N,H,W,C) -> (N,1,1,C)."""
    return x.mean(axis=(1, 2), keepdims=True)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x @ W + b with W of shape (in_features, out_features)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[0]:
        raise ShapeError(f"fc expects {weight.shape[0]} features, got {flat.shape[1]}")
    return flat @ weight + bias


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def depthwise_separable_ref(
    x: np.ndarray,
    dw_kernel: np.ndarray,
    pw_kernel: np.ndarray,
    cfg: ConvConfig,
    bn_dw: BatchNormParams,
    bn_pw: BatchNormParams,
) -> np.ndarray:
    """Full factorized block: dw conv -> BN -> ReLU -> pw conv -> BN -> ReLU."""
    y = relu(batchnorm_fwd(conv2d_depthwise_ref(x, dw_kernel, cfg), bn_dw))
    return relu(batchnorm_fwd(conv2d_pointwise_ref(y, pw_kernel), bn_pw))


# --- backward passes -------------------------------------------------------
# Verified against f64 central finite differences (see the train module); the
# spatial convolutions keep the output-pixel loop structure of their forwards.


def relu_bwd(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def avgpool_global_bwd(grad_out: np.ndarray, in_shape: tuple) -> np.ndarray:
    """Spread (N,1,1,C) gradient uniformly back over the pooled window."""
    h, w = in_shape[1], in_shape[2]
    return np.broadcast_to(grad_out / (h * w), in_shape).copy()


def conv2d_std_bwd(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, cfg: ConvConfig):
    """Returns (grad_input, grad_kernel)."""
    n, h, w, _ = x.shape
    kh, kw, _, _ = kernel.shape
    _, oh, ow, _ = grad_out.shape
    xp, ph, pw = _pad_input(x, kh, kw, cfg)
    s = cfg.stride
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                go = grad_out[b, i, j, :]
                patch = xp[b, i * s : i * s + kh, j * s : j * s + kw, :]
                gk += patch[..., None] * go
                gxp[b, i * s : i * s + kh, j * s : j * s + kw, :] += np.sum(
                    kernel * go, axis=3
                )
    return gxp[:, ph : ph + h, pw : pw + w, :], gk


def conv2d_depthwise_bwd(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, cfg: ConvConfig):
    n, h, w, _ = x.shape
    kh, kw, _ = kernel.shape
    _, oh, ow, _ = grad_out.shape
    xp, ph, pw = _pad_input(x, kh, kw, cfg)
    s = cfg.stride
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                go = grad_out[b, i, j, :]
                patch = xp[b, i * s : i * s + kh, j * s : j * s + kw, :]
                gk += patch * go
                gxp[b, i * s : i * s + kh, j * s : j * s + kw, :] += kernel * go
    return gxp[:, ph : ph + h, pw : pw + w, :], gk


def conv2d_pointwise_bwd(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    kmat = kernel[0, 0]
    gin = np.tensordot(grad_out, kmat.T, axes=([3], [0]))
    gk = np.tensordot(x, grad_out, axes=([0, 1, 2], [0, 1, 2]))
    return gin, gk.reshape(kernel.shape)


def batchnorm_bwd(
    grad_out: np.ndarray,
    x: np.ndarray,
    p: BatchNormParams,
    batch_mean: np.ndarray,
    batch_var: np.ndarray,
):
    """Training-mode backward (batch statistics). Returns (grad_in, dgamma, dbeta)."""
    count = x.shape[0] * x.shape[1] * x.shape[2]
    inv_std = 1.0 / np.sqrt(batch_var + x.dtype.type(p.epsilon))
    xhat = (x - batch_mean) * inv_std
    dgamma = np.sum(grad_out * xhat, axis=(0, 1, 2))
    dbeta = np.sum(grad_out, axis=(0, 1, 2))
    gamma = p.gamma.astype(x.dtype)
    gin = (gamma * inv_std) * (grad_out - dbeta / count - xhat * dgamma / count)
    return gin, dgamma, dbeta


def fc_bwd(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (grad_input, grad_weight, grad_bias); x is the flattened input."""
    flat = x.reshape(x.shape[0], -1)
    gw = flat.T @ grad_out
    gb = grad_out.sum(axis=0)
    gin = (grad_out @ weight.T).reshape(x.shape)
    return gin, gw, gb


def softmax_xent_bwd(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the logits: (p - onehot)/batch."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)
