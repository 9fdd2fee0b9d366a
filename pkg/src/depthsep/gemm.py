"""Fast execution backend: hand-written blocked GEMM plus conv lowerings.

The matrix kernel is a cache-blocked i-k-j loop compiled with numba. It is
sequential and accumulates in strict ascending-k order with plain float32
arithmetic (no fastmath), so results are bit-identical across runs and across
block-size choices that preserve k order.

Two lowerings feed it:

* 3x3 (or any kxk) standard conv: zero-pad, fill an im2col matrix whose row r
  is output pixel r and whose columns are (ki, kj, channel) with channel
  fastest, then multiply by the kernel reshaped to (kh*kw*in_ch, out_ch).
* 1x1 conv: the channels-last activation tensor reinterpreted as a
  (pixels, channels) matrix IS the GEMM operand. No im2col, no copy; the
  stats counters exist to prove that.

Depthwise layers skip GEMM entirely and run a direct compiled kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from depthsep.ops import SAME, VALID, ConvConfig, conv_out_size, same_pad
from depthsep.tensor import ShapeError

BLOCK_M = 64
BLOCK_K = 256
BLOCK_N = 64


@dataclass(frozen=True)
class GemmDims:
    m: int
    k: int
    n: int


def check_gemm_operands(a: np.ndarray, b: np.ndarray) -> GemmDims:
    for name, t in (("a", a), ("b", b)):
        if t.ndim != 2:
            raise ShapeError(f"gemm operand {name} must be 2-d, got rank {t.ndim}")
        if t.dtype != np.float32:
            raise ShapeError(f"gemm operand {name} must be float32, got {t.dtype}")
        if not t.flags["C_CONTIGUOUS"]:
            raise ShapeError(f"gemm operand {name} must be C-contiguous")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm inner dims disagree: {a.shape} x {b.shape}")
    return GemmDims(a.shape[0], a.shape[1], b.shape[1])


@njit("void(float32[:,::1], float32[:,::1], float32[:,::1])", cache=True)
def _gemm_kernel(a, b, c):  # pragma: no cover - exercised via gemm()
    m, k = a.shape
    n = b.shape[1]
    for i0 in range(0, m, BLOCK_M):
        i1 = min(i0 + BLOCK_M, m)
        for k0 in range(0, k, BLOCK_K):
            k1 = min(k0 + BLOCK_K, k)
            for j0 in range(0, n, BLOCK_N):
                j1 = min(j0 + BLOCK_N, n)
                for i in range(i0, i1):
                    for kk in range(k0, k1):
                        aik = a[i, kk]
                        for j in range(j0, j1):
                            c[i, j] += aik * b[kk, j]


def gemm(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """c = a @ b for float32 matrices, deterministic blocked kernel."""
    dims = check_gemm_operands(a, b)
    if out is None:
        out = np.zeros((dims.m, dims.n), dtype=np.float32)
    else:
        if out.shape != (dims.m, dims.n) or out.dtype != np.float32:
            raise ShapeError(f"gemm output must be float32 {(dims.m, dims.n)}")
        out[:] = 0.0
    _gemm_kernel(a, b, out)
    return out


@njit("void(float32[:,:,:,::1], float32[:,::1], int64, int64, int64, int64, int64)", cache=True)
def _im2col_kernel(xp, cols, oh, ow, kh, kw, s):  # pragma: no cover
    nb = xp.shape[0]
    c = xp.shape[3]
    for b in range(nb):
        for i in range(oh):
            for j in range(ow):
                r = (b * oh + i) * ow + j
                for di in range(kh):
                    for dj in range(kw):
                        base = (di * kw + dj) * c
                        for ch in range(c):
                            cols[r, base + ch] = xp[b, i * s + di, j * s + dj, ch]


@njit("void(float32[:,:,:,::1], float32[:,:,::1], float32[:,:,:,::1], int64)", cache=True)
def _depthwise_kernel(xp, k3, out, s):  # pragma: no cover
    nb, oh, ow, c = out.shape
    kh, kw = k3.shape[0], k3.shape[1]
    for b in range(nb):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    out[b, i, j, ch] = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ch in range(c):
                            out[b, i, j, ch] += k3[di, dj, ch] * xp[b, i * s + di, j * s + dj, ch]


@dataclass
class OpRecord:
    op: str
    used_im2col: bool
    dims: GemmDims


@dataclass
class ExecStats:
    """Counters proving which lowering each op took."""

    im2col_fills: int = 0
    scratch_allocations: int = 0
    records: list[OpRecord] = field(default_factory=list)

    def record(self, op: str, used_im2col: bool, dims: GemmDims) -> None:
        self.records.append(OpRecord(op, used_im2col, dims))


class ScratchBuffer:
    """Growable float32 arena reused across im2col fills."""

    def __init__(self) -> None:
        self._buf = np.empty(0, dtype=np.float32)
        self.allocations = 0

    def take(self, shape: tuple[int, int]) -> np.ndarray:
        need = int(shape[0]) * int(shape[1])
        if self._buf.size < need:
            self._buf = np.empty(need, dtype=np.float32)
            self.allocations += 1
        return self._buf[:need].reshape(shape)


def _padded(x: np.ndarray, kh: int, kw: int, cfg: ConvConfig) -> np.ndarray:
    if cfg.padding == VALID:
        return x
    ph = same_pad(x.shape[1], kh, cfg.stride)
    pw = same_pad(x.shape[2], kw, cfg.stride)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def im2col(
    x: np.ndarray,
    kh: int,
    kw: int,
    cfg: ConvConfig,
    scratch: ScratchBuffer | None = None,
    stats: ExecStats | None = None,
) -> np.ndarray:
    """Patch matrix of shape (batch*out_h*out_w, kh*kw*channels)."""
    n, h, w, c = x.shape
    oh = conv_out_size(h, kh, cfg)
    ow = conv_out_size(w, kw, cfg)
    xp = np.ascontiguousarray(_padded(x, kh, kw, cfg))
    shape = (n * oh * ow, kh * kw * c)
    cols = scratch.take(shape) if scratch is not None else np.empty(shape, dtype=np.float32)
    _im2col_kernel(xp, cols, oh, ow, kh, kw, cfg.stride)
    if stats is not None:
        stats.im2col_fills += 1
        if scratch is not None:
            stats.scratch_allocations = scratch.allocations
    return cols


def conv2d_std_gemm(
    x: np.ndarray,
    kernel: np.ndarray,
    cfg: ConvConfig,
    scratch: ScratchBuffer | None = None,
    stats: ExecStats | None = None,
) -> np.ndarray:
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, tensor has {cin}")
    oh = conv_out_size(h, kh, cfg)
    ow = conv_out_size(w, kw, cfg)
    cols = im2col(x, kh, kw, cfg, scratch, stats)
    kmat = np.ascontiguousarray(kernel.reshape(kh * kw * cin, cout))
    out = gemm(cols, kmat)
    if stats is not None:
        stats.record("conv_std", True, GemmDims(cols.shape[0], cols.shape[1], cout))
    return out.reshape(n, oh, ow, cout)


def conv2d_pointwise_gemm(
    x: np.ndarray,
    kernel: np.ndarray,
    stats: ExecStats | None = None,
) -> np.ndarray:
    """1x1 conv as a direct matrix product on a reshaped view of x (no copy)."""
    if kernel.ndim != 4 or kernel.shape[0] != 1 or kernel.shape[1] != 1:
        raise ShapeError(f"pointwise kernel must be 1x1xMxN, got {kernel.shape}")
    n, h, w, cin = x.shape
    m, cout = kernel.shape[2], kernel.shape[3]
    if m != cin:
        raise ShapeError(f"kernel expects {m} input channels, tensor has {cin}")
    flat = x.reshape(n * h * w, cin)
    kmat = np.ascontiguousarray(kernel[0, 0])
    out = gemm(flat, kmat)
    if stats is not None:
        stats.record("conv_pw", False, GemmDims(flat.shape[0], cin, cout))
    return out.reshape(n, h, w, cout)


def conv2d_depthwise_fast(
    x: np.ndarray,
    kernel: np.ndarray,
    cfg: ConvConfig,
    stats: ExecStats | None = None,
) -> np.ndarray:
    n, h, w, cin = x.shape
    kh, kw, kc = kernel.shape
    if kc != cin:
        raise ShapeError(f"depthwise kernel has {kc} channels, tensor has {cin}")
    oh = conv_out_size(h, kh, cfg)
    ow = conv_out_size(w, kw, cfg)
    xp = np.ascontiguousarray(_padded(x, kh, kw, cfg))
    out = np.empty((n, oh, ow, cin), dtype=np.float32)
    _depthwise_kernel(xp, np.ascontiguousarray(kernel), out, cfg.stride)
    if stats is not None:
        stats.record("conv_dw", False, GemmDims(n * oh * ow, kh * kw, cin))
    return out
