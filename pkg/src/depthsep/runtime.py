"""Graph executor: runs an ArchDescriptor forward, owns weights and their file format.

Weight naming is positional: layer i of the descriptor contributes
"conv{i}/kernel" / "dw{i}/kernel" / "pw{i}/kernel", and every conv layer also
carries "bn{i}/gamma|beta|mean|var|eps" (eps serialized as a 1-element tensor
so a folded model survives a save/load roundtrip). The classifier is
"fc/weight" + "fc/bias". A per-layer "<prefix>{i}/bias" appears only after
batchnorm folding.

The weight file is little-endian: magic "MBNW", u32 version (1), u32 tensor
count, then per tensor u16 name length, UTF-8 name, u8 dtype code (0 = f32),
u8 rank, rank x u32 dims, raw f32 payload. No padding anywhere, so a
save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from depthsep.arch import ArchDescriptor, LayerKind, parse_arch
from depthsep.gemm import (
    ExecStats,
    ScratchBuffer,
    conv2d_depthwise_fast,
    conv2d_pointwise_gemm,
    conv2d_std_gemm,
)
from depthsep.ops import (
    BatchNormParams,
    ConvConfig,
    avgpool_global,
    batchnorm_fwd,
    conv2d_depthwise_ref,
    conv2d_pointwise_ref,
    conv2d_std_ref,
    fully_connected,
    relu,
    softmax,
)
from depthsep.tensor import NumericsError, ShapeError

WEIGHT_MAGIC = b"MBNW"
WEIGHT_VERSION = 1
DEFAULT_BN_EPS = 1e-3

ARCH_FILENAME = "arch.txt"
WEIGHTS_FILENAME = "weights.mbnw"


class WeightError(ValueError):
    """Weight file or weight/arch consistency problem."""


class TrainModeError(RuntimeError):
    """Operation requires inference mode."""


class WeightStore:
    """Ordered name -> float32 ndarray map."""

    def __init__(self) -> None:
        self._tensors: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: np.ndarray) -> None:
        if name in self._tensors:
            raise WeightError(f"duplicate tensor name {name!r}")
        if tensor.dtype != np.float32:
            raise WeightError(f"tensor {name!r} must be float32, got {tensor.dtype}")
        if not 1 <= tensor.ndim <= 4:
            raise WeightError(f"tensor {name!r} must have rank 1..4, got {tensor.ndim}")
        self._tensors[name] = np.ascontiguousarray(tensor)

    def set(self, name: str, tensor: np.ndarray) -> None:
        self._tensors.pop(name, None)
        self.add(name, tensor)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise WeightError(f"missing tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "WeightStore":
        dup = WeightStore()
        for name, t in self._tensors.items():
            dup.add(name, t.copy())
        return dup


def layer_prefix(index: int, kind: LayerKind) -> str:
    return f"{kind.value}{index}"


def expected_weights(arch: ArchDescriptor) -> list[tuple[str, tuple[int, ...]]]:
    """Required (name, shape) pairs in canonical order."""
    out: list[tuple[str, tuple[int, ...]]] = []
    for i, spec in enumerate(arch.layers):
        if spec.kind is LayerKind.CONV_STD:
            out.append((f"conv{i}/kernel", (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)))
        elif spec.kind is LayerKind.CONV_DW:
            out.append((f"dw{i}/kernel", (spec.kernel, spec.kernel, spec.in_channels)))
        elif spec.kind is LayerKind.CONV_PW:
            out.append((f"pw{i}/kernel", (1, 1, spec.in_channels, spec.out_channels)))
        elif spec.kind is LayerKind.FC:
            out.append(("fc/weight", (spec.in_channels, spec.out_channels)))
            out.append(("fc/bias", (spec.out_channels,)))
            continue
        else:
            continue
        c = spec.out_channels
        out.extend(
            (f"bn{i}/{part}", (c,) if part != "eps" else (1,))
            for part in ("gamma", "beta", "mean", "var", "eps")
        )
    return out


def _optional_weights(arch: ArchDescriptor) -> dict[str, tuple[int, ...]]:
    out = {}
    for i, spec in enumerate(arch.layers):
        if spec.has_bn_relu:
            out[f"{layer_prefix(i, spec.kind)}/bias"] = (spec.out_channels,)
    return out


def check_weights(arch: ArchDescriptor, store: WeightStore) -> None:
    """Raise WeightError naming the first tensor that is missing or mis-shaped."""
    optional = _optional_weights(arch)
    known = set(optional)
    for name, shape in expected_weights(arch):
        known.add(name)
        if name not in store:
            raise WeightError(f"missing tensor {name!r} (expected shape {shape})")
        got = store[name].shape
        if got != shape:
            raise WeightError(f"tensor {name!r} has shape {got}, architecture expects {shape}")
    for name in store.names():
        if name not in known:
            raise WeightError(f"unexpected tensor {name!r} not used by this architecture")
        if name in optional and store[name].shape != optional[name]:
            raise WeightError(
                f"tensor {name!r} has shape {store[name].shape}, architecture expects {optional[name]}"
            )


def init_weights(arch: ArchDescriptor, seed: int = 0) -> WeightStore:
    """Kernels ~ N(0, 2/fan_in); batchnorm starts as the identity transform.

    fan_in is what one output value sums over: k^2*in_ch for standard conv,
    k^2 for depthwise, in_ch for pointwise and the classifier.
    """
    rng = np.random.Generator(np.random.PCG64(seed))

    def normal(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)

    store = WeightStore()
    for i, spec in enumerate(arch.layers):
        k, cin, cout = spec.kernel, spec.in_channels, spec.out_channels
        if spec.kind is LayerKind.CONV_STD:
            store.add(f"conv{i}/kernel", normal((k, k, cin, cout), k * k * cin))
        elif spec.kind is LayerKind.CONV_DW:
            store.add(f"dw{i}/kernel", normal((k, k, cin), k * k))
        elif spec.kind is LayerKind.CONV_PW:
            store.add(f"pw{i}/kernel", normal((1, 1, cin, cout), cin))
        elif spec.kind is LayerKind.FC:
            store.add("fc/weight", normal((cin, cout), cin))
            store.add("fc/bias", np.zeros(cout, dtype=np.float32))
            continue
        else:
            continue
        store.add(f"bn{i}/gamma", np.ones(cout, dtype=np.float32))
        store.add(f"bn{i}/beta", np.zeros(cout, dtype=np.float32))
        store.add(f"bn{i}/mean", np.zeros(cout, dtype=np.float32))
        store.add(f"bn{i}/var", np.ones(cout, dtype=np.float32))
        store.add(f"bn{i}/eps", np.full(1, DEFAULT_BN_EPS, dtype=np.float32))
    return store


def bn_params(store: WeightStore, index: int) -> BatchNormParams:
    return BatchNormParams(
        gamma=store[f"bn{index}/gamma"],
        beta=store[f"bn{index}/beta"],
        running_mean=store[f"bn{index}/mean"],
        running_var=store[f"bn{index}/var"],
        epsilon=float(store[f"bn{index}/eps"][0]),
    )


@dataclass
class Model:
    arch: ArchDescriptor
    weights: WeightStore
    bn_mode: str = "infer"

    def __post_init__(self) -> None:
        if self.bn_mode not in ("infer", "train"):
            raise ValueError(f"bn_mode must be 'infer' or 'train', got {self.bn_mode!r}")
        check_weights(self.arch, self.weights)


def forward(
    model: Model,
    x: np.ndarray,
    backend: str = "fast",
    stats: ExecStats | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Run the network; returns (batch, classes) probabilities summing to 1.

    backend 'fast' uses the GEMM/compiled paths; 'reference' the naive ops.
    Every layer output is checked finite, failures name the layer.
    """
    if model.bn_mode != "infer":
        raise TrainModeError("forward requires inference mode")
    if backend not in ("fast", "reference"):
        raise ValueError(f"unknown backend {backend!r}")
    arch = model.arch
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    if x.ndim != 4:
        raise ShapeError(f"input must be (batch, h, w, c), got rank {x.ndim}")
    want = (arch.input_size, arch.input_size, arch.input_channels)
    if x.shape[1:] != want:
        raise ShapeError(f"input shape {x.shape[1:]} does not match architecture input {want}")
    store = model.weights
    fast = backend == "fast"
    scratch = ScratchBuffer()
    for i, spec in enumerate(arch.layers):
        cfg = ConvConfig(stride=spec.stride)
        if spec.kind is LayerKind.CONV_STD:
            kern = store[f"conv{i}/kernel"]
            x = conv2d_std_gemm(x, kern, cfg, scratch, stats) if fast else conv2d_std_ref(x, kern, cfg)
        elif spec.kind is LayerKind.CONV_DW:
            kern = store[f"dw{i}/kernel"]
            x = conv2d_depthwise_fast(x, kern, cfg, stats) if fast else conv2d_depthwise_ref(x, kern, cfg)
        elif spec.kind is LayerKind.CONV_PW:
            kern = store[f"pw{i}/kernel"]
            x = conv2d_pointwise_gemm(x, kern, stats) if fast else conv2d_pointwise_ref(x, kern)
        elif spec.kind is LayerKind.AVGPOOL:
            x = avgpool_global(x)
        elif spec.kind is LayerKind.FC:
            x = fully_connected(x, store["fc/weight"], store["fc/bias"])
        else:
            x = softmax(x)
        if spec.has_bn_relu:
            bias_name = f"{layer_prefix(i, spec.kind)}/bias"
            if bias_name in store:
                x = x + store[bias_name]
            x = relu(batchnorm_fwd(x, bn_params(store, i), training=False))
        if not np.isfinite(x).all():
            raise NumericsError(f"layer {i} ({spec.kind.value}) produced non-finite values")
        if trace is not None:
            trace.append((i, x.shape))
    return x


def fold_batchnorm(model: Model) -> Model:
    """Absorb inference batchnorm into kernels plus a per-channel bias.

    Each conv kernel is scaled by gamma/sqrt(var+eps) along its output
    channel; the layer gains bias (old_bias - mean)*scale + beta; the
    batchnorm is reset to the exactly inert form (gamma=1, beta=0, mean=0,
    var=1, eps=0), so folding an already-folded model changes nothing,
    bit for bit.
    """
    if model.bn_mode != "infer":
        raise TrainModeError("cannot fold batchnorm in train mode")
    store = model.weights.copy()
    for i, spec in enumerate(model.arch.layers):
        if not spec.has_bn_relu:
            continue
        prefix = layer_prefix(i, spec.kind)
        gamma = store[f"bn{i}/gamma"]
        beta = store[f"bn{i}/beta"]
        mean = store[f"bn{i}/mean"]
        var = store[f"bn{i}/var"]
        eps = store[f"bn{i}/eps"][0]
        scale = gamma / np.sqrt(var + eps)
        # kernels store the output channel last for all three conv kinds
        store.set(f"{prefix}/kernel", store[f"{prefix}/kernel"] * scale)
        bias_name = f"{prefix}/bias"
        old_bias = store[bias_name] if bias_name in store else np.zeros_like(beta)
        store.set(bias_name, (old_bias - mean) * scale + beta)
        c = spec.out_channels
        store.set(f"bn{i}/gamma", np.ones(c, dtype=np.float32))
        store.set(f"bn{i}/beta", np.zeros(c, dtype=np.float32))
        store.set(f"bn{i}/mean", np.zeros(c, dtype=np.float32))
        store.set(f"bn{i}/var", np.ones(c, dtype=np.float32))
        store.set(f"bn{i}/eps", np.zeros(1, dtype=np.float32))
    return Model(model.arch, store, bn_mode="infer")


# --- serialization ----------------------------------------------------------


def save_weights(path, store: WeightStore) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(store.names())))
        for name, t in store.items():
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise WeightError(f"tensor name too long: {name[:32]!r}...")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", 0, t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path) -> WeightStore:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightError(f"truncated weight file: {what} at offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if need(4, "magic") != WEIGHT_MAGIC:
        raise WeightError("bad magic: not a weight file")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != WEIGHT_VERSION:
        raise WeightError(f"unsupported weight file version {version}")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        try:
            name = need(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightError("tensor name is not valid UTF-8") from None
        dtype_code, rank = struct.unpack("<BB", need(2, "dtype/rank"))
        if dtype_code != 0:
            raise WeightError(f"tensor {name!r}: unknown dtype code {dtype_code}")
        if not 1 <= rank <= 4:
            raise WeightError(f"tensor {name!r}: rank {rank} out of range 1..4")
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        if any(d < 1 for d in dims):
            raise WeightError(f"tensor {name!r}: non-positive dim in {dims}")
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = need(4 * n_elem, f"payload of {name!r}")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        store.add(name, data)
    if pos != len(blob):
        raise WeightError(f"trailing data after last tensor ({len(blob) - pos} bytes)")
    return store


def save_model(bundle_dir, model: Model) -> None:
    """Bundle = architecture text + weight file side by side."""
    import os

    from depthsep.arch import emit_arch

    os.makedirs(bundle_dir, exist_ok=True)
    with open(os.path.join(bundle_dir, ARCH_FILENAME), "w") as f:
        f.write(emit_arch(model.arch))
    save_weights(os.path.join(bundle_dir, WEIGHTS_FILENAME), model.weights)


def load_model(bundle_dir) -> Model:
    import os

    arch_path = os.path.join(bundle_dir, ARCH_FILENAME)
    weights_path = os.path.join(bundle_dir, WEIGHTS_FILENAME)
    if not os.path.exists(arch_path):
        raise WeightError(f"model bundle is missing {ARCH_FILENAME}")
    if not os.path.exists(weights_path):
        raise WeightError(f"model bundle is missing {WEIGHTS_FILENAME}")
    with open(arch_path) as f:
        arch = parse_arch(f.read())
    return Model(arch, load_weights(weights_path))
