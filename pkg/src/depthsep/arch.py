"""Architecture descriptors for MobileNet-style depthwise-separable stacks.

A network is a flat tuple of LayerSpec rows: one standard 3x3 conv, then an
alternating chain of depthwise / pointwise layers, then global average pool,
a fully connected classifier, and softmax. Spatial sizes follow the same-pad
rule out = ceil(in / stride), so every row's input shape is derivable and is
stored on the row.

Two knobs shrink the network uniformly: a width multiplier that rescales every
internal channel count (round-half-up, floor of one channel, input image
channels untouched) and the input resolution (any multiple of 32). A shallow
variant drops the five repeated 14x14 blocks in the middle of the stack.

A small text format round-trips descriptors for inspection and editing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from depthsep.tensor import ShapeError


class LayerKind(enum.Enum):
    CONV_STD = "conv"
    CONV_DW = "dw"
    CONV_PW = "pw"
    AVGPOOL = "avgpool"
    FC = "fc"
    SOFTMAX = "softmax"


CONV_KINDS = (LayerKind.CONV_STD, LayerKind.CONV_DW, LayerKind.CONV_PW)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    in_size: int
    out_size: int

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels, self.in_size, self.out_size) < 1:
            raise ShapeError(f"layer dimensions must be >= 1: {self}")
        if self.kind is LayerKind.CONV_DW and self.in_channels != self.out_channels:
            raise ShapeError("depthwise layer cannot change channel count")
        if self.kind is LayerKind.CONV_PW and self.kernel != 1:
            raise ShapeError("pointwise layer must have kernel 1")

    @property
    def has_bn_relu(self) -> bool:
        """Every conv layer is followed by batchnorm + ReLU; the head is not."""
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1.0
    resolution: int = 224
    num_classes: int = 1000
    shallow: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ShapeError(f"width multiplier must be in (0, 1], got {self.alpha}")
        if self.resolution < 32 or self.resolution % 32 != 0:
            raise ShapeError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        if self.num_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.num_classes}")


def round_channels(base: int, alpha: float) -> int:
    """Width-scaled channel count: round half up, never below one."""
    return max(1, int(base * alpha + 0.5))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ArchDescriptor:
    layers: tuple[LayerSpec, ...]
    input_size: int
    input_channels: int

    @property
    def conv_layer_count(self) -> int:
        return sum(1 for l in self.layers if l.kind in CONV_KINDS)

    @property
    def layer_count(self) -> int:
        """Weighted-layer depth: convolutions plus the classifier; pool and softmax are free."""
        fc = sum(1 for l in self.layers if l.kind is LayerKind.FC)
        return self.conv_layer_count + fc

    @property
    def output_classes(self) -> int:
        return self.layers[-1].out_channels


def shape_chain(arch: ArchDescriptor) -> list[tuple[int, int, int]]:
    """Each row's input shape (h, w, c), one triple per layer."""
    return [(l.in_size, l.in_size, l.in_channels) for l in arch.layers]


# Depthwise/pointwise body after the stem: (dw stride, pw output channels).
_BODY_BLOCKS = (
    (1, 64),
    (2, 128),
    (1, 128),
    (2, 256),
    (1, 256),
    (2, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (2, 1024),
    (1, 1024),
)
_SHALLOW_SKIP = {6, 7, 8, 9, 10}  # the five repeated 14x14 blocks


def build_mobilenet(hp: Hyperparams) -> ArchDescriptor:
    layers: list[LayerSpec] = []
    size = hp.resolution
    ch = round_channels(32, hp.alpha)
    out_size = _ceil_div(size, 2)
    layers.append(LayerSpec(LayerKind.CONV_STD, 3, 2, 3, ch, size, out_size))
    size = out_size
    for idx, (stride, pw_base) in enumerate(_BODY_BLOCKS):
        if hp.shallow and idx in _SHALLOW_SKIP:
            continue
        out_size = _ceil_div(size, stride)
        layers.append(LayerSpec(LayerKind.CONV_DW, 3, stride, ch, ch, size, out_size))
        size = out_size
        pw_out = round_channels(pw_base, hp.alpha)
        layers.append(LayerSpec(LayerKind.CONV_PW, 1, 1, ch, pw_out, size, size))
        ch = pw_out
    layers.append(LayerSpec(LayerKind.AVGPOOL, size, 1, ch, ch, size, 1))
    layers.append(LayerSpec(LayerKind.FC, 1, 1, ch, hp.num_classes, 1, 1))
    layers.append(LayerSpec(LayerKind.SOFTMAX, 1, 1, hp.num_classes, hp.num_classes, 1, 1))
    return ArchDescriptor(tuple(layers), hp.resolution, 3)


# --- text format ------------------------------------------------------------


def emit_arch(arch: ArchDescriptor) -> str:
    lines = [f"input {arch.input_size}x{arch.input_size}x{arch.input_channels}"]
    for l in arch.layers:
        if l.kind is LayerKind.CONV_STD:
            lines.append(f"conv s{l.stride} {l.kernel}x{l.kernel} {l.in_channels}->{l.out_channels}")
        elif l.kind is LayerKind.CONV_DW:
            lines.append(f"dw s{l.stride} {l.kernel}x{l.kernel} {l.in_channels}")
        elif l.kind is LayerKind.CONV_PW:
            lines.append(f"pw {l.in_channels}->{l.out_channels}")
        elif l.kind is LayerKind.AVGPOOL:
            lines.append("avgpool")
        elif l.kind is LayerKind.FC:
            lines.append(f"fc {l.in_channels}->{l.out_channels}")
        else:
            lines.append("softmax")
    return "\n".join(lines) + "\n"


class ArchParseError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _parse_channels(tok: str, lineno: int) -> tuple[int, int]:
    parts = tok.split("->")
    if len(parts) != 2:
        raise ArchParseError(lineno, f"expected IN->OUT channels, got {tok!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError:
        raise ArchParseError(lineno, f"channels must be integers, got {tok!r}") from None
    if a < 1 or b < 1:
        raise ArchParseError(lineno, f"channels must be >= 1, got {tok!r}")
    return a, b


def _parse_kernel(tok: str, lineno: int) -> int:
    parts = tok.split("x")
    if len(parts) != 2 or parts[0] != parts[1]:
        raise ArchParseError(lineno, f"expected KxK kernel, got {tok!r}")
    try:
        k = int(parts[0])
    except ValueError:
        raise ArchParseError(lineno, f"kernel must be an integer, got {tok!r}") from None
    if k < 1:
        raise ArchParseError(lineno, f"kernel must be >= 1, got {tok!r}")
    return k


def _parse_stride(tok: str, lineno: int) -> int:
    if not tok.startswith("s"):
        raise ArchParseError(lineno, f"expected stride like s1 or s2, got {tok!r}")
    try:
        s = int(tok[1:])
    except ValueError:
        raise ArchParseError(lineno, f"stride must be an integer, got {tok!r}") from None
    if s < 1:
        raise ArchParseError(lineno, f"stride must be >= 1, got {tok!r}")
    return s


def parse_arch(text: str) -> ArchDescriptor:
    """Parse the text form produced by emit_arch, validating the shape chain."""
    layers: list[LayerSpec] = []
    header: tuple[int, int] | None = None
    size = 0
    ch = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        op, args = toks[0], toks[1:]
        if header is None:
            if op != "input":
                raise ArchParseError(lineno, "first directive must be 'input HxWxC'")
            if len(args) != 1 or args[0].count("x") != 2:
                raise ArchParseError(lineno, "expected 'input HxWxC'")
            try:
                h, w, c = (int(p) for p in args[0].split("x"))
            except ValueError:
                raise ArchParseError(lineno, f"input dims must be integers, got {args[0]!r}") from None
            if h != w:
                raise ArchParseError(lineno, "input must be square")
            if min(h, c) < 1:
                raise ArchParseError(lineno, "input dims must be >= 1")
            header = (h, c)
            size, ch = h, c
            continue
        if layers and layers[-1].kind is LayerKind.SOFTMAX:
            raise ArchParseError(lineno, "no layer may follow 'softmax'")
        if layers and layers[-1].kind is LayerKind.FC and op != "softmax":
            raise ArchParseError(lineno, "only 'softmax' may follow 'fc'")
        if op == "conv":
            if len(args) != 3:
                raise ArchParseError(lineno, "expected 'conv sS KxK IN->OUT'")
            stride = _parse_stride(args[0], lineno)
            k = _parse_kernel(args[1], lineno)
            cin, cout = _parse_channels(args[2], lineno)
            if cin != ch:
                raise ArchParseError(lineno, f"layer expects {cin} channels but chain carries {ch}")
            out_size = _ceil_div(size, stride)
            layers.append(LayerSpec(LayerKind.CONV_STD, k, stride, cin, cout, size, out_size))
            size, ch = out_size, cout
        elif op == "dw":
            if len(args) != 3:
                raise ArchParseError(lineno, "expected 'dw sS KxK CHANNELS'")
            stride = _parse_stride(args[0], lineno)
            k = _parse_kernel(args[1], lineno)
            try:
                c = int(args[2])
            except ValueError:
                raise ArchParseError(lineno, f"channels must be an integer, got {args[2]!r}") from None
            if c != ch:
                raise ArchParseError(lineno, f"layer expects {c} channels but chain carries {ch}")
            out_size = _ceil_div(size, stride)
            layers.append(LayerSpec(LayerKind.CONV_DW, k, stride, c, c, size, out_size))
            size = out_size
        elif op == "pw":
            if len(args) != 1:
                raise ArchParseError(lineno, "expected 'pw IN->OUT'")
            cin, cout = _parse_channels(args[0], lineno)
            if cin != ch:
                raise ArchParseError(lineno, f"layer expects {cin} channels but chain carries {ch}")
            layers.append(LayerSpec(LayerKind.CONV_PW, 1, 1, cin, cout, size, size))
            ch = cout
        elif op == "avgpool":
            if args:
                raise ArchParseError(lineno, "'avgpool' takes no arguments")
            layers.append(LayerSpec(LayerKind.AVGPOOL, size, 1, ch, ch, size, 1))
            size = 1
        elif op == "fc":
            if len(args) != 1:
                raise ArchParseError(lineno, "expected 'fc IN->OUT'")
            cin, cout = _parse_channels(args[0], lineno)
            if cin != ch:
                raise ArchParseError(lineno, f"layer expects {cin} features but chain carries {ch}")
            layers.append(LayerSpec(LayerKind.FC, 1, 1, cin, cout, size, size))
            ch = cout
        elif op == "softmax":
            if args:
                raise ArchParseError(lineno, "'softmax' takes no arguments")
            layers.append(LayerSpec(LayerKind.SOFTMAX, 1, 1, ch, ch, size, size))
        else:
            raise ArchParseError(lineno, f"unknown directive {op!r}")
    if header is None:
        raise ArchParseError(0, "empty architecture text")
    if not layers:
        raise ArchParseError(0, "architecture has no layers")
    return ArchDescriptor(tuple(layers), header[0], header[1])
