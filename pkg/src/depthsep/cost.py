"""Analytic cost model: exact multiply-add and parameter counts.

Counting conventions (integer arithmetic throughout, no floats until display):

* standard conv:   mult_adds = k^2 * in_ch * out_ch * out_hw^2, params = k^2 * in_ch * out_ch
* depthwise conv:  mult_adds = k^2 * ch * out_hw^2,             params = k^2 * ch
* pointwise conv:  mult_adds = in_ch * out_ch * out_hw^2,       params = in_ch * out_ch
* fully connected: mult_adds = in * out,                        params = in * out + out
* batchnorm, pooling, softmax, biases: zero mult-adds and zero counted params

Costs use the layer's OUTPUT spatial size, so a stride-2 layer pays for the
pixels it produces. A multiply-add (one mul + one add) counts as one.

The separable-to-standard mult-add ratio is exactly 1/out_ch + 1/k^2, which
is where the roughly 8-9x saving of a 3x3 separable block comes from.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from depthsep.arch import (
    ArchDescriptor,
    Hyperparams,
    LayerKind,
    LayerSpec,
    build_mobilenet,
    round_channels,
)


_COUNT_LIMIT = 2**63  # counts are contractually 64-bit integers


def _checked(count: int) -> int:
    if count >= _COUNT_LIMIT:
        raise OverflowError(f"cost counter exceeds 64 bits: {count}")
    return count


@dataclass(frozen=True)
class CostPair:
    mult_adds: int
    params: int

    def __post_init__(self) -> None:
        if self.mult_adds < 0 or self.params < 0:
            raise ValueError("costs must be nonnegative")
        _checked(self.mult_adds)
        _checked(self.params)

    def __add__(self, other: "CostPair") -> "CostPair":
        return CostPair(self.mult_adds + other.mult_adds, self.params + other.params)


def cost_std_conv(k: int, in_ch: int, out_ch: int, out_hw: int) -> CostPair:
    return CostPair(k * k * in_ch * out_ch * out_hw * out_hw, k * k * in_ch * out_ch)


def cost_depthwise(k: int, ch: int, out_hw: int) -> CostPair:
    return CostPair(k * k * ch * out_hw * out_hw, k * k * ch)


def cost_pointwise(in_ch: int, out_ch: int, out_hw: int) -> CostPair:
    return CostPair(in_ch * out_ch * out_hw * out_hw, in_ch * out_ch)


def cost_separable(k: int, in_ch: int, out_ch: int, out_hw: int) -> CostPair:
    return cost_depthwise(k, in_ch, out_hw) + cost_pointwise(in_ch, out_ch, out_hw)


def cost_separable_scaled(
    k: int, in_ch: int, out_ch: int, out_hw: int, alpha: float = 1.0, rho: float = 1.0
) -> CostPair:
    """Separable block cost under width/resolution multipliers.

    Channels shrink by round-half-up (floor one); the spatial size shrinks the
    same way, so rho=0.714 turns a 14-pixel map into a 10-pixel one.
    """
    m = round_channels(in_ch, alpha)
    n = round_channels(out_ch, alpha)
    hw = max(1, int(out_hw * rho + 0.5))
    return cost_separable(k, m, n, hw)


def reduction_ratio(k: int, out_ch: int) -> Fraction:
    """Exact separable/standard mult-add ratio: 1/out_ch + 1/k^2."""
    return Fraction(1, out_ch) + Fraction(1, k * k)


def layer_cost(spec: LayerSpec) -> CostPair:
    if spec.kind is LayerKind.CONV_STD:
        return cost_std_conv(spec.kernel, spec.in_channels, spec.out_channels, spec.out_size)
    if spec.kind is LayerKind.CONV_DW:
        return cost_depthwise(spec.kernel, spec.in_channels, spec.out_size)
    if spec.kind is LayerKind.CONV_PW:
        return cost_pointwise(spec.in_channels, spec.out_channels, spec.out_size)
    if spec.kind is LayerKind.FC:
        return CostPair(
            spec.in_channels * spec.out_channels,
            spec.in_channels * spec.out_channels + spec.out_channels,
        )
    return CostPair(0, 0)


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: LayerKind
    detail: str
    mult_adds: int
    params: int


@dataclass(frozen=True)
class TypeShare:
    mult_adds: int
    params: int
    mult_add_pct: float
    param_pct: float


@dataclass(frozen=True)
class CostReport:
    layers: tuple[LayerCost, ...]
    total_mult_adds: int
    total_params: int


def _detail(spec: LayerSpec) -> str:
    if spec.kind is LayerKind.CONV_STD:
        return (
            f"conv {spec.kernel}x{spec.kernel} s{spec.stride} "
            f"{spec.in_channels}->{spec.out_channels} @{spec.out_size}"
        )
    if spec.kind is LayerKind.CONV_DW:
        return f"dw {spec.kernel}x{spec.kernel} s{spec.stride} {spec.in_channels} @{spec.out_size}"
    if spec.kind is LayerKind.CONV_PW:
        return f"pw {spec.in_channels}->{spec.out_channels} @{spec.out_size}"
    if spec.kind is LayerKind.AVGPOOL:
        return f"avgpool {spec.in_size}x{spec.in_size}"
    if spec.kind is LayerKind.FC:
        return f"fc {spec.in_channels}->{spec.out_channels}"
    return "softmax"


def analyze(arch: ArchDescriptor) -> CostReport:
    rows = []
    total = CostPair(0, 0)
    for i, spec in enumerate(arch.layers):
        cost = layer_cost(spec)
        total = total + cost
        rows.append(LayerCost(i, spec.kind, _detail(spec), cost.mult_adds, cost.params))
    return CostReport(tuple(rows), total.mult_adds, total.params)


_TYPE_LABELS = {
    LayerKind.CONV_STD: "conv 3x3",
    LayerKind.CONV_DW: "conv dw 3x3",
    LayerKind.CONV_PW: "conv 1x1",
    LayerKind.FC: "fully connected",
}


def kind_label(kind: LayerKind) -> str | None:
    """Aggregation label for a layer kind; None for zero-cost layers."""
    return _TYPE_LABELS.get(kind)


def breakdown_by_type(report: CostReport) -> dict[str, TypeShare]:
    """Mult-add and parameter totals per layer family, with percent shares."""
    sums: dict[str, CostPair] = {}
    for row in report.layers:
        label = _TYPE_LABELS.get(row.kind)
        if label is None:
            continue
        sums[label] = sums.get(label, CostPair(0, 0)) + CostPair(row.mult_adds, row.params)
    out = {}
    for label, pair in sums.items():
        out[label] = TypeShare(
            pair.mult_adds,
            pair.params,
            100.0 * pair.mult_adds / report.total_mult_adds,
            100.0 * pair.params / report.total_params,
        )
    return out


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    resolution: int
    mult_adds: int
    params: int


def sweep(
    alphas=(1.0, 0.75, 0.5, 0.25),
    resolutions=(224, 192, 160, 128),
    num_classes: int = 1000,
    shallow: bool = False,
) -> list[SweepRow]:
    rows = []
    for a in alphas:
        for r in resolutions:
            hp = Hyperparams(alpha=a, resolution=r, num_classes=num_classes, shallow=shallow)
            rep = analyze(build_mobilenet(hp))
            rows.append(SweepRow(a, r, rep.total_mult_adds, rep.total_params))
    return rows


# --- display helpers: millions at integer, 1-decimal, and 3-sig-fig widths --


def fmt_million_int(count: int) -> str:
    """Mult-adds as whole millions: 568740352 -> '569'."""
    return str(round(count / 1e6))


def fmt_million_1dp(count: int) -> str:
    """Parameters as millions with one decimal: 4210088 -> '4.2'."""
    return f"{count / 1e6:.1f}"


def fmt_million_sig(count: int) -> str:
    """Millions with one decimal below 100, whole above: 52.3, 462."""
    m = count / 1e6
    return f"{m:.0f}" if m >= 100 else f"{m:.1f}"


def fmt_pct(x: float) -> str:
    return f"{x:.2f}"
