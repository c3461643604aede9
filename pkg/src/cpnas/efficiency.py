"""Static memory and FLOPs accounting.

Conventions:

* memory bits = 32 per full-precision parameter + 1 per binarized weight;
  batch-norm affine parameters count as full precision, running statistics
  and activations do not count;
* FLOPs are multiply-accumulates of convolutions and linear layers for one
  image; batch norm and pooling contribute none;
* effective FLOPs = full-precision MACs + binarized MACs / 64;
* ratios are baseline / model, so larger is better.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .binary import BinConv2d
from .layers import BatchNorm2d, Conv2d, Linear
from .ops import Flavor
from .space import Genotype, NetworkConfig, build_network

BITS_FP = 32
BITS_BIN = 1
BIN_MAC_DISCOUNT = 64

# printed (memory Mbits, FLOPs M, memory saving, speedup); None where the row has no printed ratio
TABLE3 = {
    "WRN-22": (138.27, 647.70, 1.0, 1.0),
    "WRN-22 (BONN)": (5.71, 17.03, 24.19, 28.03),
    "CP-NAS (Small)": (3.32, 12.89, 41.56, 50.24),
    "CP-NAS (Medium)": (4.85, 18.30, 27.93, 35.39),
    "CP-NAS (Large)": (11.51, 38.67, 12.01, 16.75),
}
# 647.70 / 17.03 = 38.03, not the printed 28.03
TABLE3_INCONSISTENT = {("WRN-22 (BONN)", "speedup")}


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str  # conv | bin_conv | linear | bn
    params: int
    macs: int

    @property
    def binarized(self) -> bool:
        return self.kind == "bin_conv"


@dataclass(frozen=True)
class EfficiencyReport:
    name: str
    fp_params: int
    bin_weights: int
    flops_fp: int
    flops_bin: int

    def __post_init__(self):
        for f in ("fp_params", "bin_weights", "flops_fp", "flops_bin"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")

    @property
    def params_total(self) -> int:
        return self.fp_params + self.bin_weights

    @property
    def memory_bits(self) -> int:
        return BITS_FP * self.fp_params + BITS_BIN * self.bin_weights

    @property
    def memory_mbits(self) -> float:
        return self.memory_bits / 1e6

    @property
    def flops_effective(self) -> float:
        return self.flops_fp + self.flops_bin / BIN_MAC_DISCOUNT

    @property
    def flops_m(self) -> float:
        return self.flops_effective / 1e6

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            params_total=self.params_total,
            memory_bits=self.memory_bits,
            memory_mbits=self.memory_mbits,
            flops_effective=self.flops_effective,
            flops_m=self.flops_m,
        )
        return d


def from_layers(name: str, layers: list[LayerCount]) -> EfficiencyReport:
    fp = sum(l.params for l in layers if not l.binarized)
    bw = sum(l.params for l in layers if l.binarized)
    mf = sum(l.macs for l in layers if not l.binarized)
    mb = sum(l.macs for l in layers if l.binarized)
    return EfficiencyReport(name, fp, bw, mf, mb)


def from_printed(name: str, memory_mbits: float, flops_m: float) -> EfficiencyReport:
    """A report carrying only totals (all full precision), for ratio arithmetic on printed rows."""
    return EfficiencyReport(name, int(round(memory_mbits * 1e6 / BITS_FP)), 0, int(round(flops_m * 1e6)), 0)


def compare(model: EfficiencyReport, baseline: EfficiencyReport) -> tuple[float, float]:
    """(memory saving, speedup) of ``model`` relative to ``baseline``."""
    if model.memory_bits == 0 or model.flops_effective == 0:
        raise ZeroDivisionError(f"{model.name}: zero memory or FLOPs")
    return baseline.memory_bits / model.memory_bits, baseline.flops_effective / model.flops_effective


def printed_ratios(row: str, baseline: str = "WRN-22") -> tuple[float, float]:
    """Ratios recomputed from a Table 3 row's printed memory and FLOPs columns."""
    mem, flops = TABLE3[row][:2]
    bmem, bflops = TABLE3[baseline][:2]
    return bmem / mem, bflops / flops


# --------------------------------------------------------------------------
# counting built networks
# --------------------------------------------------------------------------


def _conv_macs(spec, out_shape) -> int:
    _, _, ho, wo = out_shape
    return spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel_size**2 * ho * wo


def trace_layers(network, input_shape: tuple[int, int, int]) -> list[LayerCount]:
    """Run one image through the active network and count every executed layer."""
    L._trace = []
    try:
        network.forward(np.zeros((1,) + tuple(input_shape)), training=False)
        events = L._trace
    finally:
        L._trace = None
    counted = []
    for layer, _, out_shape in events:
        if isinstance(layer, BinConv2d):
            counted.append(LayerCount(type(layer).__name__, "bin_conv", layer.weight.data.size, _conv_macs(layer.spec, out_shape)))
        elif isinstance(layer, Conv2d):
            counted.append(LayerCount(type(layer).__name__, "conv", layer.weight.data.size, _conv_macs(layer.spec, out_shape)))
        elif isinstance(layer, Linear):
            n = layer.weight.data.size + layer.bias.data.size
            counted.append(LayerCount("Linear", "linear", n, layer.weight.data.size))
    for name, mod in network.named_modules():
        if isinstance(mod, BatchNorm2d) and mod.state.affine:
            counted.append(LayerCount(name, "bn", 2 * mod.state.channels, 0))
    return counted


def count_model(network, input_shape: tuple[int, int, int] = (3, 32, 32), name: str = "model") -> EfficiencyReport:
    return from_layers(name, trace_layers(network, input_shape))


def count_genotype(
    genotype: Genotype, config: NetworkConfig, input_shape: tuple[int, int, int] = (3, 32, 32), name: str = "genotype"
) -> EfficiencyReport:
    """Counts for the binarized evaluation network built from ``genotype``."""
    if genotype is None or genotype.sample is None:
        raise ValueError("genotype is incomplete")
    cfg = NetworkConfig(**{**config.__dict__, "flavor": Flavor.CHILD})
    return count_model(build_network(cfg, genotype.sample, seed=0), input_shape, name)


# --------------------------------------------------------------------------
# WRN-22 baseline (static layer table)
# --------------------------------------------------------------------------


def wrn_layers(depth: int = 22, widen: int = 4, num_classes: int = 10, image: int = 32) -> list[LayerCount]:
    """Pre-activation wide ResNet: 3x3 stem to the first group's width, three
    groups of ``(depth - 4) / 6`` blocks, 1x1 shortcuts where the shape
    changes, final BN, global pooling and a linear classifier with bias."""
    if (depth - 4) % 6:
        raise ValueError(f"depth {depth} is not 6n + 4")
    blocks = (depth - 4) // 6
    widths = [16 * widen, 32 * widen, 64 * widen]
    out: list[LayerCount] = []

    def conv(name, cin, cout, k, hw):
        out.append(LayerCount(name, "conv", cin * cout * k * k, cin * cout * k * k * hw * hw))

    def bn(name, c):
        out.append(LayerCount(name, "bn", 2 * c, 0))

    hw = image
    conv("stem", 3, widths[0], 3, hw)
    cin = widths[0]
    for g, w in enumerate(widths):
        for b in range(blocks):
            stride = 2 if g > 0 and b == 0 else 1
            bn(f"g{g}b{b}.bn1", cin)
            hw_out = hw // stride
            conv(f"g{g}b{b}.conv1", cin, w, 3, hw_out)
            bn(f"g{g}b{b}.bn2", w)
            conv(f"g{g}b{b}.conv2", w, w, 3, hw_out)
            if cin != w or stride != 1:
                conv(f"g{g}b{b}.shortcut", cin, w, 1, hw_out)
            cin, hw = w, hw_out
    bn("final.bn", cin)
    out.append(LayerCount("fc", "linear", cin * num_classes + num_classes, cin * num_classes))
    return out


def wrn22_report(include_bn: bool = True) -> EfficiencyReport:
    layers = [l for l in wrn_layers() if include_bn or l.kind != "bn"]
    return from_layers("WRN-22", layers)


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------

TSV_COLUMNS = ("name", "memory_mbits", "memory_saving", "flops_m", "speedup", "params_total", "fp_params", "bin_weights", "flops_fp", "flops_bin")


def report_rows(reports: list[EfficiencyReport], baseline: EfficiencyReport) -> list[dict]:
    rows = []
    for r in [baseline] + list(reports):
        saving, speedup = compare(r, baseline)
        rows.append({**r.to_dict(), "memory_saving": saving, "speedup": speedup, "baseline": baseline.name})
    return rows


def report_tsv(reports: list[EfficiencyReport], baseline: EfficiencyReport) -> str:
    lines = ["\t".join(TSV_COLUMNS)]
    for row in report_rows(reports, baseline):
        cells = []
        for col in TSV_COLUMNS:
            v = row[col]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def report_json(reports: list[EfficiencyReport], baseline: EfficiencyReport) -> str:
    return json.dumps({"baseline": baseline.name, "rows": report_rows(reports, baseline)}, indent=2, sort_keys=True) + "\n"
