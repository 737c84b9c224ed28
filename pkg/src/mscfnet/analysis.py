"""Static analyzers: parameter and MAC census, receptive field, dilation coverage.

MACs count one multiply-accumulate as one unit. Convolutions cost
out_elements · kh · kw · C_in/groups; norms, activations, pooling, gates and
adds are charged per element they touch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .layers import _RECORDERS, eca_kernel_size
from .network import INJECT_CHANNELS, MscfNet, NetworkConfig
from .tensor import Tensor

REFERENCE_PARAMS = 1_148_600  # reference size of the final variant; the report states the delta to it


@dataclass
class LayerRow:
    name: str
    kind: str
    output_shape: tuple
    params: int
    macs: int


@dataclass
class CoverageReport:
    schedule: tuple
    receptive_field: int
    reachable: int
    density: float
    largest_gap: int
    offsets: frozenset = field(repr=False)

    @property
    def verdict(self) -> str:
        return "full" if self.largest_gap == 0 else "gapped"


@dataclass
class AnalysisReport:
    input_shape: tuple
    rows: list[LayerRow]
    receptive_fields: dict
    coverage: dict

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"# input {format_shape(self.input_shape)}; FLOPs counted as MACs (1 multiply-accumulate = 1)\n")
        wn = max([len(r.name) for r in self.rows] + [5])
        out.write(f"{'layer':<{wn}}  {'kind':<18} {'output':<20} {'params':>10} {'MACs':>15}\n")
        for r in self.rows:
            out.write(f"{r.name:<{wn}}  {r.kind:<18} {format_shape(r.output_shape):<20} {r.params:>10d} {r.macs:>15d}\n")
        delta = self.total_params - REFERENCE_PARAMS
        out.write(
            f"total params: {self.total_params} ({self.total_params / 1e6:.4f}M; "
            f"delta to 1.1486M: {delta:+d}, {100.0 * delta / REFERENCE_PARAMS:+.2f}%)\n"
        )
        out.write(f"total MACs: {self.total_macs} ({self.total_macs / 1e9:.3f}G)\n")
        for tap, (rf, jump) in self.receptive_fields.items():
            out.write(f"receptive field {tap}: {rf} px (jump {jump})\n")
        for name, cov in self.coverage.items():
            out.write(
                f"{name} {list(cov.schedule)}: density {cov.density:.4f}, largest gap {cov.largest_gap}, "
                f"coverage: {cov.verdict}\n"
            )
        return out.getvalue()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "output_shape", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.kind, format_shape(r.output_shape), r.params, r.macs])
        return buf.getvalue()


def format_shape(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


# ---------------------------------------------------------------------------
# parameter census


def count_params(net: MscfNet) -> tuple[int, dict[str, int]]:
    per_layer: dict[str, int] = {}
    for name, mod in net.named_modules():
        n = sum(p.data.size for p in mod._params.values() if p.trainable)
        if n:
            per_layer[name] = n
    return sum(per_layer.values()), per_layer


def closed_form_params(cfg: NetworkConfig) -> int:
    """Trainable-scalar count of a configuration from its arithmetic alone."""
    w0, w1, w2 = cfg.stage_widths
    bw, k = cfg.branch_width, cfg.num_classes
    se_r = 16

    def ca(c):
        if cfg.attention == "eca":
            return eca_kernel_size(c)
        if cfg.attention == "se":
            h = max(1, c // se_r)
            return 2 * c * h + h
        return 0

    def conv_bn(cin, cout, kk, act=True):
        return cin * cout * kk + 2 * cout + (cout if act else 0)

    def ear(c):
        h = c // 2
        return c + conv_bn(c, h, 9, act=False) + 4 * (3 * h + 2 * h) + 3 * ca(h) + h + conv_bn(h, c, 1, act=False)

    def down(cin, cout):
        n_conv = cout - cin if cin < cout else cout
        return 9 * cin * n_conv + 3 * cout

    sa = (2 * 49 + 1) if cfg.spatial_attention else 0
    c1, c2, c3 = w0 + INJECT_CHANNELS, w1 + INJECT_CHANNELS, w2 + INJECT_CHANNELS
    total = conv_bn(3, w0, 9) + 2 * conv_bn(w0, w0, 9)
    total += sa + ca(c1) + down(c1, w1) + sum(ear(w1) for _ in range(cfg.ear_counts[0]))
    total += sa + ca(c2) + down(c2, w2) + sum(ear(w2) for _ in range(cfg.ear_counts[1]))
    total += sa + ca(c3) + conv_bn(c3, w2, 1)
    tap = {"low": c1, "mid": c2, "high": w2}
    total += sum(conv_bn(tap[lvl], bw, 1, act=False) + ca(bw) for lvl in cfg.branch_levels)
    if cfg.fusion == "concat":
        total += len(cfg.branch_levels) * bw * bw
    if cfg.fusion != "none":
        total += bw
    total += bw * k + k + k * k * 4 + k
    return total


# ---------------------------------------------------------------------------
# MAC census


def _trace(net: MscfNet, input_shape: Sequence[int]) -> list[LayerRow]:
    names = {id(m): n for n, m in net.named_modules()}
    rows: list[LayerRow] = []

    def hook(mod, args, out):
        own_params = sum(p.data.size for p in mod._params.values() if p.trainable)
        macs = int(mod.macs(args, out))
        if own_params or macs:
            rows.append(LayerRow(names.get(id(mod), "?") or "net", type(mod).__name__, out.shape, own_params, macs))

    was_training = net.training
    net.eval()
    _RECORDERS.append(hook)
    try:
        net(Tensor(np.zeros(tuple(input_shape))))
    finally:
        _RECORDERS.pop()
        net.train(was_training)
    return rows


def count_flops(net: MscfNet, input_shape: Sequence[int]) -> int:
    return sum(r.macs for r in _trace(net, input_shape))


# ---------------------------------------------------------------------------
# receptive field


def receptive_field(chain: Iterable) -> tuple[int, int]:
    """Receptive field and jump of a chain of (kernel, stride, dilation) layers on one axis.

    r' = r + (k - 1)·d·j,  j' = j·s, starting from r = j = 1.
    """
    r, j = 1, 1
    for k, s, d in chain:
        r += (k - 1) * d * j
        j *= s
    return r, j


# ---------------------------------------------------------------------------
# dilation coverage


def dilation_coverage(schedule: Sequence[int], kernel: int = 3) -> CoverageReport:
    """Brute-force 1-D footprint of stacked ``kernel``-tap dilated convolutions.

    The footprint is the Minkowski sum of the per-layer tap offset sets; the
    report gives the reachable fraction of the theoretical field and the
    longest run of unreachable offsets.
    """
    if not schedule:
        raise ValueError("schedule must be nonempty")
    half = kernel // 2
    reach = {0}
    for d in schedule:
        taps = [t * d for t in range(-half, half + 1)]
        reach = {a + b for a in reach for b in taps}
    extent = half * sum(schedule)
    rf = 2 * extent + 1
    gap = run = 0
    for pos in range(-extent, extent + 1):
        run = 0 if pos in reach else run + 1
        gap = max(gap, run)
    return CoverageReport(tuple(schedule), rf, len(reach), len(reach) / rf, gap, frozenset(reach))


# ---------------------------------------------------------------------------
# full report


def analyze(net: MscfNet, input_shape: Sequence[int] = (1, 3, 360, 480)) -> AnalysisReport:
    rows = _trace(net, input_shape)
    rfs = {tap: receptive_field(chain) for tap, chain in net.tap_chains().items()}
    cov = {
        "schedule 1": dilation_coverage(net.cfg.dilation_schedule_1),
        "schedule 2": dilation_coverage(net.cfg.dilation_schedule_2),
    }
    return AnalysisReport(tuple(input_shape), rows, rfs, cov)
