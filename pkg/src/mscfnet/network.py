"""Full network assembly and the ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import ops
from .layers import (
    AttentionConfig,
    Conv2d,
    ConvBN,
    DownsamplingBlock,
    EAR,
    EarConfig,
    InitialBlock,
    InputInjection,
    Module,
    ModuleList,
    PReLU,
    TransposedConv2d,
    Upsample,
    channel_attention,
)
from .tensor import ShapeError, Tensor

LEVELS = ("low", "mid", "high")
UPSAMPLE = {"low": 1, "mid": 2, "high": 4}
INJECT_CHANNELS = 3


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 11
    stage_widths: tuple = (32, 64, 128)
    ear_counts: tuple = (5, 10)
    dilation_schedule_1: tuple = (1, 1, 2, 2, 5)
    dilation_schedule_2: tuple = (1, 2, 5, 7, 9, 2, 5, 7, 9, 17)
    attention: str = "eca"
    spatial_attention: bool = True
    fusion: str = "add"
    branch_levels: tuple = LEVELS
    branch_width: int = 32
    shuffle_groups: int = 2

    def __post_init__(self):
        # normalize list-ish inputs so equal configs compare equal
        for name in ("stage_widths", "ear_counts", "dilation_schedule_1", "dilation_schedule_2"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "branch_levels", tuple(l for l in LEVELS if l in set(self.branch_levels)))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.stage_widths) != 3 or any(w < 2 or w % 2 for w in self.stage_widths):
            raise ValueError(f"stage widths must be three even counts, got {self.stage_widths}")
        if len(self.ear_counts) != 2:
            raise ValueError("ear_counts must hold two module counts")
        if len(self.dilation_schedule_1) != self.ear_counts[0]:
            raise ValueError(
                f"dilation_schedule_1 has {len(self.dilation_schedule_1)} rates for {self.ear_counts[0]} modules"
            )
        if len(self.dilation_schedule_2) != self.ear_counts[1]:
            raise ValueError(
                f"dilation_schedule_2 has {len(self.dilation_schedule_2)} rates for {self.ear_counts[1]} modules"
            )
        if any(d < 1 for d in self.dilation_schedule_1 + self.dilation_schedule_2):
            raise ValueError("dilation rates must be >= 1")
        if self.attention not in ("eca", "se", "none"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.fusion not in ("add", "concat", "none"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if "high" not in self.branch_levels:
            raise ValueError("branch_levels must include 'high'")
        if self.fusion == "none" and self.branch_levels != ("high",):
            raise ValueError("fusion 'none' keeps only the high-level branch")
        if self.branch_width < 1 or self.branch_width % 2:
            raise ValueError("branch_width must be a positive even count")

    @property
    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(kind=self.attention)


class Branch(Module):
    """1x1 projection, bilinear upsampling to the 1/2 scale, channel attention."""

    def __init__(self, rng, c_in, width, factor, attention: AttentionConfig):
        super().__init__()
        self.factor = factor
        self.proj = ConvBN(rng, c_in, width, 1, act=False)
        self.up = Upsample(factor)
        self.ca = channel_attention(rng, width, attention)

    def forward(self, x):
        return self.ca(self.up(self.proj(x)))


class MscfNet(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        att = cfg.attention_config
        w0, w1, w2 = cfg.stage_widths
        sa = cfg.spatial_attention

        self.initial = InitialBlock(rng, w0)
        self.inject1 = InputInjection(rng, 1, sa)
        self.ca1 = channel_attention(rng, w0 + INJECT_CHANNELS, att)
        self.down1 = DownsamplingBlock(rng, w0 + INJECT_CHANNELS, w1)
        self.block1 = ModuleList(
            EAR(rng, EarConfig(w1, d, cfg.shuffle_groups), att) for d in cfg.dilation_schedule_1
        )
        self.inject2 = InputInjection(rng, 2, sa)
        self.ca2 = channel_attention(rng, w1 + INJECT_CHANNELS, att)
        self.down2 = DownsamplingBlock(rng, w1 + INJECT_CHANNELS, w2)
        self.block2 = ModuleList(
            EAR(rng, EarConfig(w2, d, cfg.shuffle_groups), att) for d in cfg.dilation_schedule_2
        )
        self.inject3 = InputInjection(rng, 3, sa)
        self.ca3 = channel_attention(rng, w2 + INJECT_CHANNELS, att)
        self.reduce3 = ConvBN(rng, w2 + INJECT_CHANNELS, w2, 1)

        tap_channels = {"low": w0 + INJECT_CHANNELS, "mid": w1 + INJECT_CHANNELS, "high": w2}
        bw = cfg.branch_width
        for level in cfg.branch_levels:
            setattr(self, f"branch_{level}", Branch(rng, tap_channels[level], bw, UPSAMPLE[level], att))
        if cfg.fusion == "concat":
            self.fuse = Conv2d(rng, bw * len(cfg.branch_levels), bw, 1)
        if cfg.fusion != "none":
            self.fuse_act = PReLU(bw)
        self.classifier = Conv2d(rng, bw, cfg.num_classes, 1, bias=True)
        self.deconv = TransposedConv2d(rng, cfg.num_classes, cfg.num_classes, 2, 2)
        self.assign_names()

    def forward(self, image: Tensor, probe: Optional[dict] = None) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected a B×3×H×W image, got {image.shape}")
        for axis, extent in zip(("height", "width"), image.shape[2:]):
            if extent % 8:
                raise ShapeError(f"image {axis} {extent} is not divisible by 8")

        o1 = self.initial(image)
        tap_low = self.ca1(ops.concat_channels([o1, self.inject1(image)]))
        x = self.down1(tap_low)
        for m in self.block1:
            x = m(x)
        tap_mid = self.ca2(ops.concat_channels([x, self.inject2(image)]))
        x = self.down2(tap_mid)
        for m in self.block2:
            x = m(x)
        tap_high = self.reduce3(self.ca3(ops.concat_channels([x, self.inject3(image)])))

        taps = {"low": tap_low, "mid": tap_mid, "high": tap_high}
        outs = [getattr(self, f"branch_{lvl}")(taps[lvl]) for lvl in self.cfg.branch_levels]
        if self.cfg.fusion == "add":
            fused = self.fuse_act(ops.add_n(outs))
        elif self.cfg.fusion == "concat":
            fused = self.fuse_act(self.fuse(ops.concat_channels(outs)))
        else:
            fused = outs[0]
        logits = self.deconv(self.classifier(fused))

        if probe is not None:
            probe["input"] = image.shape
            probe["O_1"] = o1.shape
            probe.update({f"I_{i}": taps[lvl].shape for i, lvl in enumerate(LEVELS, 1)})
            probe["branches"] = {
                lvl: (getattr(self, f"branch_{lvl}").factor, out.shape) for lvl, out in zip(self.cfg.branch_levels, outs)
            }
            probe["fused"] = fused.shape
            probe["logits"] = logits.shape
        return logits

    def macs(self, args, out):
        # concats are free; the fusion sum costs one add per branch element
        if self.cfg.fusion == "add":
            b, _, h, w = args[0].shape
            return (len(self.cfg.branch_levels) - 1) * b * self.cfg.branch_width * (h // 2) * (w // 2)
        return 0

    def tap_chains(self) -> dict:
        """Convolution/pooling chains (kernel, stride, dilation) per axis from the image to each tap.

        Each EAR module is represented by its widest path along one axis: the
        3x3 bottleneck followed by the dilated 3-tap convolution on that axis. Attention
        gates are excluded (their global pooling would make the field unbounded).
        """
        def ear(d):
            return [(3, 1, 1), (3, 1, d)]

        stem = [(3, 2, 1), (3, 1, 1), (3, 1, 1)]
        low = list(stem)
        mid = low + [(3, 2, 1)]
        for d in self.cfg.dilation_schedule_1:
            mid += ear(d)
        high = mid + [(3, 2, 1)]
        for d in self.cfg.dilation_schedule_2:
            high += ear(d)
        high += [(1, 1, 1)]
        return {"low": low, "mid": mid, "high": high}


def build(cfg: NetworkConfig, seed: int = 0) -> MscfNet:
    return MscfNet(cfg, np.random.default_rng(seed))


CANONICAL = NetworkConfig()

_NO_ATT = dict(attention="none", spatial_attention=False)


def variant_presets(num_classes: int = 11) -> dict[str, NetworkConfig]:
    """The ablation rows, keyed by preset name (default classes: the ablation dataset's 11)."""
    final = replace(CANONICAL, num_classes=num_classes)
    return {
        "final": final,
        "no-fusion": replace(final, fusion="none", branch_levels=("high",), **_NO_ATT),
        "fusion-concat": replace(final, fusion="concat", **_NO_ATT),
        "fusion-add": replace(final, fusion="add", **_NO_ATT),
        "attention-se": replace(final, attention="se", spatial_attention=False),
        "attention-eca": replace(final, attention="eca", spatial_attention=False),
        "+spatial": final,
        "reduced-modules": replace(
            final, ear_counts=(3, 6), dilation_schedule_1=(1, 1, 2), dilation_schedule_2=(1, 2, 5, 7, 9, 17)
        ),
        "power-of-two-rates": replace(final, dilation_schedule_2=(1, 1, 2, 2, 4, 4, 8, 8, 16, 16)),
        "high-only": replace(final, branch_levels=("high",)),
        "high+mid": replace(final, branch_levels=("mid", "high")),
        "high+mid+low": final,
    }


def tiny_config(num_classes: int = 3) -> NetworkConfig:
    """Desk-scale network used for the synthetic training experiment."""
    return NetworkConfig(
        num_classes=num_classes,
        stage_widths=(16, 32, 64),
        ear_counts=(2, 4),
        dilation_schedule_1=(1, 2),
        dilation_schedule_2=(1, 2, 5, 9),
        branch_width=16,
    )


def gradcheck_config(num_classes: int = 3) -> NetworkConfig:
    """Smallest network exercising every block; used by the end-to-end gradient check."""
    return NetworkConfig(
        num_classes=num_classes,
        stage_widths=(8, 16, 32),
        ear_counts=(1, 2),
        dilation_schedule_1=(1,),
        dilation_schedule_2=(1, 2),
        branch_width=8,
    )


EXTRA_PRESETS = {"tiny": tiny_config, "gradcheck": gradcheck_config}


def get_preset(name: str, num_classes: Optional[int] = None) -> NetworkConfig:
    presets = variant_presets()
    if name in presets:
        cfg = presets[name]
        return cfg if num_classes is None else replace(cfg, num_classes=num_classes)
    if name in EXTRA_PRESETS:
        return EXTRA_PRESETS[name]() if num_classes is None else EXTRA_PRESETS[name](num_classes)
    raise KeyError(f"unknown preset {name!r}; known: {', '.join(known_presets())}")


def known_presets() -> list[str]:
    return list(variant_presets()) + list(EXTRA_PRESETS)
