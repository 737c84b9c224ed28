"""Building blocks of the network: EAR module, attention gates, down/initial blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor

# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Minimal container: parameters and children are discovered in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters(trainable_only=True):
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters(trainable_only=True))

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if _RECORDERS:
            _RECORDERS[-1](self, args, out)
        return out

    def macs(self, args, out) -> int:
        """Multiply-accumulates of this module's own ops, children excluded."""
        return 0

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# Hooks used by the analyzer: callables (module, args, output), called after every module.
_RECORDERS: list = []


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# leaf layers


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dilation=1, groups=1, bias=False):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if c_in % groups or c_out % groups:
            raise ShapeError(f"groups={groups} must divide {c_in} and {c_out}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, (kh, kw)
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = (c_in // groups) * kh * kw
        self.weight = Parameter(he_uniform(rng, (c_out, c_in // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def macs(self, args, out):
        return out.data.size * self.kernel[0] * self.kernel[1] * (self.c_in // self.groups)


class TransposedConv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=2, stride=2, padding=0, bias=True):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, (kernel, kernel)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(he_uniform(rng, (c_in, c_out, kernel, kernel), c_out * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return ops.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def macs(self, args, out):
        return args[0].data.size * self.c_out * self.kernel[0] * self.kernel[1]


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = Parameter(np.zeros(channels), trainable=False)
        self.running_var = Parameter(np.ones(channels), trainable=False)

    def forward(self, x):
        return ops.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def macs(self, args, out):
        return out.data.size


class PReLU(Module):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.channels = channels
        self.weight = Parameter(np.full(channels, init))

    def forward(self, x):
        return ops.prelu(x, self.weight)

    def macs(self, args, out):
        return out.data.size


class MaxPool2d(Module):
    def __init__(self, kernel=2, stride=2, ceil_mode=False):
        super().__init__()
        self.kernel, self.stride, self.ceil_mode = kernel, stride, ceil_mode

    def forward(self, x):
        return ops.pool2d(x, "max", self.kernel, self.stride, self.ceil_mode)

    def macs(self, args, out):
        return out.data.size * self.kernel * self.kernel


class AvgPool2d(Module):
    def __init__(self, kernel=2, stride=2):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x):
        return ops.pool2d(x, "avg", self.kernel, self.stride)

    def macs(self, args, out):
        return out.data.size * self.kernel * self.kernel


class Upsample(Module):
    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return ops.bilinear_upsample(x, self.factor)

    def macs(self, args, out):
        return 0 if self.factor == 1 else 4 * out.data.size


class Identity(Module):
    def forward(self, x):
        return x


class ConvBN(Module):
    """Convolution, batch norm, optional PReLU."""

    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dilation=1, groups=1, act=True):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, kernel, stride, padding, dilation, groups)
        self.bn = BatchNorm2d(c_out)
        self.act = PReLU(c_out) if act else None

    def forward(self, x):
        x = self.bn(self.conv(x))
        return self.act(x) if self.act is not None else x


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "eca"  # "eca" | "se" | "none"
    spatial_kernel: int = 7
    eca_gamma: float = 2.0
    eca_b: float = 1.0
    se_reduction: int = 16

    def __post_init__(self):
        if self.kind not in ("eca", "se", "none"):
            raise ValueError(f"unknown channel attention {self.kind!r}")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")


def eca_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Odd 1-D kernel length for efficient channel attention.

    Nearest odd integer to log2(C)/gamma + b/gamma; exact ties go to the
    smaller odd number, and the result is at least 3.
    """
    t = math.log2(channels) / gamma + b / gamma
    half = math.ceil((t - 1) / 2 - 0.5)  # round half down
    return max(3, 2 * half + 1)


class SpatialAttention(Module):
    """Gate every pixel by sigmoid(conv7x7([mean_c(F), max_c(F)]))."""

    def __init__(self, rng, kernel=7):
        super().__init__()
        self.conv = Conv2d(rng, 2, 1, kernel, padding=kernel // 2, bias=True)
        self.last_map: Optional[np.ndarray] = None

    def attention_map(self, f: Tensor) -> Tensor:
        desc = ops.concat_channels([ops.channel_mean(f), ops.channel_max(f)])
        return ops.sigmoid(self.conv(desc))

    def forward(self, f):
        gate = self.attention_map(f)
        self.last_map = gate.data
        return ops.mul(f, gate)

    def macs(self, args, out):
        # channel mean + channel max, sigmoid, gating
        b, c, h, w = out.shape
        return 2 * b * c * h * w + b * h * w + b * c * h * w


class ECA(Module):
    def __init__(self, rng, channels, gamma=2.0, b=1.0):
        super().__init__()
        self.channels = channels
        self.k = eca_kernel_size(channels, gamma, b)
        self.weight = Parameter(he_uniform(rng, (self.k,), self.k))

    def gate(self, f: Tensor) -> Tensor:
        return ops.sigmoid(ops.conv1d_channels(ops.global_avg_pool(f), self.weight))

    def forward(self, f):
        return ops.mul(f, self.gate(f))

    def macs(self, args, out):
        # pooling, channel conv, sigmoid, gating
        b, c = out.shape[:2]
        return 2 * out.data.size + b * c * self.k + b * c


class SE(Module):
    """Squeeze-excitation with bias-free 1x1 layers and a PReLU in between."""

    def __init__(self, rng, channels, reduction=16):
        super().__init__()
        self.channels = channels
        self.hidden = max(1, channels // reduction)
        self.fc1 = Conv2d(rng, channels, self.hidden, 1)
        self.act = PReLU(self.hidden)
        self.fc2 = Conv2d(rng, self.hidden, channels, 1)

    def gate(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(self.act(self.fc1(ops.global_avg_pool(f)))))

    def forward(self, f):
        return ops.mul(f, self.gate(f))

    def macs(self, args, out):
        # pooling, sigmoid, gating; the 1x1 layers report themselves
        return 2 * out.data.size + out.shape[0] * out.shape[1]


def channel_attention(rng, channels: int, cfg: AttentionConfig) -> Module:
    if cfg.kind == "eca":
        return ECA(rng, channels, cfg.eca_gamma, cfg.eca_b)
    if cfg.kind == "se":
        return SE(rng, channels, cfg.se_reduction)
    return Identity()


# ---------------------------------------------------------------------------
# EAR module


@dataclass(frozen=True)
class EarConfig:
    channels: int
    dilation: int = 1
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.channels % 2:
            raise ShapeError(f"EAR module needs an even channel count, got {self.channels}")
        if self.channels % self.shuffle_groups:
            raise ShapeError(f"shuffle groups {self.shuffle_groups} do not divide {self.channels}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")


class EAR(Module):
    """Efficient asymmetric residual module.

    x_b = BN(conv3x3(PReLU(x)))                      C -> C/2
    u   = BN(dw3x1(x_b)),  v = BN(dw3x1_d(x_b))
    y1  = CA(BN(dw1x3(u + v)))
    y2  = CA(BN(dw1x3_d(v + u)))
    out = shuffle(BN(conv1x1(CA(PReLU(y1 + y2)))) + x)  C/2 -> C
    """

    def __init__(self, rng, cfg: EarConfig, attention: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.cfg = cfg
        c, h, d = cfg.channels, cfg.channels // 2, cfg.dilation
        self.act_in = PReLU(c)
        self.bottleneck = ConvBN(rng, c, h, 3, padding=1, act=False)
        self.dw3x1 = ConvBN(rng, h, h, (3, 1), padding=(1, 0), groups=h, act=False)
        self.dw3x1_d = ConvBN(rng, h, h, (3, 1), padding=(d, 0), dilation=(d, 1), groups=h, act=False)
        self.dw1x3 = ConvBN(rng, h, h, (1, 3), padding=(0, 1), groups=h, act=False)
        self.dw1x3_d = ConvBN(rng, h, h, (1, 3), padding=(0, d), dilation=(1, d), groups=h, act=False)
        self.ca1 = channel_attention(rng, h, attention)
        self.ca2 = channel_attention(rng, h, attention)
        self.act_mid = PReLU(h)
        self.ca_mid = channel_attention(rng, h, attention)
        self.project = ConvBN(rng, h, c, 1, act=False)

    def forward(self, x):
        xb = self.bottleneck(self.act_in(x))
        u = self.dw3x1(xb)
        v = self.dw3x1_d(xb)
        y1 = self.ca1(self.dw1x3(ops.add(u, v)))
        y2 = self.ca2(self.dw1x3_d(ops.add(v, u)))
        z = self.project(self.ca_mid(self.act_mid(ops.add(y1, y2))))
        return ops.channel_shuffle(ops.add(z, x), self.cfg.shuffle_groups)

    def macs(self, args, out):
        # three half-width interaction adds and the residual add
        return 3 * out.data.size // 2 + out.data.size


# ---------------------------------------------------------------------------
# encoder stems


class DownsamplingBlock(Module):
    """Stride-2 3x3 conv, concatenated with a 2x2 max-pool when widening."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        if c_out < 1:
            raise ValueError(f"output channels must be >= 1, got {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.use_pool = c_in < c_out
        n_conv = c_out - c_in if self.use_pool else c_out
        self.conv = Conv2d(rng, c_in, n_conv, 3, stride=2, padding=1)
        # ceil mode keeps odd extents aligned with the stride-2 conv (both give ceil(h/2))
        self.pool = MaxPool2d(2, 2, ceil_mode=True) if self.use_pool else None
        self.bn = BatchNorm2d(c_out)
        self.act = PReLU(c_out)

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"downsampling needs spatial extents >= 2, got {x.shape[2:]}")
        y = self.conv(x)
        if self.use_pool:
            y = ops.concat_channels([y, self.pool(x)])
        return self.act(self.bn(y))


class InitialBlock(Module):
    def __init__(self, rng, c_out, c_in=3):
        super().__init__()
        self.conv1 = ConvBN(rng, c_in, c_out, 3, stride=2, padding=1)
        self.conv2 = ConvBN(rng, c_out, c_out, 3, padding=1)
        self.conv3 = ConvBN(rng, c_out, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv3(self.conv2(self.conv1(x)))


class InputInjection(Module):
    """Average-pool the raw image ``n`` times by 2, then spatial attention (if enabled)."""

    def __init__(self, rng, n: int, spatial: bool = True, kernel: int = 7):
        super().__init__()
        if n not in (1, 2, 3):
            raise ValueError(f"injection level must be 1..3, got {n}")
        self.n = n
        self.pools = ModuleList(AvgPool2d(2, 2) for _ in range(n))
        self.sa = SpatialAttention(rng, kernel) if spatial else None

    def forward(self, image):
        f = 2 ** self.n
        if image.shape[2] % f or image.shape[3] % f:
            raise ShapeError(f"image extents {image.shape[2:]} not divisible by {f}")
        x = image
        for p in self.pools:
            x = p(x)
        return self.sa(x) if self.sa is not None else x
