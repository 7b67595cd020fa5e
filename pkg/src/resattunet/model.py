"""ResAttUNet assembly: CBAM-gated encoder, residual CBAM bottleneck, CBAM-gated decoder."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import CBAM
from .nn import Conv2d, ConvBlock, Module, registry_collect
from .tensor import Tensor


@dataclass
class ModelConfig:
    in_bands: int = 11
    num_classes: int = 15
    stage_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    cbam_ratio: int = 16
    spatial_kernel: int = 7
    leaky_slope: float = 0.01
    residual_blocks: int = 3

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.validate()

    def validate(self) -> None:
        w = self.stage_widths
        if not w:
            raise ValueError("stage_widths must be nonempty")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError(f"stage_widths must be strictly increasing, got {w}")
        if self.in_bands < 1 or self.num_classes < 1 or w[0] < 1:
            raise ValueError("in_bands, num_classes and widths must be positive")
        if self.residual_blocks < 0:
            raise ValueError("residual_blocks must be >= 0")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        for c in w:
            r = min(self.cbam_ratio, c)
            if r < 1 or c % r:
                raise ValueError(f"width {c} is not divisible by CBAM ratio {r}")

    @property
    def depth(self) -> int:
        """Number of 2x downsamplings."""
        return len(self.stage_widths) - 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


class DownBlock(Module):
    """Two ConvBlocks, CBAM, then 2x2 max pooling. The gated map is the skip."""

    def __init__(self, cin: int, cout: int, rng, cfg: ModelConfig):
        super().__init__()
        a = cfg.leaky_slope
        self.conv1 = ConvBlock(cin, cout, rng, alpha=a)
        self.conv2 = ConvBlock(cout, cout, rng, alpha=a)
        self.cbam = CBAM(cout, rng, cfg.cbam_ratio, cfg.spatial_kernel, a)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        H, W = x.shape[2:]
        if H % 2 or W % 2:
            raise ops.ShapeError(f"down block needs even extents, got {H}x{W}")
        skip = self.cbam(self.conv2(self.conv1(x)))
        pooled, _ = ops.maxpool2d(skip)
        return skip, pooled


class ResidualBlock(Module):
    """x + CBAM(ConvBlock(ConvBlock(x))), with no activation after the sum."""

    def __init__(self, channels: int, rng, cfg: ModelConfig):
        super().__init__()
        a = cfg.leaky_slope
        self.conv1 = ConvBlock(channels, channels, rng, alpha=a)
        self.conv2 = ConvBlock(channels, channels, rng, alpha=a)
        self.cbam = CBAM(channels, rng, cfg.cbam_ratio, cfg.spatial_kernel, a)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.cbam(self.conv2(self.conv1(x))))


class UpBlock(Module):
    """Upsample, 1x1 conv to halve channels, concat the skip, two ConvBlocks, CBAM."""

    def __init__(self, cdeep: int, cskip: int, rng, cfg: ModelConfig):
        super().__init__()
        a = cfg.leaky_slope
        self.cdeep, self.cskip = cdeep, cskip
        self.reduce = Conv2d(cdeep, cskip, 1, rng)
        self.conv1 = ConvBlock(2 * cskip, cskip, rng, alpha=a)
        self.conv2 = ConvBlock(cskip, cskip, rng, alpha=a)
        self.cbam = CBAM(cskip, rng, cfg.cbam_ratio, cfg.spatial_kernel, a)

    def forward(self, deep: Tensor, skip: Tensor) -> Tensor:
        B, C, H, W = deep.shape
        if (
            C != self.cdeep
            or skip.data.ndim != 4
            or skip.shape != (B, self.cskip, 2 * H, 2 * W)
        ):
            raise ops.ShapeError(
                f"up block: deep {deep.shape} and skip {skip.shape} are incompatible "
                f"(expected skip {(B, self.cskip, 2 * H, 2 * W)})"
            )
        up = self.reduce(ops.upsample_bilinear2x(deep))
        x = ops.concat_channels(up, skip)
        return self.cbam(self.conv2(self.conv1(x)))


class ResAttUNet(Module):
    """Encoder widths w[0..L-1] with skips, bottleneck at w[L], mirrored decoder.

    stem: in_bands -> w[0] at full resolution.
    encoder: down block i maps w[i-1] -> w[i] (w[0] -> w[0] for i = 0) and
        taps its skip before pooling.
    bottleneck: ConvBlock w[L-1] -> w[L], then ``residual_blocks`` residual blocks.
    decoder: up block i consumes the deep map and skip i in reverse order.
    head: 1x1 conv w[0] -> num_classes, raw logits.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w, a = cfg.stage_widths, cfg.leaky_slope
        self.stem = ConvBlock(cfg.in_bands, w[0], rng, alpha=a)
        self.down = []
        for i in range(cfg.depth):
            blk = DownBlock(w[max(i - 1, 0)], w[i], rng, cfg)
            setattr(self, f"down{i}", blk)
            self.down.append(blk)
        self.bridge = ConvBlock(w[cfg.depth - 1] if cfg.depth else w[0], w[-1], rng, alpha=a)
        self.res = []
        for i in range(cfg.residual_blocks):
            blk = ResidualBlock(w[-1], rng, cfg)
            setattr(self, f"res{i}", blk)
            self.res.append(blk)
        self.up = []
        for i in reversed(range(cfg.depth)):
            blk = UpBlock(w[i + 1], w[i], rng, cfg)
            setattr(self, f"up{i}", blk)
            self.up.append(blk)
        self.head = Conv2d(w[0], cfg.num_classes, 1, rng)

    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[1] != self.cfg.in_bands:
            raise ops.ShapeError(f"expected input (B, {self.cfg.in_bands}, H, W), got {tuple(shape)}")
        H, W = shape[2:]
        f = 2 ** self.cfg.depth
        if H % f or W % f:
            raise ops.ShapeError(f"input extents {H}x{W} must be divisible by {f}")
        if self.cfg.depth and (H // f < 2 or W // f < 2):
            raise ops.ShapeError(f"input extents {H}x{W} leave a bottleneck below 2x2; need at least {2 * f}")

    def bottleneck(self, x: Tensor) -> Tensor:
        for blk in self.res:
            x = blk(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        x = self.stem(x)
        skips = []
        for blk in self.down:
            skip, x = blk(x)
            skips.append(skip)
        x = self.bottleneck(self.bridge(x))
        for blk, skip in zip(self.up, reversed(skips)):
            x = blk(x, skip)
        return self.head(x)

    def parameters(self):
        return registry_collect(self)


def _conv(cin, cout, k):
    return cout * cin * k * k + cout


def _cbam(c, cfg: ModelConfig):
    h = c // min(cfg.cbam_ratio, c)
    return (c * h + h) + (h * c + c) + _conv(2, 1, cfg.spatial_kernel)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    w = cfg.stage_widths
    total = _conv(cfg.in_bands, w[0], 3)
    for i in range(cfg.depth):
        cin = w[max(i - 1, 0)]
        total += _conv(cin, w[i], 3) + _conv(w[i], w[i], 3) + _cbam(w[i], cfg)
    total += _conv(w[cfg.depth - 1] if cfg.depth else w[0], w[-1], 3)
    total += cfg.residual_blocks * (2 * _conv(w[-1], w[-1], 3) + _cbam(w[-1], cfg))
    for i in range(cfg.depth):
        total += _conv(w[i + 1], w[i], 1) + _conv(2 * w[i], w[i], 3) + _conv(w[i], w[i], 3) + _cbam(w[i], cfg)
    total += _conv(w[0], cfg.num_classes, 1)
    return total
