"""CBAM: a channel gate followed by a spatial gate, both multiplicative."""
from __future__ import annotations

from . import ops
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


class ChannelAttention(Module):
    """Shared two-layer perceptron over the per-channel avg and max descriptors."""

    def __init__(self, channels: int, rng, ratio: int = 16, alpha: float = 0.01):
        super().__init__()
        r = min(ratio, channels)
        if r < 1 or channels % r:
            raise ValueError(f"channel count {channels} is not divisible by reduction ratio {r}")
        self.channels, self.hidden, self.alpha = channels, channels // r, alpha
        self.fc1 = Linear(channels, self.hidden, rng)
        self.fc2 = Linear(self.hidden, channels, rng)

    def mlp(self, d: Tensor) -> Tensor:
        return self.fc2(ops.leaky_relu(self.fc1(d), self.alpha))

    def forward(self, x: Tensor) -> Tensor:
        avg, mx = ops.reduce_channel_stats(x)
        return ops.sigmoid(ops.add(self.mlp(avg), self.mlp(mx)))


class SpatialAttention(Module):
    def __init__(self, rng, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.conv(ops.reduce_spatial_stats(x)))


class CBAM(Module):
    def __init__(self, channels: int, rng, ratio: int = 16, kernel: int = 7, alpha: float = 0.01):
        super().__init__()
        self.channel = ChannelAttention(channels, rng, ratio, alpha)
        self.spatial = SpatialAttention(rng, kernel)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (channel gate, spatial gate, output) for inspection."""
        mc = self.channel(x)
        refined = ops.mul(mc, x)
        ms = self.spatial(refined)
        return mc, ms, ops.mul(ms, refined)

    def forward(self, x: Tensor) -> Tensor:
        return self.gates(x)[2]


def channel_attention(m: ChannelAttention, x: Tensor) -> Tensor:
    return m(x)


def spatial_attention(m: SpatialAttention, x: Tensor) -> Tensor:
    return m(x)


def cbam_apply(m: CBAM, x: Tensor) -> Tensor:
    return m(x)
