"""Finite-difference suite covering every differentiable op and the composed model."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import loss, ops
from .attention import CBAM
from .gradcheck import gradient_check
from .model import DownBlock, ModelConfig, ResAttUNet, ResidualBlock, UpBlock
from .nn import ConvBlock
from .tensor import Tensor, precision

MINI_MODEL = ModelConfig(in_bands=3, num_classes=4, stage_widths=[4, 8])


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _labels(rng, shape, k):
    lab = rng.integers(0, k + 1, size=shape)
    lab.reshape(-1)[0] = 1  # at least one valid pixel
    return lab


def _module_case(build: Callable, input_shapes, call=None, max_coords=None):
    def case(seed):
        rng = np.random.default_rng(seed)
        mod = build(rng)
        xs = [_t(rng, *s) for s in input_shapes]
        params = [p for _, p in mod.named_parameters()]
        n = len(xs)
        fn = call or (lambda m, *a: m(*a))
        return gradient_check(lambda *ts: fn(mod, *ts[:n]), xs + params, seed, max_coords=max_coords)

    return case


def _mini_model_case(seed):
    rng = np.random.default_rng(seed)
    model = ResAttUNet(MINI_MODEL, seed=seed)
    x = _t(rng, 1, 3, 16, 16)
    labels = _labels(rng, (1, 16, 16), 4)
    weights = rng.uniform(0.5, 2.0, size=4)
    params = [p for _, p in model.named_parameters()]
    return gradient_check(
        lambda x, *_: loss.weighted_cross_entropy(model(x), labels, weights).tensor,
        [x, *params],
        seed,
        max_coords=3,
    )


def _loss_case(fn):
    def case(seed):
        rng = np.random.default_rng(seed)
        z = _t(rng, 2, 3, 4, 4)
        labels = _labels(rng, (2, 4, 4), 3)
        return gradient_check(lambda z: fn(z, labels, rng_weights).tensor, [z], seed)

    rng_weights = np.array([0.7, 1.3, 2.1])
    return case


def _simple(fn, *shapes):
    def case(seed):
        rng = np.random.default_rng(seed)
        return gradient_check(fn, [_t(rng, *s) for s in shapes], seed)

    return case


def suite() -> dict[str, Callable[[int], float]]:
    cases = {
        "conv2d": _simple(lambda x, w, b: ops.conv2d(x, w, b, 1, 1), (1, 2, 5, 5), (3, 2, 3, 3), (3,)),
        "conv2d_stride2": _simple(lambda x, w, b: ops.conv2d(x, w, b, 2, 1), (1, 2, 5, 5), (2, 2, 3, 3), (2,)),
        "linear": _simple(ops.linear, (2, 3), (4, 3), (4,)),
        "maxpool2d": _simple(lambda x: ops.maxpool2d(x)[0], (2, 2, 4, 6)),
        "upsample_bilinear2x": _simple(ops.upsample_bilinear2x, (1, 2, 3, 4)),
        "reduce_channel_stats_avg": _simple(lambda x: ops.reduce_channel_stats(x)[0], (2, 3, 4, 5)),
        "reduce_channel_stats_max": _simple(lambda x: ops.reduce_channel_stats(x)[1], (2, 3, 4, 5)),
        "reduce_channel_stats_sum": _simple(lambda x: ops.add(*ops.reduce_channel_stats(x)), (2, 3, 4, 5)),
        "reduce_spatial_stats": _simple(ops.reduce_spatial_stats, (2, 4, 3, 5)),
        "leaky_relu": _simple(ops.leaky_relu, (2, 3, 4, 4)),
        "sigmoid": _simple(ops.sigmoid, (2, 3, 4, 4)),
        "add": _simple(ops.add, (1, 2, 3, 3), (1, 2, 3, 3)),
        "mul": _simple(ops.mul, (1, 2, 3, 3), (1, 2, 3, 3)),
        "mul_channel_gate": _simple(ops.mul, (2, 3), (2, 3, 4, 4)),
        "mul_spatial_gate": _simple(ops.mul, (2, 1, 4, 4), (2, 3, 4, 4)),
        "concat_channels": _simple(ops.concat_channels, (1, 2, 3, 3), (1, 3, 3, 3)),
        "sigmoid_linear": _simple(lambda x, w, b: ops.sigmoid(ops.linear(x, w, b)), (2, 3), (4, 3), (4,)),
        "weighted_cross_entropy": _loss_case(loss.weighted_cross_entropy),
        "focal_loss": _loss_case(lambda z, y, w: loss.focal_loss(z, y, 2.0)),
        "dice_loss": _loss_case(lambda z, y, w: loss.dice_loss(z, y, 1.0)),
        "xent_plus_dice": _loss_case(loss.xent_plus_dice),
        "conv_block": _module_case(lambda r: ConvBlock(2, 3, r), [(1, 2, 5, 5)]),
        "cbam": _module_case(lambda r: CBAM(4, r, ratio=2, kernel=3), [(1, 4, 4, 4)]),
        "down_block": _module_case(lambda r: DownBlock(2, 4, r, MINI_MODEL), [(1, 2, 8, 8)],
                                   call=lambda m, x: m(x)[1], max_coords=12),
        "residual_block": _module_case(lambda r: ResidualBlock(4, r, MINI_MODEL), [(1, 4, 8, 8)], max_coords=12),
        "up_block": _module_case(lambda r: UpBlock(4, 2, r, MINI_MODEL), [(1, 4, 4, 4), (1, 2, 8, 8)], max_coords=12),
        "model": _mini_model_case,
    }
    return cases


def run_suite(seeds: int = 20, only: list[str] | None = None, progress=None) -> dict[str, float]:
    """Worst relative error per case over ``seeds`` seeds, in float64."""
    results = {}
    with precision(np.float64):
        for name, case in suite().items():
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            results[name] = max(case(seed) for seed in range(seeds))
            if progress:
                progress(name, results[name], time.perf_counter() - t0)
    return results
