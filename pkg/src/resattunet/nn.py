"""Trainable layers, initialization, the parameter registry, and checkpoints."""
from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype, read_tensor, write_tensor

CKPT_MAGIC = b"CKPT"


class CheckpointError(ValueError):
    pass


def he_init(shape, fan_in: int, seed) -> Tensor:
    """Zero-mean normal samples with std ``sqrt(2 / fan_in)``.

    ``seed`` may be an int or a ``numpy.random.Generator`` (which is advanced).
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class ParameterStore:
    """Ordered name -> (value, grad) registry.

    Each value tensor's ``grad`` is the paired buffer, so gradients recorded
    by the tape land here directly.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value.requires_grad = True
        value.name = name
        if value.grad is None or value.grad.shape != value.shape:
            value.grad = np.zeros_like(value.data)
        self._params[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def grads(self) -> list[np.ndarray]:
        return [p.grad for p in self._params.values()]

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self._params if k not in state]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in self._params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
        for k, p in self._params.items():
            p.data[...] = state[k]


class Module:
    """Base class tracking parameters and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            if name in self._params:
                raise ValueError(f"parameter {name!r} already registered on {type(self).__name__}")
            self._params[name] = value
        elif isinstance(value, Module):
            if name in self._children:
                raise ValueError(f"submodule {name!r} already registered on {type(self).__name__}")
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def registry_collect(model: Module) -> ParameterStore:
    store = ParameterStore()
    for name, p in model.named_parameters():
        store.add(name, p)
    return store


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng, padding: int | None = None):
        super().__init__()
        self.padding = kernel // 2 if padding is None else padding
        self.weight = he_init((cout, cin, kernel, kernel), cin * kernel * kernel, rng)
        self.bias = zeros_param((cout,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng):
        super().__init__()
        self.weight = he_init((cout, cin), cin, rng)
        self.bias = zeros_param((cout,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """Same-padded stride-1 convolution followed by LeakyReLU."""

    def __init__(self, cin: int, cout: int, rng, kernel: int = 3, alpha: float = 0.01):
        super().__init__()
        self.cin, self.cout, self.alpha = cin, cout, alpha
        self.conv = Conv2d(cin, cout, kernel, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.cin:
            raise ops.ShapeError(f"ConvBlock expects {self.cin} input channels, got shape {x.shape}")
        return ops.leaky_relu(self.conv(x), self.alpha)


# --- checkpoints -------------------------------------------------------------

def write_checkpoint(path, tensors: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]") -> None:
    """Write named tensors in CKPT format, atomically via a temp file."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        data = f.read()
    f = io.BytesIO(data)
    if f.read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CKPT file")
    try:
        (count,) = struct.unpack("<I", f.read(4))
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<I", f.read(4))
            raw = f.read(n)
            if len(raw) != n:
                raise EOFError("truncated name")
            name = raw.decode("utf-8")
            if name in out:
                raise CheckpointError(f"{path}: duplicate record {name!r}")
            out[name] = read_tensor(f)
    except (struct.error, EOFError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if f.read(1):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return out


def save_parameters(path, store: ParameterStore) -> None:
    write_checkpoint(path, OrderedDict((k, v.data) for k, v in store.items()))


def load_parameters(path, store: ParameterStore) -> None:
    state = read_checkpoint(path)
    store.load_state({k: v.astype(default_dtype()) for k, v in state.items()})
