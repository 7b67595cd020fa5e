"""Dense tensors, the operation tape, and the TSR1 serialization format."""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

TSR_MAGIC = b"TSR1"

_default_dtype = np.dtype(np.float32)
_tape_stack: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    saved = _default_dtype
    _default_dtype = dtype
    try:
        yield dtype
    finally:
        _default_dtype = saved


class Tensor:
    """A dense row-major array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise FloatingPointError(f"non-finite value in tensor {self.name or ''} at {tuple(bad)}")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "vjp")

    def __init__(self, inputs, outputs, vjp):
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp


class Tape:
    """Records executed ops so backward can replay them in reverse.

    Use as a context manager; ops run outside any tape are not recorded.
    A tape is owned by a single training step and is not thread-safe.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if output.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(output.data)
        _accumulate(output, grad)
        for node in reversed(self.nodes):
            out_grads = [o.grad for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, out_grads)]
            in_grads = node.vjp(*out_grads)
            for t, g in zip(node.inputs, in_grads):
                if g is not None and t.requires_grad:
                    _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def recording() -> bool:
    return bool(_tape_stack)


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Callable) -> None:
    """Register an executed op on the active tape.

    ``vjp`` receives one gradient array per output and returns one gradient
    (or None) per input.
    """
    if not _tape_stack or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    _tape_stack[-1].nodes.append(_Node(tuple(inputs), tuple(outputs), vjp))


def needs_grad(t: Tensor) -> bool:
    return bool(_tape_stack) and t.requires_grad


# --- serialization ---------------------------------------------------------

def write_tensor(f: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    f.write(TSR_MAGIC)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TSR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
