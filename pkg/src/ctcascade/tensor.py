"""Tensor validation, parameters and the ``.ten`` binary format.

Tensors are plain numpy arrays in (batch, channel, height, width) order.
Training runs in float32; gradient checks promote everything to float64.
"""
from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeError

TEN_MAGIC = b"CDT1"


def as_tensor(data, dtype=np.float32):
    """Validate external input as a finite, C-contiguous rank-4 tensor."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor (batch, channel, height, width), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class Parameter:
    """A trainable array and its accumulated gradient.

    ``decay`` marks weights that receive the L2 weight penalty; biases and
    batch-norm scale/shift do not.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    decay: bool = False

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"gradient shape {self.grad.shape} != value shape {self.value.shape} for {self.name}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def astype(self, dtype):
        return Parameter(self.name, self.value.astype(dtype), self.grad.astype(dtype), self.decay)


def ten_bytes(array):
    """Serialize ``array`` as a .ten blob: magic, u32 rank, u32 extents, f32 payload."""
    arr = np.asarray(array)
    header = TEN_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def parse_ten(blob):
    """Inverse of :func:`ten_bytes`; raises FormatError on any inconsistency."""
    if len(blob) < 8 or blob[:4] != TEN_MAGIC:
        raise FormatError("not a .ten blob (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise FormatError("truncated .ten header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != head + 4 * count:
        raise FormatError(f"payload size {len(blob) - head} does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", offset=head, count=count).astype(np.float32).reshape(shape)


def save_ten(path, array):
    with open(path, "wb") as fh:
        fh.write(ten_bytes(array))


def load_ten(path):
    with open(path, "rb") as fh:
        return parse_ten(fh.read())
