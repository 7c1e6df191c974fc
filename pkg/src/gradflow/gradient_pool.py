"""Generation-ordered gradient memory pool.

Tensors carry IDs ``1..m`` in ascending layer order.  Backward produces them
from ``m`` down to ``1``, so tensor ``m`` sits at offset 0 and tensor ``j`` at
``sum(size[j+1:m])``: every finished tensor extends a contiguous prefix of the
pool and fused collectives can run straight on pool memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .halfcodec import HALF_MAX, decode_half, encode_half, to_half

__all__ = [
    "DTYPES", "TensorDesc", "GradientPool", "build_pool", "generation_layout", "num_chunks_for",
    "encode_half", "decode_half", "to_half", "HALF_MAX", "load_snapshot",
]

DEFAULT_CHUNK_SIZE = 32000

# fp64 is a verification-only precision (exact shadow runs of the update rules)
DTYPES = {"fp16": np.float16, "fp32": np.float32, "fp64": np.float64}
_TYPE_CODES = {"fp16": 0, "fp32": 1, "fp64": 2}
_SNAPSHOT = struct.Struct("<4sQQB")


def num_chunks_for(total_elements: int, chunk_size: int) -> int:
    """Number of chunks: ``total / chunk_size`` rounded half up, at least 1.

    All chunks but the last hold exactly ``chunk_size`` elements; a remainder
    under half a chunk is folded into the last chunk instead of standing alone.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    return max(1, (2 * total_elements + chunk_size) // (2 * chunk_size))


@dataclass(frozen=True)
class TensorDesc:
    tensor_id: int
    element_count: int
    pool_offset: int

    @property
    def stop(self) -> int:
        return self.pool_offset + self.element_count


def generation_layout(sizes) -> list[TensorDesc]:
    """Descriptors for tensors ``1..m``; tensor ``m`` (produced first) at offset 0."""
    descs, offset = {}, 0
    for tid in range(len(sizes), 0, -1):
        descs[tid] = TensorDesc(tid, int(sizes[tid - 1]), offset)
        offset += int(sizes[tid - 1])
    return [descs[t] for t in range(1, len(sizes) + 1)]


class GradientPool:
    def __init__(self, sizes, chunk_size: int = DEFAULT_CHUNK_SIZE, element_type: str = "fp32"):
        sizes = [int(s) for s in sizes]
        if not sizes:
            raise ValueError("gradient pool needs at least one tensor")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"tensor sizes must be positive: {sizes}")
        if element_type not in DTYPES:
            raise ValueError(f"unknown element type {element_type!r}")
        self.element_type = element_type
        self.dtype = np.dtype(DTYPES[element_type])
        self.chunk_size = int(chunk_size)
        self.descs = generation_layout(sizes)
        offset = self.total_elements = sum(sizes)
        self.num_chunks = num_chunks_for(offset, self.chunk_size)
        self.chunk_starts = np.minimum(np.arange(self.num_chunks + 1) * self.chunk_size, offset)
        self.chunk_starts[-1] = offset
        self.data = np.zeros(offset, dtype=self.dtype)
        self.begin_iteration()

    @property
    def num_tensors(self) -> int:
        return len(self.descs)

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize

    @property
    def nbytes(self) -> int:
        return self.total_elements * self.itemsize

    def desc(self, tensor_id: int) -> TensorDesc:
        if not 1 <= tensor_id <= len(self.descs):
            raise KeyError(f"no tensor {tensor_id}; pool holds 1..{len(self.descs)}")
        return self.descs[tensor_id - 1]

    def chunk_bounds(self, c: int) -> tuple[int, int]:
        if not 0 <= c < self.num_chunks:
            raise IndexError(f"chunk {c} outside [0, {self.num_chunks})")
        return int(self.chunk_starts[c]), int(self.chunk_starts[c + 1])

    def chunk_view(self, c: int) -> np.ndarray:
        a, b = self.chunk_bounds(c)
        return self.data[a:b]

    def chunk_lengths(self) -> np.ndarray:
        return np.diff(self.chunk_starts)

    def tensor_view(self, tensor_id: int) -> np.ndarray:
        d = self.desc(tensor_id)
        return self.data[d.pool_offset:d.stop]

    def locate(self, index: int) -> tuple[int, int]:
        """Map a pool element index to ``(tensor_id, index within tensor)``."""
        if not 0 <= index < self.total_elements:
            raise IndexError(index)
        for d in self.descs:
            if d.pool_offset <= index < d.stop:
                return d.tensor_id, index - d.pool_offset
        raise AssertionError("descriptors do not tile the pool")

    def begin_iteration(self) -> None:
        self._written = set()
        self._filled = np.zeros(self.num_chunks, dtype=np.int64)

    def is_chunk_complete(self, c: int) -> bool:
        a, b = self.chunk_bounds(c)
        return self._filled[c] == b - a

    @property
    def complete(self) -> bool:
        return len(self._written) == len(self.descs)

    def write_tensor(self, tensor_id: int, values) -> list[int]:
        """Store one gradient tensor; return chunks this write completed.

        fp16 pools round with the half codec (nearest-even, clamped).
        """
        d = self.desc(tensor_id)
        values = np.asarray(values).reshape(-1)
        if values.size != d.element_count:
            raise ValueError(
                f"tensor {tensor_id} holds {d.element_count} elements, got {values.size}"
            )
        if tensor_id in self._written:
            raise RuntimeError(f"tensor {tensor_id} already written this iteration")
        if self.dtype == np.float16:
            self.data[d.pool_offset:d.stop] = to_half(values)
        else:
            self.data[d.pool_offset:d.stop] = values
        self._written.add(tensor_id)
        done = []
        first = int(np.searchsorted(self.chunk_starts, d.pool_offset, side="right")) - 1
        for c in range(first, self.num_chunks):
            a, b = self.chunk_bounds(c)
            if a >= d.stop:
                break
            self._filled[c] += min(b, d.stop) - max(a, d.pool_offset)
            if self._filled[c] == b - a:
                done.append(c)
        return done

    def chunk_l1(self, c: int) -> float:
        """L1 norm of chunk ``c`` accumulated in fp32."""
        return np.float32(np.abs(self.chunk_view(c).astype(np.float32)).sum(dtype=np.float32))

    def chunk_norms(self) -> np.ndarray:
        return np.array([self.chunk_l1(c) for c in range(self.num_chunks)], dtype=np.float32)

    def dump(self) -> bytes:
        """Debug snapshot: header then little-endian scalars."""
        head = _SNAPSHOT.pack(b"GFPS", self.total_elements, self.chunk_size,
                              _TYPE_CODES[self.element_type])
        return head + self.data.astype(self.dtype.newbyteorder("<"), copy=False).tobytes()


def load_snapshot(data: bytes) -> tuple[int, int, str, np.ndarray]:
    magic, total, chunk_size, code = _SNAPSHOT.unpack_from(data)
    if magic != b"GFPS":
        raise ValueError("not a gradient pool snapshot")
    element_type = {v: k for k, v in _TYPE_CODES.items()}[code]
    dtype = np.dtype(DTYPES[element_type]).newbyteorder("<")
    body = data[_SNAPSHOT.size:]
    if len(body) != total * dtype.itemsize:
        raise ValueError("snapshot body length does not match its header")
    return total, chunk_size, element_type, np.frombuffer(body, dtype=dtype).copy()


def build_pool(layer_tensor_sizes, chunk_size: int = DEFAULT_CHUNK_SIZE,
               element_type: str = "fp32") -> GradientPool:
    return GradientPool(layer_tensor_sizes, chunk_size, element_type)

