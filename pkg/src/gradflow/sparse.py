"""Coarse-grained sparse communication (CSC).

Only "important" chunks of the gradient pool go over the wire each iteration.
The rest are carried forward as momentum-scaled residuals and folded into the
next iteration's gradients, so nothing computed is thrown away:

    pre-allreduce:  g = g + hg_prev;  hg = 0 if important else momentum * g
    update:         u = hu = momentum * hu_prev + lr * g_avg;  w -= u  (important)
                    hu unchanged, w unchanged                          (otherwise)

Chunk importance for the next iteration comes from allreduced per-chunk L1
norms; chunks that were just allreduced hold the global sum on every rank, so
their local norm is divided by N before the exchange.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .collectives import Communicator, allgather_bytes, allreduce, ring_allreduce
from .gradient_pool import GradientPool, to_half
from .transport import ProtocolError


def sparsity_at(t: int, warmup_iters: int, final_sparsity: float) -> float:
    """Linear warm-up from dense (0.0) to ``final_sparsity`` over ``warmup_iters``."""
    if warmup_iters <= 0:
        return final_sparsity
    return final_sparsity * min(1.0, t / warmup_iters)


def num_selected(sparsity: float, num_chunks: int) -> int:
    return max(1, min(num_chunks, math.floor((1.0 - sparsity) * num_chunks + 0.5)))


@dataclass
class SparseState:
    num_chunks: int
    num_elements: int
    chunk_starts: np.ndarray
    momentum: float = 0.9
    learning_rate: float = 0.1
    final_sparsity: float = 0.0
    warmup_iters: int = 0
    dtype: type = np.float32
    important: np.ndarray = field(default=None)
    hg: np.ndarray = field(default=None, repr=False)
    hu: np.ndarray = field(default=None, repr=False)
    last_norms: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.final_sparsity < 1.0:
            raise ValueError("final_sparsity must lie in [0, 1)")
        if self.important is None:
            # no norms exist before the first iteration: start dense
            self.important = np.ones(self.num_chunks, dtype=bool)
        if self.hg is None:
            self.hg = np.zeros(self.num_elements, dtype=self.dtype)
        if self.hu is None:
            self.hu = np.zeros(self.num_elements, dtype=self.dtype)

    @classmethod
    def for_pool(cls, pool: GradientPool, **kw) -> "SparseState":
        return cls(pool.num_chunks, pool.total_elements, pool.chunk_starts.copy(), **kw)

    def element_mask(self, important=None) -> np.ndarray:
        important = self.important if important is None else important
        return np.repeat(important, np.diff(self.chunk_starts))

    def checksum(self) -> int:
        return zlib.crc32(np.packbits(self.important).tobytes()) ^ self.num_chunks


def _store(pool: GradientPool, a: int, b: int, values: np.ndarray) -> None:
    pool.data[a:b] = to_half(values) if pool.dtype == np.float16 else values


def correction_pre_allreduce(state: SparseState, pool: GradientPool, c: int) -> bool:
    """Fold the residual into chunk ``c`` and update it; True if ``c`` is sent."""
    if not pool.is_chunk_complete(c):
        raise RuntimeError(f"chunk {c} is not complete this iteration")
    a, b = pool.chunk_bounds(c)
    g = pool.data[a:b].astype(state.dtype) + state.hg[a:b]
    _store(pool, a, b, g)
    if state.important[c]:
        state.hg[a:b] = 0
        return True
    state.hg[a:b] = state.dtype(state.momentum) * g
    return False


def verify_agreement(state: SparseState, comm: Communicator, label: str = "csc.checksum") -> None:
    digest = state.checksum().to_bytes(4, "little")
    seen = allgather_bytes(comm, digest, label)
    bad = [r for r, d in enumerate(seen) if d != seen[0]]
    if bad:
        raise ProtocolError(f"important-chunk sets diverge across ranks (ranks {bad} differ from rank 0)")


class SparseExchanger:
    """Pack important chunks into staging buffers and allreduce them.

    Chunks are added in completion (= ascending) order; a buffer is launched as
    soon as it holds ``theta`` bytes, mirroring the lazy-allreduce policy.
    """

    def __init__(self, state: SparseState, pool: GradientPool, comm: Communicator,
                 theta: float = math.inf, algorithm: str = "ring", label: str = "grad",
                 overlap: bool = True):
        self.state, self.pool, self.comm = state, pool, comm
        self.theta, self.algorithm, self.label, self.overlap = theta, algorithm, label, overlap
        self._staged: list[int] = []
        self._staged_bytes = 0
        self.launched: list[tuple[list[int], np.ndarray, object]] = []
        self.payload_elements = 0

    def begin(self) -> None:
        verify_agreement(self.state, self.comm)

    def add(self, c: int) -> None:
        if not self.state.important[c]:
            return
        self._staged.append(c)
        a, b = self.pool.chunk_bounds(c)
        self._staged_bytes += (b - a) * self.pool.itemsize
        if self._staged_bytes >= self.theta:
            self._launch()

    def _launch(self) -> None:
        chunks, self._staged, self._staged_bytes = self._staged, [], 0
        buf = np.concatenate([self.pool.chunk_view(c) for c in chunks])
        self.payload_elements += buf.size
        if self.overlap:
            fut = self.comm.launch(self.algorithm, buf, self.label)
        else:
            allreduce(self.comm, buf, self.algorithm, self.label)
            fut = None
        self.launched.append((chunks, buf, fut))

    def finish(self) -> int:
        """Flush, wait, and write the summed chunks back; return collectives launched."""
        if self._staged:
            self._launch()
        for chunks, buf, fut in self.launched:
            if fut is not None:
                fut.result()
            off = 0
            for c in chunks:
                a, b = self.pool.chunk_bounds(c)
                self.pool.data[a:b] = buf[off:off + b - a]
                off += b - a
        return len(self.launched)


def sparse_exchange(state: SparseState, pool: GradientPool, comm: Communicator,
                    theta: float = math.inf, algorithm: str = "ring", label: str = "grad") -> int:
    """Allreduce the (already corrected) important chunks of a complete pool."""
    ex = SparseExchanger(state, pool, comm, theta, algorithm, label)
    ex.begin()
    for c in np.flatnonzero(state.important):
        ex.add(int(c))
    return ex.finish()


def select_top_chunks(norms: np.ndarray, k: int) -> np.ndarray:
    """Bit-set of the ``k`` largest norms; ties go to the lower chunk index."""
    order = np.lexsort((np.arange(norms.size), -norms))
    chosen = np.zeros(norms.size, dtype=bool)
    chosen[order[:k]] = True
    return chosen


def select_next_important(state: SparseState, pool: GradientPool, comm: Communicator,
                          t: int, label: str = "norm") -> np.ndarray:
    """Choose the chunks to send in iteration ``t + 1`` (identical on all ranks)."""
    norms = pool.chunk_norms()
    norms[state.important] /= np.float32(comm.world_size)
    ring_allreduce(comm, norms, label)
    k = num_selected(sparsity_at(t + 1, state.warmup_iters, state.final_sparsity), state.num_chunks)
    state.important = select_top_chunks(norms, k)
    state.last_norms = norms
    return state.important


def sgd_update(state: SparseState, pool: GradientPool, weights: np.ndarray, n_workers: int = 1) -> None:
    """Momentum SGD on important elements using the worker-averaged gradient."""
    lr = state.dtype(state.learning_rate)
    mom = state.dtype(state.momentum)
    if state.important.all():
        g = pool.data.astype(state.dtype) / state.dtype(n_workers)
        u = mom * state.hu + lr * g
        state.hu[:] = u
        weights -= u.astype(weights.dtype, copy=False)
        return
    mask = state.element_mask()
    g = pool.data[mask].astype(state.dtype) / state.dtype(n_workers)
    u = mom * state.hu[mask] + lr * g
    state.hu[mask] = u
    weights[mask] -= u.astype(weights.dtype, copy=False)


SPARSE_LOG_HEADER = "iteration,sparsity,k,selected_payload_bytes,norm_bytes"


def sparse_log_line(t: int, sparsity: float, k: int, payload_bytes: int, norm_bytes: int) -> str:
    return f"{t},{sparsity:.6f},{k},{payload_bytes},{norm_bytes}"
