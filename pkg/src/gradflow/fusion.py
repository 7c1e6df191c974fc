"""Lazy allreduce: fuse finished gradient tensors into threshold-sized windows.

Tensors complete in descending-ID order, which is ascending pool offset, so the
pending window is always a contiguous, fully written slice of the pool.  Once
it holds at least ``threshold_theta`` bytes one allreduce is launched on that
slice in place and a new window starts where it ended.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import Future
from dataclasses import dataclass, field

from .collectives import Communicator, allreduce
from .gradient_pool import GradientPool

DEFAULT_THETA = 64 * 2**20


class FusionError(RuntimeError):
    pass


@dataclass
class FusionConfig:
    threshold_theta: float = DEFAULT_THETA
    overlap_enabled: bool = True
    precision: str = "fp32"
    algorithm: str = "ring"

    def __post_init__(self):
        if isinstance(self.threshold_theta, str):
            self.threshold_theta = parse_theta(self.threshold_theta)
        if self.threshold_theta < 0:
            raise ValueError("threshold_theta must be >= 0")


def parse_theta(text) -> float:
    """``"inf"`` / ``"64MiB"`` / ``"4096"`` to a byte count."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip().lower()
    if s in ("inf", "infinity", "none"):
        return math.inf
    for suffix, mult in (("gib", 2**30), ("mib", 2**20), ("kib", 2**10),
                         ("gb", 10**9), ("mb", 10**6), ("kb", 10**3), ("b", 1)):
        if s.endswith(suffix):
            return float(s[: -len(suffix)]) * mult
    return float(s)


@dataclass
class PendingWindow:
    start_offset: int
    end_offset: int
    pending_bytes: int


@dataclass
class FusedHandle:
    window: PendingWindow
    future: Future
    engine: "FusionEngine | None" = field(default=None, repr=False)

    def done(self) -> bool:
        return self.future.done()

    def wait(self, timeout: float | None = None) -> None:
        self.future.result(timeout)


def _completed(result=None) -> Future:
    fut = Future()
    fut.set_result(result)
    return fut


class FusionEngine:
    def __init__(self, pool: GradientPool, comm: Communicator, config: FusionConfig | None = None,
                 label: str = "grad"):
        config = config or FusionConfig(precision=pool.element_type)
        if config.precision != pool.element_type:
            raise ValueError(f"fusion precision {config.precision} but pool holds {pool.element_type}")
        self.pool = pool
        self.comm = comm
        self.config = config
        self.label = label
        self.iteration = -1
        self.begin_iteration(0)

    def begin_iteration(self, iteration: int) -> None:
        self.iteration = iteration
        self._next_id = self.pool.num_tensors
        self._start = 0
        self._end = 0
        self.windows: list[PendingWindow] = []
        self.handles: list[FusedHandle] = []
        self.failed = False
        self._t_first_launch = None
        self.overlap_ms = 0.0

    @property
    def pending_bytes(self) -> int:
        return (self._end - self._start) * self.pool.itemsize

    def _launch(self) -> FusedHandle:
        win = PendingWindow(self._start, self._end, self.pending_bytes)
        view = self.pool.data[win.start_offset:win.end_offset]
        if self._t_first_launch is None:
            self._t_first_launch = time.perf_counter()
        if self.config.overlap_enabled:
            fut = self.comm.launch(self.config.algorithm, view, self.label)
        else:
            fut = Future()
            try:
                allreduce(self.comm, view, self.config.algorithm, self.label)
                fut.set_result(None)
            except Exception as exc:  # surfaced by wait_all like an async failure
                fut.set_exception(exc)
        handle = FusedHandle(win, fut, self)
        self.windows.append(win)
        self.handles.append(handle)
        self._start = self._end
        return handle

    def on_tensor_complete(self, tensor_id: int) -> list[FusedHandle]:
        if tensor_id != self._next_id:
            raise FusionError(
                f"tensor {tensor_id} completed out of order; expected tensor {self._next_id}"
            )
        d = self.pool.desc(tensor_id)
        if d.pool_offset != self._end:
            raise FusionError("pool layout does not follow generation order")
        self._end = d.stop
        self._next_id -= 1
        if self.pending_bytes >= self.config.threshold_theta:
            return [self._launch()]
        return []

    def finalize_iteration(self) -> FusedHandle | None:
        if self._next_id != 0:
            raise FusionError(f"finalize before backward finished; tensor {self._next_id} pending")
        if self._t_first_launch is not None:
            self.overlap_ms = (time.perf_counter() - self._t_first_launch) * 1e3
        if self._end > self._start:
            return self._launch()
        return None

    def wait_all(self, handles=None) -> None:
        wait_all(self.handles if handles is None else handles)

    def log_line(self) -> str:
        """``iteration,windows,bytes_per_window,overlap_ms`` (bytes ``;``-joined)."""
        sizes = ";".join(str(w.pending_bytes) for w in self.windows)
        return f"{self.iteration},{len(self.windows)},{sizes},{self.overlap_ms:.3f}"


FUSION_LOG_HEADER = "iteration,windows,bytes_per_window,overlap_ms"


def wait_all(handles) -> None:
    """Block until every fused collective finishes; re-raise the first failure."""
    first = None
    for h in handles:
        try:
            h.wait()
        except Exception as exc:
            if h.engine is not None:
                h.engine.failed = True
            if first is None:
                first = exc
    if first is not None:
        raise FusionError(f"fused allreduce failed: {first}") from first
