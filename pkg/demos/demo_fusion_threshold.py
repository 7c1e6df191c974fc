"""
How the fusion threshold groups gradient tensors
================================================

Gradients arrive last layer first.  The fusion engine launches one allreduce
whenever the bytes waiting reach theta, so theta trades collective count
against how early communication can start.
"""

import math

import numpy as np

from gradflow import FusionConfig, FusionEngine, build_pool

# a small conv-net layout, first layer first
sizes = [864, 32, 9216, 32, 18432, 64, 36864, 64, 262144, 128, 1280, 10]

###############################################################################
# A single-rank stand-in for the communicator is enough to watch the windows.

class LocalComm:
    rank, world_size = 0, 1

    def launch(self, algorithm, buf, label):
        from concurrent.futures import Future
        f = Future()
        f.set_result(None)
        return f

for theta in (0, 4096, 256 * 1024, 1 << 20, math.inf):
    pool = build_pool(sizes)
    eng = FusionEngine(pool, LocalComm(), FusionConfig(theta, True, "fp32"))
    for tid in range(len(sizes), 0, -1):
        pool.write_tensor(tid, np.zeros(sizes[tid - 1]))
        eng.on_tensor_complete(tid)
    eng.finalize_iteration()
    kib = [round(w.pending_bytes / 1024, 1) for w in eng.windows]
    print(f"theta={theta!s:>8}: {len(kib):2d} collectives, window KiB {kib}")
