"""
Allreduce traffic on a desk-sized cluster
=========================================

Four ranks run as threads over the in-process transport.  Each one allreduces
the same 1 MiB buffer with the three algorithms and we read back the payload
bytes its endpoint counted.
"""

import numpy as np

from gradflow import Communicator, InProcFabric, allreduce
from gradflow.harness import allreduce_bytes_per_rank

import threading

N, K = 4, 1 << 20

###############################################################################
# One helper runs a function on every rank and collects the results.

def on_all_ranks(n, fn, group_size=1):
    fabric = InProcFabric(n)
    out = [None] * n

    def work(r):
        comm = Communicator(fabric[r], group_size=group_size)
        out[r] = fn(comm)
        comm.close()

    threads = [threading.Thread(target=work, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out

###############################################################################
# Ring sends 2(N-1)K/N bytes from every rank.  Hierarchical (groups of two)
# loads the group masters more; the gather-to-rank-0 oracle loads rank 0 most.

for algo, m in (("ring", 1), ("hierarchical", 2), ("oracle", 1)):
    def body(comm):
        buf = np.full(K // 4, comm.rank + 1, np.float32)
        allreduce(comm, buf, algo, "demo")
        assert np.all(buf == N * (N + 1) / 2)
        return comm.stats.sent("demo")

    sent = on_all_ranks(N, body, m)
    predicted = [allreduce_bytes_per_rank(algo, N, K, m, rank=r) for r in range(N)]
    print(f"{algo:>13}: measured {sent}  predicted {[int(p) for p in predicted]}")

###############################################################################
# The same formula at cluster scale: 61M fp32 parameters on 512 workers.

print("61M params, N=512: %.1f MB per rank" % (allreduce_bytes_per_rank("ring", 512, 244e6) / 1e6))
