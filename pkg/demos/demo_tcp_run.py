"""
A real multi-process run over TCP
=================================

Each rank is a separate Python process and the ranks form a full mesh of
sockets on localhost.  Set GFLOW_PORT_BASE if the default ports are taken.
"""

import tempfile

from gradflow.harness import main

###############################################################################
# Hierarchical allreduce in groups of two, fp16 wire format, 80% sparsity.
# Worker processes are spawned, so the driver code needs the main guard.

if __name__ == "__main__":
    out = tempfile.mkdtemp(prefix="gradflow-")
    code = main(["run", "--ranks", "4", "--transport", "tcp", "--algo", "hier", "--groups", "2",
                 "--precision", "fp16", "--csc", "--sparsity", "0.8", "--warmup", "3",
                 "--chunk-size", "64", "--iters", "8", "--out", out])
    print("exit code", code, "; metrics in", out)
