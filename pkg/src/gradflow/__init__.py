"""Data-parallel gradient communication: ring/hierarchical allreduce, a
generation-ordered gradient pool, lazy-allreduce fusion and coarse-grained
sparse communication with momentum correction."""

from .collectives import (Communicator, allreduce, broadcast, hierarchical_allreduce,
                          oracle_allreduce, reduce, ring_allreduce)
from .config import ConfigError, RunConfig
from .fusion import FusionConfig, FusionEngine, wait_all
from .gradient_pool import GradientPool, build_pool, decode_half, encode_half
from .sparse import (SparseState, correction_pre_allreduce, select_next_important,
                     sgd_update, sparse_exchange, sparsity_at)
from .trainer import Model, forward_backward, synth_data, train
from .transport import InProcFabric, TcpEndpoint, TrafficStats

__version__ = "0.1.0"

__all__ = [
    "Communicator", "allreduce", "broadcast", "hierarchical_allreduce", "oracle_allreduce",
    "reduce", "ring_allreduce", "ConfigError", "RunConfig", "FusionConfig", "FusionEngine",
    "wait_all", "GradientPool", "build_pool", "decode_half", "encode_half", "SparseState",
    "correction_pre_allreduce", "select_next_important", "sgd_update", "sparse_exchange",
    "sparsity_at", "Model", "forward_backward", "synth_data", "train", "InProcFabric",
    "TcpEndpoint", "TrafficStats",
]
