"""Deterministic data-parallel training driving the communication stack.

A small MLP (tanh hidden layers, linear output) trains on a synthetic
regression or two-class logistic task.  Each rank owns a strided shard, so the
union of the ranks' batch ``t`` is exactly a single-worker batch of ``N*B``.
Backward emits gradients last layer first, bias before weight, which is
descending tensor ID.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from .collectives import Communicator, allgather_bytes, oracle_allreduce
from .config import RunConfig
from .fusion import FusionConfig, FusionEngine
from .gradient_pool import GradientPool, generation_layout
from .sparse import (SparseExchanger, SparseState, correction_pre_allreduce, num_selected,
                     select_next_important, sgd_update, sparsity_at)
from .transport import Endpoint, ProtocolError

METRIC_COLUMNS = [
    "iteration", "loss", "sparsity", "grad_payload_bytes", "norm_bytes",
    "collectives_launched", "wall_ms_compute", "wall_ms_comm",
]


class TrainingError(RuntimeError):
    pass


class Model:
    """MLP whose parameters live in one flat fp32 vector laid out like the pool.

    Layer ``l`` (0-based) owns weight tensor ``2l+1`` of shape
    ``(fan_in, fan_out)`` and bias tensor ``2l+2``.
    """

    def __init__(self, dims, seed: int = 0, dtype=np.float32):
        self.dims = [int(d) for d in dims]
        self.sizes = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            self.sizes += [fan_in * fan_out, fan_out]
        self.layout = generation_layout(self.sizes)
        self.flat = np.zeros(sum(self.sizes), dtype=dtype)
        rng = np.random.default_rng(seed)
        for l, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            r = 1.0 / np.sqrt(fan_in)
            self.weight(l)[...] = rng.uniform(-r, r, size=(fan_in, fan_out))
            self.bias(l)[...] = rng.uniform(-r, r, size=fan_out)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def tensor(self, tensor_id: int) -> np.ndarray:
        d = self.layout[tensor_id - 1]
        return self.flat[d.pool_offset:d.stop]

    def weight(self, l: int) -> np.ndarray:
        return self.tensor(2 * l + 1).reshape(self.dims[l], self.dims[l + 1])

    def bias(self, l: int) -> np.ndarray:
        return self.tensor(2 * l + 2)

    def copy(self, dtype=None) -> "Model":
        m = Model.__new__(Model)
        m.dims, m.sizes, m.layout = list(self.dims), list(self.sizes), self.layout
        m.flat = self.flat.astype(dtype or self.flat.dtype, copy=True)
        return m

    def forward(self, X: np.ndarray) -> np.ndarray:
        a = X.astype(self.flat.dtype, copy=False)
        for l in range(self.num_layers):
            z = a @ self.weight(l) + self.bias(l)
            a = np.tanh(z) if l < self.num_layers - 1 else z
        return a


def _loss(out: np.ndarray, y: np.ndarray, task: str) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient w.r.t. the model output."""
    B = out.shape[0]
    if task == "linear-regression":
        r = out - y
        return float(np.sum(r * r) / B), 2.0 * r / B
    # binary cross-entropy on logits
    z = out
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    p = 1.0 / (1.0 + np.exp(-z))
    return float(loss), (p - y) / B


def loss_only(model: Model, X, y, task: str) -> float:
    return _loss(model.forward(X), y.astype(model.flat.dtype, copy=False), task)[0]


def forward_backward(model: Model, X: np.ndarray, y: np.ndarray, emit, task: str = "linear-regression") -> float:
    """Compute the batch loss and hand each gradient tensor to ``emit(tensor_id, grad)``.

    Tensors are emitted in descending ID order.  Raises TrainingError on a
    non-finite loss before anything is emitted.
    """
    dt = model.flat.dtype
    acts = [X.astype(dt, copy=False)]
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(model.num_layers):
            z = acts[-1] @ model.weight(l) + model.bias(l)
            acts.append(np.tanh(z) if l < model.num_layers - 1 else z)
        loss, dz = _loss(acts[-1], y.astype(dt, copy=False), task)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    dz = dz.astype(dt, copy=False)
    for l in range(model.num_layers - 1, -1, -1):
        emit(2 * l + 2, dz.sum(axis=0))
        emit(2 * l + 1, acts[l].T @ dz)
        if l:
            dz = (dz @ model.weight(l).T) * (1.0 - acts[l] ** 2)
    return loss


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class ShardedDataset:
    X: np.ndarray
    y: np.ndarray
    task: str
    n_ranks: int
    true_weight: np.ndarray
    true_bias: np.ndarray
    seed: int

    def shard(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        return self.X[rank::self.n_ranks], self.y[rank::self.n_ranks]

    def shard_indices(self, rank: int) -> np.ndarray:
        return np.arange(rank, self.X.shape[0], self.n_ranks)

    def batch(self, rank: int, t: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        Xs, ys = self.shard(rank)
        nb = Xs.shape[0] // batch_size
        i = t % nb
        return Xs[i * batch_size:(i + 1) * batch_size], ys[i * batch_size:(i + 1) * batch_size]

    def probabilities(self) -> np.ndarray:
        return _sigmoid(self.X @ self.true_weight + self.true_bias).reshape(-1)

    def bayes_accuracy(self) -> float:
        """Expected accuracy of the generator's own decision rule on these inputs."""
        p = self.probabilities()
        return float(np.mean(np.maximum(p, 1.0 - p)))


def synth_data(seed: int, n_examples: int, input_dim: int, task: str = "linear-regression",
               n_ranks: int = 1, output_dim: int = 1, noise: float = 0.1,
               scale: float = 2.0) -> ShardedDataset:
    if n_examples % n_ranks:
        raise ValueError(f"{n_examples} examples do not split evenly over {n_ranks} ranks")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_examples, input_dim))
    W = rng.standard_normal((input_dim, output_dim)) * (scale / np.sqrt(input_dim))
    b = rng.standard_normal(output_dim) * 0.1
    if task == "linear-regression":
        y = X @ W + b + noise * rng.standard_normal((n_examples, output_dim))
    elif task == "two-class-logistic":
        if output_dim != 1:
            raise ValueError("logistic task has a single output")
        p = _sigmoid(X @ W + b)
        y = (rng.random((n_examples, 1)) < p).astype(np.float64)
    else:
        raise ValueError(f"unknown task {task!r}")
    return ShardedDataset(X.astype(np.float32), y.astype(np.float32), task, n_ranks, W, b, seed)


def optimal_logistic_loss(X: np.ndarray, y: np.ndarray, iters: int = 50) -> tuple[float, np.ndarray]:
    """Minimum mean logistic loss of a linear model with bias (Newton's method, fp64)."""
    A = np.hstack([X.astype(np.float64), np.ones((X.shape[0], 1))])
    yy = y.astype(np.float64).reshape(-1)
    w = np.zeros(A.shape[1])
    for _ in range(iters):
        p = _sigmoid(A @ w)
        grad = A.T @ (p - yy) / A.shape[0]
        H = (A * (p * (1 - p))[:, None]).T @ A / A.shape[0]
        step = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), grad)
        w -= step
        if np.max(np.abs(step)) < 1e-13:
            break
    z = A @ w
    return float(np.mean(np.logaddexp(0.0, z) - yy * z)), w


def dataset_for(cfg: RunConfig) -> ShardedDataset:
    return synth_data(cfg.seed, cfg.n_examples, cfg.dims[0], cfg.task, cfg.ranks,
                      cfg.dims[-1], cfg.noise)


def train(cfg: RunConfig, ep: Endpoint, data: ShardedDataset | None = None,
          return_model: bool = False, model: Model | None = None, on_iteration=None):
    """Run ``cfg.iters`` synchronous iterations on this rank; return metric rows.

    ``model`` overrides the seeded initialisation (trained in place).
    ``on_iteration(t, model)`` runs after each weight update.  With
    ``return_model`` the final model comes back too, as ``(rows, model)``.
    """
    n, rank = ep.world_size, ep.rank
    comm = Communicator(ep, group_size=cfg.group_size)
    data = data or dataset_for(cfg)
    model = model or Model(cfg.dims, seed=cfg.seed)
    pool = GradientPool(model.sizes, cfg.chunk_size, cfg.precision)
    engine = FusionEngine(pool, comm, FusionConfig(cfg.theta, cfg.overlap, cfg.precision, cfg.algorithm))
    state = SparseState.for_pool(pool, momentum=cfg.momentum, learning_rate=cfg.lr,
                                 final_sparsity=cfg.final_sparsity, warmup_iters=cfg.warmup)
    stats = ep.stats
    rows = []
    try:
        for t in range(cfg.iters):
            grad0, norm0 = stats.sent("grad"), stats.sent("norm")
            pool.begin_iteration()
            sparsity = sparsity_at(t, cfg.warmup, cfg.final_sparsity) if cfg.csc and t else 0.0
            selected = int(state.important.sum())
            if cfg.csc:
                exch = SparseExchanger(state, pool, comm, cfg.theta, cfg.algorithm, "grad", cfg.overlap)
                exch.begin()

                def emit(tid, grad):
                    for c in pool.write_tensor(tid, grad):
                        correction_pre_allreduce(state, pool, c)
                        exch.add(c)
            else:
                engine.begin_iteration(t)

                def emit(tid, grad):
                    pool.write_tensor(tid, grad)
                    engine.on_tensor_complete(tid)

            Xb, yb = data.batch(rank, t, cfg.batch)
            t0 = time.perf_counter()
            local_loss = forward_backward(model, Xb, yb, emit, cfg.task)
            t1 = time.perf_counter()
            if cfg.csc:
                launched = exch.finish()
                sent_elements = exch.payload_elements
            else:
                engine.finalize_iteration()
                engine.wait_all()
                launched = len(engine.handles)
                sent_elements = pool.total_elements
            sgd_update(state, pool, model.flat, n)
            if cfg.csc:
                select_next_important(state, pool, comm, t)
            t2 = time.perf_counter()
            if on_iteration is not None:
                on_iteration(t, model)

            lossbuf = np.array([local_loss], dtype=np.float64)
            oracle_allreduce(comm, lossbuf, "loss")
            crc = zlib.crc32(model.flat.tobytes()).to_bytes(4, "little")
            crcs = allgather_bytes(comm, crc, "check")
            if any(c != crcs[0] for c in crcs):
                raise ProtocolError(f"iteration {t}: master weights diverged across ranks")
            rows.append({
                "iteration": t,
                "loss": float(lossbuf[0] / n),
                "sparsity": sparsity,
                "grad_payload_bytes": stats.sent("grad") - grad0,
                "norm_bytes": stats.sent("norm") - norm0,
                "collectives_launched": launched,
                "wall_ms_compute": (t1 - t0) * 1e3,
                "wall_ms_comm": (t2 - t1) * 1e3,
                "local_loss": local_loss,
                "selected_chunks": selected,
                "selected_elements": sent_elements,
                "weights_crc": int.from_bytes(crc, "little"),
            })
    finally:
        comm.close()
    return (rows, model) if return_model else rows


def expected_selected(cfg: RunConfig, num_chunks: int, t: int) -> int:
    if not cfg.csc or t == 0:
        return num_chunks
    return num_selected(sparsity_at(t, cfg.warmup, cfg.final_sparsity), num_chunks)
