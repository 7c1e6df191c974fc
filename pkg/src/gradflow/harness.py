"""Command line entry point, multi-rank orchestration and traffic prediction.

Subcommands::

    gradflow run --ranks 4 --algo ring --iters 10 --out runs/ring4
    gradflow bench-allreduce --ranks 4 --bytes 1048576 --algo ring
    gradflow predict --ranks 512 --elements 61000000

``run`` writes ``metrics.csv`` and ``summary.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import math
import multiprocessing as mp
import os
import sys
import threading
import time
import traceback

import numpy as np

from .collectives import Communicator, allreduce
from .config import ConfigError, RunConfig
from .gradient_pool import num_chunks_for
from .sparse import num_selected, sparsity_at
from .trainer import METRIC_COLUMNS, train
from .transport import InProcFabric, TcpEndpoint

DEFAULT_PORT_BASE = 29500


class RankFailure(RuntimeError):
    def __init__(self, failures: dict):
        self.failures = failures
        lines = [f"rank {r}: {msg.strip().splitlines()[-1]}" for r, msg in sorted(failures.items())]
        super().__init__("; ".join(lines))


# -- traffic prediction -------------------------------------------------------

def allreduce_bytes_per_rank(algorithm: str, n: int, nbytes: float, group_size: int = 1,
                             rank: int | None = None) -> float:
    """Payload bytes ``rank`` sends in one allreduce of ``nbytes``.

    ``rank=None`` gives the average over all ranks.  Segment rounding is
    ignored, so measured values can differ by under two elements per message
    stream.
    """
    if n <= 1:
        return 0.0
    if algorithm == "ring":
        return 2.0 * (n - 1) * nbytes / n
    if algorithm == "oracle":
        if rank is None:
            return 2.0 * (n - 1) * nbytes / n
        return (n - 1) * nbytes if rank == 0 else nbytes
    if algorithm == "hierarchical":
        m, g = group_size, n // group_size
        inter = 2.0 * (g - 1) * nbytes / g
        if rank is None:
            per_group = (m - 1) * nbytes / m + 2.0 * (m - 1) * nbytes
            return (g * per_group + g * inter) / n
        q = rank % m
        if m == 1:
            return inter
        if q == 0:
            # reduce-scatter share, chain broadcast start, inter-master ring
            return (m - 1) * nbytes / m + nbytes + inter
        if q == m - 1:
            return nbytes
        return 2.0 * nbytes
    raise ValueError(f"unknown algorithm {algorithm!r}")


def model_elements(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def predict_traffic(cfg: RunConfig, total_elements: int | None = None, iteration: int | None = None,
                    selected_elements: int | None = None, rank: int | None = None) -> dict:
    """Predicted per-rank payload bytes for one iteration.

    Dense runs send the whole pool through the configured allreduce; CSC runs
    send the selected chunks plus one fp32 ring allreduce of the chunk norms.
    ``iteration`` defaults to the steady state after warm-up; ``rank=None``
    averages over ranks (only hierarchical and oracle treat ranks unequally).
    """
    n = cfg.ranks
    itemsize = 2 if cfg.precision == "fp16" else 4
    elements = model_elements(cfg.dims) if total_elements is None else int(total_elements)
    chunks = num_chunks_for(elements, cfg.chunk_size)
    norm = 0.0
    if cfg.csc:
        t = max(cfg.warmup, 1) if iteration is None else iteration
        k = chunks if t == 0 else num_selected(sparsity_at(t, cfg.warmup, cfg.sparsity), chunks)
        if selected_elements is None:
            selected_elements = min(k * cfg.chunk_size, elements)
        norm = allreduce_bytes_per_rank("ring", n, chunks * 4)
    else:
        k = chunks
        selected_elements = elements if selected_elements is None else selected_elements
    grad = allreduce_bytes_per_rank(cfg.algorithm, n, selected_elements * itemsize,
                                    cfg.group_size, rank)
    return {
        "ranks": n,
        "pool_elements": elements,
        "num_chunks": chunks,
        "selected_chunks": k,
        "selected_elements": selected_elements,
        "grad_payload_bytes": grad,
        "norm_bytes": norm,
        "total_bytes": grad + norm,
    }


# -- orchestration ------------------------------------------------------------

def _addresses(n: int) -> list[str]:
    base = int(os.environ.get("GFLOW_PORT_BASE", DEFAULT_PORT_BASE))
    return [f"127.0.0.1:{base + r}" for r in range(n)]


def run_inproc(cfg: RunConfig, fn=None) -> list:
    """Run ``fn(cfg, endpoint)`` (default: train) on one thread per rank."""
    fn = fn or train
    fabric = InProcFabric(cfg.ranks, timeout=cfg.timeout)
    results = [None] * cfg.ranks
    failures = {}

    def worker(r):
        ep = fabric[r]
        try:
            results[r] = fn(cfg, ep)
        except Exception:
            failures[r] = traceback.format_exc()
            ep.close()  # wake peers blocked on this rank

    threads = [threading.Thread(target=worker, args=(r,), name=f"gflow-rank-{r}") for r in range(cfg.ranks)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    fabric.close()
    if failures:
        raise RankFailure(failures)
    return results


def _tcp_worker(cfg_dict, rank, addresses, fn, queue):
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        ep = TcpEndpoint(rank, addresses, timeout=cfg.timeout)
        try:
            out = fn(cfg, ep)
            ep.barrier()
        finally:
            ep.close()
        queue.put((rank, True, out))
    except Exception:
        queue.put((rank, False, traceback.format_exc()))


def run_tcp(cfg: RunConfig, fn=None, addresses=None) -> list:
    """Run ``fn(cfg, endpoint)`` in one process per rank over TCP sockets."""
    fn = fn or train
    addresses = addresses or _addresses(cfg.ranks)
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    procs = [ctx.Process(target=_tcp_worker, args=(cfg.to_dict(), r, addresses, fn, queue),
                         name=f"gflow-rank-{r}") for r in range(cfg.ranks)]
    for p in procs:
        p.start()
    results, failures = [None] * cfg.ranks, {}
    deadline = time.monotonic() + cfg.timeout * 4 + 60
    for _ in procs:
        try:
            rank, ok, payload = queue.get(timeout=max(1.0, deadline - time.monotonic()))
        except Exception:
            break
        if ok:
            results[rank] = payload
        else:
            failures[rank] = payload
    for r, p in enumerate(procs):
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
            p.join()
        if results[r] is None and r not in failures:
            failures[r] = f"exited with code {p.exitcode} without reporting"
    if failures:
        raise RankFailure(failures)
    return results


def run_workers(cfg: RunConfig, fn=None) -> list:
    return run_tcp(cfg, fn) if cfg.transport == "tcp" else run_inproc(cfg, fn)


# -- reporting ---------------------------------------------------------------

def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def summarize(cfg: RunConfig, rows) -> dict:
    iters = max(len(rows), 1)
    total_grad = sum(r["grad_payload_bytes"] for r in rows)
    total_norm = sum(r["norm_bytes"] for r in rows)
    elements = model_elements(cfg.dims)
    chunks = num_chunks_for(elements, cfg.chunk_size)
    predicted = 0.0
    for r in rows:
        sel = r.get("selected_elements")
        p = predict_traffic(cfg, elements, r["iteration"], sel, rank=0)
        predicted += p["total_bytes"]
    measured = total_grad + total_norm
    return {
        "config": cfg.to_dict(),
        "iterations": len(rows),
        "final_loss": rows[-1]["loss"] if rows else None,
        "pool_elements": elements,
        "num_chunks": chunks,
        "total_grad_payload_bytes": total_grad,
        "total_norm_bytes": total_norm,
        "bytes_per_iteration": measured / iters,
        "predicted_bytes_per_iteration": predicted / iters,
        "predicted_vs_measured_delta": (measured - predicted) / iters,
    }


def cli_run(cfg: RunConfig, out: str | None) -> dict:
    results = run_workers(cfg)
    rows = results[0]
    summary = summarize(cfg, rows)
    if out:
        os.makedirs(out, exist_ok=True)
        write_metrics_csv(rows, os.path.join(out, "metrics.csv"))
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _bench_rank(c: RunConfig, ep, length: int, dtype, reps: int) -> dict:
    comm = Communicator(ep, group_size=c.group_size)
    rng = np.random.default_rng(c.seed + ep.rank)
    buf = rng.integers(-8, 8, size=length).astype(dtype)
    t0 = time.perf_counter()
    for _ in range(reps):
        allreduce(comm, buf, c.algorithm, "bench")
    dt = time.perf_counter() - t0
    return {"rank": ep.rank, "sent": ep.stats.sent("bench") // reps,
            "received": ep.stats.received("bench") // reps,
            "seconds": dt / reps, "max_frame": ep.stats.max_frame("bench")}


def bench_allreduce(cfg: RunConfig, nbytes: int, reps: int = 1) -> dict:
    itemsize = 2 if cfg.precision == "fp16" else 4
    if nbytes % itemsize:
        raise ConfigError(f"--bytes must be a multiple of {itemsize}")
    length = nbytes // itemsize
    dtype = np.float16 if cfg.precision == "fp16" else np.float32

    fn = functools.partial(_bench_rank, length=length, dtype=dtype, reps=reps)
    results = run_workers(cfg, fn)
    return {
        "ranks": cfg.ranks,
        "algorithm": cfg.algorithm,
        "bytes": nbytes,
        "per_rank_sent": [r["sent"] for r in results],
        "per_rank_received": [r["received"] for r in results],
        "max_frame_bytes": [r["max_frame"] for r in results],
        "predicted_per_rank": allreduce_bytes_per_rank(cfg.algorithm, cfg.ranks, nbytes, cfg.group_size),
        "seconds": max(r["seconds"] for r in results),
    }


# -- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig file; flags override it")
    p.add_argument("--ranks", type=int)
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--algo", dest="algorithm", choices=["ring", "hier", "hierarchical", "oracle"])
    p.add_argument("--groups", type=int, help="ranks per group for --algo hier")
    p.add_argument("--precision", choices=["fp32", "fp16"])
    p.add_argument("--theta", help="fusion threshold in bytes, e.g. 0, 4096, 64MiB, inf")
    p.add_argument("--csc", nargs="?", const="on", choices=["on", "off"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", help="comma-separated layer sizes, e.g. 32,64,1")
    p.add_argument("--task", choices=["linear-regression", "two-class-logistic"])
    p.add_argument("--examples", dest="n_examples", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="train on N ranks and report metrics"))
    bench = sub.add_parser("bench-allreduce", help="one allreduce, report per-rank bytes")
    _common(bench)
    bench.add_argument("--bytes", dest="nbytes", type=int, default=1 << 20)
    bench.add_argument("--reps", type=int, default=1)
    pred = sub.add_parser("predict", help="analytic per-iteration traffic")
    _common(pred)
    pred.add_argument("--elements", type=int, help="pool size instead of the model's")
    return parser


def config_from_args(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else {}
    for key in ("ranks", "transport", "algorithm", "groups", "precision", "theta", "sparsity",
                "warmup", "chunk_size", "batch", "iters", "lr", "momentum", "seed", "task",
                "n_examples", "timeout", "out"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if args.csc is not None:
        base["csc"] = args.csc == "on"
    if args.dims:
        base["dims"] = [int(x) for x in args.dims.split(",")]
    return RunConfig.from_dict(base).validate(data=args.command != "predict")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ConfigError, ValueError, TypeError) as exc:
        parser.error(str(exc))
    try:
        if args.command == "run":
            result = cli_run(cfg, cfg.out or "gradflow-run")
        elif args.command == "bench-allreduce":
            result = bench_allreduce(cfg, args.nbytes, args.reps)
        else:
            result = predict_traffic(cfg, args.elements)
    except ConfigError as exc:
        parser.error(str(exc))
    except RankFailure as exc:
        for r, msg in sorted(exc.failures.items()):
            print(f"rank {r} failed:\n{msg}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(type(x))


if __name__ == "__main__":
    sys.exit(main())
