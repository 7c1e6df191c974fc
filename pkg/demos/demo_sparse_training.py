"""
Sparse chunk exchange during training
=====================================

Four workers train a logistic model.  With coarse-grained sparse
communication only the chunks with the largest summed L1 norms are sent; the
rest wait as residuals.  Sparsity ramps up over a warm-up period.
"""

from gradflow import RunConfig, train
from gradflow.harness import run_inproc
from gradflow.trainer import loss_only, optimal_logistic_loss, synth_data

base = dict(ranks=4, dims=[200, 1], task="two-class-logistic", iters=300, lr=0.05,
            momentum=0.9, batch=64, n_examples=4096, chunk_size=10, theta=0, seed=1)
data = synth_data(1, 4096, 200, "two-class-logistic", n_ranks=4)
best, _ = optimal_logistic_loss(data.X, data.y)
print(f"best achievable mean loss: {best:.4f}")

###############################################################################
# Dense baseline against 90% sparsity with a 30-iteration warm-up.

for name, extra in (("dense", {}), ("csc 90%", dict(csc=True, sparsity=0.9, warmup=30))):
    cfg = RunConfig(**base, **extra).validate()
    results = run_inproc(cfg, lambda c, ep: train(c, ep, data, return_model=True))
    rows, model = results[0]
    payload = sum(r["grad_payload_bytes"] + r["norm_bytes"] for r in rows)
    loss = loss_only(model.copy(), data.X, data.y, cfg.task)
    print(f"{name:>8}: final loss {loss:.4f}  bytes sent by rank 0 {payload:,}")
    for r in rows[::60]:
        print(f"          t={r['iteration']:3d} sparsity={r['sparsity']:.2f} chunks={r['selected_chunks']}")
