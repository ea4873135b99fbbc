"""Train a small Mix-LN byte model for a couple hundred steps, then probe its layers.

    python demos/tiny_training.py [out_dir]
"""

import sys
from pathlib import Path

from mixln.experiment import resolve_config, run_experiment
from mixln.diagnostics import angular_distance_matrix, prune_report
from mixln.experiment import corpus_tokens

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_tiny")
cfg = resolve_config(overrides={
    "n_layers": 6, "d_model": 64, "n_heads": 4, "d_ff": 172, "max_seq_len": 128, "seq_len": 128,
    "batch_size": 8, "total_steps": 200, "eval_interval": 50, "eval_tokens": 8192, "placement_mode": "mix_ln",
    "alpha": 1 / 3, "corpus_max_bytes": 2_000_000, "diag_tokens": 8192, "output_dir": str(out),
})
res = run_experiment(cfg, out)
for r in res.runlog.records:
    print(f"step {r.step:4d}  train {r.train_loss:.3f}  eval ppl {r.eval_ppl:8.2f}")

model = res.load_model()
_, eval_tokens = corpus_tokens(cfg["corpus"], cfg["corpus_max_bytes"])
rep = prune_report(model, eval_tokens, seq_len=128, max_tokens=8192)
ang = angular_distance_matrix(model, eval_tokens, max_tokens=8192, seq_len=128)
for ell, d in enumerate(rep.delta):
    print(f"layer {ell}: ppl increase when removed {d:7.3f}, angular distance to next {ang.distances[ell, 1]:.3f}")
