"""Per-block gradient norms at initialization for Post-LN, Pre-LN and Mix-LN."""

import numpy as np

from mixln.data import stdlib_corpus_text
from mixln.diagnostics import balance_score, grad_profile
from mixln.model import ModelConfig, init_params
from mixln.training import encode

tokens = encode(stdlib_corpus_text(200_000))
rng = np.random.default_rng(0)
starts = rng.integers(0, tokens.size - 129, 8)
x = np.stack([tokens[s:s + 128] for s in starts])
y = np.stack([tokens[s + 1:s + 129] for s in starts])

for mode in ("post_ln", "pre_ln", "mix_ln"):
    cfg = ModelConfig(n_layers=12, d_model=64, n_heads=4, d_ff=172, max_seq_len=128, placement_mode=mode, alpha=0.25)
    prof = grad_profile(init_params(cfg), x, y)
    bars = " ".join(f"{n / prof.norms.max():.2f}" for n in prof.norms)
    print(f"{mode:8s} balance {balance_score(prof):.3f} | {bars}")
