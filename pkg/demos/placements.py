"""Which layers get Post-LN under Mix-LN, and what each placement does to the residual stream."""

import numpy as np

from mixln.model import ModelConfig, init_params, norm_schedule, placement_schedule
from mixln.normalization import sigma_tracker

for L, alpha in [(12, 0.25), (24, 1 / 3), (32, 0.0625)]:
    s = norm_schedule(L, alpha)
    print(f"L={L:2d} alpha={alpha:.4f}: {''.join('P' if k == 'post' else '.' for k in s)}  ({s.count('post')} post)")

tokens = np.random.default_rng(0).integers(0, 256, (4, 64))
for mode in ("post_ln", "pre_ln", "mix_ln", "deepnorm", "sandwich_ln"):
    cfg = ModelConfig(n_layers=12, d_model=64, n_heads=4, d_ff=172, max_seq_len=64, placement_mode=mode,
                      init_std=0.1)
    model = init_params(cfg)
    sig = [v for k, v in sigma_tracker(model, tokens).items() if k.endswith(("attn_norm", "attn_norm_in"))]
    kinds = placement_schedule(cfg)
    print(f"{mode:12s} {kinds[0]}..{kinds[-1]:<9s}"
          f" input std at each attention norm: " + " ".join(f"{v:.2f}" for v in sig))
