"""How good is the "LayerNorm Jacobian ~ I / sigma" approximation?

Prints the mean relative error over random directions for growing widths,
next to its closed-form expectation, and the worst case along z itself.
"""

import numpy as np

from mixln.normalization import expected_random_direction_error, identity_approx_error, jacobian_table

for rep in jacobian_table(dims=(16, 64, 256, 1024), trials=200, seed=0):
    print(f"d={rep.d:5d}  error {rep.identity_approx_error:.4f} +- {rep.identity_approx_error_std:.4f}"
          f"  (expected {expected_random_direction_error(rep.d):.4f})"
          f"  null residuals x:{rep.null_direction_residuals['x']:.1e} 1:{rep.null_direction_residuals['ones']:.1e}")

x = np.random.default_rng(0).standard_normal(256)
z = (x - x.mean()) / x.std()
print(f"along z the approximation is off by {identity_approx_error(x, 1, directions=z[None]):.3f} (relative)")
