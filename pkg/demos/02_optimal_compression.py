"""Data-dependent optimal compression beats every rank-k competitor.

Given activations X and a projection W, the best rank-k replacement of W
under the Frobenius norm is W V_k V_k^T, where V_k spans the top right
singular subspace of the *projected features* K = X W. This script builds
those factors, checks the closed-form error identity, and then lets 500
random subspaces plus the data-independent truncated-SVD-of-W baseline try
to beat them.
"""

import numpy as np

from kvcore import (
    CovarianceAccumulator,
    Kind,
    build_factors,
    measured_error,
    predicted_error,
    verify_optimality,
)

rng = np.random.default_rng(1)

# anisotropic activations: some directions are exercised far more than others
scales = np.geomspace(5.0, 0.05, 16)
x = rng.standard_normal((512, 16)) * scales
w = rng.standard_normal((16, 8))

spec = CovarianceAccumulator(8).ingest(x @ w).finalize(0, Kind.KEY)
print("singular values of X W:", np.round(spec.sigma, 3))

print("\n k   predicted error   measured error     retained energy")
for k in range(1, 9):
    f = build_factors(w, spec, k)
    rep = measured_error(x, w, f, spec)
    print(f" {k}   {predicted_error(spec, k, 'fro'):15.6f}   "
          f"{rep.frobenius_error:14.6f}     {rep.retained_energy:.6f}")

k = 3
factors = build_factors(w, spec, k)
print(f"\nfactor pair at k={k}: down {factors.down.shape}, up {factors.up.shape}"
      f" (cache {k} dims instead of {w.shape[1]})")

audit = verify_optimality(x, w, factors, trials=500, seed=42)
print(f"optimality audit over {audit.trials} random rank-{k} subspaces:")
print(f"   our error            {audit.factor_error:.6f}")
print(f"   closest competitor   +{audit.min_margin:.6f}")
print(f"   truncated SVD of W   {audit.baseline_error:.6f} "
      f"(margin +{audit.baseline_margin:.6f})")
print("\nthe data-independent baseline loses because it ignores which "
      "directions X actually visits.")
