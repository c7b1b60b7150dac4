"""
Error rates and score fusion
============================

Two imperfect systems score the same trials.  Each is min-max scaled and the
pair is averaged with weights 0.3 and 0.7.
"""

import numpy as np

from shrinksv.verification import ScoreSet, compute_eer, compute_min_dcf, error_curves, normalize_and_fuse

rng = np.random.default_rng(3)
labels = rng.random(2000) < 0.1
truth = labels.astype(float)

# two systems with independent errors and very different score ranges
a = ScoreSet.from_arrays(0.2 * truth + rng.normal(0, 0.12, labels.size), labels)
b = ScoreSet.from_arrays(40 * truth + rng.normal(10, 25, labels.size), labels)

for name, s in [("a", a), ("b", b)]:
    eer, _ = compute_eer(s)
    dcf, _ = compute_min_dcf(s)
    print(f"system {name}: EER {100 * eer:5.2f}%  minDCF {dcf:.4f}")

fused = normalize_and_fuse(a, b)
eer, _ = compute_eer(fused)
dcf, _ = compute_min_dcf(fused)
print(f"fused 0.3/0.7: EER {100 * eer:5.2f}%  minDCF {dcf:.4f}")

# the full sweep behind the numbers
thresholds, miss, fa = error_curves(fused)
i = np.argmin(np.abs(miss - fa))
print(f"{thresholds.size} thresholds; near the crossing miss {miss[i]:.3f}, false accept {fa[i]:.3f}")

# rank statistics: any increasing map leaves both metrics alone
warped = ScoreSet.from_arrays(np.exp(3 * fused.scores), labels)
print("EER after exp warp equal:", compute_eer(warped)[0] == compute_eer(fused)[0])
