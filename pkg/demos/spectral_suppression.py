"""Watch the closed-form gain collapse as a key moves into high-variance directions.

Run: python3 demos/spectral_suppression.py
"""
import numpy as np

from memedit import spectral_report
from memedit.memory import random_orthogonal

rng = np.random.default_rng(0)
d = 16
Q = random_orthogonal(rng, d)
eigs = np.geomspace(1e4, 1.0, d)  # anisotropic covariance, kappa = 1e4
C = (Q * eigs) @ Q.T
C = (C + C.T) / 2

print(f"{'top-quarter mass':>17} {'gamma':>10} {'beta':>8} {'bound':>8}")
for mass in (0.0, 0.5, 0.9, 0.99, 1.0):
    # unit key with the requested share of its energy in the top four eigendirections
    top = Q[:, :4] @ rng.standard_normal(4)
    low = Q[:, 4:] @ rng.standard_normal(d - 4)
    k = np.sqrt(mass) * top / np.linalg.norm(top) + np.sqrt(1 - mass) * low / np.linalg.norm(low)
    rep = spectral_report(C, 1e-3, 10 * k)
    # the bound only speaks about keys entirely inside the protected directions
    bound = f"{rep.suppression_upper_bound:8.3f}" if mass == 1.0 else f"{'-':>8}"
    print(f"{rep.protected_mass:17.2f} {rep.gamma:10.3g} {rep.beta:8.3f} {bound}")
