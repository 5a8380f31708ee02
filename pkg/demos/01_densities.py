"""
Densities first, intensities second
===================================

A tour of the building blocks without any training: a log-normal mixture,
the hazard derived from it, merging two processes, and a FullyNN network
that quietly loses probability mass.

Run with ``python3 demos/01_densities.py``.
"""

# %%
import math

import numpy as np
from scipy import integrate

from iftpp import distributions as dist
from iftpp import flows

rng = np.random.default_rng(0)

# %%
# Two well separated modes: short bursts around 0.2, long pauses around 3.
p = dist.MixtureParams(w=np.array([0.6, 0.4]), mu=np.array([-1.6, 1.1]), s=np.array([0.3, 0.4]))
grid = np.array([0.1, 0.2, 0.5, 1.0, 3.0, 8.0])
pdf = np.exp(dist.lognormmix_logpdf(grid, p).data)
for t, v in zip(grid, pdf):
    print(f"p({t:4.1f}) = {v:.4f}")

# %%
# The mean has a closed form; compare with draws.
draws = dist.lognormmix_sample(p, rng, size=200_000)
print("mean: formula %.4f, sample %.4f" % (float(dist.lognormmix_mean(p)), draws.mean()))

# %%
# Hazard = p / (1 - F). Bimodal densities give a hazard that rises, falls
# and rises again, which no single exponential or Gompertz curve can do.
lam, cum = flows.intensity_from_density(lambda t: dist.lognormmix_logpdf(t, p),
                                        lambda t: dist.lognormmix_cdf(t, p), grid)
for t, l, c in zip(grid, lam, cum):
    print(f"lambda({t:4.1f}) = {l:7.3f}   Lambda = {c:6.3f}")

# %%
# Two independent processes running side by side: the next event of either
# one has CDF F1 + F2 - F1 F2. For exponentials the rates simply add.
F1 = lambda t: dist.exponential_cdf(t, dist.ExponentialParams(0.5)).data
F2 = lambda t: dist.exponential_cdf(t, dist.ExponentialParams(1.5)).data
t = np.linspace(0.1, 3, 4)
print(np.c_[t, flows.merge_cdfs(F1, F2, t), 1 - np.exp(-2.0 * t)])

# %%
# FullyNN models the cumulative hazard with a monotone network. Nothing
# forces Lambda(0) = 0 or Lambda(inf) = inf, so the density falls short of one.
for _ in range(3):
    q = flows.FullyNnParams.random(rng, d=32)
    f = lambda u: math.exp(float(flows.fullynn_logpdf(np.array([math.exp(u)]), q).data[0]) + u)
    mass, _ = integrate.quad(f, -14, 14, limit=500)
    print("FullyNN mass %.4f (closed form %.4f)" % (mass, flows.fullynn_total_mass(q)))
