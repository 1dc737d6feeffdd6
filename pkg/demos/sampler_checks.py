"""
The Monte-Carlo pieces of the E-step, checked against exact answers.

* truncated normal draws from the Gibbs sampler vs the closed-form mean,
* Poisson-lognormal posterior means vs numerical quadrature,
* box probabilities: hit counting vs the GHK estimator vs the exact value.
"""

import numpy as np
from scipy.integrate import quad
from scipy.stats import multivariate_normal, norm

from mmm.samplers import (
    McmcConfig,
    TruncRegion,
    gibbs_truncated_mvn,
    moments,
    orthant_logprob_ghk_batch,
    orthant_prob_mc,
    sample_count_posterior,
    stream,
)

cfg = McmcConfig()

draws = gibbs_truncated_mvn([0.0], [[1.0]], TruncRegion([1.5], [np.inf]), cfg, stream(1))
print(f"N(0,1) on (1.5, inf): Gibbs mean {draws.mean():.4f}, exact {norm.pdf(1.5) / norm.sf(1.5):.4f}")

print("\ncount posterior mean, prior N(m, v), y ~ Poisson(exp(z))")
for y, m, v in [(0, 0.0, 1.0), (3, 1.0, 0.5), (12, 2.0, 2.0), (50, np.log(50), 1e4)]:
    s, w = sample_count_posterior([y], [m], [[v]], cfg, stream(2, y))
    post = lambda z, k: z**k * np.exp(y * z - np.exp(z) - 0.5 * (z - m) ** 2 / v)
    lo, hi = max(m - 12 * np.sqrt(v), -60), min(m + 12 * np.sqrt(v), 60)
    exact = quad(post, lo, hi, args=(1,), points=[np.log(y + 0.5)], limit=200)[0] / \
        quad(post, lo, hi, args=(0,), points=[np.log(y + 0.5)], limit=200)[0]
    print(f"  y={y:3d} m={m:5.2f} v={v:g}: sampler {moments(s, w).m[0]:.4f}, quadrature {exact:.4f}")

print("\nprobability of a 2-d box under a correlated Gaussian")
cov = np.array([[1.0, 0.6], [0.6, 1.0]])
mean = np.array([0.0, 0.0])
upper = np.array([-1.0, -1.5])
exact = multivariate_normal(mean, cov).cdf(upper)
hits = orthant_prob_mc(mean, cov, TruncRegion([-np.inf] * 2, upper), 500, stream(3))
ghk = np.exp(orthant_logprob_ghk_batch(mean[None], cov, np.full((1, 2), -np.inf), upper[None],
                                       stream(4).random((1, 500, 2))))[0]
print(f"  exact {exact:.5f}, hit counting {hits:.5f}, GHK {ghk:.5f}")
