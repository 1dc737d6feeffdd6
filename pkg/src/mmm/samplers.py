"""
Monte-Carlo machinery for the E-step.

* truncated multivariate normal draws by systematic-scan Gibbs sampling,
* posterior draws for Poisson-lognormal count blocks,
* Monte-Carlo box probabilities of a Gaussian,
* first and raw second moments of (weighted) draws.

Each public sampler has a ``*_batch`` twin that runs many independent targets
in lock-step. The twins take pre-generated uniforms or normals instead of a
generator, so every unit can own its random stream (see :func:`stream`) and
results do not depend on how units are batched.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp, ndtr, ndtri

from .errors import RegionError, ShapeError, ValidationError
from .matnorm import cholesky, spd_inverse

# inflation of the Laplace covariance used as independence proposal
PROPOSAL_SCALE = 1.2

PURPOSE_GIBBS = 0
PURPOSE_ORTHANT = 1
PURPOSE_COUNT = 2

COUNT_FACTORS = ("importance", "plugin")
ORTHANT_METHODS = ("ghk", "hits")


@dataclass(frozen=True)
class McmcConfig:
    gibbs_burnin: int = 100
    gibbs_thin: int = 2
    gibbs_samples: int = 100
    count_iters: int = 500
    count_chains: int = 3
    count_burnin_fraction: float = 0.5
    orthant_draws: int = 500
    orthant_method: str = "ghk"
    # how the count block enters the cluster score, see mmm.em
    count_factor: str = "importance"

    def __post_init__(self):
        for name in ("gibbs_burnin", "gibbs_thin", "gibbs_samples", "count_iters",
                     "count_chains", "orthant_draws"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"McmcConfig.{name} must be a positive integer")
        if not 0.0 < self.count_burnin_fraction < 1.0:
            raise ValidationError("McmcConfig.count_burnin_fraction must lie in (0, 1)")
        if self.count_kept < 1:
            raise ValidationError("count sampler keeps no iterations after burn-in")
        if self.orthant_method not in ORTHANT_METHODS:
            raise ValidationError(f"McmcConfig.orthant_method must be one of {ORTHANT_METHODS}")
        if self.count_factor not in COUNT_FACTORS:
            raise ValidationError(f"McmcConfig.count_factor must be one of {COUNT_FACTORS}")

    @property
    def gibbs_sweeps(self):
        return self.gibbs_burnin + self.gibbs_thin * self.gibbs_samples

    @property
    def count_burnin(self):
        return int(round(self.count_iters * self.count_burnin_fraction))

    @property
    def count_kept(self):
        return self.count_iters - self.count_burnin


@dataclass(frozen=True)
class TruncRegion:
    """Box ``lower < z <= upper``; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise ShapeError("lower and upper bounds differ in length")
        check_region(lower, upper)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unbounded(cls, d):
        return cls(np.full(d, -np.inf), np.full(d, np.inf))

    def contains(self, z):
        z = np.asarray(z)
        return np.all((z > self.lower) & (z <= self.upper), axis=-1)


@dataclass(frozen=True)
class MomentPair:
    m: np.ndarray
    S: np.ndarray


def check_region(lower, upper):
    width = upper - lower
    if np.any(np.isnan(width)) or np.any(width < 1e-12):
        raise RegionError("truncation region is empty or degenerate")


def stream(seed, *key):
    """Independent generator for ``key`` under the root ``seed``.

    Keys are small non-negative integers such as
    ``(restart, iteration, unit, cluster, purpose)``.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def truncnorm_ppf(a, b, u):
    """Quantile ``u`` of the standard normal restricted to ``[a, b]``.

    Works in whichever tail keeps the probabilities representable and falls
    back to an exponential tail approximation when the interval mass
    underflows.
    """
    a, b, u = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(u, float))
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    plo = ndtr(lo)
    phi = ndtr(hi)
    mass = phi - plo
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x = ndtri(plo + u * mass)
        # deep lower tail: hi - x is approximately Exp(|hi|) truncated at hi - lo
        rate = np.maximum(np.abs(hi), 1.0)
        span = np.where(np.isfinite(lo), hi - lo, np.inf)
        s = -np.log1p(-u * -np.expm1(-rate * span)) / rate
        tail = hi - s
    x = np.where((mass > 0) & np.isfinite(x), x, tail)
    x = np.clip(x, lo, hi)
    return np.where(flip, -x, x)


def _clamp_into(z, lower, upper):
    return np.minimum(np.maximum(z, np.nextafter(lower, np.inf)), upper)


def gibbs_start(mean, lower, upper):
    """Feasible starting point: the mean when inside, otherwise a point near the box."""
    inside = (mean > lower) & (mean <= upper)
    both = np.isfinite(lower) & np.isfinite(upper)
    with np.errstate(invalid="ignore"):
        mid = 0.5 * (lower + upper)
    fallback = np.where(both, mid, np.where(np.isfinite(lower), lower + 1.0, upper - 1.0))
    return np.where(inside, mean, fallback)


def gibbs_truncated_mvn_batch(means, cov, lower, upper, cfg, uniforms):
    """Run one Gibbs chain per row of ``means``; all chains share ``cov``.

    ``uniforms`` has shape ``(n, cfg.gibbs_sweeps, d)``. Returns the kept
    draws, shape ``(n, cfg.gibbs_samples, d)``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), means.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), means.shape)
    n, d = means.shape
    if uniforms.shape != (n, cfg.gibbs_sweeps, d):
        raise ShapeError(f"uniforms must have shape {(n, cfg.gibbs_sweeps, d)}")
    check_region(lower, upper)
    Q = spd_inverse(cov, "truncated normal covariance")
    qdiag = np.diag(Q)
    sd = 1.0 / np.sqrt(qdiag)
    z = gibbs_start(means, lower, upper)
    r = z - means
    out = np.empty((n, cfg.gibbs_samples, d))
    kept = 0
    for sweep in range(cfg.gibbs_sweeps):
        u = uniforms[:, sweep, :]
        for j in range(d):
            cm = means[:, j] - (r @ Q[j] - qdiag[j] * r[:, j]) / qdiag[j]
            a = (lower[:, j] - cm) / sd[j]
            b = (upper[:, j] - cm) / sd[j]
            zj = cm + sd[j] * truncnorm_ppf(a, b, u[:, j])
            zj = _clamp_into(zj, lower[:, j], upper[:, j])
            z[:, j] = zj
            r[:, j] = zj - means[:, j]
        done = sweep + 1 - cfg.gibbs_burnin
        if done > 0 and done % cfg.gibbs_thin == 0:
            out[:, kept] = z
            kept += 1
    return out


def gibbs_truncated_mvn(mean, cov, region, cfg, rng):
    """Draw ``cfg.gibbs_samples`` vectors from ``N(mean, cov)`` restricted to ``region``."""
    mean = np.asarray(mean, dtype=float).ravel()
    d = mean.size
    if region.lower.size != d:
        raise ShapeError("region and mean differ in dimension")
    u = rng.random((1, cfg.gibbs_sweeps, d))
    return gibbs_truncated_mvn_batch(mean[None], cov, region.lower[None], region.upper[None], cfg, u)[0]


def orthant_prob_batch(means, cov, lower, upper, normals):
    """Smoothed hit rate ``(hits + 0.5) / (n + 1)`` of the box for each row of ``means``.

    ``normals`` holds standard normal draws of shape ``(n_units, n, d)``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    L = cholesky(cov, "orthant covariance")
    draws = means[:, None, :] + normals @ L.T
    inside = np.all((draws > lower[:, None, :]) & (draws <= upper[:, None, :]), axis=-1)
    hits = inside.sum(axis=1)
    return (hits + 0.5) / (normals.shape[1] + 1.0)


def log_interval_mass(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a < b``, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    l_hi = log_ndtr(hi)
    l_lo = log_ndtr(lo)
    with np.errstate(divide="ignore"):
        return l_hi + np.log1p(-np.exp(np.minimum(l_lo - l_hi, 0.0)))


def orthant_logprob_ghk_batch(means, cov, lower, upper, uniforms):
    """GHK estimate of ``log P(lower < z <= upper)`` for ``z ~ N(mean, cov)``, per row.

    Each draw walks the coordinates in order, drawing coordinate ``j`` from
    its conditional given the earlier ones restricted to the box and
    multiplying the conditional box masses. The mean of these products is an
    unbiased estimate of the box probability. ``uniforms`` has shape
    ``(n_units, n, d)``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    L = cholesky(cov, "orthant covariance")
    n_units, n, d = uniforms.shape
    e = np.zeros((n_units, n, d))
    logw = np.zeros((n_units, n))
    lo = (lower - means)[:, None, :]
    hi = (upper - means)[:, None, :]
    for j in range(d):
        shift = e[:, :, :j] @ L[j, :j]
        a = (lo[:, :, j] - shift) / L[j, j]
        b = (hi[:, :, j] - shift) / L[j, j]
        logw += log_interval_mass(a, b)
        e[:, :, j] = truncnorm_ppf(a, b, uniforms[:, :, j])
    return logsumexp(logw, axis=1) - np.log(n)


def orthant_prob_mc(mean, cov, region, n, rng):
    """Monte-Carlo probability that ``N(mean, cov)`` falls inside ``region``."""
    mean = np.asarray(mean, dtype=float).ravel()
    if int(n) < 1:
        raise ValidationError("orthant_prob_mc needs at least one draw")
    normals = rng.standard_normal((1, int(n), mean.size))
    return float(orthant_prob_batch(mean[None], cov, region.lower[None], region.upper[None], normals)[0])


def _count_logpost(z, y, mu, Q):
    r = z - mu
    return np.sum(y * z - np.exp(z), axis=-1) - 0.5 * np.einsum("...i,ij,...j->...", r, Q, r)


def count_posterior_mode(y, mu, Q, max_iter=100, tol=1e-10):
    """Mode and negative Hessian of the Poisson-lognormal log posterior, per row."""
    z = mu.copy()
    f = _count_logpost(z, y, mu, Q)
    eye = np.eye(z.shape[-1])
    for _ in range(max_iter):
        ez = np.exp(z)
        grad = y - ez - (z - mu) @ Q
        H = ez[:, :, None] * eye + Q
        step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        big = np.max(np.abs(step), axis=1, keepdims=True)
        step = step * np.minimum(1.0, 2.0 / np.maximum(big, 1e-300))
        t = np.ones((z.shape[0], 1))
        for _ in range(40):
            cand = z + t * step
            fc = _count_logpost(cand, y, mu, Q)
            bad = ~(fc >= f - 1e-12)
            if not bad.any():
                break
            t = np.where(bad[:, None], 0.5 * t, t)
        z, f = cand, fc
        if np.max(np.abs(t * step)) < tol:
            break
    ez = np.exp(z)
    return z, ez[:, :, None] * eye + Q


def count_posterior_batch(y, means, cov, cfg, innov, accept, log_marginal=False):
    """Weighted posterior draws for many count blocks sharing a prior covariance.

    Each chain is an independence Metropolis-Hastings sampler proposing from
    the Laplace approximation (covariance inflated by ``PROPOSAL_SCALE**2``).
    The ``C`` chains of a unit reuse one stream of uniforms, shifted by
    ``c / C`` for chain ``c``, so each chain sees i.i.d. uniforms while the
    chains jointly stratify the proposal space. After burn-in every step
    contributes the proposal with weight ``alpha`` and the current state
    with weight ``1 - alpha``.

    ``innov``: uniforms ``(n, cfg.count_iters, d)``;
    ``accept``: uniforms ``(n, cfg.count_chains, cfg.count_iters)``.
    Returns ``(samples, weights)`` of shapes ``(n, m, d)`` and ``(n, m)`` with
    ``m = 2 * count_chains * count_kept``.

    With ``log_marginal=True`` a third output holds, per row, the importance
    sampling estimate of ``log p(y)`` built from every proposal (they are
    i.i.d. draws from the Laplace proposal, burn-in included).
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n, d = means.shape
    C = cfg.count_chains
    if innov.shape != (n, cfg.count_iters, d) or accept.shape != (n, C, cfg.count_iters):
        raise ShapeError("count sampler random inputs have the wrong shape")
    Q = spd_inverse(cov, "count prior covariance")
    mode, H = count_posterior_mode(y, means, Q)
    prop_cov = PROPOSAL_SCALE ** 2 * np.linalg.inv(H)
    L = np.linalg.cholesky(0.5 * (prop_cov + np.swapaxes(prop_cov, 1, 2)))

    def logw(z, eps):
        return _count_logpost(z, y[:, None, :], means[:, None, :], Q) + 0.5 * np.sum(eps * eps, axis=-1)

    cur = np.repeat(mode[:, None, :], C, axis=1)
    cur_lw = logw(cur, np.zeros_like(cur))
    shifts = (np.arange(C) / C)[None, :, None]
    burn = cfg.count_burnin
    kept = cfg.count_kept
    samples = np.empty((n, kept, 2, C, d))
    weights = np.empty((n, kept, 2, C))
    is_lw = np.empty((n, cfg.count_iters, C)) if log_marginal else None
    tiny = np.finfo(float).eps
    for t in range(cfg.count_iters):
        uu = np.clip((innov[:, t, None, :] + shifts) % 1.0, tiny, 1.0 - tiny)
        eps = ndtri(uu)
        prop = mode[:, None, :] + np.einsum("nij,ncj->nci", L, eps)
        prop_lw = logw(prop, eps)
        with np.errstate(over="ignore"):
            alpha = np.minimum(1.0, np.exp(prop_lw - cur_lw))
        alpha = np.where(np.isfinite(prop_lw), alpha, 0.0)
        if log_marginal:
            is_lw[:, t] = prop_lw
        if t >= burn:
            k = t - burn
            samples[:, k, 0] = prop
            samples[:, k, 1] = cur
            weights[:, k, 0] = alpha
            weights[:, k, 1] = 1.0 - alpha
        move = accept[:, :, t] < alpha
        cur = np.where(move[:, :, None], prop, cur)
        cur_lw = np.where(move, prop_lw, cur_lw)
    samples, weights = samples.reshape(n, -1, d), weights.reshape(n, -1)
    if not log_marginal:
        return samples, weights
    # log p(y, z) - log q(z) = logw + log|L| - log|cov|/2 - sum log y!
    _, logdet_cov = np.linalg.slogdet(cov)
    logdet_L = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    const = logdet_L - 0.5 * logdet_cov - gammaln(y + 1.0).sum(axis=1)
    lw = is_lw.reshape(n, -1)
    logml = logsumexp(lw, axis=1) - np.log(lw.shape[1]) + const
    return samples, weights, logml


def sample_count_posterior(y, prior_mean, prior_cov, cfg, rng):
    """Weighted draws from ``p(z | y)`` with ``y ~ Poisson(exp(z))`` and ``z ~ N(prior_mean, prior_cov)``.

    Returns ``(samples, weights)``; pass both to :func:`moments`.
    """
    y = np.asarray(y, dtype=float).ravel()
    prior_mean = np.asarray(prior_mean, dtype=float).ravel()
    if y.shape != prior_mean.shape:
        raise ShapeError("counts and prior mean differ in length")
    if np.any(y < 0):
        raise ValidationError("counts must be non-negative")
    d = y.size
    innov = rng.random((1, cfg.count_iters, d))
    accept = rng.random((1, cfg.count_chains, cfg.count_iters))
    s, w = count_posterior_batch(y[None], prior_mean[None], prior_cov, cfg, innov, accept)
    return s[0], w[0]


def moments_batch(samples, weights=None):
    """Per-row mean ``(n, d)`` and raw second moment ``(n, d, d)`` of stacked draws."""
    samples = np.asarray(samples, dtype=float)
    if weights is None:
        w = np.full(samples.shape[:2], 1.0 / samples.shape[1])
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum(axis=1, keepdims=True)
    m = np.einsum("ns,nsd->nd", w, samples)
    S = np.einsum("ns,nsd,nse->nde", w, samples, samples)
    return m, 0.5 * (S + np.swapaxes(S, 1, 2))


def moments(samples, weights=None):
    """Sample mean and mean outer product ``E[z z']`` of a list of draws."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise ValidationError("moments of an empty sample list")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)[None]
    m, S = moments_batch(samples[None], weights)
    return MomentPair(m[0], S[0])
