"""
MCMC-EM estimation of a mixture of matrix-normals on a mixed-type latent space.

Per unit and cluster the E-step

1. conditions the categorical (beta) rows on the continuous (alpha) rows and
   samples them inside the box implied by the observed codes,
2. conditions the count (gamma) rows on the alpha rows and the beta
   posterior mean and samples their Poisson-lognormal posterior,
3. scores the cluster as ``pi_k * alpha density * box probability *
   Poisson plug-in at the count posterior mean``.

The M-step is closed form. ``Sigma`` is updated with the previous ``Phi``,
then ``Phi`` with the new ``Sigma``, and ``Phi`` is finally rescaled to unit
determinant.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .config import RunConfig
from .errors import CovarianceError, DegenerateClusterError, FitFailedError, NumericalError, ShapeError, ValidationError
from .matnorm import (
    MatNormParams,
    cholesky,
    condition_on_blocks,
    constrain_phi,
    kron,
    matnorm_logpdf,
    spd_inverse,
    unvec,
    vec,
)
from .samplers import (
    PURPOSE_COUNT,
    PURPOSE_GIBBS,
    PURPOSE_ORTHANT,
    McmcConfig,
    count_posterior_batch,
    gibbs_truncated_mvn_batch,
    moments_batch,
    orthant_logprob_ghk_batch,
    orthant_prob_batch,
    stream,
)
from .schema import category_bounds, expand_nominal, latent_init_view

log = logging.getLogger(__name__)

# stream-key prefixes
_KEY_INIT = 0
_KEY_ESTEP = 1


@dataclass(frozen=True, eq=False)
class MMMParams:
    """Mixing weights ``pi`` (K,) and stacked ``M`` (K,J,T), ``Phi`` (K,T,T), ``Sigma`` (K,J,J)."""

    pi: np.ndarray
    M: np.ndarray
    Phi: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        M = np.asarray(self.M, dtype=float)
        Phi = np.asarray(self.Phi, dtype=float)
        Sigma = np.asarray(self.Sigma, dtype=float)
        if M.ndim != 3:
            raise ShapeError(f"M must be (K, J, T), got {M.shape}")
        K, J, T = M.shape
        if pi.shape != (K,) or Phi.shape != (K, T, T) or Sigma.shape != (K, J, J):
            raise ShapeError("pi, M, Phi and Sigma disagree on K, J or T")
        for name, arr in (("pi", pi), ("M", M), ("Phi", Phi), ("Sigma", Sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self):
        return self.M.shape[0]

    @property
    def J(self):
        return self.M.shape[1]

    @property
    def T(self):
        return self.M.shape[2]

    def cluster(self, k):
        return MatNormParams(self.M[k], self.Phi[k], self.Sigma[k])

    def permuted(self, perm):
        perm = np.asarray(perm, dtype=int)
        return MMMParams(self.pi[perm], self.M[perm], self.Phi[perm], self.Sigma[perm])

    def to_dict(self):
        def mat(a):
            return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(x) for x in a.ravel()]}

        return {
            "K": self.K,
            "pi": [float(p) for p in self.pi],
            "clusters": [
                {"M": mat(self.M[k]), "Phi": mat(self.Phi[k]), "Sigma": mat(self.Sigma[k])}
                for k in range(self.K)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        def mat(m):
            return np.asarray(m["data"], dtype=float).reshape(m["rows"], m["cols"])

        clusters = d["clusters"]
        if len(clusters) != int(d.get("K", len(clusters))):
            raise ValidationError("params: K does not match the number of clusters")
        return cls(
            np.asarray(d["pi"], dtype=float),
            np.stack([mat(c["M"]) for c in clusters]),
            np.stack([mat(c["Phi"]) for c in clusters]),
            np.stack([mat(c["Sigma"]) for c in clusters]),
        )


@dataclass(eq=False)
class EStepStats:
    """Responsibilities and conditional latent moments per unit ``i`` and cluster ``k``.

    Beta-block fields have O rows, gamma-block fields G rows (either may be 0).
    ``D``/``B`` contract the second moments with ``Phi^-1`` over time, ``C``/``A``
    with the matching diagonal block of ``Sigma^-1`` over rows; all four use the
    parameters the E-step was run with.
    """

    tau: np.ndarray  # (N, K)
    log_q: np.ndarray  # (N, K)
    Mb: np.ndarray  # (N, K, O, T)
    Mg: np.ndarray  # (N, K, G, T)
    Sb: np.ndarray  # (N, K, OT, OT) raw second moments of vec(Z_beta)
    Sg: np.ndarray  # (N, K, GT, GT)
    D: np.ndarray  # (N, K, O, O)
    B: np.ndarray  # (N, K, G, G)
    C: np.ndarray  # (N, K, T, T)
    A: np.ndarray  # (N, K, T, T)

    @property
    def obs_loglik_contrib(self):
        return logsumexp(self.log_q, axis=1)


@dataclass(eq=False)
class FitResult:
    params: MMMParams
    tau: np.ndarray
    assignments: np.ndarray
    loglik_history: list
    bic: float
    iterations: int
    converged: bool
    seed: int = 0
    config: RunConfig = None
    stats: EStepStats = None
    trace: list = field(default=None, repr=False)

    @property
    def loglik(self):
        return self.loglik_history[-1]


class LatentData:
    """Arrays derived once from an expanded dataset and reused by every E-step."""

    def __init__(self, ds):
        ds = expand_nominal(ds)
        self.ds = ds
        sch = ds.schema
        self.Y = ds.values
        self.N, self.J, self.T = ds.values.shape
        self.a, self.b, self.g = sch.alpha, sch.beta, sch.gamma
        self.C, self.O, self.G = self.a.size, self.b.size, self.g.size
        if self.O:
            lower, upper = category_bounds(ds)
            self.lower, self.upper = vec(lower), vec(upper)
        if self.G:
            self.counts = vec(self.Y[:, self.g, :])
            self.count_lgamma = gammaln(self.counts + 1.0).sum(axis=1)


def contract_time(S, W, rows, T):
    """``E[Z W Z']`` (rows x rows) from the raw second moment of ``vec(Z)``."""
    S4 = S.reshape(*S.shape[:-2], T, rows, T, rows)
    return np.einsum("...ghdt,gd->...ht", S4, W)


def contract_rows(S, V, rows, T):
    """``E[Z' V Z]`` (T x T) from the raw second moment of ``vec(Z)``."""
    S4 = S.reshape(*S.shape[:-2], T, rows, T, rows)
    return np.einsum("...hgtd,gd->...ht", S4, V)


def stacked_means(data, stats, k):
    """``[Y_alpha; Mb; Mg]`` for every unit under cluster ``k``, shape (N, J, T)."""
    X = data.Y.copy()
    if data.O:
        X[:, data.b] = stats.Mb[:, k]
    if data.G:
        X[:, data.g] = stats.Mg[:, k]
    return X


def _unit_uniforms(seed, key, k, purpose, N, shape, normal=False):
    out = np.empty((N, *shape))
    for i in range(N):
        rng = stream(seed, _KEY_ESTEP, *key, i, k, purpose)
        out[i] = rng.standard_normal(shape) if normal else rng.random(shape)
    return out


def _estep_cluster(data, params, k, mcmc, seed, key):
    N, T = data.N, data.T
    a, b, g = data.a, data.b, data.g
    O, G = data.O, data.G
    M, Phi, Sigma = params.M[k], params.Phi[k], params.Sigma[k]
    Phi_inv = spd_inverse(Phi, "Phi")
    Sigma_inv = spd_inverse(Sigma, "Sigma")
    with np.errstate(divide="ignore"):
        log_q = np.full(N, np.log(params.pi[k]))
    out = {}
    if data.C:
        log_q += matnorm_logpdf(data.Y[:, a], MatNormParams(M[a], Phi, Sigma[np.ix_(a, a)]))

    Mb_hat = np.zeros((N, O, T))
    Sb = np.zeros((N, O * T, O * T))
    if O:
        if data.C:
            rows = np.concatenate([a, b])
            Mb_cond, Sb_cond = condition_on_blocks(
                M[rows], Sigma[np.ix_(rows, rows)], range(data.C), data.Y[:, a]
            )
        else:
            Mb_cond = np.broadcast_to(M[b], (N, O, T))
            Sb_cond = Sigma[np.ix_(b, b)]
        cov = kron(Phi, Sb_cond)
        cov = 0.5 * (cov + cov.T)
        mean = vec(Mb_cond)
        u = _unit_uniforms(seed, key, k, PURPOSE_GIBBS, N, (mcmc.gibbs_sweeps, O * T))
        draws = gibbs_truncated_mvn_batch(mean, cov, data.lower, data.upper, mcmc, u)
        mb, Sb = moments_batch(draws)
        Mb_hat = unvec(mb, O, T)
        if mcmc.orthant_method == "ghk":
            u = _unit_uniforms(seed, key, k, PURPOSE_ORTHANT, N, (mcmc.orthant_draws, O * T))
            log_q += orthant_logprob_ghk_batch(mean, cov, data.lower, data.upper, u)
        else:
            z = _unit_uniforms(seed, key, k, PURPOSE_ORTHANT, N, (mcmc.orthant_draws, O * T), normal=True)
            log_q += np.log(orthant_prob_batch(mean, cov, data.lower, data.upper, z))

    Mg_hat = np.zeros((N, G, T))
    Sg = np.zeros((N, G * T, G * T))
    if G:
        obs = np.concatenate([a, b])
        if obs.size:
            rows = np.concatenate([obs, g])
            Z_obs = np.concatenate([data.Y[:, a], Mb_hat], axis=1)
            Mg_cond, Sg_cond = condition_on_blocks(
                M[rows], Sigma[np.ix_(rows, rows)], range(obs.size), Z_obs
            )
        else:
            Mg_cond = np.broadcast_to(M[g], (N, G, T))
            Sg_cond = Sigma[np.ix_(g, g)]
        cov = kron(Phi, Sg_cond)
        cov = 0.5 * (cov + cov.T)
        innov = np.empty((N, mcmc.count_iters, G * T))
        accept = np.empty((N, mcmc.count_chains, mcmc.count_iters))
        for i in range(N):
            rng = stream(seed, _KEY_ESTEP, *key, i, k, PURPOSE_COUNT)
            innov[i] = rng.random((mcmc.count_iters, G * T))
            accept[i] = rng.random((mcmc.count_chains, mcmc.count_iters))
        draws, weights, logml = count_posterior_batch(
            data.counts, vec(Mg_cond), cov, mcmc, innov, accept, log_marginal=True
        )
        mg, Sg = moments_batch(draws, weights)
        Mg_hat = unvec(mg, G, T)
        if mcmc.count_factor == "plugin":
            # Poisson pmf at the posterior mean of the latent counts
            log_q += np.sum(data.counts * mg - np.exp(mg), axis=1) - data.count_lgamma
        else:
            log_q += logml

    out["log_q"] = log_q
    out["Mb"], out["Sb"] = Mb_hat, Sb
    out["Mg"], out["Sg"] = Mg_hat, Sg
    out["D"] = contract_time(Sb, Phi_inv, O, T)
    out["C"] = contract_rows(Sb, Sigma_inv[np.ix_(b, b)], O, T)
    out["B"] = contract_time(Sg, Phi_inv, G, T)
    out["A"] = contract_rows(Sg, Sigma_inv[np.ix_(g, g)], G, T)
    return out


def e_step(params, data, mcmc=None, seed=0, key=(0, 0), threads=1):
    """Responsibilities and latent moments at ``params``.

    ``data`` is a :class:`LatentData` or a dataset. Monte-Carlo draws for unit
    ``i`` and cluster ``k`` come from the stream ``(seed, key, i, k, purpose)``,
    so results do not depend on ``threads``.
    """
    if not isinstance(data, LatentData):
        data = LatentData(data)
    if params.J != data.J or params.T != data.T:
        raise ShapeError(f"parameters are {params.J}x{params.T}, data are {data.J}x{data.T}")
    mcmc = mcmc or McmcConfig()
    K = params.K

    def run(k):
        return _estep_cluster(data, params, k, mcmc, seed, key)

    if threads > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=min(threads, K)) as pool:
            parts = list(pool.map(run, range(K)))
    else:
        parts = [run(k) for k in range(K)]

    def stack(name):
        return np.stack([p[name] for p in parts], axis=1)

    log_q = stack("log_q")
    norm = logsumexp(log_q, axis=1)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise NumericalError(f"all cluster scores vanish for unit {data.ds.units[bad[0]]}", unit=int(bad[0]))
    tau = np.exp(log_q - norm[:, None])
    tau /= tau.sum(axis=1, keepdims=True)
    return EStepStats(
        tau=tau, log_q=log_q,
        Mb=stack("Mb"), Mg=stack("Mg"), Sb=stack("Sb"), Sg=stack("Sg"),
        D=stack("D"), B=stack("B"), C=stack("C"), A=stack("A"),
    )


def observed_loglik(stats):
    """Sum over units of ``log sum_k q_ik`` from the E-step's own estimates."""
    return float(np.sum(stats.obs_loglik_contrib))


def repair_covariance(S, name="Sigma"):
    """Symmetrise and, if needed, add the smallest diagonal jitter that makes ``S`` PD."""
    S = 0.5 * (S + S.T)
    L = cholesky(S, name)
    if np.allclose(L @ L.T, S, rtol=0.0, atol=1e-12 * max(1.0, np.max(np.abs(S)))):
        return S
    jitter = np.max(np.abs(L @ L.T - S))
    return S + jitter * np.eye(S.shape[0])


def m_step(stats, data, params_prev):
    """Closed-form parameter update from E-step statistics."""
    if not isinstance(data, LatentData):
        data = LatentData(data)
    N, J, T = data.N, data.J, data.T
    b, g = data.b, data.g
    O, G = data.O, data.G
    K = params_prev.K
    pi = np.empty(K)
    M = np.empty((K, J, T))
    Phi = np.empty((K, T, T))
    Sigma = np.empty((K, J, J))
    for k in range(K):
        w = stats.tau[:, k]
        nk = float(w.sum())
        if nk < 0.5:
            raise DegenerateClusterError(k, nk)
        X = stacked_means(data, stats, k)
        Mk = np.einsum("i,ijt->jt", w, X) / nk
        R = X - Mk

        W = spd_inverse(params_prev.Phi[k], "Phi")
        Sk = np.einsum("i,ijt,ts,ils->jl", w, R, W, R)
        # within-block latent spread beyond the conditional means
        if O:
            Mb = stats.Mb[:, k]
            Sk[np.ix_(b, b)] += np.einsum("i,ijl->jl", w, stats.D[:, k] - Mb @ W @ np.swapaxes(Mb, 1, 2))
        if G:
            Mg = stats.Mg[:, k]
            Sk[np.ix_(g, g)] += np.einsum("i,ijl->jl", w, stats.B[:, k] - Mg @ W @ np.swapaxes(Mg, 1, 2))
        Sk = repair_covariance(Sk / (T * nk), "Sigma")

        V = spd_inverse(Sk, "Sigma")
        Pk = np.einsum("i,ijt,jl,ils->ts", w, R, V, R)
        if O:
            Vbb = V[np.ix_(b, b)]
            Cnew = contract_rows(stats.Sb[:, k], Vbb, O, T)
            Pk += np.einsum("i,its->ts", w, Cnew - np.swapaxes(Mb, 1, 2) @ Vbb @ Mb)
        if G:
            Vgg = V[np.ix_(g, g)]
            Anew = contract_rows(stats.Sg[:, k], Vgg, G, T)
            Pk += np.einsum("i,its->ts", w, Anew - np.swapaxes(Mg, 1, 2) @ Vgg @ Mg)
        Pk = repair_covariance(Pk / (J * nk), "Phi")

        pi[k] = nk / N
        M[k] = Mk
        # move the scale of Phi into Sigma so that kron(Phi, Sigma) is unchanged
        Phi[k] = constrain_phi(Pk)
        Sigma[k] = Sk * np.exp(np.linalg.slogdet(Pk)[1] / T)
    return MMMParams(pi / pi.sum(), M, Phi, Sigma)


def check_convergence(history, w1=3, w2=3, eps=1e-3):
    """Relative change between the mean of the last ``w1`` values and the ``w2`` before them."""
    if len(history) < w1 + w2:
        return False
    h = np.asarray(history, dtype=float)
    recent = h[-w1:].mean()
    before = h[-w1 - w2:-w1].mean()
    if recent == before:
        return True
    return bool(abs((recent - before) / recent) < eps)


# ---------------------------------------------------------------------------
# initialisation


def kmeans_pp(X, K, rng, max_iter=50):
    """k-means++ seeding followed by Lloyd iterations; returns ``(labels, centers)``."""
    N = X.shape[0]
    centers = [X[rng.integers(N)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(N) if total <= 0 else rng.choice(N, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    centers = np.array(centers, dtype=float)
    labels = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = X[members].mean(axis=0)
    return labels, centers


def _check_k(N, K):
    if K < 1:
        raise ValidationError("K must be >= 1")
    if K > N:
        raise ValidationError(f"K={K} exceeds the number of units N={N}")


def _identity_params(pi, M):
    K, J, T = M.shape
    return MMMParams(pi, M, np.repeat(np.eye(T)[None], K, axis=0), np.repeat(np.eye(J)[None], K, axis=0))


def init_kmeanspp_view(view, K, rng):
    """k-means++ initialisation from real matrices ``view`` (N, J, T)."""
    N, J, T = view.shape
    _check_k(N, K)
    labels, centers = kmeans_pp(vec(view), K, rng)
    pi = np.bincount(labels, minlength=K) / N
    pi = np.maximum(pi, 1.0 / (10 * K))
    return _identity_params(pi / pi.sum(), unvec(centers, J, T))


def init_random_view(view, K, rng):
    N = view.shape[0]
    _check_k(N, K)
    idx = rng.choice(N, size=K, replace=False)
    return _identity_params(np.full(K, 1.0 / K), view[idx].copy())


def init_kmeanspp(ds, K, rng):
    """Means from k-means++ on vectorised latent stand-ins; identity covariances."""
    return init_kmeanspp_view(latent_init_view(expand_nominal(ds)), K, rng)


def init_random(ds, K, rng):
    """Means copied from ``K`` distinct units drawn uniformly; equal weights."""
    return init_random_view(latent_init_view(expand_nominal(ds)), K, rng)


# ---------------------------------------------------------------------------
# driver


def run_em(params, e_fn, m_fn, loglik_fn, em, trace=False):
    """Alternate ``e_fn``/``m_fn`` from ``params`` until the moving-average rule fires.

    ``e_fn(params, iteration) -> stats``; ``m_fn(stats, params) -> params``.
    Returns ``(params, stats, history, converged, trace_list)`` where ``stats``
    was computed at the returned ``params``.
    """
    history = []
    steps = [] if trace else None
    converged = False
    for it in range(em.max_iter):
        stats = e_fn(params, it)
        history.append(loglik_fn(stats))
        if trace:
            steps.append((params, stats))
        log.debug("iteration %d loglik %.6f", it, history[-1])
        if check_convergence(history, em.w1, em.w2, em.eps):
            converged = True
            break
        if it == em.max_iter - 1:
            break
        params = m_fn(stats, params)
    return params, stats, history, converged, steps


def multistart(view, K, config, seed, run_from):
    """Initialise (k-means++ once or ``restarts`` random draws) and keep the best run.

    A degenerate cluster triggers a fresh random initialisation, at most
    ``config.em.retries`` times per start.
    """
    em = config.em
    n_starts = 1 if em.init == "kmeanspp" else em.restarts
    best = None
    failures = []
    for start in range(n_starts):
        for attempt in range(em.retries + 1):
            run_id = start * (em.retries + 1) + attempt
            rng = stream(seed, _KEY_INIT, run_id)
            if em.init == "kmeanspp" and attempt == 0:
                init = init_kmeanspp_view(view, K, rng)
            else:
                init = init_random_view(view, K, rng)
            try:
                outcome = run_from(init, run_id)
            except (DegenerateClusterError, CovarianceError) as exc:
                log.info("start %d attempt %d failed: %s", start, attempt, exc)
                failures.append(exc)
                continue
            if best is None or outcome[2][-1] > best[2][-1]:
                best = outcome
            break
    if best is None:
        raise FitFailedError(f"all starts failed; last error: {failures[-1]}")
    return best


def assignments_from(tau):
    return np.argmax(tau, axis=1)


def fit(ds, K, config=None, seed=None, trace=False):
    """Fit a K-cluster mixture to a mixed-type dataset by MCMC-EM."""
    from .selection import bic

    config = config or RunConfig()
    seed = config.seed if seed is None else int(seed)
    data = LatentData(ds)
    view = latent_init_view(data.ds)
    _check_k(data.N, K)

    def run_from(init, run_id):
        return run_em(
            init,
            lambda p, it: e_step(p, data, config.mcmc, seed, (run_id, it), config.threads),
            lambda s, p: m_step(s, data, p),
            observed_loglik,
            config.em,
            trace,
        )

    params, stats, history, converged, steps = multistart(view, K, config, seed, run_from)
    return FitResult(
        params=params,
        tau=stats.tau,
        assignments=assignments_from(stats.tau),
        loglik_history=history,
        bic=bic(history[-1], K, data.J, data.T, data.N),
        iterations=len(history),
        converged=converged,
        seed=seed,
        config=config,
        stats=stats,
        trace=steps,
    )
