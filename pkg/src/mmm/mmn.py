"""
Mixture of matrix-normals fitted by exact EM.

Every observed value is taken at face value as a real number, so codes and
counts are treated like continuous measurements. This is the baseline the
mixed-type model is compared against.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .config import RunConfig
from .em import FitResult, MMMParams, assignments_from, multistart, repair_covariance, run_em
from .errors import DegenerateClusterError, NumericalError
from .matnorm import MatNormParams, constrain_phi, matnorm_logpdf, spd_inverse


@dataclass(eq=False)
class MMNStats:
    tau: np.ndarray
    log_q: np.ndarray


def mmn_e_step(params, Y):
    log_q = np.empty((Y.shape[0], params.K))
    for k in range(params.K):
        with np.errstate(divide="ignore"):
            log_q[:, k] = np.log(params.pi[k]) + matnorm_logpdf(
                Y, MatNormParams(params.M[k], params.Phi[k], params.Sigma[k])
            )
    norm = logsumexp(log_q, axis=1)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise NumericalError(f"all cluster densities vanish for unit index {bad[0]}", unit=int(bad[0]))
    tau = np.exp(log_q - norm[:, None])
    tau /= tau.sum(axis=1, keepdims=True)
    return MMNStats(tau, log_q)


def mmn_loglik(stats):
    return float(np.sum(logsumexp(stats.log_q, axis=1)))


def mmn_m_step(stats, Y, params_prev):
    N, J, T = Y.shape
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
        Mk = np.tensordot(w, Y, axes=1) / nk
        R = Y - Mk
        Wr = R @ spd_inverse(params_prev.Phi[k], "Phi")
        Sk = np.tensordot(w, Wr @ np.swapaxes(R, 1, 2), axes=1) / (T * nk)
        Sk = repair_covariance(Sk, "Sigma")
        Vr = spd_inverse(Sk, "Sigma") @ R
        Pk = np.tensordot(w, np.swapaxes(R, 1, 2) @ Vr, axes=1) / (J * nk)
        Pk = repair_covariance(Pk, "Phi")
        pi[k] = nk / N
        M[k] = Mk
        # move the scale of Phi into Sigma so that kron(Phi, Sigma) is unchanged
        Phi[k] = constrain_phi(Pk)
        Sigma[k] = Sk * np.exp(np.linalg.slogdet(Pk)[1] / T)
    return MMMParams(pi / pi.sum(), M, Phi, Sigma)


def fit_mmn(ds, K, config=None, seed=None, trace=False):
    """Exact EM for a matrix-normal mixture on the raw observed values.

    Initialisation, restarts and the stopping rule are those of
    :func:`mmm.em.fit`, but the initial means come from the raw values.
    """
    from .selection import bic

    config = config or RunConfig()
    seed = config.seed if seed is None else int(seed)
    Y = np.asarray(ds.values, dtype=float)
    N, J, T = Y.shape

    def run_from(init, run_id):
        return run_em(
            init,
            lambda p, it: mmn_e_step(p, Y),
            lambda s, p: mmn_m_step(s, Y, p),
            mmn_loglik,
            config.em,
            trace,
        )

    params, stats, history, converged, steps = multistart(Y, K, config, seed, run_from)
    return FitResult(
        params=params,
        tau=stats.tau,
        assignments=assignments_from(stats.tau),
        loglik_history=history,
        bic=bic(history[-1], K, J, T, N),
        iterations=len(history),
        converged=converged,
        seed=seed,
        config=config,
        stats=stats,
        trace=steps,
    )
