"""Model selection by BIC and evaluation metrics against a known truth."""

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .errors import FitFailedError, SelectionError, ShapeError, ValidationError

log = logging.getLogger(__name__)


def nu_k(K, J, T):
    """Number of free parameters of a K-component matrix-normal mixture."""
    return K * (1 + J * T + J * (J + 1) // 2 + T * (T + 1) // 2) - 1


def bic(loglik, K, J, T, N):
    """``-2 loglik + nu_K log N`` (smaller is better)."""
    if N < 1:
        raise ValidationError("BIC needs N >= 1")
    return -2.0 * float(loglik) + nu_k(K, J, T) * np.log(N)


@dataclass
class KSweepRow:
    K: int
    loglik: float
    bic: float
    converged: bool
    iterations: int


@dataclass
class KSweepReport:
    rows: list
    best_k: int
    fits: dict = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "loglik", "bic", "converged", "iterations"])
            for r in self.rows:
                w.writerow([r.K, repr(r.loglik), repr(r.bic), int(r.converged), r.iterations])

    @property
    def best_fit(self):
        return None if self.fits is None else self.fits.get(self.best_k)


def _fit_one(args):
    from .em import fit

    ds, K, config = args
    try:
        return fit(ds, K, config)
    except FitFailedError as exc:
        log.warning("K=%d failed: %s", K, exc)
        return None


def select_k(ds, kmax, config=None, keep_fits=True):
    """Fit K = 1..kmax with the same seed and pick the converged fit with the lowest BIC.

    Non-converged fits are reported but excluded from the choice. With
    ``config.threads > 1`` the fits run in separate processes.
    """
    from .config import RunConfig

    if kmax < 1:
        raise ValidationError("kmax must be >= 1")
    config = config or RunConfig()
    jobs = [(ds, K, config) for K in range(1, kmax + 1)]
    if config.threads > 1 and kmax > 1:
        inner = config.with_overrides(threads=1)
        jobs = [(ds, K, inner) for K in range(1, kmax + 1)]
        with ProcessPoolExecutor(max_workers=min(config.threads, kmax)) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]

    rows, fits = [], {}
    for K, res in zip(range(1, kmax + 1), results):
        if res is None:
            rows.append(KSweepRow(K, float("nan"), float("nan"), False, 0))
            continue
        fits[K] = res
        rows.append(KSweepRow(K, res.loglik, res.bic, res.converged, res.iterations))
    usable = [r for r in rows if r.converged and np.isfinite(r.bic)]
    if not usable:
        raise SelectionError(f"no converged fit for K in 1..{kmax}")
    best = min(usable, key=lambda r: (r.bic, r.K)).K
    return KSweepReport(rows, best, fits if keep_fits else None)


def ari(a, b):
    """Adjusted Rand index between two partitions given as label vectors."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ShapeError(f"label vectors differ in length ({a.size} vs {b.size})")
    n = a.size
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def mape(theta_true, theta_est):
    """Mean absolute percentage error, in percent."""
    t = np.asarray(theta_true, dtype=float).ravel()
    e = np.asarray(theta_est, dtype=float).ravel()
    if t.size != e.size:
        raise ShapeError("parameter vectors differ in length")
    if t.size == 0:
        raise ValidationError("MAPE of an empty vector")
    if np.any(np.abs(t) < 1e-8):
        raise ValidationError("MAPE undefined for true values near zero")
    return float(100.0 * np.mean(np.abs(t - e) / np.abs(t)))


def align_clusters(est, truth):
    """Permutation ``perm`` with ``est.permuted(perm)`` matched to ``truth`` by mean distance."""
    if est.K != truth.K:
        raise ShapeError(f"cannot align K={est.K} with K={truth.K}")
    # cost[k, h]: distance between true cluster k and estimated cluster h
    diff = truth.M[:, None] - est.M[None, :]
    cost = np.sqrt(np.sum(diff * diff, axis=(2, 3)))
    _, perm = linear_sum_assignment(cost)
    return perm


def parameter_blocks(params):
    """Values entering MAPE, grouped by block: means, diagonals of Phi and Sigma, weights."""
    return {
        "M": params.M.ravel(),
        "Phi": np.diagonal(params.Phi, axis1=1, axis2=2).ravel(),
        "Sigma": np.diagonal(params.Sigma, axis1=1, axis2=2).ravel(),
        "pi": params.pi.ravel(),
    }


def mape_blocks(est, truth):
    """Per-block and overall MAPE after aligning ``est`` to ``truth``.

    True entries with magnitude below 1e-8 are dropped.
    """
    aligned = est.permuted(align_clusters(est, truth))
    t_blocks = parameter_blocks(truth)
    e_blocks = parameter_blocks(aligned)
    out = {}
    all_t, all_e = [], []
    for name, t in t_blocks.items():
        keep = np.abs(t) >= 1e-8
        e = e_blocks[name]
        out[name] = mape(t[keep], e[keep]) if keep.any() else float("nan")
        all_t.append(t[keep])
        all_e.append(e[keep])
    out["all"] = mape(np.concatenate(all_t), np.concatenate(all_e))
    return out
