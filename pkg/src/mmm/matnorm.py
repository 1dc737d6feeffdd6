"""
Matrix-variate normal distribution.

A random matrix ``Z`` of shape ``(J, T)`` follows ``MN(M, Phi, Sigma)`` when
``vec(Z) ~ N(vec(M), kron(Phi, Sigma))``. ``Phi`` (``T x T``) carries the
covariance between time points and ``Sigma`` (``J x J``) the covariance
between variables. ``vec`` stacks columns, so entry ``(j, t)`` lands at
position ``t * J + j``.

Because ``kron(Phi / c, c * Sigma) == kron(Phi, Sigma)`` the pair is only
identified up to scale; :func:`constrain_phi` pins ``det(Phi) = 1``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConditioningError, ConstraintError, CovarianceError, ShapeError

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class MatNormParams:
    """Mean ``M`` (J x T), time covariance ``Phi`` (T x T), row covariance ``Sigma`` (J x J)."""

    M: np.ndarray
    Phi: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        Phi = np.asarray(self.Phi, dtype=float)
        Sigma = np.asarray(self.Sigma, dtype=float)
        if M.ndim != 2:
            raise ShapeError(f"M must be a matrix, got shape {M.shape}")
        J, T = M.shape
        if Phi.shape != (T, T):
            raise ShapeError(f"Phi must be {T}x{T}, got {Phi.shape}")
        if Sigma.shape != (J, J):
            raise ShapeError(f"Sigma must be {J}x{J}, got {Sigma.shape}")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def shape(self):
        return self.M.shape


def cholesky(A, name="matrix"):
    """Lower Cholesky factor of a symmetric matrix, retrying with diagonal jitter.

    Raises :class:`CovarianceError` when the matrix is not symmetric or stays
    indefinite after the largest jitter (1e-6).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise CovarianceError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-8 * scale):
        raise CovarianceError(f"{name} is not symmetric")
    eye = np.eye(A.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise CovarianceError(f"{name} is not positive definite")


def logdet_chol(L):
    """``log|A|`` from the Cholesky factor ``L`` of ``A``."""
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def inv_from_chol(L):
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return Linv.T @ Linv


def spd_inverse(A, name="matrix"):
    """Inverse of a symmetric positive definite matrix, returned exactly symmetric."""
    inv = inv_from_chol(cholesky(A, name))
    return 0.5 * (inv + inv.T)


def vec(Z):
    """Stack the columns of ``Z`` into a vector (the last two axes for batched input)."""
    Z = np.asarray(Z)
    if Z.ndim < 2:
        raise ShapeError(f"vec expects a matrix, got shape {Z.shape}")
    return np.swapaxes(Z, -1, -2).reshape(*Z.shape[:-2], -1)


def unvec(v, J, T):
    """Inverse of :func:`vec`: rebuild ``J x T`` matrices from column-stacked vectors."""
    v = np.asarray(v)
    if v.shape[-1] != J * T:
        raise ShapeError(f"cannot unvec length {v.shape[-1]} into {J}x{T}")
    return np.swapaxes(v.reshape(*v.shape[:-1], T, J), -1, -2)


def kron(A, B):
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def matnorm_logpdf(Z, p):
    """Log density of ``MN(p.M, p.Phi, p.Sigma)`` at ``Z``.

    ``Z`` may be a single ``(J, T)`` matrix or a stack ``(N, J, T)``; the
    result is a float or an ``(N,)`` array respectively.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape[-2:] != p.M.shape:
        raise ShapeError(f"Z has shape {Z.shape[-2:]}, mean has shape {p.M.shape}")
    J, T = p.M.shape
    Ls = cholesky(p.Sigma, "Sigma")
    Lp = cholesky(p.Phi, "Phi")
    R = Z - p.M
    # tr[Sigma^-1 R Phi^-1 R'] = ||Ls^-1 R Lp^-T||_F^2
    A = np.linalg.solve(Ls, R)
    B = np.linalg.solve(Lp, np.swapaxes(A, -1, -2))
    quad = np.sum(B * B, axis=(-2, -1))
    out = (
        -0.5 * J * T * np.log(2.0 * np.pi)
        - 0.5 * J * logdet_chol(Lp)
        - 0.5 * T * logdet_chol(Ls)
        - 0.5 * quad
    )
    return float(out) if Z.ndim == 2 else out


def condition_on_blocks(M, Sigma, observed_rows, Z_obs):
    """Condition the rows of a matrix-normal variable on a set of observed rows.

    Returns ``(M_cond, Sigma_cond)`` for the remaining rows, in their original
    order. ``Z_obs`` holds the observed rows, optionally stacked as
    ``(N, n_obs, T)``, in which case ``M_cond`` is stacked too. ``Phi`` is
    unaffected by row conditioning.
    """
    M = np.asarray(M, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    J = M.shape[0]
    o = np.asarray(sorted(set(int(r) for r in observed_rows)), dtype=int)
    if o.size == 0 or o.size >= J:
        raise ShapeError("observed_rows must be a nonempty strict subset of the rows")
    if o.min() < 0 or o.max() >= J:
        raise ShapeError("observed_rows out of range")
    u = np.setdiff1d(np.arange(J), o)
    Z_obs = np.asarray(Z_obs, dtype=float)
    if Z_obs.shape[-2:] != (o.size, M.shape[1]):
        raise ShapeError(f"Z_obs must have trailing shape {(o.size, M.shape[1])}, got {Z_obs.shape}")
    S_oo = Sigma[np.ix_(o, o)]
    S_uo = Sigma[np.ix_(u, o)]
    try:
        L = np.linalg.cholesky(S_oo)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("observed block of Sigma is singular") from exc
    # gain = S_uo S_oo^-1
    gain = solve_triangular(L.T, solve_triangular(L, S_uo.T, lower=True), lower=False).T
    M_cond = M[u] + gain @ (Z_obs - M[o])
    Sigma_cond = Sigma[np.ix_(u, u)] - gain @ S_uo.T
    Sigma_cond = 0.5 * (Sigma_cond + Sigma_cond.T)
    return M_cond, Sigma_cond


def constrain_phi(Phi):
    """Rescale ``Phi`` to unit determinant, then symmetrise it."""
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != Phi.shape[1]:
        raise ShapeError(f"Phi must be square, got shape {Phi.shape}")
    T = Phi.shape[0]
    sign, logdet = np.linalg.slogdet(Phi)
    if sign <= 0 or not np.isfinite(logdet):
        raise ConstraintError("Phi must have a positive determinant")
    scaled = Phi * np.exp(-logdet / T)
    return 0.5 * (scaled + scaled.T)


def sample_matnorm(p, rng, size=None):
    """Draw ``M + Ls E Lp'`` with ``E`` standard normal.

    ``size=None`` returns one ``(J, T)`` matrix, an integer ``n`` returns ``(n, J, T)``.
    """
    Ls = cholesky(p.Sigma, "Sigma")
    Lp = cholesky(p.Phi, "Phi")
    J, T = p.M.shape
    shape = (J, T) if size is None else (int(size), J, T)
    E = rng.standard_normal(shape)
    return p.M + Ls @ E @ Lp.T
