"""Low-rank Gaussian conditioning of the latent variables on the data.

With ``z = (x, y) = s A^T + noise`` and ``Cov(s) = L L^T``, the posterior
covariance of ``s`` is ``L (I + L^T G L)^{-1} L^T`` where ``G = A^T D^{-1} A``
and ``D`` is the diagonal noise covariance. The same k x k factorization
gives ``log|Sigma|`` (determinant lemma) and the quadratic form (Woodbury),
so nothing of size (p+q) x (p+q), or even p x p, is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, RankDeficient, SingularLatentCovariance
from .model import ModelParams, RankSpec, check_params

LOG_2PI = np.log(2 * np.pi)


def orth(A) -> np.ndarray:
    """Semi-orthogonal factor of a full-column-rank matrix.

    Computed as the polar factor ``U V^T`` of the thin SVD ``A = U D V^T``,
    i.e. ``A (A^T A)^{-1/2}``. This is the maximiser of ``tr(W^T A)`` over
    semi-orthogonal ``W``, which is what the constrained M-step needs.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionMismatch(f"orth expects a matrix, got shape {A.shape}")
    if A.shape[1] == 0:
        return np.zeros_like(A)
    if A.shape[1] > A.shape[0]:
        raise RankDeficient(f"{A.shape[0]} x {A.shape[1]} matrix cannot have full column rank")
    if A.shape[1] == 1:
        nrm = np.sqrt(A[:, 0] @ A[:, 0])
        if not np.isfinite(nrm) or nrm == 0:
            raise RankDeficient("zero or non-finite column")
        return A / nrm
    U, d, Vt = np.linalg.svd(A, full_matrices=False)
    if not np.all(np.isfinite(d)) or d[0] == 0 or d[-1] < A.shape[1] * np.finfo(float).eps * d[0]:
        raise RankDeficient(f"matrix is numerically rank deficient (singular values {d})")
    return U @ Vt


def _check_data(theta: ModelParams, X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    R = theta.ranks
    if X.ndim != 2 or Y.ndim != 2:
        raise DimensionMismatch("X and Y must be matrices")
    if X.shape[1] != R.p or Y.shape[1] != R.q:
        raise DimensionMismatch(f"data have {X.shape[1]} and {Y.shape[1]} columns, model expects {R.p} and {R.q}")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    return X, Y


def latent_factor(theta: ModelParams) -> np.ndarray:
    """Block-triangular L with ``L @ L.T == latent_covariance(theta)``.

    For joint pair k, ``(t_k, u_k) = (sqrt(s_t) a, B_k sqrt(s_t) a + sqrt(s_h) b)``;
    this stays valid when ``sigma_h2`` is zero.
    """
    R = theta.ranks
    return _latent_factor_xy(theta)[np.ix_(R.s_order, R.s_order)]


def _latent_factor_xy(theta: ModelParams) -> np.ndarray:
    # same factor with coordinates in (t, t_perp, u, u_perp) order
    R = theta.ranks
    r, rx = R.r, R.r_x
    st = np.sqrt(theta.sigma_t2)
    d = np.concatenate([st, np.sqrt(theta.sigma_to2), np.sqrt(theta.sigma_h2), np.sqrt(theta.sigma_uo2)])
    L = np.diag(d)
    idx = np.arange(r)
    L[r + rx + idx, idx] = theta.B * st
    return L


@dataclass(frozen=True, eq=False)
class Projections:
    """Data projected on the current loadings, reused between E-steps."""

    XL: np.ndarray  # X @ [W, W_perp]
    YL: np.ndarray  # Y @ [C, C_perp]
    gram_x: np.ndarray  # [W, W_perp]^T [W, W_perp]
    gram_y: np.ndarray


def project(theta: ModelParams, X, Y) -> Projections:
    Lx = np.hstack([theta.W, theta.W_perp])
    Ly = np.hstack([theta.C, theta.C_perp])
    return Projections(XL=X @ Lx, YL=Y @ Ly, gram_x=Lx.T @ Lx, gram_y=Ly.T @ Ly)


@dataclass(frozen=True, eq=False)
class Posterior:
    """Posterior in ``(t, t_perp, u, u_perp)`` order, so that the x-part is
    the leading ``r + r_x`` coordinates."""

    mean: np.ndarray  # N x k
    cov: np.ndarray  # k x k, shared by all rows
    loglik: float


def posterior(theta: ModelParams, proj: Projections, sq_x: float, sq_y: float) -> Posterior:
    """Posterior of the latents and the observed log-likelihood.

    ``sq_x`` and ``sq_y`` are the squared Frobenius norms of X and Y.
    """
    R = theta.ranks
    mean, cov, loglik = posterior_core(
        proj.XL, proj.YL, proj.gram_x, proj.gram_y, _latent_factor_xy(theta),
        theta.sigma_e2, theta.sigma_f2, R.p, R.q, sq_x, sq_y,
    )
    return Posterior(mean=mean, cov=cov, loglik=loglik)


def posterior_core(XL, YL, gram_x, gram_y, L, se, sf, p, q, sq_x, sq_y):
    """Array-level posterior: ``(mean, cov, loglik)`` in (t, t_perp, u, u_perp) order."""
    n, a = XL.shape
    k = L.shape[0]
    G = np.zeros((k, k))
    G[:a, :a] = gram_x / se
    G[a:, a:] = gram_y / sf
    Z = np.concatenate([XL / se, YL / sf], axis=1)

    K = L.T @ G @ L
    K += np.eye(k)
    K = 0.5 * (K + K.T)
    try:
        c = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise SingularLatentCovariance(f"posterior system is not positive definite: {exc}") from None
    M = solve_triangular(c, L.T, lower=True, check_finite=False)
    V = M.T @ M
    mean = Z @ V
    logdet = p * np.log(se) + q * np.log(sf) + 2.0 * np.sum(np.log(np.diag(c)))
    quad = sq_x / se + sq_y / sf - np.sum(mean * Z)
    loglik = -0.5 * (n * (p + q) * LOG_2PI + n * logdet + quad)
    if not np.isfinite(loglik):
        raise SingularLatentCovariance("log-likelihood is not finite")
    return mean, V, float(loglik)


def residual_trace(sq: float, proj_mean: float, gram: np.ndarray, second: np.ndarray) -> float:
    """``E||X - S_x L^T||_F^2`` from ``||X||^2``, ``tr(L^T X^T E[S_x])``,
    ``L^T L`` and ``E[S_x^T S_x]``."""
    return float(sq - 2.0 * proj_mean + np.sum(gram * second))


@dataclass(frozen=True, eq=False)
class LatentMoments:
    """Conditional moments of ``s = (t, u, t_perp, u_perp)`` given the data.

    ``mean`` holds the per-row conditional means, ``cov`` the posterior
    covariance shared by every row and ``second = N cov + mean^T mean`` the
    aggregated second moment ``E[S^T S | X, Y]``.
    """

    ranks: RankSpec
    mean: np.ndarray
    cov: np.ndarray
    second: np.ndarray
    B: np.ndarray
    tr_EE: float
    tr_FF: float
    loglik: float

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def _block(self, a: slice, b: slice) -> np.ndarray:
        return self.second[a, b]

    @property
    def mean_t(self):
        return self.mean[:, self.ranks.t]

    @property
    def mean_u(self):
        return self.mean[:, self.ranks.u]

    @property
    def mean_to(self):
        return self.mean[:, self.ranks.to]

    @property
    def mean_uo(self):
        return self.mean[:, self.ranks.uo]

    @property
    def S_tt(self):
        return self._block(self.ranks.t, self.ranks.t)

    @property
    def S_ut(self):
        """``E[U^T T]``: rows index u, columns index t."""
        return self._block(self.ranks.u, self.ranks.t)

    @property
    def S_uu(self):
        return self._block(self.ranks.u, self.ranks.u)

    @property
    def S_toto(self):
        return self._block(self.ranks.to, self.ranks.to)

    @property
    def S_uouo(self):
        return self._block(self.ranks.uo, self.ranks.uo)

    @property
    def S_t_to(self):
        return self._block(self.ranks.t, self.ranks.to)

    @property
    def S_u_uo(self):
        return self._block(self.ranks.u, self.ranks.uo)

    @property
    def S_hh(self):
        """``E[H^T H]`` with ``H = U - T B`` for the B these moments were taken at."""
        return hh_moment(self.S_uu, self.S_ut, self.S_tt, self.B)


def hh_moment(S_uu, S_ut, S_tt, b) -> np.ndarray:
    b = np.asarray(b)
    return S_uu - S_ut * b[None, :] - b[:, None] * S_ut.T + b[:, None] * S_tt * b[None, :]


def moments_from_posterior(theta: ModelParams, post: Posterior, proj: Projections, sq_x: float, sq_y: float) -> LatentMoments:
    R = theta.ranks
    n = post.mean.shape[0]
    a = R.r + R.r_x
    second = n * post.cov + post.mean.T @ post.mean
    second = 0.5 * (second + second.T)
    tr_EE = residual_trace(sq_x, np.sum(proj.XL * post.mean[:, :a]), proj.gram_x, second[:a, :a])
    tr_FF = residual_trace(sq_y, np.sum(proj.YL * post.mean[:, a:]), proj.gram_y, second[a:, a:])
    s = R.s_order
    return LatentMoments(
        ranks=R,
        mean=post.mean[:, s],
        cov=post.cov[np.ix_(s, s)],
        second=second[np.ix_(s, s)],
        B=theta.B,
        tr_EE=tr_EE,
        tr_FF=tr_FF,
        loglik=post.loglik,
    )


def latent_moments(theta: ModelParams, X, Y) -> LatentMoments:
    check_params(theta)
    X, Y = _check_data(theta, X, Y)
    proj = project(theta, X, Y)
    sq_x, sq_y = float(np.sum(X * X)), float(np.sum(Y * Y))
    post = posterior(theta, proj, sq_x, sq_y)
    return moments_from_posterior(theta, post, proj, sq_x, sq_y)


def log_likelihood(theta: ModelParams, X, Y) -> float:
    """Observed-data log-likelihood summed over rows."""
    check_params(theta)
    X, Y = _check_data(theta, X, Y)
    proj = project(theta, X, Y)
    return posterior(theta, proj, float(np.sum(X * X)), float(np.sum(Y * Y))).loglik


def _x_posterior_mean(theta: ModelParams, X) -> np.ndarray:
    """``E[(t, t_perp) | x]`` row-wise, via Woodbury on the x-block only."""
    check_params(theta)
    X = np.asarray(X, dtype=float)
    R = theta.ranks
    if X.ndim != 2 or X.shape[1] != R.p:
        raise DimensionMismatch(f"X must have {R.p} columns, got shape {X.shape}")
    Lx = np.hstack([theta.W, theta.W_perp])
    root = np.sqrt(np.r_[theta.sigma_t2, theta.sigma_to2])
    K = np.eye(R.r + R.r_x) + root[:, None] * (Lx.T @ Lx) * root[None, :] / theta.sigma_e2
    K = 0.5 * (K + K.T)
    V = root[:, None] * np.linalg.solve(K, np.diag(root))
    return (X @ Lx / theta.sigma_e2) @ V


def predict_scores_from_x(theta: ModelParams, X):
    """``(E[t|x], E[u|x])`` for each row of X."""
    T = _x_posterior_mean(theta, X)[:, : theta.ranks.r]
    return T, T * theta.B


def predict_y_from_x(theta: ModelParams, X) -> np.ndarray:
    """``E[y | x]``; since ``E[u|x] = E[t|x] B`` this needs only the x-block."""
    _, U = predict_scores_from_x(theta, X)
    return U @ theta.C.T


def predict_scores(theta: ModelParams, X, Y):
    """Conditional means ``(T, U, T_perp, U_perp)`` given both data sets."""
    m = latent_moments(theta, X, Y)
    return m.mean_t, m.mean_u, m.mean_to, m.mean_uo
