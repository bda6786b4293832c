"""Maximum-likelihood fitting by expectation/conditional maximization.

One sweep computes the posterior moments at the current parameters and then
updates, in order: W, W_perp (using the new W), C, C_perp (using the new C),
B, the latent variances, Sigma_h (using the new B) and the two noise
variances (using the new loadings). Each update maximizes the expected
complete-data log-likelihood over its block with the others held at their
latest values, so the observed log-likelihood never decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .conditioning import LatentMoments, _check_data, latent_moments, orth, posterior_core
from .errors import (
    DegenerateData,
    DimensionMismatch,
    InvalidConfig,
    PO2PLSError,
    RanksExceedSampleSize,
    SingularMomentMatrix,
)
from .model import ModelParams, RankSpec, check_params, validate_and_normalize

log = logging.getLogger(__name__)

INIT_FLOOR = 1e-8
ITER_FLOOR = 1e-12


@dataclass(frozen=True)
class FitConfig:
    """Options for :func:`fit`.

    ``b_update`` selects the B update: ``"diagonal"`` (default) maximizes the
    expected complete-data likelihood per component, ``diag(S_ut)/diag(S_tt)``;
    ``"product"`` takes the diagonal of ``S_ut S_tt^{-1}``. The two agree
    whenever ``S_tt`` is diagonal.
    """

    max_iter: int = 1000
    tol: float = 1e-6
    init: str = "svd-pls"
    seed: int | None = None
    record_trace: bool = True
    b_update: str = "diagonal"

    def __post_init__(self):
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise InvalidConfig(f"max_iter must be a positive integer, got {self.max_iter!r}")
        if not self.tol > 0:
            raise InvalidConfig(f"tol must be positive, got {self.tol!r}")
        if self.init not in ("svd-pls", "random"):
            raise InvalidConfig(f"init must be 'svd-pls' or 'random', got {self.init!r}")
        if self.b_update not in ("diagonal", "product"):
            raise InvalidConfig(f"b_update must be 'diagonal' or 'product', got {self.b_update!r}")


@dataclass(frozen=True, eq=False)
class FitResult:
    theta: ModelParams
    loglik_trace: np.ndarray
    n_iter: int
    converged: bool
    final_moments: LatentMoments
    config: FitConfig = field(default_factory=FitConfig)
    floor_hit: bool = False

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


class _Data:
    def __init__(self, X, Y):
        self.X = X
        self.Y = Y
        self.n = X.shape[0]
        self.sq_x = float(np.sum(X * X))
        self.sq_y = float(np.sum(Y * Y))
        self.floor = ITER_FLOOR * (self.sq_x + self.sq_y) / (self.n * (X.shape[1] + Y.shape[1]))


def _as_data(X, Y, ranks: RankSpec):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2:
        raise DimensionMismatch("X and Y must be matrices")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if X.shape[1] != ranks.p or Y.shape[1] != ranks.q:
        raise DimensionMismatch(f"data have {X.shape[1]} and {Y.shape[1]} columns, ranks say {ranks.p} and {ranks.q}")
    n = X.shape[0]
    if max(ranks.r + ranks.r_x, ranks.r + ranks.r_y) >= n:
        raise RanksExceedSampleSize(
            f"need max(r + r_x, r + r_y) < N, got {max(ranks.r + ranks.r_x, ranks.r + ranks.r_y)} with N = {n}"
        )
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DegenerateData("data contain non-finite values")
    if not np.any(X) or not np.any(Y):
        raise DegenerateData("X or Y has no variance")
    return X, Y


def _top_right_singular(A, a):
    if a == 0:
        return np.zeros((A.shape[1], 0))
    _, d, Vt = np.linalg.svd(A, full_matrices=False)
    if d.size < a or d[a - 1] <= d[0] * 1e-12:
        raise DegenerateData(f"residual matrix has rank below {a}")
    return Vt[:a].T


def _svd_init(X, Y, R: RankSpec) -> ModelParams:
    n = X.shape[0]
    U, _, Vt = np.linalg.svd(X.T @ Y, full_matrices=False)
    W, C = U[:, : R.r], Vt[: R.r].T
    T, Us = X @ W, Y @ C
    Xres, Yres = X - T @ W.T, Y - Us @ C.T
    Wo = _top_right_singular(Xres, R.r_x)
    Co = _top_right_singular(Yres, R.r_y)
    To, Uo = Xres @ Wo, Yres @ Co

    vx = np.sum(X * X) / (n * R.p)
    vy = np.sum(Y * Y) / (n * R.q)
    fx, fy = INIT_FLOOR * vx, INIT_FLOOR * vy
    stt = np.sum(T * T, axis=0)
    B = np.sum(Us * T, axis=0) / np.maximum(stt, fx)
    return ModelParams(
        W=W,
        W_perp=Wo,
        C=C,
        C_perp=Co,
        B=B,
        sigma_t2=np.maximum(stt / n, fx),
        sigma_to2=np.maximum(np.sum(To * To, axis=0) / n, fx),
        sigma_uo2=np.maximum(np.sum(Uo * Uo, axis=0) / n, fy),
        sigma_h2=np.maximum(np.sum((Us - T * B) ** 2, axis=0) / n, fy),
        sigma_e2=max(np.sum((Xres - To @ Wo.T) ** 2) / (n * R.p), fx),
        sigma_f2=max(np.sum((Yres - Uo @ Co.T) ** 2) / (n * R.q), fy),
    )


def _random_init(X, Y, R: RankSpec, seed) -> ModelParams:
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    vx = np.sum(X * X) / (n * R.p)
    vy = np.sum(Y * Y) / (n * R.q)
    latent_x = 0.5 * vx * R.p / (R.r + R.r_x)
    latent_y = 0.5 * vy * R.q / (R.r + R.r_y)
    sigma_t2 = latent_x * rng.uniform(0.5, 1.5, R.r)
    return ModelParams(
        W=orth(rng.standard_normal((R.p, R.r))),
        W_perp=orth(rng.standard_normal((R.p, R.r_x))),
        C=orth(rng.standard_normal((R.q, R.r))),
        C_perp=orth(rng.standard_normal((R.q, R.r_y))),
        B=np.sqrt(0.5 * latent_y / sigma_t2),
        sigma_t2=sigma_t2,
        sigma_to2=latent_x * rng.uniform(0.5, 1.5, R.r_x),
        sigma_uo2=latent_y * rng.uniform(0.5, 1.5, R.r_y),
        sigma_h2=np.full(R.r, 0.5 * latent_y),
        sigma_e2=0.5 * vx,
        sigma_f2=0.5 * vy,
    )


def initialize(X, Y, ranks: RankSpec, config: FitConfig = FitConfig()) -> ModelParams:
    """Starting values for the ECM iterations.

    ``"svd-pls"`` takes W, C from the top singular vectors of ``X^T Y``, the
    specific loadings from the residual matrices, and the variances and B
    from the resulting score regressions. ``"random"`` draws Gaussian
    loadings and scales variances to the data.
    """
    X, Y = _as_data(X, Y, ranks)
    if config.init == "random":
        theta = _random_init(X, Y, ranks, config.seed)
    else:
        theta = _svd_init(X, Y, ranks)
    return validate_and_normalize(theta, ranks)


class _State:
    """Loop state as bare arrays: stacked loadings ``Lx = [W, W_perp]``,
    ``Ly = [C, C_perp]`` and latent variances ``v`` in (t, t_perp, h, u_perp)
    order."""

    __slots__ = ("Lx", "Ly", "B", "v", "se", "sf")

    def __init__(self, Lx, Ly, B, v, se, sf):
        self.Lx, self.Ly, self.B, self.v, self.se, self.sf = Lx, Ly, B, v, se, sf

    @classmethod
    def of(cls, theta: ModelParams) -> "_State":
        v = np.concatenate([theta.sigma_t2, theta.sigma_to2, theta.sigma_h2, theta.sigma_uo2])
        Lx = np.concatenate([theta.W, theta.W_perp], axis=1)
        Ly = np.concatenate([theta.C, theta.C_perp], axis=1)
        return cls(Lx, Ly, np.array(theta.B, dtype=float), v, float(theta.sigma_e2), float(theta.sigma_f2))

    def params(self, R: RankSpec) -> ModelParams:
        r, a = R.r, R.r + R.r_x
        v = self.v
        return ModelParams(
            W=self.Lx[:, :r],
            W_perp=self.Lx[:, r:],
            C=self.Ly[:, :r],
            C_perp=self.Ly[:, r:],
            B=self.B,
            sigma_t2=v[:r],
            sigma_to2=v[r:a],
            sigma_h2=v[a : a + r],
            sigma_uo2=v[a + r :],
            sigma_e2=self.se,
            sigma_f2=self.sf,
        )

    def factor(self, R: RankSpec) -> np.ndarray:
        r, a = R.r, R.r + R.r_x
        L = np.diag(np.sqrt(self.v))
        idx = np.arange(r)
        L[a + idx, idx] = self.B * L[idx, idx]
        return L


def _posterior(st: _State, d: _Data, R: RankSpec):
    Lx, Ly = st.Lx, st.Ly
    return posterior_core(
        d.X @ Lx, d.Y @ Ly, Lx.T @ Lx, Ly.T @ Ly, st.factor(R), st.se, st.sf, R.p, R.q, d.sq_x, d.sq_y
    )


def _sweep(st: _State, d: _Data, R: RankSpec, M, V, b_update: str):
    n, r = d.n, R.r
    a = r + R.r_x
    # posterior coordinates are ordered (t, t_perp, u, u_perp)
    t, to, u, uo = slice(0, r), slice(r, a), slice(a, a + r), slice(a + r, R.k)
    S = n * V + M.T @ M
    S = 0.5 * (S + S.T)

    XtM = d.X.T @ M[:, :a]
    Lx = np.empty_like(st.Lx)
    Lx[:, :r] = orth(XtM[:, :r] - st.Lx[:, r:] @ S[to, t])
    Lx[:, r:] = orth(XtM[:, r:] - Lx[:, :r] @ S[t, to])
    YtM = d.Y.T @ M[:, a:]
    Ly = np.empty_like(st.Ly)
    Ly[:, :r] = orth(YtM[:, :r] - st.Ly[:, r:] @ S[uo, u])
    Ly[:, r:] = orth(YtM[:, r:] - Ly[:, :r] @ S[u, uo])

    diag = np.diag(S)
    stt, suu = diag[t], diag[u]
    sut = np.diag(S[u, t])
    if not np.all(np.isfinite(stt) & (stt > 0)):
        raise SingularMomentMatrix(f"E[T^T T] has non-positive diagonal {stt}")
    if b_update == "diagonal":
        B = sut / stt
    else:
        try:
            B = np.diag(np.linalg.solve(S[t, t], S[u, t].T).T).copy()
        except np.linalg.LinAlgError:
            raise SingularMomentMatrix("E[T^T T] is singular") from None

    tr_ee = d.sq_x - 2.0 * np.sum(Lx * XtM) + np.sum((Lx.T @ Lx) * S[:a, :a])
    tr_ff = d.sq_y - 2.0 * np.sum(Ly * YtM) + np.sum((Ly.T @ Ly) * S[a:, a:])

    raw = np.concatenate(
        [
            stt,
            diag[to],
            suu - 2.0 * B * sut + B * B * stt,
            diag[uo],
            [tr_ee / R.p, tr_ff / R.q],
        ]
    ) / n
    hit = bool(np.any(raw < d.floor))
    v = np.maximum(raw, d.floor)
    return _State(Lx, Ly, B, v[:-2], v[-2], v[-1]), hit


def em_step(theta: ModelParams, X, Y, b_update: str = "diagonal") -> ModelParams:
    """One full ECM sweep from ``theta``. B may come out negative."""
    check_params(theta)
    X, Y = _check_data(theta, X, Y)
    d = _Data(X, Y)
    R = theta.ranks
    st = _State.of(theta)
    M, V, _ = _posterior(st, d, R)
    return _sweep(st, d, R, M, V, b_update)[0].params(R)


def fit(X, Y, ranks: RankSpec, config: FitConfig = FitConfig()) -> FitResult:
    """Fit by ECM until the relative log-likelihood change drops below ``tol``.

    Not converging within ``max_iter`` is reported through
    ``FitResult.converged``; numerical failures propagate.
    """
    X, Y = _as_data(X, Y, ranks)
    d = _Data(X, Y)
    st = _State.of(initialize(X, Y, ranks, config))
    M, V, loglik = _posterior(st, d, ranks)
    trace = [loglik]
    converged = False
    floor_hit = False
    it = 0
    for it in range(1, config.max_iter + 1):
        try:
            st, hit = _sweep(st, d, ranks, M, V, config.b_update)
            M, V, loglik = _posterior(st, d, ranks)
        except PO2PLSError as exc:
            raise type(exc)(f"ECM failed at iteration {it} (last log-likelihood {trace[-1]:.6g}): {exc}") from exc
        floor_hit |= hit
        prev = trace[-1]
        if config.record_trace:
            trace.append(loglik)
        else:
            trace = [prev, loglik]
        if abs(loglik - prev) < config.tol * abs(loglik):
            converged = True
            break
    if not converged:
        log.warning("ECM did not converge in %d iterations", config.max_iter)
    theta = validate_and_normalize(st.params(ranks), ranks)
    return FitResult(
        theta=theta,
        loglik_trace=np.asarray(trace),
        n_iter=it,
        converged=converged,
        final_moments=latent_moments(theta, X, Y),
        config=config,
        floor_hit=floor_hit,
    )
