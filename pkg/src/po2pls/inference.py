"""Global test of ``H0: B = 0``.

The asymptotic test divides each ``B_k`` by a standard error from an
approximate observed information for B alone (loadings and the remaining
variances treated as fixed). Resampling alternatives replace the standard
error (parametric and non-parametric bootstrap) or the reference
distribution (permutation of Y's rows).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from .conditioning import LatentMoments
from .em import FitConfig, FitResult, fit
from .errors import (
    InvalidConfig,
    NonPositiveInformation,
    PO2PLSError,
    ResamplingFailure,
    SigmaHFloorHit,
)
from .model import ModelParams, match_components, sample

METHODS = ("asymptotic", "param-bootstrap", "nonparam-bootstrap", "permutation")
DEFAULT_RESAMPLES = {"param-bootstrap": 250, "nonparam-bootstrap": 250, "permutation": 500}
SIGMA_H_FLOOR = 1e-8


def default_n_jobs() -> int:
    """Worker count from ``PO2PLS_NUM_THREADS`` (default 1)."""
    raw = os.environ.get("PO2PLS_NUM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"PO2PLS_NUM_THREADS must be an integer, got {raw!r}") from None
    if n == 0:
        raise InvalidConfig("PO2PLS_NUM_THREADS must be nonzero")
    return n


@dataclass(frozen=True)
class ResampleConfig:
    """Options for the resampling methods.

    ``n_resamples=None`` picks 250 for the bootstraps and 500 for the
    permutation test. ``fit_config=None`` reuses the configuration of the
    original fit.
    """

    n_resamples: int | None = None
    seed: int | None = 0
    n_jobs: int | None = None
    fit_config: FitConfig | None = None
    max_failure_rate: float = 0.1

    def __post_init__(self):
        if self.n_resamples is not None and (int(self.n_resamples) != self.n_resamples or self.n_resamples < 1):
            raise InvalidConfig(f"n_resamples must be a positive integer, got {self.n_resamples!r}")
        if not 0 <= self.max_failure_rate < 1:
            raise InvalidConfig("max_failure_rate must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class TestResult:
    """Per-component estimates, standard errors, statistics and p-values.

    ``combined_p`` is the Bonferroni combination ``min(1, r * min_k p_k)``.
    For the permutation method ``se`` is the asymptotic standard error used
    to form the statistic and the p-values are empirical.
    """

    __test__ = False  # not a pytest class

    B_hat: np.ndarray
    se: np.ndarray
    T: np.ndarray
    p_value: np.ndarray
    method: str
    n_resamples: int = 0
    n_failed: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def combined_p(self) -> float:
        return float(min(1.0, len(self.p_value) * np.min(self.p_value)))


def normal_p_value(T) -> np.ndarray:
    """Two-sided standard normal p-value."""
    return 2.0 * norm.sf(np.abs(np.asarray(T, dtype=float)))


def _tu_blocks(moments: LatentMoments):
    R = moments.ranks
    idx_t = np.arange(R.r)
    idx_u = R.r + idx_t
    V = moments.cov
    return moments.mean_t, moments.mean_u, V[idx_t, idx_t], V[idx_t, idx_u], V[idx_u, idx_u]


def cross_moment_sq(moments: LatentMoments, b) -> np.ndarray:
    """``Q_k = E[(sum_n t_nk h_nk)^2 | X, Y]`` with ``h = u - t b``.

    Rows are conditionally independent, so ``Q_k`` is the sum of per-row
    variances of ``t h`` plus the square of the summed means; the per-row
    fourth moments come from the bivariate Gaussian posterior of
    ``(t_k, h_k)`` by Isserlis' theorem.
    """
    b = np.asarray(b, dtype=float)
    mt, mu, vtt, vtu, vuu = _tu_blocks(moments)
    mh = mu - mt * b
    vth = vtu - b * vtt
    vhh = vuu - 2.0 * b * vtu + b * b * vtt
    e_th = mt * mh + vth
    e_tthh = (
        mt**2 * mh**2
        + mt**2 * vhh
        + mh**2 * vtt
        + 4.0 * mt * mh * vth
        + vtt * vhh
        + 2.0 * vth**2
    )
    return np.sum(e_tthh - e_th**2, axis=0) + np.sum(e_th, axis=0) ** 2


def fisher_info_B(theta: ModelParams, moments: LatentMoments) -> np.ndarray:
    """Approximate observed information for each diagonal entry of B.

    ``I_k = E[t_k^T t_k] / s_h - Q_k / s_h^2`` with ``Q_k`` from
    :func:`cross_moment_sq`; the first term is the information had t and u
    been observed. ``sigma_h2`` is floored at ``1e-8 * sigma_u2`` first.

    Raises
    ------
    NonPositiveInformation
        If any ``I_k <= 0``; the values are attached as ``.information``.
    """
    s_h = np.asarray(theta.sigma_h2, dtype=float)
    floor = SIGMA_H_FLOOR * theta.sigma_u2
    if np.any(s_h < floor):
        warnings.warn(f"sigma_h2 {s_h} floored at {floor} before inversion", SigmaHFloorHit, stacklevel=2)
        s_h = np.maximum(s_h, floor)
    S_tt = np.diag(moments.S_tt)
    info = S_tt / s_h - cross_moment_sq(moments, theta.B) / s_h**2
    if not np.all(np.isfinite(info) & (info > 0)):
        raise NonPositiveInformation(
            f"information for B is not positive: {info}; use a bootstrap method instead", information=info
        )
    return info


def asymptotic_test(result: FitResult) -> TestResult:
    info = fisher_info_B(result.theta, result.final_moments)
    se = 1.0 / np.sqrt(info)
    B = np.asarray(result.theta.B)
    T = B / se
    return TestResult(B_hat=B.copy(), se=se, T=T, p_value=normal_p_value(T), method="asymptotic")


# -- resampling ---------------------------------------------------------------


def _center(A):
    return A - A.mean(axis=0)


def _refit_param(theta0, n, ranks, cfg, seed):
    X, Y = sample(theta0, n, seed=seed)
    return fit(_center(X), _center(Y), ranks, cfg)


def _refit_rows(X, Y, ranks, cfg, seed):
    idx = np.random.default_rng(seed).integers(0, X.shape[0], X.shape[0])
    return fit(_center(X[idx]), _center(Y[idx]), ranks, cfg)


def _refit_perm(X, Y, ranks, cfg, seed):
    idx = np.random.default_rng(seed).permutation(Y.shape[0])
    return fit(X, Y[idx], ranks, cfg)


def _run_one(kind, payload, seed, ref_W):
    """One resampling replicate; returns a row of per-component values or None."""
    try:
        if kind == "perm":
            res = _refit_perm(*payload, seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SigmaHFloorHit)
                return asymptotic_test(res).T
        res = (_refit_rows if kind == "rows" else _refit_param)(*payload, seed)
        if ref_W is None:
            return res.theta.B.copy()
        return res.theta.B[match_components(res.theta.W, ref_W)].copy()
    except (PO2PLSError, np.linalg.LinAlgError):
        return None


def _resample(kind, payload, ref_W, r, rc: ResampleConfig, n: int):
    seeds = np.random.SeedSequence(rc.seed).spawn(n)
    n_jobs = rc.n_jobs if rc.n_jobs is not None else default_n_jobs()
    if n_jobs == 1:
        rows = [_run_one(kind, payload, s, ref_W) for s in seeds]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_run_one)(kind, payload, s, ref_W) for s in seeds)
    ok = [row for row in rows if row is not None]
    failed = n - len(ok)
    if failed > rc.max_failure_rate * n:
        raise ResamplingFailure(f"{failed} of {n} resampling refits failed")
    return (np.vstack(ok) if ok else np.zeros((0, r))), failed


def null_params(theta: ModelParams) -> ModelParams:
    """``theta`` with B set to zero and ``sigma_h2`` raised to ``sigma_u2``,
    so that the marginal law of y is unchanged."""
    return theta.replace(B=np.zeros_like(theta.B), sigma_h2=theta.sigma_u2)


def parametric_bootstrap_sd(theta: ModelParams, n: int, rc: ResampleConfig = ResampleConfig()) -> tuple:
    """Standard deviation of B-hat over refits to samples drawn from ``theta``.

    Components are matched to ``theta`` by loadings. Returns ``(sd, draws,
    n_failed)``.
    """
    cfg = rc.fit_config or FitConfig()
    n_res = rc.n_resamples or DEFAULT_RESAMPLES["param-bootstrap"]
    draws, failed = _resample("param", (theta, n, theta.ranks, cfg), theta.W, theta.ranks.r, rc, n_res)
    return draws.std(axis=0, ddof=1), draws, failed


def global_test(result: FitResult, X, Y, method: str = "asymptotic", rc: ResampleConfig = ResampleConfig()) -> TestResult:
    """Test ``H0: B = 0`` per joint component.

    ``X`` and ``Y`` are the (centered) data ``result`` was fitted on.

    Methods
    -------
    asymptotic
        ``T = B / SE`` with SE from :func:`fisher_info_B`, normal p-values.
    param-bootstrap
        Refit to samples from the null fit (:func:`null_params`); SE is the
        root mean square of the refitted B around the null value 0 (fitted
        B is sign-normalized to be non-negative, so its spread about its
        own mean would understate the SE).
    nonparam-bootstrap
        Refit to row-resampled data; SE is the replicate standard deviation
        after matching components to the original fit.
    permutation
        Refit with Y's rows permuted; p-value
        ``(1 + #{|T*| >= |T|}) / (1 + n)`` with T from the asymptotic method.
    """
    if method not in METHODS:
        raise InvalidConfig(f"method must be one of {METHODS}, got {method!r}")
    if not result.converged:
        warnings.warn("global test on a fit that did not converge", RuntimeWarning, stacklevel=2)
    if method == "asymptotic":
        return asymptotic_test(result)

    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    theta = result.theta
    R = theta.ranks
    cfg = rc.fit_config or result.config
    n = rc.n_resamples or DEFAULT_RESAMPLES[method]
    B = np.asarray(theta.B, dtype=float).copy()

    if method == "param-bootstrap":
        # under the null the components have no loading identity; keep the fitted order
        draws, failed = _resample("param", (null_params(theta), X.shape[0], R, cfg), None, R.r, rc, n)
        se = np.sqrt(np.mean(draws**2, axis=0))
    elif method == "nonparam-bootstrap":
        draws, failed = _resample("rows", (X, Y, R, cfg), theta.W, R.r, rc, n)
        se = draws.std(axis=0, ddof=1)
    else:
        base = asymptotic_test(result)
        draws, failed = _resample("perm", (X, Y, R, cfg), None, R.r, rc, n)
        hits = np.sum(np.abs(draws) >= np.abs(base.T), axis=0)
        p = (1.0 + hits) / (1.0 + draws.shape[0])
        return TestResult(
            B_hat=B, se=base.se, T=base.T, p_value=p, method=method, n_resamples=n, n_failed=failed, replicates=draws
        )

    if not np.all(se > 0):
        raise ResamplingFailure(f"bootstrap standard error is not positive: {se}")
    T = B / se
    return TestResult(
        B_hat=B, se=se, T=T, p_value=normal_p_value(T), method=method, n_resamples=n, n_failed=failed, replicates=draws
    )
