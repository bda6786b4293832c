"""Parameter space, identifiability normalization and the implied covariance.

Latent vectors are stacked in the fixed order ``s = (t, u, t_perp, u_perp)``
throughout the package; ``RankSpec`` exposes the matching slices.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidParams,
    InvalidRanks,
    NonOrthogonalLoadings,
    NonPositiveVariance,
    OrderingViolation,
    RankDeficientConcatenation,
)

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class RankSpec:
    p: int
    q: int
    r: int
    r_x: int = 0
    r_y: int = 0

    def __post_init__(self):
        for name in ("p", "q", "r", "r_x", "r_y"):
            value = getattr(self, name)
            if int(value) != value:
                raise InvalidRanks(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.r < 1:
            raise InvalidRanks(f"r must be positive, got {self.r}")
        if self.r_x < 0 or self.r_y < 0:
            raise InvalidRanks("r_x and r_y must be non-negative")
        if not 0 < self.r + self.r_x < self.p:
            raise InvalidRanks(f"need 0 < r + r_x < p, got r + r_x = {self.r + self.r_x}, p = {self.p}")
        if not 0 < self.r + self.r_y < self.q:
            raise InvalidRanks(f"need 0 < r + r_y < q, got r + r_y = {self.r + self.r_y}, q = {self.q}")

    @property
    def k(self) -> int:
        """Total latent dimension ``2r + r_x + r_y``."""
        return 2 * self.r + self.r_x + self.r_y

    @property
    def t(self) -> slice:
        return slice(0, self.r)

    @property
    def u(self) -> slice:
        return slice(self.r, 2 * self.r)

    @property
    def to(self) -> slice:
        return slice(2 * self.r, 2 * self.r + self.r_x)

    @property
    def uo(self) -> slice:
        return slice(2 * self.r + self.r_x, self.k)

    @cached_property
    def x_index(self) -> np.ndarray:
        """Latent coordinates entering x: t then t_perp."""
        return np.r_[np.arange(self.r), np.arange(2 * self.r, 2 * self.r + self.r_x)]

    @cached_property
    def y_index(self) -> np.ndarray:
        """Latent coordinates entering y: u then u_perp."""
        return np.r_[np.arange(self.r, 2 * self.r), np.arange(2 * self.r + self.r_x, self.k)]

    @cached_property
    def xy_order(self) -> np.ndarray:
        """Permutation taking ``(t, u, t_perp, u_perp)`` to ``(t, t_perp, u, u_perp)``."""
        return np.r_[self.x_index, self.y_index]

    @cached_property
    def s_order(self) -> np.ndarray:
        """Inverse of :attr:`xy_order`."""
        return np.argsort(self.xy_order)


def _as_matrix(a, rows=None):
    a = np.array(a, dtype=float)
    if a.ndim == 1 and rows is not None:
        a = a.reshape(rows, -1) if a.size else np.zeros((rows, 0))
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {a.shape}")
    a.setflags(write=False)
    return a


def _as_vector(a):
    a = np.atleast_1d(np.array(a, dtype=float))
    if a.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All PO2PLS parameters.

    Diagonal matrices (B and the latent covariances) are stored as vectors of
    their diagonal entries. Arrays are copied and made read-only on
    construction; use :meth:`replace` to derive modified parameters.
    """

    W: np.ndarray
    W_perp: np.ndarray
    C: np.ndarray
    C_perp: np.ndarray
    B: np.ndarray
    sigma_t2: np.ndarray
    sigma_to2: np.ndarray
    sigma_uo2: np.ndarray
    sigma_h2: np.ndarray
    sigma_e2: float
    sigma_f2: float

    def __post_init__(self):
        W = _as_matrix(self.W)
        C = _as_matrix(self.C)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "W_perp", _as_matrix(self.W_perp, rows=W.shape[0]))
        object.__setattr__(self, "C_perp", _as_matrix(self.C_perp, rows=C.shape[0]))
        for name in ("B", "sigma_t2", "sigma_to2", "sigma_uo2", "sigma_h2"):
            object.__setattr__(self, name, _as_vector(getattr(self, name)))
        object.__setattr__(self, "sigma_e2", float(self.sigma_e2))
        object.__setattr__(self, "sigma_f2", float(self.sigma_f2))
        r = W.shape[1]
        shapes = {
            "C": (self.C.shape[1], r),
            "W_perp": (self.W_perp.shape[1], self.sigma_to2.size),
            "C_perp": (self.C_perp.shape[1], self.sigma_uo2.size),
            "B": (self.B.size, r),
            "sigma_t2": (self.sigma_t2.size, r),
            "sigma_h2": (self.sigma_h2.size, r),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise DimensionMismatch(f"{name} has {got} components, expected {want}")
        if self.W_perp.shape[0] != W.shape[0] or self.C_perp.shape[0] != C.shape[0]:
            raise DimensionMismatch("specific loadings must have as many rows as the joint loadings")

    @cached_property
    def ranks(self) -> RankSpec:
        return RankSpec(
            p=self.W.shape[0],
            q=self.C.shape[0],
            r=self.W.shape[1],
            r_x=self.W_perp.shape[1],
            r_y=self.C_perp.shape[1],
        )

    @property
    def sigma_u2(self) -> np.ndarray:
        return self.B**2 * self.sigma_t2 + self.sigma_h2

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def arrays(self) -> dict:
        """Named arrays of every field, in declaration order."""
        return {f.name: np.asarray(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def allclose(self, other: "ModelParams", rtol=1e-10, atol=1e-12) -> bool:
        a, b = self.arrays(), other.arrays()
        return all(
            np.shape(a[n]) == np.shape(b[n]) and np.allclose(a[n], b[n], rtol=rtol, atol=atol) for n in a
        )


def check_params(theta: ModelParams, ranks: RankSpec | None = None, tol: float = ORTHO_TOL) -> None:
    """Raise if ``theta`` violates any structural invariant.

    The heterogeneity variances may be zero (the ``u = tB`` special case);
    every other variance must be strictly positive.
    """
    if ranks is not None and theta.ranks != ranks:
        raise DimensionMismatch(f"parameters have ranks {theta.ranks}, expected {ranks}")
    for name in ("W", "W_perp", "C", "C_perp"):
        L = getattr(theta, name)
        if not np.all(np.isfinite(L)):
            raise InvalidParams(f"{name} has non-finite entries")
        err = np.linalg.norm(L.T @ L - np.eye(L.shape[1]))
        if err > tol:
            raise NonOrthogonalLoadings(f"{name}^T {name} deviates from identity by {err:.3g}")
    for a, b in (("W", "W_perp"), ("C", "C_perp")):
        if getattr(theta, b).shape[1] == 0:
            continue
        joint = np.hstack([getattr(theta, a), getattr(theta, b)])
        smin = np.linalg.svd(joint, compute_uv=False)[-1]
        if smin < 1e-8:
            raise RankDeficientConcatenation(f"[{a} {b}] is rank deficient (smallest singular value {smin:.3g})")
    if not np.all(np.isfinite(theta.B)):
        raise InvalidParams("B has non-finite entries")
    for name in ("sigma_t2", "sigma_to2", "sigma_uo2"):
        v = getattr(theta, name)
        if not np.all(np.isfinite(v) & (v > 0)):
            raise NonPositiveVariance(f"{name} must be positive, got {v}")
    if not np.all(np.isfinite(theta.sigma_h2) & (theta.sigma_h2 >= 0)):
        raise NonPositiveVariance(f"sigma_h2 must be non-negative, got {theta.sigma_h2}")
    for name in ("sigma_e2", "sigma_f2"):
        v = getattr(theta, name)
        if not (np.isfinite(v) and v > 0):
            raise NonPositiveVariance(f"{name} must be positive, got {v}")


def _column_signs(L: np.ndarray) -> np.ndarray:
    """Sign making each column's largest-magnitude entry positive.

    ``argmax`` returns the first maximiser, so ties go to the lowest row.
    """
    if L.shape[1] == 0:
        return np.ones(0)
    idx = np.argmax(np.abs(L), axis=0)
    s = np.sign(L[idx, np.arange(L.shape[1])])
    s[s == 0] = 1.0
    return s


def validate_and_normalize(theta: ModelParams, ranks: RankSpec | None = None, strict: bool = False) -> ModelParams:
    """Return the canonical representative of ``theta``.

    Every transformation applied leaves the implied covariance unchanged:

    * a negative ``B_k`` is made positive by flipping column k of C;
    * each joint pair (W_k, C_k) is flipped together so that W_k's
      largest-magnitude entry is positive (C_k separately when ``B_k == 0``);
    * specific loading columns are flipped independently;
    * joint components are sorted by ``sigma_t2 * B`` descending, ties by
      ``sigma_t2`` then original index; specific components by variance.

    With ``strict=True`` tied ``sigma_t2 * B`` values (all B positive) raise
    :class:`OrderingViolation`.
    """
    check_params(theta, ranks)

    B = theta.B.copy()
    C = theta.C.copy()
    neg = B < 0
    B[neg] *= -1
    C[:, neg] *= -1

    W = theta.W.copy()
    s = _column_signs(W)
    W *= s
    C *= s
    zero = B == 0
    if zero.any():
        C[:, zero] *= _column_signs(C[:, zero])

    key = theta.sigma_t2 * B
    order = sorted(range(B.size), key=lambda k: (-key[k], -theta.sigma_t2[k], k))
    if strict and np.all(B > 0) and np.any(np.diff(key[order]) >= 0):
        raise OrderingViolation(f"sigma_t2 * B is not strictly decreasing after sorting: {key[order]}")

    to_order = np.argsort(-theta.sigma_to2, kind="stable")
    uo_order = np.argsort(-theta.sigma_uo2, kind="stable")
    W_perp = theta.W_perp[:, to_order]
    C_perp = theta.C_perp[:, uo_order]

    return ModelParams(
        W=W[:, order],
        W_perp=W_perp * _column_signs(W_perp),
        C=C[:, order],
        C_perp=C_perp * _column_signs(C_perp),
        B=B[order],
        sigma_t2=theta.sigma_t2[order],
        sigma_to2=theta.sigma_to2[to_order],
        sigma_uo2=theta.sigma_uo2[uo_order],
        sigma_h2=theta.sigma_h2[order],
        sigma_e2=theta.sigma_e2,
        sigma_f2=theta.sigma_f2,
    )


def latent_covariance(theta: ModelParams) -> np.ndarray:
    """Covariance of ``s = (t, u, t_perp, u_perp)``, shape k x k."""
    R = theta.ranks
    S = np.zeros((R.k, R.k))
    S[R.t, R.t] = np.diag(theta.sigma_t2)
    S[R.u, R.u] = np.diag(theta.sigma_u2)
    S[R.t, R.u] = S[R.u, R.t] = np.diag(theta.sigma_t2 * theta.B)
    S[R.to, R.to] = np.diag(theta.sigma_to2)
    S[R.uo, R.uo] = np.diag(theta.sigma_uo2)
    return S


def stacked_loading(theta: ModelParams) -> np.ndarray:
    """The (p+q) x k block matrix ``[[W, 0, W_perp, 0], [0, C, 0, C_perp]]``."""
    R = theta.ranks
    A = np.zeros((R.p + R.q, R.k))
    A[: R.p, R.t] = theta.W
    A[: R.p, R.to] = theta.W_perp
    A[R.p :, R.u] = theta.C
    A[R.p :, R.uo] = theta.C_perp
    return A


@dataclass(frozen=True, eq=False)
class LowRankCovariance:
    """``Sigma = loading @ latent_cov @ loading.T + diag(noise)``.

    ``noise`` holds the two scalar noise variances; the first ``p`` diagonal
    entries use ``noise[0]`` and the last ``q`` use ``noise[1]``.
    """

    loading: np.ndarray
    latent_cov: np.ndarray
    noise: tuple
    p: int
    q: int

    @property
    def noise_diag(self) -> np.ndarray:
        return np.r_[np.full(self.p, self.noise[0]), np.full(self.q, self.noise[1])]

    def dense(self) -> np.ndarray:
        """Materialize the full (p+q) x (p+q) matrix. Small problems only."""
        A = self.loading
        S = A @ self.latent_cov @ A.T
        return 0.5 * (S + S.T) + np.diag(self.noise_diag)


def implied_covariance(theta: ModelParams) -> LowRankCovariance:
    check_params(theta)
    R = theta.ranks
    return LowRankCovariance(
        loading=stacked_loading(theta),
        latent_cov=latent_covariance(theta),
        noise=(theta.sigma_e2, theta.sigma_f2),
        p=R.p,
        q=R.q,
    )


@dataclass(frozen=True, eq=False)
class Latents:
    t: np.ndarray
    u: np.ndarray
    t_perp: np.ndarray
    u_perp: np.ndarray


def sample(theta: ModelParams, n: int, seed=None, return_latents: bool = False):
    """Draw ``n`` i.i.d. rows ``(x, y)`` from the generative model.

    Returns ``(X, Y)`` or ``(X, Y, Latents)``. Output is fully determined by
    ``seed`` (anything accepted by ``numpy.random.default_rng``).
    """
    check_params(theta)
    if int(n) != n or n < 1:
        raise InvalidParams(f"n must be a positive integer, got {n!r}")
    n = int(n)
    R = theta.ranks
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((n, R.r)) * np.sqrt(theta.sigma_t2)
    to = rng.standard_normal((n, R.r_x)) * np.sqrt(theta.sigma_to2)
    uo = rng.standard_normal((n, R.r_y)) * np.sqrt(theta.sigma_uo2)
    h = rng.standard_normal((n, R.r)) * np.sqrt(theta.sigma_h2)
    e = rng.standard_normal((n, R.p)) * np.sqrt(theta.sigma_e2)
    f = rng.standard_normal((n, R.q)) * np.sqrt(theta.sigma_f2)
    u = t * theta.B + h
    X = t @ theta.W.T + to @ theta.W_perp.T + e
    Y = u @ theta.C.T + uo @ theta.C_perp.T + f
    if return_latents:
        return X, Y, Latents(t=t, u=u, t_perp=to, u_perp=uo)
    return X, Y


def match_components(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Greedy matching of estimated to true columns by maximal |inner product|.

    Returns ``perm`` such that ``estimate[:, perm[k]]`` is matched to
    ``truth[:, k]``. Matching is without replacement.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise DimensionMismatch(f"shapes differ: {estimate.shape} vs {truth.shape}")
    a = truth.shape[1]
    score = np.abs(truth.T @ estimate)
    perm = np.full(a, -1)
    used_t = np.zeros(a, bool)
    used_e = np.zeros(a, bool)
    for _ in range(a):
        masked = np.where(used_t[:, None] | used_e[None, :], -np.inf, score)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        perm[i] = j
        used_t[i] = used_e[j] = True
    return perm
