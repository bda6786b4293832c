"""Scenario generation and Monte Carlo study runners.

Every replicate gets its own integer seed, recorded in the output rows, so
a single replicate can be re-run with ``gen_scenario(cfg.replace(seed=s))``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import binomtest

from .conditioning import orth, predict_y_from_x
from .em import FitConfig, fit
from .errors import DimensionMismatch, InvalidConfig, PO2PLSError, SigmaHFloorHit
from .inference import ResampleConfig, default_n_jobs, global_test
from .model import ModelParams, RankSpec, match_components, sample, validate_and_normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioConfig:
    """A simulation scenario.

    ``noise_x`` is the share of ``tr Cov(x)`` due to ``e`` (likewise
    ``noise_y``). ``heterogeneity`` is ``sigma_h2 / sigma_u2`` at unit B:
    ``sigma_h2 = heterogeneity / (1 - heterogeneity) * sigma_t2`` and stays
    fixed when B changes, so a larger B is a stronger signal.
    """

    n_train: int
    n_test: int
    ranks: RankSpec
    noise_x: float = 0.4
    noise_y: float = 0.4
    heterogeneity: float = 0.0
    b_values: tuple = ()
    replicates: int = 1
    seed: int | None = 0

    def __post_init__(self):
        if not isinstance(self.ranks, RankSpec):
            raise InvalidConfig("ranks must be a RankSpec")
        b = tuple(float(v) for v in self.b_values) if len(self.b_values) else (1.0,) * self.ranks.r
        object.__setattr__(self, "b_values", b)
        if len(b) != self.ranks.r or not all(math.isfinite(v) for v in b):
            raise InvalidConfig(f"b_values must be {self.ranks.r} finite numbers, got {self.b_values}")
        for name in ("n_train", "n_test", "replicates"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {v!r}")
        for name in ("noise_x", "noise_y"):
            if not 0 < getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must lie in (0, 1), got {getattr(self, name)!r}")
        if not 0 <= self.heterogeneity < 1:
            raise InvalidConfig(f"heterogeneity must lie in [0, 1), got {self.heterogeneity!r}")
        if self.heterogeneity == 0 and any(v == 0 for v in b):
            raise InvalidConfig("B_k = 0 with zero heterogeneity leaves u_k without variance")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ranks"] = dataclasses.asdict(self.ranks)
        d["b_values"] = list(self.b_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            ranks = d.pop("ranks")
            return cls(ranks=RankSpec(**ranks), **d)
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"malformed scenario: {exc}") from None

    def fields(self) -> dict:
        """Flat scenario description for result tables."""
        R = self.ranks
        return dict(
            n_train=self.n_train,
            p=R.p,
            q=R.q,
            r=R.r,
            r_x=R.r_x,
            r_y=R.r_y,
            noise_x=self.noise_x,
            noise_y=self.noise_y,
            heterogeneity=self.heterogeneity,
        )


@dataclass(frozen=True, eq=False)
class DataPair:
    X: np.ndarray
    Y: np.ndarray


def _profile(a: int) -> np.ndarray:
    # strictly decreasing, from 1 down to just above 0.5
    return 1.0 - 0.5 * np.arange(a) / max(a, 1)


def scenario_params(config: ScenarioConfig, rng) -> ModelParams:
    R = config.ranks
    sigma_t2 = _profile(R.r)
    sigma_to2 = _profile(R.r_x)
    sigma_uo2 = _profile(R.r_y)
    eta = config.heterogeneity
    sigma_h2 = eta / (1 - eta) * sigma_t2
    B = np.asarray(config.b_values)
    sigma_u2 = B**2 * sigma_t2 + sigma_h2
    nx, ny = config.noise_x, config.noise_y
    theta = ModelParams(
        W=orth(rng.standard_normal((R.p, R.r))),
        W_perp=orth(rng.standard_normal((R.p, R.r_x))),
        C=orth(rng.standard_normal((R.q, R.r))),
        C_perp=orth(rng.standard_normal((R.q, R.r_y))),
        B=B,
        sigma_t2=sigma_t2,
        sigma_to2=sigma_to2,
        sigma_uo2=sigma_uo2,
        sigma_h2=sigma_h2,
        sigma_e2=nx / (1 - nx) * (sigma_t2.sum() + sigma_to2.sum()) / R.p,
        sigma_f2=ny / (1 - ny) * (sigma_u2.sum() + sigma_uo2.sum()) / R.q,
    )
    return validate_and_normalize(theta, R)


def gen_scenario(config: ScenarioConfig):
    """Draw ``(theta_true, train, test)``; deterministic in ``config.seed``.

    The parameters, training rows and test rows come from three independent
    child streams of the seed.
    """
    s_theta, s_train, s_test = np.random.SeedSequence(config.seed).spawn(3)
    theta = scenario_params(config, np.random.default_rng(s_theta))
    train = DataPair(*sample(theta, config.n_train, seed=s_train))
    test = DataPair(*sample(theta, config.n_test, seed=s_test))
    return theta, train, test


def replicate_seeds(config: ScenarioConfig) -> list:
    return [int(s.generate_state(1, np.uint32)[0]) for s in np.random.SeedSequence(config.seed).spawn(config.replicates)]


# -- metrics ----------------------------------------------------------------


def tpr_top_features(W_hat, W_true, fraction: float = 0.25) -> float:
    """Mean overlap of the top ``ceil(fraction * p)`` features by |loading|.

    Estimated columns are first matched to true ones (greedy on absolute
    inner product), so column order and signs of ``W_hat`` do not matter.
    """
    W_hat = np.asarray(W_hat, dtype=float)
    W_true = np.asarray(W_true, dtype=float)
    if W_hat.shape != W_true.shape or W_hat.ndim != 2:
        raise DimensionMismatch(f"loadings have shapes {W_hat.shape} and {W_true.shape}")
    if not 0 < fraction < 1:
        raise InvalidConfig(f"fraction must lie in (0, 1), got {fraction!r}")
    p, a = W_true.shape
    m = math.ceil(fraction * p)
    W_hat = W_hat[:, match_components(W_hat, W_true)]
    rates = []
    for k in range(a):
        top_hat = np.argsort(-np.abs(W_hat[:, k]), kind="stable")[:m]
        top_true = np.argsort(-np.abs(W_true[:, k]), kind="stable")[:m]
        rates.append(len(np.intersect1d(top_hat, top_true)) / m)
    return float(np.mean(rates))


def rmsep(theta: ModelParams, X, Y) -> float:
    """``sqrt(mean_i ||y_i - yhat_i||^2)`` with ``yhat = E[y | x]``."""
    Y = np.asarray(Y, dtype=float)
    pred = predict_y_from_x(theta, X)
    if pred.shape != Y.shape:
        raise DimensionMismatch(f"Y has shape {Y.shape}, prediction has {pred.shape}")
    return float(np.sqrt(np.mean(np.sum((Y - pred) ** 2, axis=1))))


def pls_svd_baseline(X, Y, r: int):
    """Top ``r`` singular vector pairs of ``X^T Y``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X {X.shape} and Y {Y.shape} must be matrices with equal row counts")
    if not 1 <= r <= min(X.shape[1], Y.shape[1]):
        raise DimensionMismatch(f"r = {r} is outside [1, min(p, q)]")
    U, _, Vt = np.linalg.svd(X.T @ Y, full_matrices=False)
    return U[:, :r], Vt[:r].T


def _center(A):
    return A - A.mean(axis=0)


# -- study runners ----------------------------------------------------------


def _map(fn, items, n_jobs):
    n_jobs = n_jobs if n_jobs is not None else default_n_jobs()
    if n_jobs == 1:
        return [fn(*it) for it in items]
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*it) for it in items)


def _asymptotic_replicate(config, seed, fit_config):
    _, train, _ = gen_scenario(config.replace(seed=seed))
    try:
        res = fit(_center(train.X), _center(train.Y), config.ranks, fit_config)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SigmaHFloorHit)
            out = global_test(res, None, None, "asymptotic")
    except PO2PLSError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    return seed, out, None


@dataclass(frozen=True, eq=False)
class Type1Result:
    """Rejection proportions at level ``alpha`` with exact 95% intervals.

    ``per_component`` rows are indexed by joint component; ``combined`` uses
    the Bonferroni-combined p-value.
    """

    proportion: np.ndarray
    ci: np.ndarray  # r x 2
    combined: float
    combined_ci: tuple
    n: int
    n_failed: int
    rows: list = field(default_factory=list)


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple:
    """Exact (Clopper-Pearson) interval for a binomial proportion."""
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def run_type1_study(config: ScenarioConfig, alpha: float = 0.05, fit_config: FitConfig = FitConfig(), n_jobs=None) -> Type1Result:
    """Proportion of null replicates rejected by the asymptotic test."""
    if any(b != 0 for b in config.b_values):
        raise InvalidConfig("a type I error study needs b_values = 0")
    seeds = replicate_seeds(config)
    outs = _map(_asymptotic_replicate, [(config, s, fit_config) for s in seeds], n_jobs)
    base = config.fields()
    rows, P, failed = [], [], 0
    for i, (seed, out, err) in enumerate(outs):
        if out is None:
            failed += 1
            log.warning("replicate %d (seed %d) failed: %s", i, seed, err)
            rows.append(dict(base, replicate=i, seed=seed, component="", metric="failed", value=1))
            continue
        P.append(out.p_value)
        for k in range(config.ranks.r):
            for metric, v in (("B_hat", out.B_hat[k]), ("se", out.se[k]), ("T", out.T[k]), ("p_value", out.p_value[k])):
                rows.append(dict(base, replicate=i, seed=seed, component=k + 1, metric=metric, value=float(v)))
        rows.append(dict(base, replicate=i, seed=seed, component="combined", metric="p_value", value=out.combined_p))
    n = len(P)
    if n == 0:
        raise PO2PLSError(f"all {config.replicates} replicates failed")
    P = np.vstack(P)
    rej = np.sum(P < alpha, axis=0)
    comb = int(np.sum(np.minimum(1.0, P.shape[1] * P.min(axis=1)) < alpha))
    return Type1Result(
        proportion=rej / n,
        ci=np.array([binomial_ci(k, n) for k in rej]),
        combined=comb / n,
        combined_ci=binomial_ci(comb, n),
        n=n,
        n_failed=failed,
        rows=rows,
    )


def _power_replicate(config, seed, methods, fit_config, rc, alpha):
    _, train, _ = gen_scenario(config.replace(seed=seed))
    X, Y = _center(train.X), _center(train.Y)
    out = {}
    try:
        res = fit(X, Y, config.ranks, fit_config)
    except PO2PLSError as exc:
        return seed, {m: f"{type(exc).__name__}: {exc}" for m in methods}
    for m in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SigmaHFloorHit)
                t = global_test(res, X, Y, m, dataclasses.replace(rc, seed=seed))
            out[m] = (t.p_value, t.combined_p)
        except PO2PLSError as exc:
            out[m] = f"{type(exc).__name__}: {exc}"
    return seed, out


def run_power_study(
    config: ScenarioConfig,
    effects: Sequence[float],
    methods: Iterable[str] = ("asymptotic",),
    alpha: float = 0.05,
    fit_config: FitConfig = FitConfig(),
    resample: ResampleConfig = ResampleConfig(n_jobs=1),
    n_jobs=None,
) -> list:
    """Rejection proportions per (effect, method) as tidy rows.

    At each effect every joint component gets ``B_k = effect``. The rows
    carry per-component rejection proportions and the Bonferroni-combined
    one (``component == "combined"``). Resampling inside a replicate runs
    serially; replicates are spread over ``n_jobs`` workers.
    """
    methods = tuple(methods)
    if 0 not in [float(e) for e in effects]:
        log.info("effect grid has no zero entry; no type I error row will be produced")
    rows = []
    r = config.ranks.r
    for effect in effects:
        cfg = config.replace(b_values=(float(effect),) * r)
        seeds = replicate_seeds(cfg)
        outs = _map(_power_replicate, [(cfg, s, methods, fit_config, resample, alpha) for s in seeds], n_jobs)
        for m in methods:
            good = [o[m] for _, o in outs if not isinstance(o[m], str)]
            n, failed = len(good), len(outs) - len(good)
            base = dict(cfg.fields(), effect=float(effect), method=m, n=n, n_failed=failed)
            if n == 0:
                rows.append(dict(base, component="combined", rejections=0, proportion=float("nan")))
                continue
            P = np.vstack([g[0] for g in good])
            comb = np.array([g[1] for g in good])
            for k in range(r):
                rej = int(np.sum(P[:, k] < alpha))
                rows.append(dict(base, component=k + 1, rejections=rej, proportion=rej / n))
            rej = int(np.sum(comb < alpha))
            rows.append(dict(base, component="combined", rejections=rej, proportion=rej / n))
    return rows


def _accuracy_replicate(config, seed, fit_config, fraction):
    theta, train, test = gen_scenario(config.replace(seed=seed))
    mx, my = train.X.mean(axis=0), train.Y.mean(axis=0)
    try:
        res = fit(train.X - mx, train.Y - my, config.ranks, fit_config)
    except PO2PLSError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    est = res.theta
    perm = match_components(est.W, theta.W)
    Wm = est.W[:, perm]
    vals = dict(
        tpr_W=tpr_top_features(est.W, theta.W, fraction),
        tpr_C=tpr_top_features(est.C, theta.C, fraction),
        rmsep_train=rmsep(est, train.X - mx, train.Y - my),
        rmsep_test=rmsep(est, test.X - mx, test.Y - my),
        rmsep_test_oracle=rmsep(theta, test.X, test.Y),
        n_iter=res.n_iter,
        converged=float(res.converged),
    )
    for k in range(config.ranks.r):
        vals[f"congruence_{k + 1}"] = abs(float(Wm[:, k] @ theta.W[:, k]))
        b = theta.B[k]
        vals[f"B_rel_error_{k + 1}"] = abs(est.B[perm[k]] - b) / abs(b) if b != 0 else float("nan")
    return seed, vals, None


def run_accuracy_study(config: ScenarioConfig, fit_config: FitConfig = FitConfig(), fraction: float = 0.25, n_jobs=None) -> list:
    """Per-replicate TPR, RMSEP (train, test, true-parameter oracle), loading
    congruence and relative B error, as long-format rows."""
    seeds = replicate_seeds(config)
    outs = _map(_accuracy_replicate, [(config, s, fit_config, fraction) for s in seeds], n_jobs)
    base = config.fields()
    rows = []
    for i, (seed, vals, err) in enumerate(outs):
        if vals is None:
            log.warning("replicate %d (seed %d) failed: %s", i, seed, err)
            rows.append(dict(base, replicate=i, seed=seed, metric="failed", value=1))
            continue
        rows.extend(dict(base, replicate=i, seed=seed, metric=k, value=v) for k, v in vals.items())
    return rows


def write_rows(rows: list, path) -> None:
    """Write dict rows as CSV with the union of keys as header, in first-seen order."""
    header = []
    for row in rows:
        header.extend(k for k in row if k not in header)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})


def _cell(v):
    # shortest repr that round-trips exactly
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
