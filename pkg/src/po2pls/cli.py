"""Command-line interface: ``po2pls {fit,test,predict,scree,simulate}``.

Exit codes
----------
0 success; 1 other error (including unreadable files); 2 usage; 3 ragged CSV
rows; 4 non-numeric or missing CSV cell; 5 dimension mismatch; 6 ranks
invalid for the data; 7 invalid configuration or scenario JSON; 8 numerical
failure; 9 unreadable model file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import errors as E
from .conditioning import latent_moments, predict_scores_from_x
from .em import FitConfig, FitResult, fit
from .inference import METHODS, ResampleConfig, TestResult, global_test
from .io import ModelFile, load_model, plain_model, read_csv, read_pair, save_model, write_csv
from .model import RankSpec
from .simulation import (
    ScenarioConfig,
    gen_scenario,
    run_accuracy_study,
    run_power_study,
    run_type1_study,
    write_rows,
)

log = logging.getLogger("po2pls")

EXIT_CODES = [
    (E.RaggedRows, 3),
    (E.NonNumericCell, 4),
    (E.DimensionMismatch, 5),
    (E.RanksExceedSampleSize, 6),
    (E.InvalidRanks, 6),
    (E.InvalidConfig, 7),
    (E.ModelFileError, 9),
    (E.SingularLatentCovariance, 8),
    (E.SingularMomentMatrix, 8),
    (E.RankDeficient, 8),
    (E.NonPositiveInformation, 8),
    (E.DegenerateData, 8),
    (E.ResamplingFailure, 8),
    (E.InvalidParams, 8),
]


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


# -- helpers --------------------------------------------------------------------


def _prepare(X, scale: bool):
    mean = X.mean(axis=0)
    Xc = X - mean
    sd = np.ones(X.shape[1])
    if scale:
        sd = Xc.std(axis=0, ddof=1) if X.shape[0] > 1 else sd
        if np.any(sd == 0):
            raise E.DegenerateData("cannot scale a constant column")
    return Xc / sd, mean, sd


def _check_model_columns(model: ModelFile, X=None, Y=None):
    R = model.ranks
    if X is not None and X.shape[1] != R.p:
        raise E.DimensionMismatch(f"X has {X.shape[1]} columns, the model expects {R.p}")
    if Y is not None and Y.shape[1] != R.q:
        raise E.DimensionMismatch(f"Y has {Y.shape[1]} columns, the model expects {R.q}")


def _predict(model: ModelFile, X):
    T, U = predict_scores_from_x(model.theta, model.transform_x(X))
    return model.untransform_y(U @ model.theta.C.T), T, U


def format_table(res: TestResult) -> str:
    """Human-readable test table."""
    def fp(p):
        return f"{p:.4f}" if p >= 1e-4 else f"{p:.2e}"

    lines = [f"method: {res.method}" + (f" ({res.n_resamples} resamples, {res.n_failed} failed)" if res.n_resamples else "")]
    lines.append(f"{'component':>9} {'B_hat':>10} {'SE':>10} {'T':>9} {'p':>9}")
    for k in range(len(res.B_hat)):
        lines.append(f"{k + 1:>9d} {res.B_hat[k]:>10.4f} {res.se[k]:>10.4f} {res.T[k]:>9.2f} {fp(res.p_value[k]):>9}")
    lines.append(f"combined p (Bonferroni): {fp(res.combined_p)}")
    return "\n".join(lines)


def _write_test_csv(path, res: TestResult):
    rows = [
        dict(component=k + 1, B_hat=res.B_hat[k], se=res.se[k], T=res.T[k], p_value=res.p_value[k], method=res.method)
        for k in range(len(res.B_hat))
    ]
    rows.append(dict(component="combined", p_value=res.combined_p, method=res.method))
    write_rows(rows, path)


# -- commands -------------------------------------------------------------------


def cmd_fit(a) -> int:
    xn, X, yn, Y = read_pair(a.x_csv, a.y_csv)
    ranks = RankSpec(p=X.shape[1], q=Y.shape[1], r=a.r, r_x=a.rx, r_y=a.ry)
    cfg = FitConfig(max_iter=a.max_iter, tol=a.tol, init=a.init, seed=a.seed)
    Xc, mx, sx = _prepare(X, a.scale)
    Yc, my, sy = _prepare(Y, a.scale)
    res = fit(Xc, Yc, ranks, cfg)
    model = ModelFile(
        theta=res.theta,
        meta=dict(
            n_iter=res.n_iter,
            converged=res.converged,
            loglik=res.loglik,
            fit_config=dict(max_iter=cfg.max_iter, tol=cfg.tol, init=cfg.init, seed=cfg.seed, b_update=cfg.b_update),
            scaled=bool(a.scale),
            x_names=xn,
            y_names=yn,
        ),
        arrays=dict(x_mean=mx, y_mean=my, x_scale=sx, y_scale=sy),
    )
    Yhat, _, _ = _predict(model, X)
    model.meta["rmsep_train"] = float(np.sqrt(np.mean(np.sum((Y - Yhat) ** 2, axis=1))))
    save_model(a.out, model)
    trace = a.trace or str(a.out) + ".trace.csv"
    tr = res.loglik_trace
    write_csv(trace, ["iteration", "loglik"], np.column_stack([np.arange(len(tr)), tr]))
    print(
        f"fitted r={ranks.r} r_x={ranks.r_x} r_y={ranks.r_y} on N={X.shape[0]}: "
        f"{res.n_iter} iterations, converged={res.converged}, loglik={res.loglik:.6f}, "
        f"train RMSEP={model.meta['rmsep_train']:.6g}"
    )
    print(f"wrote {a.out} and {trace}")
    return 0


def _fit_result(model: ModelFile, Xc, Yc) -> FitResult:
    meta = model.meta
    fc = meta.get("fit_config", {})
    cfg = FitConfig(**fc) if fc else FitConfig()
    moments = latent_moments(model.theta, Xc, Yc)
    return FitResult(
        theta=model.theta,
        loglik_trace=np.array([moments.loglik]),
        n_iter=int(meta.get("n_iter", 0)),
        converged=bool(meta.get("converged", True)),
        final_moments=moments,
        config=cfg,
    )


def cmd_test(a) -> int:
    model = load_model(a.model)
    _, X, _, Y = read_pair(a.x_csv, a.y_csv)
    _check_model_columns(model, X, Y)
    Xc, Yc = model.transform_x(X), model.transform_y(Y)
    res = _fit_result(model, Xc, Yc)
    rc = ResampleConfig(n_resamples=a.n_resamples, seed=a.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = global_test(res, Xc, Yc, a.method, rc)
    print(format_table(out))
    if a.out:
        _write_test_csv(a.out, out)
    return 0


def cmd_predict(a) -> int:
    model = load_model(a.model)
    _, X = read_csv(a.x_csv)
    _check_model_columns(model, X)
    Yhat, T, U = _predict(model, X)
    names = model.meta.get("y_names") or [f"y{j + 1}" for j in range(model.ranks.q)]
    write_csv(a.out, names, Yhat)
    if a.scores:
        r = model.ranks.r
        write_csv(a.scores, [f"t{k + 1}" for k in range(r)] + [f"u{k + 1}" for k in range(r)], np.hstack([T, U]))
    return 0


def scree_values(X, Y):
    """Eigenvalues of ``X^T X`` and ``Y^T Y`` and singular values of ``X^T Y``,
    all descending, computed from thin SVDs (never forming a p x p matrix)."""
    Ux, sx, _ = np.linalg.svd(X, full_matrices=False)
    Uy, sy, _ = np.linalg.svd(Y, full_matrices=False)
    # X^T Y = Vx Sx Ux^T Uy Sy Vy^T shares singular values with the small core
    core = (sx[:, None] * (Ux.T @ Uy)) * sy[None, :]
    sxy = np.linalg.svd(core, compute_uv=False)
    return sx**2, sy**2, sxy[: min(X.shape[1], Y.shape[1], len(sxy))]


def cmd_scree(a) -> int:
    _, X, _, Y = read_pair(a.x_csv, a.y_csv)
    X, _, _ = _prepare(X, a.scale)
    Y, _, _ = _prepare(Y, a.scale)
    ex, ey, sxy = scree_values(X, Y)
    rows = []
    for name, vals in (("XtX_eigenvalue", ex), ("YtY_eigenvalue", ey), ("XtY_singular_value", sxy)):
        rows.extend(dict(series=name, index=i + 1, value=float(v)) for i, v in enumerate(vals))
    if a.out:
        write_rows(rows, a.out)
    else:
        for name, vals in (("XtX_eigenvalue", ex), ("YtY_eigenvalue", ey), ("XtY_singular_value", sxy)):
            print(name + ": " + " ".join(f"{v:.6g}" for v in vals[:10]) + (" ..." if len(vals) > 10 else ""))
    return 0


def load_scenario(path):
    """Scenario JSON: the :class:`ScenarioConfig` fields plus an optional
    ``"study"`` object with ``kind`` (accuracy, type1, power) and, for power
    studies, ``effects``, ``methods`` and ``n_resamples``."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise E.InvalidConfig(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(d, dict):
        raise E.InvalidConfig(f"{path}: expected a JSON object")
    study = d.pop("study", None)
    if "b_values" in d:
        d["b_values"] = tuple(d["b_values"])
    cfg = ScenarioConfig.from_dict(d)
    if study is not None and (not isinstance(study, dict) or study.get("kind") not in ("accuracy", "type1", "power")):
        raise E.InvalidConfig(f"{path}: study.kind must be accuracy, type1 or power")
    return cfg, study


def cmd_simulate(a) -> int:
    cfg, study = load_scenario(a.scenario_json)
    theta, train, test = gen_scenario(cfg)
    R = cfg.ranks
    xn = [f"x{j + 1}" for j in range(R.p)]
    yn = [f"y{j + 1}" for j in range(R.q)]
    pre = str(a.out_prefix)
    Path(pre).parent.mkdir(parents=True, exist_ok=True)
    write_csv(pre + "_train_X.csv", xn, train.X)
    write_csv(pre + "_train_Y.csv", yn, train.Y)
    write_csv(pre + "_test_X.csv", xn, test.X)
    write_csv(pre + "_test_Y.csv", yn, test.Y)
    save_model(pre + "_truth.po2pls", plain_model(theta, dict(scenario=cfg.to_dict(), x_names=xn, y_names=yn)))
    written = [pre + s for s in ("_train_X.csv", "_train_Y.csv", "_test_X.csv", "_test_Y.csv", "_truth.po2pls")]
    if study is not None:
        kind = study["kind"]
        if kind == "accuracy":
            rows = run_accuracy_study(cfg)
        elif kind == "type1":
            rows = run_type1_study(cfg).rows
        else:
            methods = tuple(study.get("methods", ["asymptotic"]))
            bad = [m for m in methods if m not in METHODS]
            if bad:
                raise E.InvalidConfig(f"unknown test methods {bad}")
            rc = ResampleConfig(n_resamples=study.get("n_resamples"), n_jobs=1)
            rows = run_power_study(cfg, study.get("effects", [0.0, 0.5, 1.0]), methods, resample=rc)
        write_rows(rows, pre + f"_{kind}.csv")
        written.append(pre + f"_{kind}.csv")
    print("wrote " + ", ".join(written))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="po2pls", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to two CSV files")
    f.add_argument("x_csv")
    f.add_argument("y_csv")
    f.add_argument("--r", type=int, required=True, help="joint components")
    f.add_argument("--rx", type=int, default=0, help="X-specific components")
    f.add_argument("--ry", type=int, default=0, help="Y-specific components")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=int, default=1000)
    f.add_argument("--init", choices=("svd-pls", "random"), default="svd-pls")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--scale", action="store_true", help="scale columns to unit variance after centering")
    f.add_argument("--out", required=True, help="model file to write")
    f.add_argument("--trace", default=None, help="log-likelihood trace CSV (default: <out>.trace.csv)")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("test", help="global test of B = 0")
    t.add_argument("model")
    t.add_argument("x_csv")
    t.add_argument("y_csv")
    t.add_argument("--method", choices=METHODS, default="asymptotic")
    t.add_argument("--n-resamples", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None, help="also write the table as CSV")
    t.set_defaults(func=cmd_test)

    pr = sub.add_parser("predict", help="predict Y (and scores) from X")
    pr.add_argument("model")
    pr.add_argument("x_csv")
    pr.add_argument("--out", required=True)
    pr.add_argument("--scores", default=None)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("scree", help="eigenvalues for choosing the ranks")
    s.add_argument("x_csv")
    s.add_argument("y_csv")
    s.add_argument("--scale", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_scree)

    m = sub.add_parser("simulate", help="generate data from a scenario JSON")
    m.add_argument("--scenario-json", required=True)
    m.add_argument("--out-prefix", required=True)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except E.PO2PLSError as exc:
        print(f"po2pls {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"po2pls {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
