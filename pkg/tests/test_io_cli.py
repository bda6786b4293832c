import csv
import json
import tracemalloc
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from po2pls.cli import format_table, main, scree_values
from po2pls.errors import ModelFileError, NonNumericCell, RaggedRows
from po2pls.inference import TestResult
from po2pls.io import load_model, plain_model, read_csv, save_model, write_csv
from po2pls.model import RankSpec

from _helpers import random_theta

DATA = Path(__file__).parent / "data"
DX, DY = str(DATA / "demo_train_X.csv"), str(DATA / "demo_train_Y.csv")
DEMO = ["--r", "2", "--rx", "1", "--ry", "1"]


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def demo_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("m") / "demo.po2pls"
    assert main(["fit", DX, DY, *DEMO, "--seed", "1", "--out", str(out)]) == 0
    return out


# -- CSV ----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3), min_size=1, max_size=6))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "a.csv"
    data = np.array(rows)
    write_csv(path, ["a", "b", "c"], data)
    names, back = read_csv(path)
    assert names == ["a", "b", "c"]
    np.testing.assert_array_equal(back, data)


def test_csv_errors(tmp_path):
    with pytest.raises(RaggedRows, match=":3:"):
        read_csv(_write(tmp_path / "r.csv", "a,b\n1,2\n3\n"))
    with pytest.raises(NonNumericCell, match="column 2"):
        read_csv(_write(tmp_path / "n.csv", "a,b\n1,x\n"))
    for missing in ("", "NA", "nan"):
        with pytest.raises(NonNumericCell):
            read_csv(_write(tmp_path / "m.csv", f"a,b\n1,{missing}\n"))
    with pytest.raises(NonNumericCell):
        read_csv(_write(tmp_path / "i.csv", "a,b\n1,inf\n"))


# -- model file -----------------------------------------------------------------


def test_model_file_round_trip_bit_exact(tmp_path, rng):
    for R in (RankSpec(8, 5, 2, 1, 1), RankSpec(6, 4, 1, 0, 0)):
        m = plain_model(random_theta(rng, R), dict(n_iter=3, converged=True, loglik=-1.25))
        save_model(tmp_path / "m", m)
        back = load_model(tmp_path / "m")
        assert back.ranks == R and back.meta == m.meta and back.format_version == 1
        a, b = m.theta.arrays(), back.theta.arrays()
        for k in a:
            assert np.array_equal(a[k], b[k]) and np.shape(a[k]) == np.shape(b[k])
        for k in m.arrays:
            np.testing.assert_array_equal(back.arrays[k], m.arrays[k])
        # saving the loaded model gives the same bytes
        save_model(tmp_path / "m2", back)
        assert (tmp_path / "m").read_bytes() == (tmp_path / "m2").read_bytes()


def test_model_file_readable_with_numpy(demo_model):
    with np.load(demo_model) as z:
        assert z["theta.W"].shape == (10, 2)
        assert z["meta.x_mean"].shape == (10,)
        assert z["theta.sigma_e2"].shape == ()


def test_bad_model_files(tmp_path):
    with pytest.raises(ModelFileError):
        load_model(_write(tmp_path / "junk", "not a zip"))
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "missing")


# -- fit ------------------------------------------------------------------------


def test_fit_demo(demo_model, tmp_path):
    trace = np.loadtxt(str(demo_model) + ".trace.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))
    m = load_model(demo_model)
    assert m.meta["converged"] and m.meta["n_iter"] == len(trace) - 1
    np.testing.assert_allclose(m.arrays["x_mean"], read_csv(DX)[1].mean(axis=0))
    # fixed seed: identical bytes on refit
    again = tmp_path / "again.po2pls"
    main(["fit", DX, DY, *DEMO, "--seed", "1", "--out", str(again)])
    assert again.read_bytes() == demo_model.read_bytes()


@pytest.mark.parametrize(
    "setup, code",
    [
        (lambda t: ["fit", DX, str(DATA / "demo_test_Y.csv"), "--r", "1"], 5),
        (lambda t: ["fit", _write(t / "r.csv", "a,b\n1,2\n3\n"), DY, "--r", "1"], 3),
        (lambda t: ["fit", _write(t / "n.csv", "a,b\n1,q\n"), DY, "--r", "1"], 4),
        (lambda t: ["fit", DX, DY, "--r", "7"], 6),
        (lambda t: ["fit", DX, DY, "--r", "20", "--rx", "20"], 6),
        (lambda t: ["fit", DX, DY, "--r", "1", "--tol", "-1"], 7),
        (lambda t: ["fit", str(t / "nope.csv"), DY, "--r", "1"], 1),
    ],
)
def test_fit_exit_codes(tmp_path, capsys, setup, code):
    assert main([*setup(tmp_path), "--out", str(tmp_path / "m")]) == code
    assert capsys.readouterr().err.startswith("po2pls fit:")


def test_ranks_exceed_sample_size(tmp_path):
    rng = np.random.default_rng(0)
    write_csv(tmp_path / "x.csv", list("abcde"), rng.standard_normal((3, 5)))
    write_csv(tmp_path / "y.csv", list("abcd"), rng.standard_normal((3, 4)))
    argv = ["fit", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"), "--r", "2", "--rx", "1", "--out", str(tmp_path / "m")]
    assert main(argv) == 6


def test_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["fit", DX])
    assert err.value.code == 2


# -- test -----------------------------------------------------------------------


def test_table_formats_reported_p():
    res = TestResult(
        B_hat=np.array([0.47]), se=np.array([0.2]), T=np.array([2.35]),
        p_value=np.array([0.018770]), method="asymptotic",
    )
    assert " 0.0188" in format_table(res).splitlines()[2]


def test_null_fixture_is_nonsignificant(tmp_path, capsys):
    x, y = str(DATA / "null_train_X.csv"), str(DATA / "null_train_Y.csv")
    model, out = str(tmp_path / "m"), str(tmp_path / "t.csv")
    assert main(["fit", x, y, "--r", "1", "--out", model]) == 0
    assert main(["test", model, x, y, "--out", out]) == 0
    rows = list(csv.DictReader(open(out)))
    assert float(rows[0]["p_value"]) > 0.2 and rows[-1]["component"] == "combined"


def test_permutation_floor_on_demo(demo_model, tmp_path):
    out = str(tmp_path / "t.csv")
    assert main(["test", str(demo_model), DX, DY, "--method", "permutation", "--n-resamples", "500", "--out", out]) == 0
    rows = list(csv.DictReader(open(out)))
    for r in rows[:2]:
        assert float(r["p_value"]) == 1 / 501


def test_test_dimension_mismatch(demo_model):
    assert main(["test", str(demo_model), DY, DY]) == 5


# -- predict ----------------------------------------------------------------------


def test_predict_reproduces_training_rmsep(demo_model, tmp_path):
    out, scores = tmp_path / "yhat.csv", tmp_path / "s.csv"
    assert main(["predict", str(demo_model), DX, "--out", str(out), "--scores", str(scores)]) == 0
    names, Yhat = read_csv(out)
    _, Y = read_csv(DY)
    assert names == read_csv(DY)[0]
    rmsep = np.sqrt(np.mean(np.sum((Y - Yhat) ** 2, axis=1)))
    np.testing.assert_allclose(rmsep, load_model(demo_model).meta["rmsep_train"], rtol=1e-10)
    snames, S = read_csv(scores)
    assert snames == ["t1", "t2", "u1", "u2"] and S.shape == (50, 4)


def test_predict_constant_x_null_model(tmp_path, rng):
    R = RankSpec(5, 3, 1)
    m = plain_model(random_theta(rng, R).replace(B=[0.0]))
    m.arrays.update(x_mean=np.full(5, 2.0), y_mean=np.array([1.0, -3.0, 0.5]))
    save_model(tmp_path / "m", m)
    write_csv(tmp_path / "x.csv", list("abcde"), np.full((4, 5), 2.0))
    assert main(["predict", str(tmp_path / "m"), str(tmp_path / "x.csv"), "--out", str(tmp_path / "y.csv")]) == 0
    np.testing.assert_array_equal(read_csv(tmp_path / "y.csv")[1], np.tile([1.0, -3.0, 0.5], (4, 1)))


def test_predict_column_mismatch(demo_model, tmp_path):
    assert main(["predict", str(demo_model), DY, "--out", str(tmp_path / "y.csv")]) == 5


# -- scree ------------------------------------------------------------------------


def test_scree_same_block(rng):
    X = rng.standard_normal((30, 8))
    ex, ey, sxy = scree_values(X, X)
    np.testing.assert_allclose(sxy, ex, rtol=1e-10)
    np.testing.assert_allclose(ex, np.sort(np.linalg.eigvalsh(X.T @ X))[::-1], rtol=1e-10)


def test_scree_wide_matches_dense(rng):
    X, Y = rng.standard_normal((12, 40)), rng.standard_normal((12, 7))
    ex, ey, sxy = scree_values(X, Y)
    assert len(ex) == 12 and len(ey) == 7 and len(sxy) == 7
    np.testing.assert_allclose(sxy, np.linalg.svd(X.T @ Y, compute_uv=False), rtol=1e-10)


def test_scree_gap_for_planted_components(tmp_path):
    scen = json.loads((DATA / "demo_scenario.json").read_text())
    scen.update(noise_x=0.05, noise_y=0.05, heterogeneity=0.05, ranks=dict(p=10, q=6, r=2, r_x=0, r_y=0))
    _write(tmp_path / "s.json", json.dumps(scen))
    assert main(["simulate", "--scenario-json", str(tmp_path / "s.json"), "--out-prefix", str(tmp_path / "d")]) == 0
    out = tmp_path / "scree.csv"
    assert main(["scree", str(tmp_path / "d_train_X.csv"), str(tmp_path / "d_train_Y.csv"), "--out", str(out)]) == 0
    sv = [float(r["value"]) for r in csv.DictReader(open(out)) if r["series"] == "XtY_singular_value"]
    assert sv[1] / sv[2] > 5


def test_scree_wide_smoke():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((100, 10_000)), rng.standard_normal((100, 125))
    tracemalloc.start()
    ex, _, sxy = scree_values(X, Y)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    assert len(ex) == 100 and len(sxy) == 100
    assert peak < 40 * X.nbytes // 10  # a p x p buffer alone would be 800 MB


# -- simulate ---------------------------------------------------------------------


def test_simulate_is_deterministic(tmp_path):
    scen = str(DATA / "demo_scenario.json")
    main(["simulate", "--scenario-json", scen, "--out-prefix", str(tmp_path / "a")])
    main(["simulate", "--scenario-json", scen, "--out-prefix", str(tmp_path / "b")])
    for s in ("_train_X.csv", "_train_Y.csv", "_test_X.csv", "_test_Y.csv", "_truth.po2pls"):
        assert (tmp_path / ("a" + s)).read_bytes() == (tmp_path / ("b" + s)).read_bytes()
    # and matches the bundled fixture
    assert (tmp_path / "a_train_X.csv").read_bytes() == (DATA / "demo_train_X.csv").read_bytes()


def test_simulate_high_dimensional_shapes(tmp_path):
    scen = dict(n_train=100, n_test=20, ranks=dict(p=2000, q=25, r=5, r_x=5, r_y=5), noise_x=0.4, noise_y=0.4)
    _write(tmp_path / "s.json", json.dumps(scen))
    assert main(["simulate", "--scenario-json", str(tmp_path / "s.json"), "--out-prefix", str(tmp_path / "h")]) == 0
    assert read_csv(tmp_path / "h_train_X.csv")[1].shape == (100, 2000)
    assert read_csv(tmp_path / "h_test_Y.csv")[1].shape == (20, 25)
    assert load_model(tmp_path / "h_truth.po2pls").ranks == RankSpec(2000, 25, 5, 5, 5)


def test_simulate_with_study(tmp_path):
    scen = json.loads((DATA / "demo_scenario.json").read_text())
    scen.update(replicates=2, study=dict(kind="accuracy"))
    _write(tmp_path / "s.json", json.dumps(scen))
    assert main(["simulate", "--scenario-json", str(tmp_path / "s.json"), "--out-prefix", str(tmp_path / "z")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "z_accuracy.csv")))
    assert {r["replicate"] for r in rows} == {"0", "1"}


@pytest.mark.parametrize(
    "text",
    [
        "{not json",
        "[1, 2]",
        json.dumps(dict(n_train=10, n_test=5, ranks=dict(p=5, q=4, r=1), replicates=0)),
        json.dumps(dict(n_train=10, n_test=5, ranks=dict(p=5, q=4, r=1), study=dict(kind="nope"))),
        json.dumps(dict(n_train=10)),
    ],
)
def test_simulate_bad_scenario(tmp_path, text):
    _write(tmp_path / "s.json", text)
    assert main(["simulate", "--scenario-json", str(tmp_path / "s.json"), "--out-prefix", str(tmp_path / "o")]) == 7
