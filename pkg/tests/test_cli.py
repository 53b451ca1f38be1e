import json

import numpy as np
import pandas as pd
import pytest

from iprior import load_orange
from iprior.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_artifact, main

ORANGE_TOML = """\
response = "circ"
interactions = ["1:2"]

[[covariate]]
name = "tree"
kernel = "pearson"

[[covariate]]
name = "age"
kernel = "linear"
"""


@pytest.fixture(scope="module")
def orange_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("orange")
    load_orange().to_csv(d / "orange.csv", index=False)
    load_orange().iloc[:5].to_csv(d / "first5.csv", index=False)
    (d / "orange.toml").write_text(ORANGE_TOML)
    return d


@pytest.fixture(scope="module")
def orange_artifact(orange_dir):
    out = orange_dir / "fit.json"
    code = main(["fit", str(orange_dir / "orange.csv"), "--config",
                 str(orange_dir / "orange.toml"), "--method", "em", "--maxit", "5000",
                 "--seed", "1", "--silent", "--out", str(out)])
    assert code == EXIT_OK
    return out


def run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fit_prints_summary(orange_dir, capsys):
    code, out, _ = run(["fit", orange_dir / "orange.csv", "--config", orange_dir / "orange.toml",
                        "--method", "em", "--maxit", "5000", "--seed", "1", "--silent"], capsys)
    assert code == EXIT_OK
    assert "Log-likelihood value: -160.6596" in out
    assert "RMSE of prediction: 8.882" in out


def test_fit_is_deterministic(orange_dir, orange_artifact, tmp_path):
    other = tmp_path / "again.json"
    main(["fit", str(orange_dir / "orange.csv"), "--config", str(orange_dir / "orange.toml"),
          "--method", "em", "--maxit", "5000", "--seed", "1", "--silent", "--out", str(other)])
    assert other.read_bytes() == orange_artifact.read_bytes()


def test_fixed_needs_theta(orange_dir, capsys):
    code, _, err = run(["fit", orange_dir / "orange.csv", "--config",
                        orange_dir / "orange.toml", "--method", "fixed"], capsys)
    assert code == EXIT_USAGE
    assert "--theta" in err


def test_fixed_with_theta(orange_dir, capsys):
    code, out, _ = run(["fit", orange_dir / "orange.csv", "--config",
                        orange_dir / "orange.toml", "--method", "fixed",
                        "--theta", "9.994,0.000158,-4.5138"], capsys)
    assert code == EXIT_OK
    assert "Log-likelihood value: -160.6" in out


def test_predict_training_rows_reproduce_training_rmse(orange_dir, orange_artifact, tmp_path,
                                                       capsys):
    out = tmp_path / "pred.csv"
    code, stdout, _ = run(["predict", orange_artifact, orange_dir / "orange.csv", "--truth",
                           "circ", "--out", out], capsys)
    assert code == EXIT_OK
    rmse = float(stdout.split(":")[1])
    assert rmse == pytest.approx(json.loads(orange_artifact.read_text())["train_rmse"],
                                 abs=1e-9)
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["point", "lower", "upper"] and len(frame) == 35


def test_predict_first_rows(orange_dir, orange_artifact, capsys):
    code, stdout, err = run(["predict", orange_artifact, orange_dir / "first5.csv", "--truth",
                             "circ"], capsys)
    assert code == EXIT_OK
    assert float(err.split(":")[1]) == pytest.approx(6.726, abs=0.05)
    assert stdout.count("\n") == 6


def test_interval_width_follows_alpha(orange_dir, orange_artifact, capsys):
    widths = {}
    for alpha in ("0.05", "0.10"):
        _, stdout, _ = run(["predict", orange_artifact, orange_dir / "first5.csv", "--alpha",
                            alpha], capsys)
        from io import StringIO
        f = pd.read_csv(StringIO(stdout))
        widths[alpha] = (f["upper"] - f["lower"]).to_numpy()
    assert np.all(widths["0.05"] > widths["0.10"])


def test_artifact_round_trip_reproduces_predictions(orange_dir, orange_artifact, tmp_path,
                                                    capsys):
    from iprior.cli import save_artifact

    fit = load_artifact(orange_artifact)
    copy = tmp_path / "copy.json"
    save_artifact(fit, load_orange(), copy)
    outs = []
    for art in (orange_artifact, copy):
        _, stdout, _ = run(["predict", art, orange_dir / "first5.csv"], capsys)
        outs.append(stdout)
    assert outs[0] == outs[1]


def test_tampered_artifact_is_rejected(orange_artifact, orange_dir, tmp_path, capsys):
    doc = json.loads(orange_artifact.read_text())
    doc["data"]["circ"][0] += 1.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    code, _, err = run(["predict", bad, orange_dir / "first5.csv"], capsys)
    assert code == EXIT_DATA and "hash" in err.lower()


def test_missing_artifact(orange_dir, tmp_path, capsys):
    code, _, _ = run(["predict", tmp_path / "nope.json", orange_dir / "first5.csv"], capsys)
    assert code == EXIT_DATA


def test_simulate(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert main(["simulate", "--n", "10", "--seed", "3", "--out", str(path)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().count("\n") == 11
    code, stdout, _ = run(["simulate", "--n", "200", "--seed", "3", "--xlim", "-1", "5.5"],
                          capsys)
    from io import StringIO
    x = pd.read_csv(StringIO(stdout))["X"]
    assert code == EXIT_OK and x.max() <= 5.5 + 6.5 / 400


def test_simulate_bad_config(capsys):
    code, _, _ = run(["simulate", "--n", "0"], capsys)
    assert code == EXIT_DATA


@pytest.fixture
def xcsv(tmp_path):
    path = tmp_path / "x.csv"
    pd.DataFrame({"x": [0.0, 1.0, 3.0], "g": ["a", "b", "a"]}).to_csv(path, index=False)
    return path


def gram_from(stdout):
    return np.array([[float(v) for v in line.split(",")] for line in stdout.strip().splitlines()])


def test_kernel_dumps(xcsv, capsys):
    _, out, _ = run(["kernel", xcsv, "x", "fbm"], capsys)
    x = np.array([0.0, 1.0, 3.0])
    d = np.abs(x[:, None] - x[None, :])
    np.testing.assert_allclose(gram_from(out), -0.5 * (d - np.abs(x)[:, None] - np.abs(x)),
                               atol=1e-15)
    _, out, _ = run(["kernel", xcsv, "x", "poly3,1"], capsys)
    np.testing.assert_allclose(gram_from(out), (np.outer(x, x) + 1) ** 3)
    _, out, _ = run(["kernel", xcsv, "x", "se,0.5"], capsys)
    np.testing.assert_array_equal(np.diag(gram_from(out)), 1.0)
    _, out, _ = run(["kernel", xcsv, "x", "se,0.5", "--centre"], capsys)
    np.testing.assert_allclose(gram_from(out).sum(axis=0), 0.0, atol=1e-12)
    _, out, _ = run(["kernel", xcsv, "g", "pearson"], capsys)
    np.testing.assert_allclose(gram_from(out), [[0.5, -1, 0.5], [-1, 2, -1], [0.5, -1, 0.5]])


@pytest.mark.parametrize("spec", ["fbm,2", "poly0", "banana", "se,-1"])
def test_kernel_malformed_spec_is_usage_error(xcsv, spec, capsys):
    code, _, _ = run(["kernel", xcsv, "x", spec], capsys)
    assert code == EXIT_USAGE


def test_kernel_missing_column(xcsv, capsys):
    code, _, _ = run(["kernel", xcsv, "zz", "linear"], capsys)
    assert code == EXIT_DATA


def test_check_theta(orange_dir, capsys):
    code, out, _ = run(["check-theta", orange_dir / "orange.csv", "--config",
                        orange_dir / "orange.toml"], capsys)
    assert code == EXIT_OK and out.strip() == "lambda[1], lambda[2], log(psi)"


def test_missing_response_is_data_error(tmp_path, orange_dir, capsys):
    load_orange().drop(columns="circ").to_csv(tmp_path / "d.csv", index=False)
    code, _, _ = run(["check-theta", tmp_path / "d.csv", "--config", orange_dir / "orange.toml"],
                     capsys)
    assert code == EXIT_DATA


def test_end_to_end_noise_recovery(tmp_path, capsys):
    data = tmp_path / "sim.csv"
    main(["simulate", "--n", "400", "--seed", "21", "--out", str(data)])
    (tmp_path / "m.toml").write_text('response = "y"\n\n[[covariate]]\nname = "X"\n'
                                     'kernel = "fbm"\n')
    out = tmp_path / "fit.json"
    assert main(["fit", str(data), "--config", str(tmp_path / "m.toml"), "--maxit", "500",
                 "--seed", "1", "--silent", "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    psi = json.loads(out.read_text())["hyperparameters"]["psi"]
    assert 0.75 <= psi ** -0.5 <= 1.05
