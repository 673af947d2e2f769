import json

import numpy as np
import pytest

from ccpool import fit, prospective_fit
from ccpool.cli import main
from ccpool.io import read_csv, write_csv
from ccpool.model import DataError
from ccpool.simulator import Scenario, get_scenario, simulate_data


@pytest.fixture(scope="module")
def a1_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "a1.csv"
    assert main(["generate", "a1", "--out", str(path)]) == 0
    return path


def write_rows(path, rows):
    path.write_text("study,y,x1\n" + "".join(f"{r}\n" for r in rows), encoding="utf-8")
    return path


# -- fit ----------------------------------------------------------------------


def test_fit_prints_table_and_json(a1_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", str(a1_csv), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "alpha_1" in text and "beta_2_2" in text and "status: converged" in text
    doc = json.loads(out.read_text())
    for key in ("theta", "ese", "cov", "c_hat", "p_hat", "loglik", "iterations", "converged", "trace"):
        assert key in doc
    assert len(doc["theta"]) == 6 and len(doc["p_hat"]) == 500


def test_round_trip_is_exact(a1_csv, tmp_path):
    data = simulate_data(get_scenario("a1"), 0)
    back = read_csv(a1_csv)
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.y, data.y)
    out = tmp_path / "fit.json"
    main(["fit", str(a1_csv), "--out", str(out)])
    doc = json.loads(out.read_text())
    np.testing.assert_array_equal(doc["theta"], fit(data).estimates)


def test_write_csv_round_trip(tmp_path, small_data):
    path = tmp_path / "s.csv"
    write_csv(small_data, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.x, small_data.x)
    np.testing.assert_array_equal(back.study, small_data.study)


def test_infinite_ese_serialized_as_string(tmp_path, capsys):
    # one study: the intercept has no finite variance
    csv = write_rows(tmp_path / "k1.csv", ["1,1,0.3", "1,0,-0.2", "1,1,1.5", "1,0,0.9", "1,1,-0.4", "1,0,-1.1"])
    out = tmp_path / "k1.json"
    code = main(["fit", str(csv), "--out", str(out)])
    assert code == 4
    doc = json.loads(out.read_text())
    assert doc["ese"][0] == "inf"
    assert doc["cov"][0][1] is None
    assert "unbounded" in capsys.readouterr().out


def test_budget_exit_code(a1_csv, capsys):
    assert main(["fit", str(a1_csv), "--max-iters", "1"]) == 3
    assert "budget" in capsys.readouterr().out


def test_zero_case_study_named(tmp_path, capsys):
    csv = write_rows(tmp_path / "bad.csv", ["1,1,0.1", "1,0,0.2", "2,0,0.3", "2,0,0.4"])
    assert main(["fit", str(csv)]) == 2
    assert "study 2 has no cases" in capsys.readouterr().err
    with pytest.raises(DataError, match="study 2"):
        read_csv(csv)


def test_malformed_row_numbered(tmp_path, capsys):
    csv = write_rows(tmp_path / "bad.csv", ["1,1,0.1", "1,0,abc", "1,0,0.2"])
    assert main(["fit", str(csv)]) == 2
    assert "bad.csv:3" in capsys.readouterr().err


@pytest.mark.parametrize(
    "rows, match",
    [
        (["1,2,0.1"], "y must be 0 or 1"),
        (["1,1,0.1,4"], "expected 3 fields"),
        (["1,1,nan"], "non-finite"),
        (["2,1,0.1", "2,0,0.2"], "labels must be 1..K"),
    ],
)
def test_read_csv_errors(tmp_path, rows, match):
    with pytest.raises(DataError, match=match):
        read_csv(write_rows(tmp_path / "bad.csv", rows))


def test_bad_header(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("study,case,x1\n1,1,0.1\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        read_csv(path)


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "nope.csv")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_odds_ratio_table(a1_csv, capsys):
    main(["fit", str(a1_csv), "--odds-ratios"])
    text = capsys.readouterr().out
    assert "odds ratios" in text and "single study" in text


# -- diagnose -------------------------------------------------------------------


def generated(tmp_path, name):
    path = tmp_path / f"{name}.csv"
    main(["generate", name, "--out", str(path)])
    return path


def test_diagnose_identifiable(a1_csv, capsys):
    assert main(["diagnose", str(a1_csv)]) == 0
    assert "alpha_1: identifiable" in capsys.readouterr().out


def test_diagnose_a3(tmp_path, capsys):
    code = main(["diagnose", str(generated(tmp_path, "a3"))])
    text = capsys.readouterr().out
    assert "alpha_2: not-identifiable" in text
    assert "alpha_1: identifiable" in text
    assert code in (3, 4)


def test_diagnose_a6_degenerate(tmp_path, capsys):
    assert main(["diagnose", str(generated(tmp_path, "a6"))]) == 4
    assert "equal-models" in capsys.readouterr().out


# -- simulate -------------------------------------------------------------------


def test_simulate_single_rep_prints_na(capsys):
    assert main(["simulate", "a1", "--reps", "1"]) == 0
    assert "NA" in capsys.readouterr().out


@pytest.mark.parametrize("suffix", [".tsv", ".json"])
def test_simulate_writes_metrics(tmp_path, capsys, suffix):
    out = tmp_path / f"m{suffix}"
    assert main(["simulate", "b1", "--reps", "2", "--estimators", "combined,prospective", "--out", str(out)]) == 0
    text = out.read_text()
    if suffix == ".json":
        assert set(json.loads(text)) == {"combined", "prospective"}
    else:
        assert text.startswith("scenario\testimator\tparameter")
    assert "prospective (unknown f)" in capsys.readouterr().out


def test_simulate_unknown_scenario(capsys):
    assert main(["simulate", "zz"]) == 2
    assert "error" in capsys.readouterr().err


def test_simulate_rejects_zero_reps():
    with pytest.raises(SystemExit) as err:
        main(["simulate", "a1", "--reps", "0"])
    assert err.value.code == 2


def test_generate_seed_changes_data(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["generate", "b1", "--out", str(a)])
    main(["generate", "b1", "--seed", "99", "--out", str(b)])
    assert a.read_text() != b.read_text()


# -- three studies, six covariates ----------------------------------------------


def test_three_study_pooling_tightens_slopes(tmp_path, capsys):
    # control/case splits 177/20, 177/12 and 179/24
    s = Scenario(
        "three",
        (-2.0, -2.5, -1.8),
        ((0.5, -0.3, 0.2, 0.4, 0.0, -0.2), (0.6, -0.2, 0.1, 0.3, 0.1, -0.3), (0.4, -0.4, 0.3, 0.5, -0.1, -0.1)),
        (20, 12, 24),
        (177, 177, 179),
    )
    data = simulate_data(s, 1)
    path = tmp_path / "three.csv"
    write_csv(data, path)
    out = tmp_path / "three.json"
    # weak slopes may leave an intercept flagged, which exits 4
    assert main(["fit", str(path), "--odds-ratios", "--out", str(out)]) in (0, 4)
    assert "beta_3_6" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert doc["converged"]
    ese = np.array(doc["ese"][3:], dtype=float).reshape(3, 6)
    single = np.array([prospective_fit(st).ese[1:] for st in data.studies])
    # borrowing the covariate distribution across studies shrinks most slope errors
    assert np.median(ese / single) < 1
    assert np.mean(ese < single) > 0.5
