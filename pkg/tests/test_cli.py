import csv
import json

import pytest

from dcvkt.cli import main
from dcvkt.synth import SyntheticSpec, default_truth, write_synthetic


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--n", "400", "--j", "6", "--seed", "3", "--out-dir", str(data)]) == 0
    fit = root / "fit"
    code = main(["estimate", "--data", str(data), "--r", "50", "--out-dir", str(fit)])
    return root, data, fit, code


def test_synth_writes_market(workspace):
    _, data, _, _ = workspace
    for name in ("vehicles.csv", "households.csv", "truth.json", "market.toml", "manifest.json"):
        assert (data / name).exists()


def test_estimate_outputs(workspace):
    _, _, fit, code = workspace
    assert code == 0
    assert {p.name for p in fit.iterdir()} == {"estimation.json", "coefficients.csv",
                                               "manifest.json"}
    table = rows(fit / "coefficients.csv")
    names = [r["parameter"] for r in table]
    assert "mu_beta" in names and "loglikelihood" in names
    manifest = json.loads((fit / "manifest.json").read_text())
    assert manifest["R"] == 50 and manifest["seed"] == 0
    assert set(manifest["inputs"]) >= {"vehicles", "households", "config"}


def test_rerun_bit_identical(workspace, tmp_path):
    _, data, fit, _ = workspace
    assert main(["estimate", "--data", str(data), "--r", "50", "--out-dir", str(tmp_path)]) == 0
    for name in ("estimation.json", "coefficients.csv"):
        assert (tmp_path / name).read_bytes() == (fit / name).read_bytes()


def test_manifests_differ_only_in_draws(workspace, tmp_path):
    _, data, fit, _ = workspace
    other = tmp_path / "r100"
    main(["estimate", "--data", str(data), "--r", "100", "--out-dir", str(other)])
    a = json.loads((fit / "manifest.json").read_text())
    b = json.loads((other / "manifest.json").read_text())
    differing = {k for k in a if a[k] != b[k]}
    assert differing <= {"R", "timestamp", "output_digests"}
    assert "R" in differing


def test_missing_file_is_io_error(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    code = main(["estimate", "--vehicles", str(missing), "--households", str(missing),
                 "--config", "configs/china.toml", "--out-dir", str(tmp_path)])
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    assert main(["estimate", "--bogus"]) == 2


def test_global_flags_either_side(workspace, tmp_path):
    _, data, fit, _ = workspace
    out = tmp_path / "g"
    code = main(["--r", "50", "--out-dir", str(out), "check-gradient", "--data", str(data),
                 "--points", "1"])
    assert code == 0
    assert float(rows(out / "gradient_check.csv")[0]["max_relative_error"]) <= 1e-6


def test_elasticity(workspace, tmp_path):
    _, data, fit, _ = workspace
    code = main(["elasticity", "--data", str(data), "--model", str(fit / "estimation.json"),
                 "--se-draws", "0", "--out-dir", str(tmp_path)])
    assert code == 0
    long_rows = rows(tmp_path / "long_run.csv")
    assert {r["kind"] for r in long_rows} == {"fuel_price", "income"}
    seg = rows(tmp_path / "segment_fuel_economy.csv")
    assert seg[-1]["segment"] == "Sales-weighted average"
    notes = json.loads((tmp_path / "manifest.json").read_text())["notes"]
    assert any("outside good" in n for n in notes)


def test_feebate_zero_rate(workspace, tmp_path):
    _, data, fit, _ = workspace
    code = main(["feebate", "--data", str(data), "--model", str(fit / "estimation.json"),
                 "--rebate-rate", "0", "--out-dir", str(tmp_path)])
    assert code == 0
    for r in rows(tmp_path / "feebate_segments.csv"):
        assert float(r["share_change_pct"]) == 0.0 and float(r["fuel_change_pct"]) == 0.0
    summary = rows(tmp_path / "feebate_summary.csv")[0]
    assert float(summary["fuel_savings_pct"]) == 0.0


def test_feebate_solves(workspace, tmp_path):
    _, data, fit, _ = workspace
    summary_path = tmp_path / "s.csv"
    code = main(["feebate", "--data", str(data), "--model", str(fit / "estimation.json"),
                 "--rebate-rate-usd", "1000", "--summary-out", str(summary_path),
                 "--out-dir", str(tmp_path)])
    assert code == 0
    summary = rows(summary_path)[0]
    assert float(summary["residual_share"]) <= 1e-3
    assert float(summary["rebate_rate_usd"]) == pytest.approx(1000.0)


def test_feebate_structure_error(workspace, tmp_path):
    _, data, fit, _ = workspace
    code = main(["feebate", "--data", str(data), "--model", str(fit / "estimation.json"),
                 "--anchor", "1", "--rebate-rate", "0.01", "--out-dir", str(tmp_path)])
    assert code == 7


def test_fit_report_empty_filter(workspace, tmp_path):
    _, data, fit, _ = workspace
    code = main(["fit-report", "--data", str(data), "--model", str(fit / "estimation.json"),
                 "--segments", ",", "--out-dir", str(tmp_path)])
    assert code == 2


def test_fit_report_single_segment(tmp_path):
    spec = SyntheticSpec(default_truth(2, 1), N=200, J=4, seed=5, n_makes=2, n_segments=1)
    data = tmp_path / "data"
    write_synthetic(spec, data)
    assert main(["estimate", "--data", str(data), "--r", "50", "--out-dir", str(tmp_path)]) == 0
    code = main(["fit-report", "--data", str(data), "--model", str(tmp_path / "estimation.json"),
                 "--out-dir", str(tmp_path)])
    assert code == 0
    (row,) = rows(tmp_path / "fit_segments.csv")
    assert float(row["observed_share"]) == pytest.approx(1.0)
    assert float(row["predicted_share"]) == pytest.approx(1.0)
    assert int(row["observed_households"]) == 200
