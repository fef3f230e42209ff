import json

import numpy as np
import pytest

from ncve import write_csv
from ncve.bridge import bridge_from_json
from ncve.cli import main
from ncve.errors import (
    ConfigError,
    ConvergenceError,
    DegenerateDataError,
    IdentifiabilityError,
    SchemaError,
)
from ncve.simulation import default_params, generate_binary_sample


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    sample = generate_binary_sample(default_params("binary"), 200_000, 42)
    write_csv(sample, path)
    return path


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


class TestEstimate:
    def test_happy_path(self, data_csv, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["estimate", "--data", str(data_csv),
                     "--config", "roles-binary.toml", "--out", str(out)])
        assert code == 0
        doc = read_json(out)
        assert doc["schema_version"] == "1"
        assert doc["estimator"] == "nc"
        assert doc["scale"] == "risk-ratio"
        assert doc["ci_lower"] < doc["ve_hat"] < doc["ci_upper"]
        stdout = capsys.readouterr().out
        assert "VE" in stdout or "effectiveness" in stdout
        assert not list(tmp_path.glob("*.tmp"))

    def test_manifest_written_next_to_report(self, data_csv, tmp_path):
        out = tmp_path / "report.json"
        main(["estimate", "--data", str(data_csv),
              "--config", "roles-binary.toml", "--out", str(out)])
        manifest = read_json(tmp_path / "report-manifest.json")
        assert manifest["schema_version"] == "1"
        assert manifest["command"][0] == "ncve"
        assert "report.json" in manifest["outputs"]

    def test_logistic_reports_odds_ratio(self, data_csv, tmp_path):
        out = tmp_path / "r.json"
        code = main(["estimate", "--data", str(data_csv), "--config",
                     "roles-binary.toml", "--estimator", "logistic",
                     "--out", str(out)])
        assert code == 0
        assert read_json(out)["scale"] == "odds-ratio"

    def test_conditional_estimator_runs(self, data_csv, tmp_path):
        out = tmp_path / "r.json"
        code = main(["estimate", "--data", str(data_csv), "--config",
                     "roles-binary.toml", "--estimator", "nc-conditional",
                     "--out", str(out)])
        assert code == 0
        assert read_json(out)["estimator"] == "nc-conditional"

    def test_explicit_bridge_matches_auto(self, data_csv, tmp_path):
        out_a = tmp_path / "a.json"
        out_b = tmp_path / "b.json"
        main(["estimate", "--data", str(data_csv), "--config",
              "roles-binary.toml", "--out", str(out_a)])
        main(["estimate", "--data", str(data_csv), "--config",
              "roles-binary.toml", "--bridge", "saturated", "--out", str(out_b)])
        assert read_json(out_a)["beta_hat"] == read_json(out_b)["beta_hat"]

    def test_bridge_out_round_trips(self, data_csv, tmp_path):
        out = tmp_path / "r.json"
        bridge_path = tmp_path / "bridge.json"
        main(["estimate", "--data", str(data_csv), "--config",
              "roles-binary.toml", "--out", str(out),
              "--bridge-out", str(bridge_path)])
        fit = bridge_from_json(read_json(bridge_path))
        assert fit.eval(1.0, 0.0) > 0.0

    def test_missing_data_file(self, tmp_path, capsys):
        code = main(["estimate", "--data", str(tmp_path / "nope.csv"),
                     "--config", "roles-binary.toml"])
        assert code == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_malformed_config(self, data_csv, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[roles\ntreatment =")
        assert main(["estimate", "--data", str(data_csv),
                     "--config", str(bad)]) == 2

    def test_config_missing_required_role(self, data_csv, tmp_path):
        bad = tmp_path / "norole.toml"
        bad.write_text('[roles]\ntreatment = "A"\n')
        assert main(["estimate", "--data", str(data_csv),
                     "--config", str(bad)]) == 2

    def test_constant_nce_is_unidentified(self, data_csv, tmp_path):
        sample = generate_binary_sample(default_params("binary"), 200_000, 42)
        z = np.zeros_like(sample.z)
        from ncve import TndSample
        flat = TndSample(sample.a, sample.y, z, sample.w, sample.x, sample.roles)
        path = tmp_path / "flat.csv"
        write_csv(flat, path)
        code = main(["estimate", "--data", str(path),
                     "--config", "roles-binary.toml"])
        assert code == 3

    def test_no_vaccinated_cases_exits_five(self, tmp_path):
        sample = generate_binary_sample(default_params("binary"), 200_000, 42)
        y = np.where(sample.a == 1.0, 0.0, sample.y)
        from ncve import TndSample
        hollow = TndSample(sample.a, y, sample.z, sample.w, sample.x, sample.roles)
        path = tmp_path / "hollow.csv"
        write_csv(hollow, path)
        code = main(["estimate", "--data", str(path),
                     "--config", "roles-binary.toml"])
        assert code == 5


class TestSimulate:
    def test_smoke_config_with_overrides(self, tmp_path, capsys):
        code = main(["simulate", "--config", "smoke.toml",
                     "--out-dir", str(tmp_path), "--replications", "2",
                     "--seed", "31"])
        assert code == 0
        summary = read_json(tmp_path / "smoke-summary.json")
        assert summary["replications"] == 2
        assert summary["seed"] == 31
        manifest = read_json(tmp_path / "smoke-manifest.json")
        assert manifest["seed"] == 31
        assert "smoke-summary.csv" in manifest["outputs"]
        assert (tmp_path / "smoke-summary.csv").exists()
        assert not list(tmp_path.glob("*.tmp"))
        assert "Mean bias" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ["simulate", "--config", "smoke.toml", "--replications", "2"]
        main(args + ["--out-dir", str(tmp_path / "one")])
        main(args + ["--out-dir", str(tmp_path / "two")])
        first = (tmp_path / "one" / "smoke-summary.csv").read_bytes()
        second = (tmp_path / "two" / "smoke-summary.csv").read_bytes()
        assert first == second

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--config", "no-such-scenario.toml",
                     "--out-dir", str(tmp_path)]) == 2

    def test_config_with_unknown_key(self, tmp_path):
        cfg = tmp_path / "odd.toml"
        cfg.write_text('[scenario]\nsetting = "binary"\nname = "odd"\n'
                       'banana = 3\n')
        assert main(["simulate", "--config", str(cfg),
                     "--out-dir", str(tmp_path)]) == 2


class TestReproduce:
    def test_small_override_run(self, tmp_path, capsys):
        code = main(["reproduce", "fig2a", "--out-dir", str(tmp_path),
                     "--replications", "2", "--n-population", "250000"])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "Mean bias" in stdout
        assert "Coverage" in stdout
        assert (tmp_path / "binary-summary.csv").exists()
        manifest = read_json(tmp_path / "binary-manifest.json")
        assert manifest["command"][1] == "reproduce"

    def test_unknown_tag(self, tmp_path, capsys):
        assert main(["reproduce", "fig9z", "--out-dir", str(tmp_path)]) == 2
        assert "fig9z" in capsys.readouterr().err


def test_exit_code_ladder():
    assert SchemaError.exit_code == 2
    assert ConfigError.exit_code == 2
    assert IdentifiabilityError.exit_code == 3
    assert ConvergenceError.exit_code == 4
    assert DegenerateDataError.exit_code == 5
