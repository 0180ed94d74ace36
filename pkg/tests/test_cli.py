"""End-to-end tests of the command-line interface."""

import json

import numpy as np
import pytest

from cfsurv.cli import (
    FitConfig,
    InputError,
    cmd_fit,
    main,
    read_dataset_csv,
    run_fit,
    write_dataset_csv,
)
from cfsurv.estimation import fit_two_step
from cfsurv.model import FirstStageFamily
from cfsurv.simulation import SimulationDesign, generate_dataset


@pytest.fixture(scope="module")
def design4_csv(tmp_path_factory):
    """A simulated design-4 dataset written to CSV (y already on log scale)."""
    design = SimulationDesign(design_id=4, n=800, replications=1, seed=42)
    data, v_true = generate_dataset(design, 0)
    path = tmp_path_factory.mktemp("data") / "design4.csv"
    write_dataset_csv(data, str(path), true_v=v_true)
    return str(path), data, v_true


def _fit_config(path, **overrides):
    base = dict(input_path=path, time_col="y", status_col="status",
                z_col="z", w_col="w", covariate_cols=["x1"])
    base.update(overrides)
    return FitConfig(**base)


class TestReadDataset:
    def test_round_trip_is_bitwise(self, design4_csv):
        path, data, v_true = design4_csv
        loaded, v = read_dataset_csv(_fit_config(path, v_col="v"))
        assert np.array_equal(loaded.y, data.y)
        assert np.array_equal(loaded.delta, data.delta)
        assert np.array_equal(loaded.x_tilde, data.x_tilde)
        assert np.array_equal(loaded.w_tilde, data.w_tilde)
        assert np.array_equal(loaded.z, data.z)
        assert np.array_equal(v, v_true)

    def test_missing_column(self, design4_csv):
        path, _, _ = design4_csv
        with pytest.raises(InputError, match="missing column"):
            read_dataset_csv(_fit_config(path, z_col="treatment"))

    def test_duplicate_columns(self, design4_csv):
        path, _, _ = design4_csv
        with pytest.raises(InputError, match="duplicates"):
            read_dataset_csv(_fit_config(path, w_col="z"))

    def test_bad_status_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,status,x1,w,z\n1.0,1,0.1,0.5,0.2\n"
                        "2.0,2,0.3,0.1,0.4\n")
        with pytest.raises(InputError, match="row 2"):
            read_dataset_csv(_fit_config(str(path)))

    def test_malformed_number_names_row_and_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,status,x1,w,z\n1.0,1,0.1,0.5,0.2\n"
                        "2.0,0,oops,0.1,0.4\n")
        with pytest.raises(InputError, match=r"row 2.*'x1'"):
            read_dataset_csv(_fit_config(str(path)))

    def test_missing_value_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,status,x1,w,z\n1.0,1,,0.5,0.2\n")
        with pytest.raises(InputError, match="missing value"):
            read_dataset_csv(_fit_config(str(path)))

    def test_nonpositive_time_under_log_transform(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,status,x1,w,z\n2.0,1,0.1,0.5,0.2\n"
                        "0.0,0,0.3,0.1,0.4\n")
        with pytest.raises(InputError, match="row 2.*positive"):
            read_dataset_csv(_fit_config(str(path), log_transform=True))

    def test_log_transform_applied(self, tmp_path):
        path = tmp_path / "ok.csv"
        path.write_text("t,status,x1,w,z\n7.389056098930650,1,0.1,0.5,0.2\n"
                        "1.0,0,0.3,0.1,0.4\n")
        data, _ = read_dataset_csv(
            _fit_config(str(path), time_col="t", log_transform=True))
        assert data.y[0] == pytest.approx(2.0, abs=1e-15)
        assert data.y[1] == 0.0


class TestCmdFit:
    def test_fit_matches_in_memory_bitwise(self, design4_csv):
        path, data, _ = design4_csv
        fit_cli, family = run_fit(_fit_config(path))
        assert family is FirstStageFamily.LOGIT  # inferred from binary z
        fit_mem = fit_two_step("logit", data)
        assert np.array_equal(fit_cli.estimates, fit_mem.estimates)
        assert np.array_equal(fit_cli.std_errors, fit_mem.std_errors)

    def test_exit_codes_for_input_errors(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,status,x1,w,z\n1.0,3,0.1,0.5,0.2\n")
        code = cmd_fit(_fit_config(str(path)))
        assert code == 2
        assert "row 1" in capsys.readouterr().err

    def test_missing_file_is_input_error(self, capsys):
        assert cmd_fit(_fit_config("/nonexistent/data.csv")) == 2

    def test_oracle_requires_v_col(self, design4_csv, capsys):
        path, _, _ = design4_csv
        assert cmd_fit(_fit_config(path, variant="oracle")) == 2
        assert "v-col" in capsys.readouterr().err

    def test_oracle_with_v_col(self, design4_csv, capsys):
        path, _, _ = design4_csv
        code = cmd_fit(_fit_config(path, variant="oracle", v_col="v"))
        assert code == 0
        out = capsys.readouterr().out
        assert "variant: oracle" in out

    def test_estimation_error_exit_code(self, tmp_path, capsys):
        # all rows censored: the joint likelihood cannot be fit
        rows = ["y,status,x1,w,z"] + [
            f"{0.1 * i},0,{0.01 * i},{i % 2},{(i + 1) % 2}" for i in range(40)]
        path = tmp_path / "cens.csv"
        path.write_text("\n".join(rows) + "\n")
        assert cmd_fit(_fit_config(str(path))) == 3
        assert "estimation error" in capsys.readouterr().err

    def test_text_report_shape(self, design4_csv, capsys):
        path, _, _ = design4_csv
        assert main(["fit", "--input", path, "--time-col", "y",
                     "--status-col", "status", "--z-col", "z", "--w-col", "w",
                     "--covariates", "x1"]) == 0
        out = capsys.readouterr().out
        assert "T equation" in out
        assert "C equation" in out
        assert "scale / dependence" in out
        for token in ("Intercept", "sigma_T", "sigma_C", "rho",
                      "z [alpha_T]", "control [lambda_T]"):
            assert token in out

    def test_naive_report_omits_control_rows(self, design4_csv, capsys):
        path, _, _ = design4_csv
        assert main(["fit", "--input", path, "--time-col", "y",
                     "--status-col", "status", "--z-col", "z", "--w-col", "w",
                     "--covariates", "x1", "--variant", "naive"]) == 0
        out = capsys.readouterr().out
        assert "lambda_T" not in out
        assert "rho" in out

    def test_json_report_schema(self, design4_csv, tmp_path, capsys):
        path, _, _ = design4_csv
        out_path = tmp_path / "report.json"
        code = main(["fit", "--input", path, "--time-col", "y",
                     "--status-col", "status", "--z-col", "z", "--w-col", "w",
                     "--covariates", "x1", "--output", str(out_path),
                     "--format", "json", "--seed", "5"])
        assert code == 0
        capsys.readouterr()
        payload = json.loads(out_path.read_text())
        assert set(payload) == {"variant", "n", "estimates", "std_errors",
                                "ci", "p_values", "loglik", "converged",
                                "seed", "version"}
        assert payload["seed"] == 5
        assert payload["converged"] is True
        assert set(payload["estimates"]) == set(payload["std_errors"])
        for lo_hi in payload["ci"].values():
            assert lo_hi[0] <= lo_hi[1]

    def test_csv_report(self, design4_csv, tmp_path, capsys):
        path, _, _ = design4_csv
        out_path = tmp_path / "report.csv"
        code = main(["fit", "--input", path, "--time-col", "y",
                     "--status-col", "status", "--z-col", "z", "--w-col", "w",
                     "--covariates", "x1", "--output", str(out_path),
                     "--format", "csv"])
        assert code == 0
        capsys.readouterr()
        lines = out_path.read_text().splitlines()
        assert lines[0] == "parameter,estimate,std_error,ci_lower,ci_upper,p_value"
        assert len(lines) == 12  # 11 parameters + header

    def test_family_inference_continuous_z(self, tmp_path):
        design = SimulationDesign(design_id=1, n=400, replications=1, seed=43)
        data, _ = generate_dataset(design, 0)
        path = tmp_path / "design1.csv"
        write_dataset_csv(data, str(path))
        fit, family = run_fit(_fit_config(str(path), variant="naive"))
        assert family is FirstStageFamily.LINEAR


class TestCmdSimulate:
    def test_reps_floor(self, capsys):
        code = main(["simulate", "--design", "4", "--n", "250", "--reps", "1"])
        assert code == 2
        assert "at least 2" in capsys.readouterr().err

    def test_invalid_design_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--design", "7", "--n", "250", "--reps", "5"])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_deterministic_csv_output(self, tmp_path, capsys):
        out_a = tmp_path / "a.csv"
        out_b = tmp_path / "b.csv"
        args = ["simulate", "--design", "4", "--n", "250", "--seed", "7",
                "--reps", "4", "--variants", "naive,two-step"]
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        capsys.readouterr()
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_stdout_table_and_json_out(self, tmp_path, capsys):
        out_path = tmp_path / "summary.json"
        code = main(["simulate", "--design", "2", "--n", "250", "--reps", "3",
                     "--seed", "3", "--variants", "oracle",
                     "--out", str(out_path), "--format", "json"])
        assert code == 0
        out = capsys.readouterr().out
        assert "design 2" in out
        assert "[oracle]" in out
        payload = json.loads(out_path.read_text())
        assert payload["design"] == 2
        assert payload["failures"] == {"oracle": 0}
        labels = [row["parameter"] for row in payload["stats"]["oracle"]]
        assert labels[:4] == ["β_{T,0}", "β_{T,1}", "α_T", "λ_T"]

    def test_unknown_variant_exits_2(self, capsys):
        code = main(["simulate", "--design", "1", "--n", "250", "--reps", "3",
                     "--variants", "bogus"])
        assert code == 2
        capsys.readouterr()
