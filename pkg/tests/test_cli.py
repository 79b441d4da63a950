import csv
import json
import math
import os

import numpy as np
import pytest

from bbfit.cli import EXIT_ENGINE, EXIT_IO, EXIT_OK, OUTPUT_ENV, config_hash, main, validate_config
from bbfit.datastore import ColumnStore
from bbfit.exceptions import ConfigError


def write_config(path, config):
    path.write_text(json.dumps(config))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_data_csv(path, columns):
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[c] for c in names)):
            w.writerow([repr(float(v)) for v in row])
    return str(path)


SIM = {"distribution": "NO", "n": 3000, "nnoise": 2, "n_validation": 1000}


@pytest.fixture(scope="module")
def fitted_run(tmp_path_factory):
    """simulate -> fit (two-stage) -> evaluate on a small scenario."""
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d / "run.json", {
        "seed": 3, "output": "out", "data": {"simulate": SIM},
        "batches": {"T": 40, "size": 1000},
    })
    codes = [main([cmd, cfg]) for cmd in ("simulate", "fit", "evaluate")]
    return d, cfg, codes


class TestSchema:
    def test_valid_minimal(self):
        assert validate_config({}) == {}

    def test_invalid_rho_names_field(self):
        with pytest.raises(ConfigError) as err:
            validate_config({"data": {"simulate": {"rho": 1.5}}})
        assert err.value.pointer == "/data/simulate/rho"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as err:
            validate_config({"engine": {"step": 0.1}})
        assert err.value.pointer == "/engine"

    def test_bad_policy(self):
        with pytest.raises(ConfigError) as err:
            validate_config({"engine": {"policy": "greedy"}})
        assert err.value.pointer == "/engine/policy"

    def test_hash_is_order_independent(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


class TestSimulate:
    def test_files_and_columns(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {
            "seed": 1, "output": "out",
            "data": {"simulate": {"distribution": "NO", "n": 1000, "nnoise": 0, "rho": 0}},
        })
        assert main(["simulate", cfg]) == EXIT_OK
        store = ColumnStore.open(str(tmp_path / "out" / "train.bbfc"))
        assert store.n_rows == 1000
        base = ["y", "x1", "x2", "x3", "x4", "lon", "lat"]
        assert store.names[:7] == base
        assert all(c.startswith("true_") for c in store.names[7:])
        assert "true_eta_mu" in store.names and "true_eta_sigma" in store.names
        assert not (tmp_path / "out" / "validation.bbfc").exists()
        out = capsys.readouterr().out
        assert "n=1000" in out and "seed=" in out

    def test_invalid_rho_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"data": {"simulate": {"rho": 1.5}}})
        assert main(["simulate", cfg]) == EXIT_IO
        assert "/data/simulate/rho" in capsys.readouterr().err
        assert not (tmp_path / "bbfit-output").exists()

    def test_deterministic_bitwise(self, tmp_path):
        cfg = {"seed": 11, "data": {"simulate": {"n": 500, "nnoise": 1, "n_validation": 100}}}
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["simulate", path, "--output", str(tmp_path / "a")]) == EXIT_OK
        assert main(["simulate", path, "--output", str(tmp_path / "b")]) == EXIT_OK
        for name in ("train.bbfc", "validation.bbfc", "truth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_flag_changes_data(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"seed": 1, "data": {"simulate": {"n": 200}}})
        main(["simulate", path, "--output", str(tmp_path / "a")])
        main(["simulate", path, "--output", str(tmp_path / "b"), "--seed", "2"])
        assert (tmp_path / "a" / "train.bbfc").read_bytes() != (tmp_path / "b" / "train.bbfc").read_bytes()
        man = json.loads((tmp_path / "b" / "manifest_simulate.json").read_text())
        assert man["seeds"]["master"] == 2 and man["config"]["seed"] == 2

    def test_appendix_scenario(self, tmp_path):
        path = write_config(tmp_path / "c.json", {
            "data": {"simulate": {"scenario": "appendix", "n": 300}}})
        assert main(["simulate", path]) == EXIT_OK
        store = ColumnStore.open(str(tmp_path / "bbfit-output" / "train.bbfc"))
        assert {"x5", "x6"} <= set(store.names)

    def test_env_output_dir(self, tmp_path, monkeypatch):
        path = write_config(tmp_path / "c.json", {"output": "ignored", "data": {"simulate": {"n": 100}}})
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["simulate", path]) == EXIT_OK
        assert (tmp_path / "env" / "train.bbfc").exists()
        assert not (tmp_path / "ignored").exists()
        # the flag wins over the environment
        assert main(["simulate", path, "--output", str(tmp_path / "flag")]) == EXIT_OK
        assert (tmp_path / "flag" / "train.bbfc").exists()


class TestIngest:
    def test_csv_round_trip(self, tmp_path):
        cols = {"y": [1.5, -2.25, 3.0], "x": [0.1, 0.2, 1e-300]}
        write_data_csv(tmp_path / "d.csv", cols)
        path = write_config(tmp_path / "c.json", {"output": "out", "data": {"csv": "d.csv"}})
        assert main(["ingest", path]) == EXIT_OK
        store = ColumnStore.open(str(tmp_path / "out" / "train.bbfc"))
        for c, v in cols.items():
            np.testing.assert_array_equal(store.column(c), v)
        assert (tmp_path / "out" / "manifest_ingest.json").exists()

    def test_standardize(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        write_data_csv(tmp_path / "d.csv", {"y": rng.normal(size=50), "x": x})
        write_data_csv(tmp_path / "v.csv", {"y": [0.0, 0.0], "x": [x.max() + 1, x.min() - 1]})
        path = write_config(tmp_path / "c.json", {"output": "out", "data": {
            "csv": "d.csv", "validation_csv": "v.csv", "standardize": ["x"]}})
        assert main(["ingest", path]) == EXIT_OK
        tr = ColumnStore.open(str(tmp_path / "out" / "train.bbfc")).column("x")
        np.testing.assert_allclose(np.sort(tr), np.arange(1, 51) / 50)
        va = ColumnStore.open(str(tmp_path / "out" / "validation.bbfc")).column("x")
        np.testing.assert_allclose(va, [1.0, 1.0 / 51])
        assert "x" in json.loads((tmp_path / "out" / "ecdf.json").read_text())

    def test_missing_csv(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {"data": {"csv": "nope.csv"}})
        assert main(["ingest", path]) == EXIT_IO
        assert "nope.csv" in capsys.readouterr().err

    def test_non_numeric(self, tmp_path, capsys):
        (tmp_path / "d.csv").write_text("y,g\n1,a\n2,b\n")
        path = write_config(tmp_path / "c.json", {"data": {"csv": "d.csv"}})
        assert main(["ingest", path]) == EXIT_IO
        assert "'g'" in capsys.readouterr().err

    def test_ingest_without_csv_key(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {})
        assert main(["ingest", path]) == EXIT_IO
        assert "/data/csv" in capsys.readouterr().err


class TestFit:
    def test_pipeline_exit_codes(self, fitted_run):
        _, _, codes = fitted_run
        assert codes == [EXIT_OK, EXIT_OK, EXIT_OK]

    def test_outputs(self, fitted_run):
        d, _, _ = fitted_run
        out = d / "out"
        for name in ("selection.csv", "model.json", "coefficients.csv", "beta_paths.csv",
                     "tau_paths.csv", "contributions.csv", "criterion.csv",
                     "boost_beta_paths.csv", "boost_contributions.csv", "manifest_fit.json"):
            assert (out / name).exists(), name
        header, rows = read_csv(out / "beta_paths.csv")
        assert len(rows) == 40 and header[0] == "iteration"

    def test_selection_table_and_noise_dropped(self, fitted_run):
        d, _, _ = fitted_run
        header, rows = read_csv(d / "out" / "selection.csv")
        assert header == ["term", "frequency", "selected"]
        table = {r[0]: (float(r[1]), int(r[2])) for r in rows}
        assert len(table) == 16
        assert all(0 <= f <= 1 for f, _ in table.values())
        model = json.loads((d / "out" / "model.json").read_text())
        assert not any("noise" in lab for lab in model["labels"])
        assert all(table[lab][1] == 1 for lab in model["labels"] if "Intercept" not in lab)
        assert len(model["beta"]) == sum(
            1 for r in read_csv(d / "out" / "coefficients.csv")[1])

    def test_manifest(self, fitted_run):
        d, cfg, _ = fitted_run
        man = json.loads((d / "out" / "manifest_fit.json").read_text())
        assert man["config_sha256"] == config_hash(json.loads(open(cfg).read()))
        assert set(man["seeds"]) >= {"master", "engine", "batches_boost", "batches_final"}
        assert man["versions"]["bbfit"]
        assert "model.json" in man["outputs"]

    def test_flag_overrides(self, fitted_run, tmp_path):
        d, cfg, _ = fitted_run
        out = tmp_path / "o"
        code = main(["fit", cfg, "--output", str(out), "--policy", "plain", "--iters", "5",
                     "--batch-size", "500", "--nu", "0.5", "--criterion", "BIC", "--seed", "4"])
        # the fresh output directory has no train store
        assert code == EXIT_IO
        os.makedirs(out)
        (out / "train.bbfc").write_bytes((d / "out" / "train.bbfc").read_bytes())
        code = main(["fit", cfg, "--output", str(out), "--policy", "plain", "--iters", "5",
                     "--batch-size", "500", "--nu", "0.5", "--criterion", "BIC", "--seed", "4"])
        assert code == EXIT_OK
        man = json.loads((out / "manifest_fit.json").read_text())
        assert man["config"]["engine"] == {"policy": "plain", "nu": 0.5, "criterion": "BIC"}
        assert man["config"]["batches"]["T"] == 5 and man["config"]["batches"]["size"] == 500
        assert len(read_csv(out / "beta_paths.csv")[1]) == 5
        assert not (out / "boost_beta_paths.csv").exists()

    def test_fit_deterministic(self, fitted_run, tmp_path):
        d, cfg, _ = fitted_run
        out = tmp_path / "o"
        os.makedirs(out)
        (out / "train.bbfc").write_bytes((d / "out" / "train.bbfc").read_bytes())
        assert main(["fit", cfg, "--output", str(out)]) == EXIT_OK
        for name in ("model.json", "beta_paths.csv", "selection.csv"):
            assert (out / name).read_bytes() == (d / "out" / name).read_bytes()

    def test_plain_intercept_only_matches_mle(self, tmp_path):
        rng = np.random.default_rng(5)
        y = rng.normal(3.0, 2.0, size=5000)
        write_data_csv(tmp_path / "d.csv", {"y": y})
        path = write_config(tmp_path / "c.json", {
            "output": "out", "data": {"csv": "d.csv"},
            "model": {"family": "NO", "terms": {"mu": [], "sigma": []}},
            "engine": {"policy": "plain", "nu": 0.1}, "batches": {"T": 200, "size": 1000}})
        assert main(["ingest", path]) == EXIT_OK
        assert main(["fit", path]) == EXIT_OK
        beta = json.loads((tmp_path / "out" / "model.json").read_text())["beta"]
        mu_hat, sigma_hat = beta[0], math.exp(beta[1] / 2)  # log(sigma^2) link
        assert abs(mu_hat - y.mean()) <= 0.02 * abs(y.mean())
        assert abs(sigma_hat - y.std()) <= 0.02 * y.std()

    def test_missing_data_file(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {"data": {"train": "absent.bbfc"}})
        assert main(["fit", path]) == EXIT_IO
        assert "absent.bbfc" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["fit", str(tmp_path / "none.json")]) == EXIT_IO

    def test_unknown_covariate(self, fitted_run, tmp_path):
        d, _, _ = fitted_run
        path = write_config(tmp_path / "c.json", {
            "data": {"train": str(d / "out" / "train.bbfc")},
            "model": {"terms": {"mu": ["s(nothere)"]}}, "output": "o"})
        assert main(["fit", path]) == EXIT_IO

    def test_engine_failure_exit_code(self, tmp_path, capsys):
        # negative responses are outside the gamma support
        write_data_csv(tmp_path / "d.csv", {"y": [-1.0, 2.0, 3.0, 4.0], "x": [0.0, 1.0, 2.0, 3.0]})
        path = write_config(tmp_path / "c.json", {
            "output": "out", "data": {"csv": "d.csv"},
            "model": {"family": "GA", "terms": {"mu": ["x"]}}, "batches": {"T": 3, "size": 4}})
        assert main(["ingest", path]) == EXIT_OK
        assert main(["fit", path]) == EXIT_ENGINE
        assert "fit error" in capsys.readouterr().err

    def test_bad_flag_value(self, fitted_run):
        _, cfg, _ = fitted_run
        assert main(["fit", cfg, "--nu", "2.0"]) == EXIT_IO
        assert main(["fit", cfg, "--policy", "nope"]) == EXIT_IO


class TestEvaluate:
    def test_report_and_diagnostics(self, fitted_run):
        d, _, _ = fitted_run
        out = d / "out"
        report = json.loads((out / "report.json").read_text())
        assert report["n"] == 1000
        assert set(report["mse_predictor"]) == {"mu", "sigma"}
        assert report["mse_effect"] and report["crps"] > 0
        assert report["fp_rate"] == {"mu": 0.0, "sigma": 0.0}
        header, rows = read_csv(out / "worm.csv")
        assert header == ["z", "deviation"] and len(rows) == 1000
        header, rows = read_csv(out / "pit.csv")
        assert header == ["lower", "upper", "count"] and sum(int(r[2]) for r in rows) == 1000
        header, rows = read_csv(out / "contribution_paths.csv")
        vals = np.array([[float(v) for v in r[1:]] for r in rows])
        assert len(rows) == 40 and np.all(np.diff(vals, axis=0) >= -1e-12)

    def test_rerun_identical_json(self, fitted_run):
        d, cfg, _ = fitted_run
        before = (d / "out" / "report.json").read_bytes()
        assert main(["evaluate", cfg]) == EXIT_OK
        assert (d / "out" / "report.json").read_bytes() == before

    def test_no_truth_warns_and_succeeds(self, fitted_run, tmp_path, capsys):
        d, _, _ = fitted_run
        val = ColumnStore.open(str(d / "out" / "validation.bbfc"))
        keep = [c for c in val.names if not c.startswith("true_")]
        val.select(keep).save(str(tmp_path / "plain.bbfc"))
        out = tmp_path / "o"
        os.makedirs(out)
        (out / "model.json").write_bytes((d / "out" / "model.json").read_bytes())
        path = write_config(tmp_path / "c.json", {
            "output": str(out), "data": {"validation": "plain.bbfc"}})
        assert main(["evaluate", path]) == EXIT_OK
        assert "effect MSE omitted" in capsys.readouterr().err
        report = json.loads((out / "report.json").read_text())
        assert report["mse_effect"] is None and report["mse_predictor"] == {}

    def test_without_fit(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {"output": "o"})
        assert main(["evaluate", path]) == EXIT_IO
        assert "bbfit fit" in capsys.readouterr().err

    def test_incompatible_store(self, fitted_run, tmp_path, capsys):
        d, _, _ = fitted_run
        ColumnStore({"y": np.zeros(3)}).save(str(tmp_path / "y.bbfc"))
        out = tmp_path / "o"
        os.makedirs(out)
        (out / "model.json").write_bytes((d / "out" / "model.json").read_bytes())
        path = write_config(tmp_path / "c.json", {"output": str(out), "data": {"validation": "y.bbfc"}})
        assert main(["evaluate", path]) == EXIT_IO
        assert "lacks column" in capsys.readouterr().err


class TestEntryPoint:
    def test_no_subcommand(self):
        assert main([]) == EXIT_IO

    def test_version(self, capsys):
        assert main(["--version"]) == EXIT_OK
        assert "bbfit" in capsys.readouterr().out
