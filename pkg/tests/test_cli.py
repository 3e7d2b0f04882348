import json
import os

import numpy as np

from ptdecouple.cli import main
from ptdecouple.model import load_model


def test_generate_writes_model(tmp_path):
    out = str(tmp_path)
    code = main([
        "generate", "-m", "2", "-n", "2", "--ranks", "2,2", "--degrees", "3,2",
        "--seed", "4", "--out", out,
    ])
    assert code == 0
    path = tmp_path / "system_m2_n2_s4.json"
    model = load_model(path)
    assert model.n_inputs == 2 and model.n_outputs == 2
    assert model.degrees == (3, 2)


def test_generate_layers_mismatch_is_config_error(tmp_path):
    code = main([
        "generate", "-m", "2", "-n", "2", "--ranks", "2,2", "--degrees", "3,2",
        "--layers", "3", "--out", str(tmp_path),
    ])
    assert code == 2


def test_generate_missing_ranks_is_config_error(tmp_path):
    code = main(["generate", "-m", "2", "-n", "2", "--out", str(tmp_path)])
    assert code == 2


def test_decouple_builtin(tmp_path):
    out = str(tmp_path)
    code = main([
        "decouple", "--target", "f1", "--ranks", "2,2", "--degrees", "5,2",
        "--samples", "20", "--seed", "1", "--max-iters", "10", "--min-iters", "3",
        "--max-stages", "2", "--strategy", "constr", "--out", out,
    ])
    assert code == 0
    model = load_model(tmp_path / "decoupled_model.json")
    assert model.degrees == (5, 2)
    report = json.loads((tmp_path / "tuner_report.json").read_text())
    assert "stages" in report and "selected" in report


def test_decouple_unknown_target(tmp_path):
    code = main([
        "decouple", "--target", "f9", "--ranks", "2,2", "--degrees", "5,2",
        "--out", str(tmp_path),
    ])
    assert code == 2


def test_decouple_model_file_target(tmp_path):
    gen_out = str(tmp_path / "gen")
    assert main([
        "generate", "-m", "2", "-n", "2", "--ranks", "2,2", "--degrees", "2,2",
        "--seed", "6", "--out", gen_out,
    ]) == 0
    model_path = os.path.join(gen_out, "system_m2_n2_s6.json")
    out = str(tmp_path / "fit")
    code = main([
        "decouple", "--target", model_path, "--ranks", "2,2", "--degrees", "2,2",
        "--samples", "15", "--max-iters", "8", "--min-iters", "3",
        "--max-stages", "1", "--out", out,
    ])
    assert code == 0


def test_experiment_from_flags(tmp_path):
    out = str(tmp_path)
    code = main([
        "experiment", "--target", "f1", "--ranks", "2,2", "--degrees", "5,2",
        "--samples", "15", "--runs", "2", "--seed", "3", "--max-iters", "8",
        "--min-iters", "3", "--max-stages", "2", "--out", out,
    ])
    assert code == 0
    csv_text = (tmp_path / "runs.csv").read_text()
    assert csv_text.splitlines()[0].startswith("run_id,seed,lambda_selected")
    assert len(csv_text.splitlines()) == 3
    agg = json.loads((tmp_path / "aggregates.json").read_text())
    assert agg["aggregates"]["runs"] == 2


def test_experiment_from_config_file(tmp_path):
    cfg = {
        "target": {"builtin": "f2"},
        "samples": 12,
        "runs": 1,
        "seed": 7,
        "max_stages": 1,
        "solver": {
            "ranks": [2, 2],
            "degrees": [3, 3],
            "min_iters": 3,
            "max_iters": 6,
            "patience": 10,
            "strategy": "proj",
        },
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = str(tmp_path / "results")
    code = main(["experiment", "--config", str(cfg_path), "--out", out])
    assert code == 0
    agg = json.loads((tmp_path / "results" / "aggregates.json").read_text())
    assert agg["config"]["solver"]["strategy"] == "proj"
    assert agg["config"]["n_samples"] == 12


def test_experiment_flag_overrides_config(tmp_path):
    cfg = {
        "target": {"builtin": "f1"},
        "runs": 1,
        "max_stages": 1,
        "solver": {"ranks": [2, 2], "degrees": [5, 2], "max_iters": 6,
                   "min_iters": 3, "patience": 10, "strategy": "proj"},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = str(tmp_path / "results")
    code = main([
        "experiment", "--config", str(cfg_path), "--strategy", "constr",
        "--samples", "10", "--out", out,
    ])
    assert code == 0
    agg = json.loads((tmp_path / "results" / "aggregates.json").read_text())
    assert agg["config"]["solver"]["strategy"] == "constr"
    assert agg["config"]["n_samples"] == 10


def test_experiment_missing_target_is_config_error(tmp_path):
    code = main(["experiment", "--ranks", "2,2", "--degrees", "5,2",
                 "--out", str(tmp_path)])
    assert code == 2


def test_experiment_bad_config_file_is_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["experiment", "--config", str(bad), "--out", str(tmp_path)])
    assert code == 2


def test_experiment_all_runs_failed_is_numerical_error(tmp_path):
    # constant second output: every run fails in the validation metric
    from ptdecouple.harness import DecoupledModel
    from ptdecouple.model import save_model

    model = DecoupledModel(
        weights=(np.ones((1, 2)), np.array([[1.0], [0.0]])),
        coeffs=(np.array([[0.0, 1.0, 0.5]]),),
    )
    path = tmp_path / "degenerate.json"
    save_model(path, model)
    code = main([
        "experiment", "--target", str(path), "--ranks", "1", "--degrees", "2",
        "--samples", "10", "--runs", "1", "--max-iters", "6", "--min-iters", "3",
        "--max-stages", "1", "--out", str(tmp_path / "res"),
    ])
    assert code == 3


def test_deterministic_cli_outputs(tmp_path):
    args = [
        "experiment", "--target", "f1", "--ranks", "2,2", "--degrees", "5,2",
        "--samples", "12", "--runs", "2", "--seed", "9", "--max-iters", "6",
        "--min-iters", "3", "--max-stages", "2",
    ]
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(args + ["--out", a]) == 0
    assert main(args + ["--out", b]) == 0
    assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()
