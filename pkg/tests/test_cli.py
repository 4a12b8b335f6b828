import csv
import json

import numpy as np
import pytest

from restraj import cli
from restraj.schema import SchemaError, load_json, validate


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_payload(err):
    return json.loads(err.strip().splitlines()[-1])


def test_help_and_version(capsys):
    assert run(["--help"], capsys)[0] == 0
    assert run(["plan", "--help"], capsys)[0] == 0
    code, out, _ = run(["--version"], capsys)
    assert code == 0 and "restraj" in out


def test_usage_error_is_64(capsys):
    code, _, err = run(["plan", "--model"], capsys)
    assert code == 64
    assert error_payload(err)["exit_code"] == 64
    assert run(["no-such-command"], capsys)[0] == 64


def test_missing_file_is_2(tmp_path, capsys, configs):
    missing = tmp_path / "nope.json"
    code, _, err = run(["ocp", "--model", missing, "--spec", missing, "--out", tmp_path / "t.csv"],
                       capsys)
    assert code == 2
    payload = error_payload(err)
    assert payload["error"] == "missing-file" and str(missing) in payload["message"]


def test_schema_violation_is_3(tmp_path, capsys, configs):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "n": 1, "mass": [-1.0]}))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"tf": 1.0, "q0": [0.0], "qf": [0.5]}))
    code, _, err = run(["ocp", "--model", bad, "--spec", spec, "--out", tmp_path / "t.csv"], capsys)
    assert code == 3
    assert "schema" in error_payload(err)["message"]
    bad.write_text("{not json")
    assert run(["ocp", "--model", bad, "--spec", spec], capsys)[0] == 3


def test_dimension_mismatch_is_a_schema_error(tmp_path, capsys, configs):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"tf": 1.0, "q0": [0.0, 0.0], "qf": [0.5, 0.5]}))
    code, _, _ = run(["ocp", "--model", configs / "pendulum.json", "--spec", spec,
                      "--out", tmp_path / "t.csv"], capsys)
    assert code == 3


def test_shipped_configs_validate(configs):
    load_json("model", configs / "pendulum.json")
    load_json("model", configs / "two_link.json")
    for name in ("grid_pendulum.json", "grid_two_link.json", "outside_pendulum.json"):
        load_json("grid", configs / name)
    validate("spec", {"tf": 1.0, "q0": [0.0], "qf": [1.0]})
    validate("spec", {"specs": [{"tf": 1.0, "q0": [0.0], "qf": [1.0]}]})
    with pytest.raises(SchemaError, match="tf"):
        validate("spec", {"tf": -1.0, "q0": [0.0], "qf": [1.0]})
    with pytest.raises(SchemaError):
        validate("grid", {"name": "g", "tf": {"range": [1, 2], "count": 2}, "q0": [], "qf": [],
                          "filters": [{"name": "unknown"}]})


def test_header_only_csv_for_empty_results(tmp_path):
    p = cli.write_csv(tmp_path / "e.csv", ["a", "b"], [])
    assert p.read_text() == "a,b\n"


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, configs):
    """Runs the full command chain once on the pendulum grid."""
    root = tmp_path_factory.mktemp("pipe")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"specs": [{"tf": 1.2, "q0": [0.1], "qf": [0.7]},
                                          {"tf": 1.0, "q0": [-0.3], "qf": [0.4]}]}))
    model = configs / "pendulum.json"
    steps = [
        ["gen-dataset", "--model", model, "--grid", configs / "grid_pendulum.json",
         "--out", root / "data"],
        ["train-nn", "--data", root / "data", "--epochs", "20", "--out", root / "nn.bin"],
        ["train-gp", "--data", root / "data", "--epochs", "5", "--out", root / "gp.bin"],
        ["plan", "--model", model, "--regressor", root / "nn.bin", "--spec", spec,
         "--out", root / "plan.csv"],
        ["eval", "--model", model, "--data", root / "data", "--nn", root / "nn.bin",
         "--gp", root / "gp.bin", "--out", root / "eval"],
        ["bench", "--model", model, "--regressor", root / "gp.bin", "--spec", spec,
         "--repetitions", "5", "--out", root / "latency.csv"],
        ["ocp", "--model", model, "--spec", spec, "--out", root / "traj.csv"],
    ]
    codes = [cli.main([str(a) for a in s]) for s in steps]
    return root, spec, codes


def test_pipeline_runs(pipeline):
    root, _, codes = pipeline
    assert codes == [0] * len(codes)
    for name in ("data/data.csv", "data/meta.json", "data/manifest.json", "nn.bin",
                 "nn.bin.manifest.json", "gp.bin", "plan.csv", "plan_energies.csv",
                 "eval/savings.csv", "latency.csv", "traj.csv", "traj_summary.csv"):
        assert (root / name).exists(), name


def test_plan_output_satisfies_boundaries(pipeline):
    root, _, _ = pipeline
    rows = read_rows(root / "plan.csv")
    best0 = [r for r in rows if r["spec"] == "0" and r["label"] == "best"]
    assert float(best0[0]["q0"]) == pytest.approx(0.1, abs=1e-6)
    assert float(best0[-1]["q0"]) == pytest.approx(0.7, abs=1e-6)
    assert abs(float(best0[0]["v0"])) <= 1e-3
    assert len(best0) == 100


def test_eval_and_ocp_outputs(pipeline):
    root, _, _ = pipeline
    variants = {r["variant"] for r in read_rows(root / "eval" / "savings.csv")}
    assert {"best", "mean", "ocp"} <= variants
    summary = read_rows(root / "traj_summary.csv")
    assert len(summary) == 2 and all(r["converged"] == "True" for r in summary)


def test_manifest_contents(pipeline):
    root, _, _ = pipeline
    m = json.loads((root / "nn.bin.manifest.json").read_text())
    for key in ("config_hash", "inputs", "seeds", "versions", "wall_time"):
        assert key in m
    assert len(m["inputs"]["data"]["sha256"]) == 16
    assert m["versions"]["restraj"]


def test_rerun_is_byte_identical(pipeline, tmp_path, capsys):
    root, spec, _ = pipeline
    first = root / "plan.csv"
    again = tmp_path / "plan.csv"
    m = json.loads((first.with_name("plan.csv.manifest.json")).read_text())
    code = cli.main(["plan", "--model", m["inputs"]["model"]["path"], "--regressor",
                     str(root / "nn.bin"), "--spec", str(spec), "--out", str(again)])
    assert code == 0
    assert again.read_bytes() == first.read_bytes()
    ds_again = tmp_path / "data"
    grid = json.loads((root / "data" / "manifest.json").read_text())["inputs"]["grid"]["path"]
    assert cli.main(["gen-dataset", "--model", m["inputs"]["model"]["path"], "--grid", grid,
                     "--out", str(ds_again)]) == 0
    assert (ds_again / "data.csv").read_bytes() == (root / "data" / "data.csv").read_bytes()
    capsys.readouterr()


def test_output_env_variable(tmp_path, monkeypatch, configs, capsys):
    monkeypatch.setenv("RESTRAJ_OUT", str(tmp_path / "envout"))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"tf": 1.0, "q0": [0.0], "qf": [0.5]}))
    assert run(["ocp", "--model", configs / "pendulum.json", "--spec", spec], capsys)[0] == 0
    rows = read_rows(tmp_path / "envout" / "traj.csv")
    assert list(rows[0]) == ["t", "q0", "v0", "u0"]
    assert np.isclose(float(rows[-1]["q0"]), 0.5)
