import json
import subprocess
import sys

import numpy as np
import pytest

from codedmm.cli import main
from codedmm.linalg import load_matrix, save_matrix


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


def test_bounds_report(capsys):
    doc = run_json(capsys, "bounds", "--x", "100")
    assert doc["schema"] == 1 and doc["command"] == "bounds"
    assert doc["config"] == {"la": 10, "lb": 10, "p": 0.02, "seed": 0, "trials": 0, "x": [100.0]}
    res = doc["results"]
    assert 3.0e-10 <= res["read_tail"][0]["bound"] <= 4.0e-10
    assert res["undecodable"] <= 3.6e-3
    assert res["alpha"]["alpha4"] == 3025
    assert "timestamp" not in doc


def test_bounds_monte_carlo(capsys):
    doc = run_json(capsys, "bounds", "--la", "3", "--lb", "3", "--p", "0.05", "--trials", "2000", "--seed", "4")
    mc = doc["results"]["monte_carlo"]
    assert mc["trials"] == 2000 and 0 <= mc["p_undecodable"] <= 1


def test_bounds_sweep_csv(capsys):
    code, out, _ = run(capsys, "bounds", "--sweep", "2..4", "--format", "csv")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "L,n,undecodable_bound,redundancy_over_total,redundancy_over_systematic"
    assert [l.split(",")[0] for l in lines[1:]] == ["2", "3", "4"]


def test_enumerate(capsys):
    assert run_json(capsys, "enumerate", "--la", "2", "--lb", "2", "--s", "5")["results"]["count"] == 45


def test_simulate_both(capsys):
    doc = run_json(capsys, "simulate", "--la", "2", "--lb", "2", "--seed", "3")
    runs = doc["results"]["runs"]
    assert [r["strategy"] for r in runs] == ["coded", "speculative"]
    assert all(r["relative_error"] < 1e-12 for r in runs)
    assert doc["config"]["sim"]["seed"] == 3


def test_simulate_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"p": 0.0}, "seed": 9}))
    doc = run_json(capsys, "simulate", "--strategy", "coded", "--la", "2", "--lb", "2", "--config", str(cfg))
    assert doc["config"]["sim"]["model"]["p"] == 0.0 and doc["config"]["sim"]["seed"] == 9
    assert doc["results"]["runs"][0]["recomputed"] == 0


def test_simulate_out_file(tmp_path, capsys):
    out = tmp_path / "r.csv"
    code, stdout, _ = run(capsys, "simulate", "--la", "2", "--lb", "2", "--format", "csv", "--out", str(out))
    assert code == 0 and stdout == ""
    assert out.read_text().splitlines()[0].startswith("strategy,")


def test_multiply_and_decode(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((10, 4)), rng.standard_normal((9, 4))
    save_matrix(tmp_path / "a.cdm", a)
    np.savetxt(tmp_path / "b.txt", b)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"forced_stragglers": ["comp:0:0", "comp:4:1"]}))
    doc = run_json(
        capsys, "multiply", "--a", str(tmp_path / "a.cdm"), "--b", str(tmp_path / "b.txt"),
        "--config", str(cfg), "--store", str(tmp_path / "st"), "--manifest", str(tmp_path / "m.json"),
        "--out", str(tmp_path / "c.cdm"), "--check",
    )
    assert doc["results"]["relative_error"] < 1e-12
    c = load_matrix(tmp_path / "c.cdm")
    np.testing.assert_allclose(c, a @ b.T, atol=1e-12)

    doc = run_json(capsys, "decode", "--manifest", str(tmp_path / "m.json"), "--store", str(tmp_path / "st"),
                   "--out", str(tmp_path / "c2.cdm"))
    assert sorted(d["reads"] for d in doc["results"]["decoders"]) == [0, 0, 2, 2]
    np.testing.assert_array_equal(load_matrix(tmp_path / "c2.cdm"), c)


def test_matvec(tmp_path, capsys):
    rng = np.random.default_rng(1)
    a, x = rng.standard_normal((7, 3)), rng.standard_normal(3)
    np.savetxt(tmp_path / "a.txt", a)
    np.savetxt(tmp_path / "x.txt", x)
    doc = run_json(capsys, "matvec", "--a", str(tmp_path / "a.txt"), "--x", str(tmp_path / "x.txt"), "--L", "2", "--blocks", "3")
    assert doc["config"]["blocks"] == 4
    np.testing.assert_allclose(doc["results"]["y"], a @ x, atol=1e-9)


@pytest.mark.parametrize("app", ["power-iter", "krr", "als", "svd"])
def test_apps(app, capsys):
    doc = run_json(capsys, "app", app, "--strategy", "coded", "--size", "24", "--iters", "4", "--seed", "2")
    res = doc["results"]
    assert len(res["iteration_times"]) == len(res["encode_tasks"]) >= 1
    assert res["total_time"] == pytest.approx(sum(res["iteration_times"]))


def test_timestamp_flag(capsys):
    doc = run_json(capsys, "--timestamp", "enumerate", "--la", "1", "--lb", "1", "--s", "2")
    assert "timestamp" in doc


def test_deterministic(capsys):
    argv = ["simulate", "--la", "2", "--lb", "2", "--seed", "5"]
    first = run(capsys, *argv)[1]
    assert run(capsys, *argv)[1] == first
    argv = ["app", "als", "--strategy", "speculative", "--size", "16", "--iters", "2"]
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_usage_errors_exit_2(capsys):
    for argv in (["bogus"], ["bounds", "--sweep", "5..2"], ["enumerate", "--la", "2"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_runtime_errors_exit_1(tmp_path, capsys):
    code, out, err = run(capsys, "enumerate", "--la", "10", "--lb", "10", "--s", "8")
    assert code == 1 and out == "" and "exceeds" in err
    code, _, err = run(capsys, "decode", "--manifest", str(tmp_path / "none.json"), "--store", str(tmp_path))
    assert code == 1 and err
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"nope": 1}}')
    code, _, err = run(capsys, "simulate", "--config", str(bad))
    assert code == 1 and "nope" in err
    code, _, _ = run(capsys, "bounds", "--p", "1.5")
    assert code == 1


def test_module_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "codedmm", "enumerate", "--la", "2", "--lb", "2", "--s", "4"],
        capture_output=True, text=True, check=True,
    )
    assert json.loads(out.stdout)["results"]["count"] == 9
