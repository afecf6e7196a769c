import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from credit_lens.cli import main, parse_generator
from credit_lens.mdp import make_bandit, save_mdp


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def bandit_file(tmp_path):
    path = tmp_path / "bandit.json"
    save_mdp(path, make_bandit())
    return path


def test_analyze_bandit_epsilon(capsys, bandit_file, tmp_path):
    out_path = tmp_path / "r.csv"
    code, out, _ = run(capsys, "analyze", "--mdp", str(bandit_file), "--epsilon", "0.1", "--out", str(out_path))
    assert code == 0
    assert "is_sparse=false sup=0.693147" in out.splitlines()
    rows = list(csv.DictReader(out_path.open()))
    assert {r["measure"] for r in rows} >= {"info_sparsity", "pairwise_kl"}


def test_analyze_generated_chain(capsys, tmp_path):
    out_path = tmp_path / "chain.csv"
    code, out, _ = run(capsys, "analyze", "--gen", "chain:4,h=3", "--policy", "uniform",
                       "--measure", "info-sparsity", "--out", str(out_path))
    assert code == 0
    assert out.startswith("information_sparsity=")
    assert out_path.read_text().startswith("measure,h,s,a,value_nats,value_bits,flags\n")


def test_analyze_json_bits(capsys):
    code, out, _ = run(capsys, "analyze", "--gen", "bandit", "--measure", "info_sparsity", "--format", "json", "--bits")
    assert code == 0
    doc = json.loads(out.split("\n", 1)[1])
    assert doc["measures"]["info_sparsity"]["values"][0]["value"] == pytest.approx(1.0)


def test_missing_file_exit_2(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code, _, err = run(capsys, "analyze", "--mdp", str(missing))
    assert code == 2
    assert str(missing) in err


def test_invalid_mdp_exit_2(capsys, tmp_path):
    path = tmp_path / "bad.json"
    doc = json.loads(json.dumps({"num_states": 1, "num_actions": 1, "horizon": 1, "discount": 1.0,
                                 "initial_dist": [0.5], "reward": [[0.0]], "transition": [[[1.0]]]}))
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "analyze", "--mdp", str(path))
    assert code == 2 and "initial_dist" in err


def test_unknown_measure_exit_2(capsys):
    code, _, err = run(capsys, "analyze", "--gen", "bandit", "--measure", "bogus")
    assert code == 2 and "info_sparsity" in err


def test_budget_refusal_exit_3(capsys):
    code, _, err = run(capsys, "analyze", "--gen", "grid:4x4,h=6", "--budget", "100")
    assert code == 3 and "budget" in err


def test_budget_env(capsys, monkeypatch):
    monkeypatch.setenv("CREDIT_LENS_BUDGET", "4")
    code, _, _ = run(capsys, "analyze", "--gen", "chain:4,h=3")
    assert code == 3


def test_bad_flag_values_exit_2(capsys):
    for argv in (["analyze", "--gen", "bandit", "--tol", "0"], ["analyze", "--gen", "bandit", "--budget", "0"],
                 ["analyze", "--gen", "bandit", "--mdp", "x.json"], ["analyze"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    code, _, _ = run(capsys, "analyze", "--gen", "hexgrid:3")
    assert code == 2


def test_check_slip_gridworld(capsys, tmp_path):
    out_path = tmp_path / "v.json"
    code, _, _ = run(capsys, "check", "--gen", "grid:3x3,goal=2_2,slip=1,h=3", "--out", str(out_path))
    assert code == 0
    verdicts = {v["proposition"]: v for v in json.loads(out_path.read_text())}
    assert "action_independent_transitions" in verdicts["loo_cmi_vs_reward_entropy[h=1]"]["assumption_flags"]
    assert verdicts["loo_cmi_vs_reward_entropy[h=1]"]["binding"] is False


def test_check_random_mdp_props_pass(capsys, tmp_path):
    out_path = tmp_path / "v.json"
    code, _, _ = run(capsys, "check", "--gen", "random:seed=5", "--out", str(out_path))
    assert code == 0
    verdicts = {v["proposition"]: v for v in json.loads(out_path.read_text())}
    for name in ("sequence_mi_vs_directed", "directed_vs_reward_entropy_sum"):
        assert verdicts[name]["verdict"] == "equal-within-tol"


def test_check_discrepancy_exit_1(capsys):
    # floating residue alone exceeds a tolerance this tight
    code, _, err = run(capsys, "check", "--gen", "random:seed=1", "--tol", "1e-300", "--out", "-")
    assert code == 1 and "discrepant:" in err


def test_sweep_sorted_and_equal_rows(capsys, tmp_path):
    out_path = tmp_path / "s.csv"
    code, _, _ = run(capsys, "sweep", "--gen", "grid:4x4,goal=3_3,h=5",
                     "--transforms", "none,constant:5,negdist", "--out", str(out_path))
    assert code == 0
    rows = list(csv.reader(out_path.open()))[1:]
    vals = {name: float(v) for name, v in rows}
    assert [float(v) for _, v in rows] == sorted(float(v) for _, v in rows)
    assert abs(vals["none"] - vals["constant:5"]) <= 1e-9
    assert vals["negdist"] > vals["none"]


def test_sweep_identity_only_and_zero_potential(capsys):
    code, out, _ = run(capsys, "sweep", "--gen", "chain:4,h=3", "--transforms", "")
    assert code == 0 and len(out.strip().split("\n")) == 2
    code, out, _ = run(capsys, "sweep", "--gen", "chain:4,h=3", "--transforms", "potential:zero")
    rows = dict(r for r in csv.reader(io.StringIO(out)))
    assert rows["none"] == rows["potential:zero"]


def test_sweep_bad_transform(capsys):
    code, _, err = run(capsys, "sweep", "--gen", "chain:4,h=3", "--transforms", "warp:2")
    assert code == 2 and "unknown transform" in err


def test_sample_csv_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        code, _, _ = run(capsys, "sample", "--gen", "bandit", "--seed", "3", "--seeds", "3",
                         "--n-grid", "1e2,1e3,1e4,1e5", "--out", str(path))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().strip().split("\n")
    assert lines[0] == "measure,n,seed_count,median_abs_error,exact_value" and len(lines) == 5


def test_sample_unknown_measure(capsys):
    code, _, err = run(capsys, "sample", "--gen", "bandit", "--measure", "nope")
    assert code == 2 and "info_sparsity" in err


def test_no_partial_output_on_failure(capsys, tmp_path):
    out_path = tmp_path / "r.csv"
    code, _, _ = run(capsys, "analyze", "--gen", "grid:4x4,h=6", "--budget", "10", "--out", str(out_path))
    assert code == 3
    assert list(tmp_path.iterdir()) == []


def test_policy_file(capsys, tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"policy": [[[0.0, 1.0]]]}))
    code, out, _ = run(capsys, "analyze", "--gen", "bandit", "--policy", str(path), "--epsilon", "0.1",
                       "--measure", "info_sparsity")
    assert code == 0 and "is_sparse=true" in out


def test_generator_specs():
    g = parse_generator("grid:5x5,goal=4_4,slip=0.1")
    assert g.mdp.num_states == 25 and g.goal == 24
    assert parse_generator("chain:4,h=3").mdp.horizon == 3
    assert np.array_equal(parse_generator("bandit:0_2").mdp.reward, [[0.0, 2.0]])


def test_module_entry_point(bandit_file):
    proc = subprocess.run([sys.executable, "-m", "credit_lens", "analyze", "--mdp", str(bandit_file),
                           "--epsilon", "0.1", "--measure", "info_sparsity"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "is_sparse=false sup=0.693147" in proc.stdout
