import json
import os

import numpy as np
import pytest

from mvbsde import cli

SMALL = """\
problem.generator = linear
problem.rho = 0.0
problem.drift = -1.0
problem.phi = interval(0, inf)
problem.terminal = constant
problem.terminal_value = 0.0
numerics.steps = 20
numerics.paths = 600
numerics.seed = 3
numerics.eps = 0.4, 0.2, 0.1
numerics.oracle_tol = 0.2
numerics.tree_steps = 64
checks.run = def1, terminal, apriori, ito
smoothing.eps_list = 0.4, 0.2, 0.1
output.max_paths = 4
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def _solve(cfg_path, out, *extra):
    return cli.main(["solve", "--config", cfg_path, "--out", str(out), *extra])


def _without_timestamp(path):
    lines = open(path).read().splitlines()
    return [ln for ln in lines if not ln.startswith("# generated:") and '"timestamp"' not in ln]


def test_solve_writes_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert _solve(cfg_path, out, "--oracle", "tree") == 0
    assert sorted(os.listdir(out)) == ["arrays", "solution.csv", "summary.json"]
    text = capsys.readouterr().out
    assert "Y0 =" in text and "oracle (tree)" in text
    lines = (out / "solution.csv").read_text().splitlines()
    assert lines[0].startswith("# generated: ")
    assert lines[1] == "# schema_version: 1"
    assert "# config: problem.phi = interval(0, inf)" in lines
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["command"] == "solve"
    assert summary["oracle"]["within"] and summary["mean_dK"] >= 0
    assert "numerics.seed = 3" in summary["config"]
    rows = [ln for ln in lines if not ln.startswith("#")]
    assert len(rows) == 1 + 4 * 21


def test_outputs_identical_across_thread_counts(cfg_path, tmp_path, monkeypatch):
    assert _solve(cfg_path, tmp_path / "a", "--threads", "1") == 0
    monkeypatch.setenv("MVBSDE_THREADS", "3")
    assert _solve(cfg_path, tmp_path / "b") == 0
    for name in ("solution.csv", "summary.json", "arrays/meta.json"):
        assert _without_timestamp(tmp_path / "a" / name) == _without_timestamp(tmp_path / "b" / name)
    for name in ("Y.npy", "Z.npy", "K.npy", "Y_proj.npy"):
        assert (tmp_path / "a" / "arrays" / name).read_bytes() == (tmp_path / "b" / "arrays" / name).read_bytes()


def test_seed_override_changes_output(cfg_path, tmp_path):
    _solve(cfg_path, tmp_path / "a")
    _solve(cfg_path, tmp_path / "b", "--seed", "4")
    a = np.load(tmp_path / "a" / "arrays" / "Z.npy")
    b = np.load(tmp_path / "b" / "arrays" / "Z.npy")
    assert not np.array_equal(a, b)


def test_verify_round_trip(cfg_path, tmp_path, capsys):
    _solve(cfg_path, tmp_path / "run")
    code = cli.main(["verify", "--config", cfg_path, "--solution", str(tmp_path / "run"),
                     "--out", str(tmp_path / "ver")])
    assert code == 0, capsys.readouterr().out
    assert sorted(os.listdir(tmp_path / "ver")) == ["def1_p1.5.csv", "def1_p2.csv", "verify.json"]
    report = json.loads((tmp_path / "ver" / "verify.json").read_text())
    assert report["passed"] and set(report["checks"]) == {"def1_p1.5", "def1_p2", "terminal", "apriori", "ito"}


def test_verify_fails_on_tampered_solution(cfg_path, tmp_path):
    _solve(cfg_path, tmp_path / "run")
    ypath = tmp_path / "run" / "arrays" / "Y.npy"
    Y = np.load(ypath)
    Y[:, -1] += 0.3
    np.save(ypath, Y)
    code = cli.main(["verify", "--config", cfg_path, "--solution", str(tmp_path / "run"),
                     "--out", str(tmp_path / "ver")])
    assert code == 1
    report = json.loads((tmp_path / "ver" / "verify.json").read_text())
    assert not report["checks"]["terminal"]["passed"]


def test_verify_rejects_other_config(cfg_path, tmp_path, capsys):
    _solve(cfg_path, tmp_path / "run")
    other = tmp_path / "other.cfg"
    other.write_text(SMALL.replace("numerics.seed = 3", "numerics.seed = 4"))
    code = cli.main(["verify", "--config", str(other), "--solution", str(tmp_path / "run"),
                     "--out", str(tmp_path / "ver")])
    assert code == 2 and "different configuration" in capsys.readouterr().err
    assert not (tmp_path / "ver").exists()


def test_verify_missing_solution(cfg_path, tmp_path):
    code = cli.main(["verify", "--config", cfg_path, "--solution", str(tmp_path / "nothing"),
                     "--out", str(tmp_path / "ver")])
    assert code == 2 and not (tmp_path / "ver").exists()


def test_missing_config_leaves_nothing(tmp_path, capsys):
    code = _solve(str(tmp_path / "absent.cfg"), tmp_path / "run")
    assert code == 2 and "absent.cfg" in capsys.readouterr().err
    assert os.listdir(tmp_path) == []


def test_bad_config_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("problem.rho = 1\nproblem.rho = 2\n")
    assert _solve(str(path), tmp_path / "run") == 2
    assert "bad.cfg:2:" in capsys.readouterr().err


def test_failure_during_run_is_atomic(cfg_path, tmp_path):
    # the closed-form oracle refuses a reflected problem after the solve started
    assert _solve(cfg_path, tmp_path / "run", "--oracle", "closed") == 2
    assert sorted(os.listdir(tmp_path)) == ["small.cfg"]


def test_staged_output_replaces_files(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("old")
    with cli.staged_output(out) as tmp:
        with open(os.path.join(tmp, "keep.txt"), "w") as fh:
            fh.write("new")
    assert (out / "keep.txt").read_text() == "new"
    assert sorted(os.listdir(tmp_path)) == ["out"]


def test_converge_exit_status(cfg_path, tmp_path, capsys):
    assert cli.main(["converge", "--config", cfg_path, "--out", str(tmp_path / "c")]) == 0
    assert "converged" in capsys.readouterr().out
    strict = tmp_path / "strict.cfg"
    strict.write_text(SMALL + "numerics.tol = 1e-9\n")
    assert cli.main(["converge", "--config", str(strict), "--out", str(tmp_path / "d")]) == 1
    header = [ln for ln in (tmp_path / "d" / "converge.csv").read_text().splitlines() if not ln.startswith("#")]
    assert header[0] == "eps,residual,penalty_energy,y0" and len(header) == 4


def test_prox_suite(tmp_path, capsys):
    assert cli.main(["prox-suite", "--samples", "300", "--out", str(tmp_path / "p")]) == 0
    assert "all passed" in capsys.readouterr().out
    data = json.loads((tmp_path / "p" / "prox_suite.json").read_text())
    assert data["passed"]
    assert cli.main(["prox-suite", "--samples", "300", "--eps-list", "0.1,1"]) == 0


def test_prox_suite_fault_injection(capsys):
    assert cli.main(["prox-suite", "--samples", "200", "--inject-fault"]) == 1
    out = capsys.readouterr().out
    assert "violation nonexpansive" in out and "'u':" in out


def test_fault_flag_is_hidden(capsys):
    with pytest.raises(SystemExit):
        cli.main(["prox-suite", "--help"])
    assert "inject" not in capsys.readouterr().out


def test_mollifier_suite(capsys):
    assert cli.main(["mollifier-suite", "--samples", "40"]) == 0
    assert "cubic: ok" in capsys.readouterr().out


def test_smooth_demo(cfg_path, tmp_path, capsys):
    assert cli.main(["smooth-demo", "--config", cfg_path, "--out", str(tmp_path / "s")]) == 0
    data = json.loads((tmp_path / "s" / "smoothing.json").read_text())
    assert data["constant_error"] <= 1e-12 and data["decreasing"]
    assert [r["eps"] for r in data["rows"]] == [0.4, 0.2, 0.1]
