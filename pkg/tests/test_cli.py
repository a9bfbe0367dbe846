import json

import numpy as np
import pytest

import robustlq as rl
from robustlq import cli

from conftest import homogeneous_spec, instance_b


@pytest.fixture()
def homog_file(tmp_path):
    f = tmp_path / "homog.json"
    rl.dump_spec(homogeneous_spec(N=40, xi=1.0), f)
    return str(f)


@pytest.fixture()
def game_b_file(tmp_path):
    f = tmp_path / "game_b.json"
    rl.dump_spec(instance_b(N=128), f)
    return str(f)


def test_solve_homogeneous(homog_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.run(["solve", "--spec", homog_file, "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["value"] == 0.0
    for name in ("P", "P1", "Phat", "phihat", "L", "psi", "PM1", "PM2",
                 "phiM1", "phiM2"):
        assert (out / f"{name}.csv").exists()
    assert "resolved configuration" in capsys.readouterr().out


def test_solve_csv_roundtrip_precision(homog_file, tmp_path):
    out = tmp_path / "out"
    assert cli.run(["solve", "--spec", homog_file, "--out", str(out)]) == 0
    lines = (out / "P.csv").read_text().strip().splitlines()
    assert lines[0].startswith("t,p_11")
    t0, p0 = lines[1].split(",")
    assert float(t0) == 0.0 and float(p0) == 0.0


def test_example_reproduces_closed_form(tmp_path):
    out = tmp_path / "ex"
    code = cli.run(["example", "--a", "0.5", "--c", "-1", "--q", "1", "--g", "1",
                    "--T", "2", "--N", "2000", "--out", str(out)])
    assert code == 0
    lines = (out / "bode.csv").read_text().strip().splitlines()
    t0, p0 = lines[1].split(",")
    assert float(t0) == 0.0
    assert float(p0) == pytest.approx(1.5 * np.exp(4.0) - 0.5, rel=1e-8)
    strategies = (out / "strategies.csv").read_text().strip().splitlines()
    assert strategies[0].split(",")[:3] == ["t", "u1", "u2"]
    # clamped outputs are nonnegative
    for line in strategies[1:]:
        vals = [float(v) for v in line.split(",")]
        assert vals[3] >= 0.0 and vals[4] >= 0.0


def test_verify_byte_identical(game_b_file, tmp_path):
    outs = []
    for tag in ("v1", "v2"):
        out = tmp_path / tag
        code = cli.run(["verify", "--spec", game_b_file, "--out", str(out),
                        "--paths", "800", "--seed", "7", "--substeps", "1",
                        "--directions", "3", "--eps", "0.1"])
        assert code in (0, 3)
        outs.append(out)
    for name in ("validation.txt", "perturbation.csv", "convexity.csv",
                 "verify_summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_verify_runs_oracle_when_diffusion_free(game_b_file, tmp_path):
    out = tmp_path / "v"
    code = cli.run(["verify", "--spec", game_b_file, "--out", str(out),
                    "--paths", "2000", "--seed", "3", "--substeps", "1",
                    "--directions", "3", "--eps", "0.1"])
    summary = json.loads((out / "verify_summary.json").read_text())
    assert summary["oracle"]["applicable"] is True
    assert summary["oracle"]["gap_n64"] <= 1e-3
    assert code == 0, summary


def test_verify_validation_failure_exit_code(tmp_path):
    doc = rl.spec_to_dict(homogeneous_spec(N=10))
    doc["matrices"]["R0"] = {"constant": [[-1.0]]}
    f = tmp_path / "bad.json"
    f.write_text(json.dumps(doc))
    code = cli.run(["verify", "--spec", str(f), "--out", str(tmp_path / "o"),
                    "--paths", "10"])
    assert code == 1


def test_malformed_json_exit_code(tmp_path):
    f = tmp_path / "broken.json"
    f.write_text("{ not json")
    assert cli.run(["solve", "--spec", str(f), "--out", str(tmp_path / "o")]) == 1


def test_missing_file_exit_code(tmp_path):
    assert cli.run(["solve", "--spec", str(tmp_path / "nope.json"),
                    "--out", str(tmp_path / "o")]) == 1


def test_unknown_flag_exit_code(homog_file, tmp_path, capsys):
    code = cli.run(["solve", "--spec", homog_file, "--out", str(tmp_path / "o"),
                    "--bogus-flag", "1"])
    capsys.readouterr()
    assert code == 1


def test_solver_failure_exit_code(tmp_path):
    spec = rl.build_spec(
        n=1, m1=1, m2=1, T=1.0, N=16, alpha=4.0, gamma=4.0, xi=[1.0], G=[[0.5]],
        A=0.0, C=0.0, B1=1.0, D1=0.0, B2=1.0, D2=0.0, Q=1.0, R1=-1.0, R2=-1.0,
        R0=1.0, R0hat=1.0,
    )
    f = tmp_path / "irregular.json"
    rl.dump_spec(spec, f)
    assert cli.run(["solve", "--spec", str(f), "--out", str(tmp_path / "o")]) == 2


def test_dump_blocks(homog_file, tmp_path, capsys):
    for stage in ("hat", "check", "blackboard", "doublehat", "weights"):
        code = cli.run(["dump-blocks", "--spec", homog_file, "--stage", stage,
                        "--t", "0.5"])
        assert code == 0
        captured = capsys.readouterr().out
        doc = json.loads(captured[captured.index("{\n"):])
        assert doc["stage"] == stage and doc["blocks"]


def test_grid_override(homog_file, tmp_path):
    out = tmp_path / "o"
    code = cli.run(["solve", "--spec", homog_file, "--out", str(out),
                    "--grid-n", "25"])
    assert code == 0
    lines = (out / "P.csv").read_text().strip().splitlines()
    assert len(lines) == 27  # header + 26 nodes
