import json
import os
import subprocess
import sys

import pytest

from trilattice import cli, io, problems

ARTIFACTS = ("checkpoint.txt", "mesh.txt", "lattice.txt")


@pytest.fixture(scope="module")
def problem_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("prob") / "mbb.txt"
    io.save_problem(path, problems.mbb(30, 15, scale=2))
    return str(path)


def run_pipeline(out, problem_file, *extra):
    args = ["pipeline", problem_file, "--out", str(out), "--iters", "4", "--target-lattices", "40", *extra]
    return cli.main(args)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, problem_file):
    out = tmp_path_factory.mktemp("run")
    assert run_pipeline(out, problem_file) == cli.EXIT_OK
    return out


def test_pipeline_writes_all_artifacts(pipeline_dir):
    names = set(os.listdir(pipeline_dir))
    for n in ("problem.txt", *ARTIFACTS, "report.json", "report.txt", "timings.json", "density.svg", "streamlines.svg", "lattice.svg"):
        assert n in names, n
    report = json.loads((pipeline_dir / "report.json").read_text())
    assert report["V"] == pytest.approx(report["V0"], abs=0.05)
    assert report["t0"] is not None and report["t"] is not None
    timings = json.loads((pipeline_dir / "timings.json").read_text())
    assert set(timings) >= {"optimize", "dehomog"}


def test_same_seed_gives_identical_files(pipeline_dir, problem_file, tmp_path):
    assert run_pipeline(tmp_path, problem_file, "--stage", "optimize,triangulate,dehomog") == 0
    for n in ARTIFACTS:
        assert (tmp_path / n).read_bytes() == (pipeline_dir / n).read_bytes(), n


def test_other_seed_changes_mesh(pipeline_dir, problem_file, tmp_path):
    assert run_pipeline(tmp_path, problem_file, "--stage", "optimize,triangulate", "--seed", "3") == 0
    assert (tmp_path / "checkpoint.txt").read_bytes() == (pipeline_dir / "checkpoint.txt").read_bytes()
    assert (tmp_path / "mesh.txt").read_bytes() != (pipeline_dir / "mesh.txt").read_bytes()


@pytest.mark.parametrize("w", ["0", "-0.5", "1.5", "nan"])
def test_weight_outside_range_is_rejected(w, tmp_path, capsys):
    code = cli.main(["optimize", "builtin:mbb", "--out", str(tmp_path), "--weight", w])
    assert code == cli.EXIT_INVALID
    assert "(0, 1]" in capsys.readouterr().err or w == "nan"
    assert not (tmp_path / "checkpoint.txt").exists()


def test_stage_runs_alone_from_existing_artifacts(pipeline_dir, tmp_path):
    for n in ("problem.txt", "checkpoint.txt", "lattice.txt", "timings.json"):
        (tmp_path / n).write_bytes((pipeline_dir / n).read_bytes())
    assert cli.main(["pipeline", "--out", str(tmp_path), "--stage", "evaluate"]) == 0
    a = json.loads((tmp_path / "report.json").read_text())
    b = json.loads((pipeline_dir / "report.json").read_text())
    assert a["xi"] == b["xi"]


def test_missing_artifact_is_invalid_input(tmp_path, capsys):
    assert cli.main(["dehomog", "--out", str(tmp_path)]) == cli.EXIT_INVALID
    assert "missing artifact" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["pipeline", "builtin:mbb", "--stage", "optimize,polish"],
        ["optimize", "builtin:nowhere"],
        ["optimize", "/no/such/file.txt"],
        ["triangulate", "--target-lattices", "0"],
        ["optimize", "builtin:mbb", "--init", "uniform", "--weight", "0.5", "--iters", "1"],
        ["frobnicate"],
    ],
)
def test_invalid_invocations(argv, tmp_path):
    assert cli.main([*argv, "--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == cli.EXIT_INVALID


def test_corrupt_artifact_is_invalid_input(pipeline_dir, tmp_path):
    (tmp_path / "checkpoint.txt").write_text("trilattice-checkpoint 9.0\n")
    (tmp_path / "problem.txt").write_bytes((pipeline_dir / "problem.txt").read_bytes())
    assert cli.main(["triangulate", "--out", str(tmp_path)]) == cli.EXIT_INVALID


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "trilattice", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "pipeline" in res.stdout
