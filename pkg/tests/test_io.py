import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trilattice import io, meshing, problems
from trilattice.dehomog import dehomogenize
from trilattice.fea import restrict_problem
from trilattice.optimizer import OptimizationSettings, run_optimization


@pytest.fixture(scope="module")
def small_pipeline():
    fine = problems.mbb(30, 15, scale=2)
    coarse = restrict_problem(fine)
    design = run_optimization(coarse, OptimizationSettings(max_iter=4))
    mesh = meshing.triangulate(design, meshing.domain_polygon(fine.active, fine.cell_size), target_lattices=60)
    lattice = dehomogenize(design, mesh)
    return fine, design, mesh, lattice


# --------------------------------------------------------------------------
# documents


def test_document_roundtrip():
    doc = io.Document("thing", meta={"b": [1, 2], "a": {"z": 1.5, "y": None}})
    doc.tables["floats"] = np.array([[0.1, 1 / 3], [np.pi, -2e-300]])
    doc.tables["ints"] = np.arange(4)
    doc.tables["empty"] = np.zeros((0, 3))
    text = doc.dumps()
    back = io.Document.loads(text, "thing")
    assert back.meta == doc.meta
    np.testing.assert_array_equal(back.tables["floats"], doc.tables["floats"])
    assert back.tables["ints"].dtype == np.int64
    assert back.tables["empty"].shape == (0, 3)
    assert back.dumps() == text


def test_meta_json_has_sorted_keys():
    text = io.Document("x", meta={"m": {"b": 1, "a": 2}}).dumps()
    assert 'meta m {"a": 2, "b": 1}' in text


@pytest.mark.parametrize(
    "text, match",
    [
        ("", "empty"),
        ("hello 1.0\n", "header"),
        ("trilattice-mesh 2.0\n", "version 2.0"),
        ("trilattice-mesh one\n", "bad version"),
        ("trilattice-mesh 1.0\ntable t f 3\n1\n2\n", "truncated"),
        ("trilattice-mesh 1.0\ntable t f 2x2\n1 2\n3\n", "3 values"),
        ("trilattice-mesh 1.0\nblob x\n", "unknown record"),
    ],
)
def test_malformed_files_rejected(text, match):
    with pytest.raises(io.FormatError, match=match):
        io.Document.loads(text)


def test_newer_minor_version_accepted():
    doc = io.Document.loads("trilattice-mesh 1.7\nmeta h 2.0\n")
    assert doc.version == (1, 7)


def test_wrong_kind_rejected():
    with pytest.raises(io.FormatError, match="expected a mesh"):
        io.Document.loads("trilattice-lattice 1.0\n", "mesh")


def test_drop_timings():
    meta = {"elapsed": 1.0, "eval_seconds": 2.0, "runtime_total": 3, "n": 4}
    assert io.drop_timings(meta) == {"n": 4}


# --------------------------------------------------------------------------
# masks


@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_mask_rle_roundtrip(mask):
    runs = io.encode_mask(mask)
    assert runs.sum() == mask.size
    np.testing.assert_array_equal(io.decode_mask(runs, mask.shape), mask)


def test_mask_rle_starts_with_false_run():
    np.testing.assert_array_equal(io.encode_mask(np.array([[True, True, False]])), [0, 2, 1])


def test_mask_rle_size_mismatch():
    with pytest.raises(io.FormatError):
        io.decode_mask(np.array([1, 2]), (2, 2))


# --------------------------------------------------------------------------
# artifacts


@pytest.mark.parametrize("name", ["femur", "triangle", "beam", "mbb"])
def test_problem_roundtrip_is_byte_identical(name, tmp_path):
    kw = {"scale": 1} if name in ("femur", "triangle", "beam") else {}
    prob = problems.builtin(name, **kw)
    p = tmp_path / "problem.txt"
    io.save_problem(p, prob)
    back = io.load_problem(p)
    assert back.shape == prob.shape
    np.testing.assert_array_equal(back.active, prob.active)
    for a, b in zip(back.load_cases, prob.load_cases):
        np.testing.assert_array_equal(a.forces, b.forces)
    assert io.problem_document(back).dumps() == p.read_text()


def test_checkpoint_roundtrip(small_pipeline, tmp_path):
    _, design, _, _ = small_pipeline
    p = tmp_path / "checkpoint.txt"
    io.save_checkpoint(p, design)
    back = io.load_checkpoint(p)
    np.testing.assert_array_equal(back.x_alpha, design.x_alpha)
    np.testing.assert_array_equal(back.theta, design.theta)
    np.testing.assert_array_equal(np.asarray(back.history), np.asarray(design.history))
    assert back.c_star == design.c_star
    np.testing.assert_array_equal(back.mma.xold1, design.mma.xold1)
    assert "elapsed" not in p.read_text()
    assert io.checkpoint_document(back).dumps() == p.read_text()


def test_checkpoint_resume_continues_identically(small_pipeline, tmp_path):
    fine, design, _, _ = small_pipeline
    coarse = restrict_problem(fine)
    p = tmp_path / "checkpoint.txt"
    io.save_checkpoint(p, design)
    a = run_optimization(coarse, OptimizationSettings(max_iter=6), design=io.load_checkpoint(p))
    b = run_optimization(coarse, OptimizationSettings(max_iter=6))
    np.testing.assert_array_equal(a.x_alpha, b.x_alpha)


def test_mesh_roundtrip(small_pipeline, tmp_path):
    _, _, mesh, _ = small_pipeline
    p = tmp_path / "mesh.txt"
    io.save_mesh(p, mesh)
    back = io.load_mesh(p)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.edge_class, mesh.edge_class)
    assert io.mesh_document(back).dumps() == p.read_text()


def test_lattice_roundtrip(small_pipeline, tmp_path):
    _, _, _, lattice = small_pipeline
    p = tmp_path / "lattice.txt"
    io.save_lattice(p, lattice)
    back = io.load_lattice(p)
    np.testing.assert_array_equal(back.insets, lattice.insets)
    assert len(back.patches) == len(lattice.patches)
    for a, b in zip(back.patches, lattice.patches):
        np.testing.assert_array_equal(a, b)
    assert back.volume_fraction == lattice.volume_fraction
    assert io.lattice_document(back).dumps() == p.read_text()
    # the per-edge table is stored for downstream tools
    assert "table edge_insets f" in p.read_text()


def test_report_json_and_table(tmp_path):
    from trilattice.validate import EvaluationReport

    rep = EvaluationReport(C=2.0, V=0.5, C0=1.8, V0=0.5, xi=0.111, problem="demo")
    path = io.save_report(tmp_path / "report.json", rep)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["format"].startswith("trilattice-report")
    assert data["xi"] == 0.111
    assert (tmp_path / "report.txt").exists()
    assert io.load_report(tmp_path / "report.json").C0 == 1.8
    assert path
