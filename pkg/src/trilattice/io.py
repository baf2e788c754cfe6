"""Versioned plain-text file formats.

Every file starts with a header line ``trilattice-<kind> <major>.<minor>``.
The body is a sequence of records:

``meta <key> <json>``
    one scalar, list or dict value, JSON encoded with sorted keys;
``table <name> <dtype> <dims>``
    followed by one line per row; ``dtype`` is ``f`` (floats written with
    ``%.17g`` so that they round-trip exactly) or ``i`` (integers) and
    ``dims`` is ``R`` for a vector or ``RxC`` for a matrix.

Files carry no timestamps or timings, so identical inputs give byte-identical
files.  Loaders reject an unknown major version; a newer minor version is
accepted.  Voigt order is ``(11, 22, 12)`` with engineering shear strain.

Boolean masks are run-length encoded: the table ``<name>_runs`` holds the
alternating run lengths of a row-major ``(ny, nx)`` mask, starting with a run
of ``False`` cells (possibly of length zero).
"""

from __future__ import annotations

import io as _stdio
import json
import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_MAJOR = 1
FORMAT_MINOR = 0

# keys that hold wall-clock measurements and are never written to artifacts
_TIMING_KEYS = ("elapsed", "seconds", "runtime")


class FormatError(ValueError):
    """Malformed file, wrong kind, or unsupported format version."""


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _dumps(value) -> str:
    return json.dumps(value, sort_keys=True, default=_json_default, allow_nan=True)


def drop_timings(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if not any(t in k for t in _TIMING_KEYS)}


@dataclass
class Document:
    """In-memory form of one artifact file."""

    kind: str
    meta: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    version: tuple[int, int] = (FORMAT_MAJOR, FORMAT_MINOR)

    def table(self, name: str, default=None):
        if name in self.tables:
            return self.tables[name]
        if default is not None:
            return default
        raise FormatError(f"{self.kind} file lacks table {name!r}")

    def get(self, key: str, default=KeyError):
        if key in self.meta:
            return self.meta[key]
        if default is KeyError:
            raise FormatError(f"{self.kind} file lacks field {key!r}")
        return default

    def dumps(self) -> str:
        out = _stdio.StringIO()
        out.write(f"trilattice-{self.kind} {self.version[0]}.{self.version[1]}\n")
        for key, value in self.meta.items():
            out.write(f"meta {key} {_dumps(value)}\n")
        for name, arr in self.tables.items():
            arr = np.asarray(arr)
            if arr.dtype.kind in "biu":
                code, fmt, arr = "i", "%d", arr.astype(np.int64)
            else:
                code, fmt, arr = "f", "%.17g", arr.astype(np.float64)
            if arr.ndim == 1:
                dims = str(len(arr))
            elif arr.ndim == 2:
                dims = f"{arr.shape[0]}x{arr.shape[1]}"
            else:
                raise ValueError(f"table {name!r} must be 1-D or 2-D")
            out.write(f"table {name} {code} {dims}\n")
            if arr.size:
                np.savetxt(out, arr.reshape(len(arr), -1), fmt=fmt, delimiter=" ")
        return out.getvalue()

    def save(self, path) -> None:
        data = self.dumps()
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="ascii", newline="\n") as fh:
            fh.write(data)
        os.replace(tmp, path)

    @classmethod
    def loads(cls, text: str, kind: str | None = None) -> "Document":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty file")
        head = lines[0].split()
        if len(head) != 2 or not head[0].startswith("trilattice-"):
            raise FormatError(f"missing format header, got {lines[0][:60]!r}")
        got_kind = head[0][len("trilattice-"):]
        if kind is not None and got_kind != kind:
            raise FormatError(f"expected a {kind} file, got {got_kind}")
        try:
            major, minor = (int(x) for x in head[1].split("."))
        except ValueError as exc:
            raise FormatError(f"bad version {head[1]!r}") from exc
        if major != FORMAT_MAJOR:
            raise FormatError(f"unsupported {got_kind} format version {major}.{minor} (reader supports {FORMAT_MAJOR}.x)")
        doc = cls(got_kind, version=(major, minor))
        i = 1
        while i < len(lines):
            line = lines[i]
            i += 1
            if not line.strip():
                continue
            tag, _, rest = line.partition(" ")
            if tag == "meta":
                key, _, value = rest.partition(" ")
                doc.meta[key] = json.loads(value)
            elif tag == "table":
                try:
                    name, code, dims = rest.split()
                    shape = tuple(int(d) for d in dims.split("x"))
                except ValueError as exc:
                    raise FormatError(f"bad table line {line!r}") from exc
                rows = shape[0]
                body = lines[i:i + rows]
                if len(body) != rows:
                    raise FormatError(f"table {name!r} truncated")
                i += rows
                dtype = np.int64 if code == "i" else np.float64
                values = np.array(" ".join(body).split(), dtype=dtype) if rows else np.zeros(0, dtype=dtype)
                size = int(np.prod(shape))
                if values.size != size:
                    raise FormatError(f"table {name!r} has {values.size} values, expected {size}")
                doc.tables[name] = values.reshape(shape)
            else:
                raise FormatError(f"unknown record {tag!r} on line {i}")
        return doc

    @classmethod
    def load(cls, path, kind: str | None = None) -> "Document":
        with open(path, encoding="ascii") as fh:
            return cls.loads(fh.read(), kind)


# --------------------------------------------------------------------------
# masks


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """Alternating run lengths of a flattened boolean mask, starting with False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.int64)


def decode_mask(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`encode_mask`; ``shape`` is ``(ny, nx)``."""
    runs = np.asarray(runs, dtype=np.int64)
    if np.any(runs < 0) or runs.sum() != shape[0] * shape[1]:
        raise FormatError("mask run lengths do not match the grid size")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


# --------------------------------------------------------------------------
# problems


def problem_document(problem) -> Document:
    doc = Document("problem")
    m = problem.material
    doc.meta.update(
        name=problem.name,
        shape=list(problem.shape),
        coarsening=problem.coarsening,
        cell_size=problem.cell_size,
        volume_budget=problem.volume_budget,
        bounds=[problem.l_min, problem.l_max],
        material={"e_plus": m.e_plus, "e_minus": m.e_minus, "v0": m.v0},
        n_cases=len(problem.load_cases),
    )
    doc.tables["mask_runs"] = encode_mask(problem.active)
    fixes = [(f, None) for f in problem.fixations]
    for q, case in enumerate(problem.load_cases):
        fixes += [(f, q) for f in (case.fixations or [])]
        doc.meta[f"case.{q}"] = {
            "name": case.name,
            "weight": case.weight,
            "own_fixations": case.fixations is not None,
        }
        doc.tables[f"case.{q}.nodes"] = case.nodes
        doc.tables[f"case.{q}.forces"] = case.forces
    for k, (f, owner) in enumerate(fixes):
        doc.meta[f"fixation.{k}"] = {"fix_x": bool(f.fix_x), "fix_y": bool(f.fix_y), "case": owner}
        doc.tables[f"fixation.{k}.nodes"] = f.nodes
    doc.meta["n_fixations"] = len(fixes)
    return doc


def save_problem(path, problem) -> None:
    problem_document(problem).save(path)


def load_problem(path):
    from .fea import Fixation, LoadCase, ProblemSpec
    from .rank3 import MaterialConstants

    doc = Document.load(path, "problem")
    nx, ny = doc.get("shape")
    active = decode_mask(doc.table("mask_runs"), (ny, nx))
    n_cases = doc.get("n_cases")
    case_fix: list[list] = [[] for _ in range(n_cases)]
    shared = []
    for k in range(doc.get("n_fixations")):
        info = doc.get(f"fixation.{k}")
        f = Fixation(doc.table(f"fixation.{k}.nodes"), info["fix_x"], info["fix_y"])
        (shared if info["case"] is None else case_fix[info["case"]]).append(f)
    cases = []
    for q in range(n_cases):
        info = doc.get(f"case.{q}")
        cases.append(
            LoadCase(
                doc.table(f"case.{q}.nodes"),
                doc.table(f"case.{q}.forces").reshape(-1, 2),
                weight=info["weight"],
                fixations=case_fix[q] if info["own_fixations"] else None,
                name=info["name"],
            )
        )
    l_min, l_max = doc.get("bounds")
    problem = ProblemSpec(
        shape=(nx, ny),
        active=active,
        fixations=shared,
        load_cases=cases,
        coarsening=doc.get("coarsening"),
        volume_budget=doc.get("volume_budget"),
        l_min=l_min,
        l_max=l_max,
        material=MaterialConstants(**doc.get("material")),
        cell_size=doc.get("cell_size", 1.0),
        name=doc.get("name", "problem"),
    )
    problem.validate_nodes()
    return problem


# --------------------------------------------------------------------------
# optimizer checkpoints


def checkpoint_document(design) -> Document:
    doc = Document("checkpoint")
    nx, ny = design.shape
    doc.meta.update(
        shape=[nx, ny],
        cell_size=design.cell_size,
        bounds=[design.l_min, design.l_max],
        free=bool(design.free),
        iteration=int(design.iteration),
        c_star=design.c_star,
        p_star=design.p_star,
        mma_iteration=int(design.mma.iteration),
    )
    doc.tables["mask_runs"] = encode_mask(design.active)
    doc.tables["x_alpha"] = design.x_alpha
    doc.tables["x_theta"] = design.x_theta
    doc.tables["alpha"] = design.alpha
    doc.tables["theta"] = design.theta
    doc.tables["history"] = np.asarray(design.history, dtype=float).reshape(-1, 3)
    for name in ("xold1", "xold2", "low", "upp"):
        value = getattr(design.mma, name)
        if value is not None:
            doc.tables[f"mma.{name}"] = value
    return doc


def save_checkpoint(path, design) -> None:
    checkpoint_document(design).save(path)


def load_checkpoint(path):
    from .optimizer import DesignField, MMAState

    doc = Document.load(path, "checkpoint")
    nx, ny = doc.get("shape")
    l_min, l_max = doc.get("bounds")
    mma = MMAState(
        *(doc.tables.get(f"mma.{n}") for n in ("xold1", "xold2", "low", "upp")),
        iteration=doc.get("mma_iteration", 0),
    )
    return DesignField(
        shape=(nx, ny),
        active=decode_mask(doc.table("mask_runs"), (ny, nx)),
        x_alpha=doc.table("x_alpha"),
        x_theta=doc.table("x_theta"),
        alpha=doc.table("alpha"),
        theta=doc.table("theta"),
        cell_size=doc.get("cell_size"),
        l_min=l_min,
        l_max=l_max,
        free=doc.get("free"),
        iteration=doc.get("iteration"),
        history=[tuple(r) for r in doc.table("history").tolist()],
        mma=mma,
        c_star=doc.get("c_star"),
        p_star=doc.get("p_star"),
    )


# --------------------------------------------------------------------------
# meshes


def mesh_document(mesh) -> Document:
    doc = Document("mesh")
    doc.meta.update(h=float(mesh.h), stats=drop_timings(dict(mesh.stats)))
    doc.tables["vertices"] = mesh.vertices
    doc.tables["boundary"] = mesh.boundary.astype(np.int64)
    doc.tables["triangles"] = mesh.triangles
    edges = mesh.edges
    cls = mesh.edge_class if len(mesh.edge_class) == len(edges) else -np.ones(len(edges), dtype=np.int64)
    doc.tables["edges"] = np.column_stack([edges, cls]).astype(np.int64)
    return doc


def save_mesh(path, mesh) -> None:
    mesh_document(mesh).save(path)


def mesh_from_document(doc: Document):
    from .meshing import FieldAlignedMesh

    edges = doc.table("edges").reshape(-1, 3)
    cls = edges[:, 2]
    mesh = FieldAlignedMesh(
        doc.table("vertices").reshape(-1, 2),
        doc.table("triangles").reshape(-1, 3),
        doc.get("h"),
        doc.table("boundary").astype(bool),
        edge_class=cls if np.all(cls >= 0) else np.zeros(0, dtype=np.int64),
        stats=doc.get("stats", {}),
    )
    if not np.array_equal(mesh.edges, edges[:, :2]):
        raise FormatError("edge list does not match the triangles")
    return mesh


def load_mesh(path):
    return mesh_from_document(Document.load(path, "mesh"))


# --------------------------------------------------------------------------
# lattices


def lattice_document(lattice) -> Document:
    doc = mesh_document(lattice.mesh)
    doc.kind = "lattice"
    doc.meta.update(
        volume_fraction=float(lattice.volume_fraction),
        domain_area=float(lattice.domain_area),
        n_kept=int(np.sum(lattice.kept)),
        n_patches=len(lattice.patches),
        lattice_meta=drop_timings(dict(lattice.meta)),
    )
    doc.tables["edge_insets"] = lattice.edge_table()
    doc.tables["target_ratio"] = lattice.target_ratio
    doc.tables["ratio"] = lattice.ratio
    doc.tables["widths"] = lattice.widths
    doc.tables["orientations"] = lattice.orientations
    doc.tables["side_layer"] = lattice.side_layer.astype(np.int64)
    doc.tables["thickness"] = lattice.thickness
    doc.tables["insets"] = lattice.insets
    doc.tables["kept"] = np.asarray(lattice.kept, dtype=np.int64)
    # patches are stored flat: (owner, number of points) then the points
    counts = np.array([len(p) for p in lattice.patches], dtype=np.int64)
    doc.tables["patch_index"] = np.column_stack([np.asarray(lattice.patch_owner, dtype=np.int64).reshape(-1), counts]).reshape(-1, 2)
    doc.tables["patch_points"] = np.concatenate(lattice.patches) if lattice.patches else np.zeros((0, 2))
    return doc


def save_lattice(path, lattice) -> None:
    lattice_document(lattice).save(path)


def load_lattice(path):
    from .dehomog import LatticeDesign

    doc = Document.load(path, "lattice")
    mesh = mesh_from_document(doc)
    idx = doc.table("patch_index").reshape(-1, 2)
    pts = doc.table("patch_points").reshape(-1, 2)
    splits = np.cumsum(idx[:, 1])[:-1] if len(idx) else []
    patches = list(np.split(pts, splits)) if len(idx) else []
    T = mesh.n_triangles
    return LatticeDesign(
        mesh,
        doc.table("target_ratio"),
        doc.table("ratio"),
        doc.table("widths").reshape(T, 3),
        doc.table("orientations").reshape(T, 3),
        doc.table("side_layer").reshape(T, 3),
        doc.table("thickness"),
        doc.table("insets").reshape(T, 3),
        doc.table("kept").astype(bool),
        patches=patches,
        patch_owner=idx[:, 0].copy(),
        volume_fraction=doc.get("volume_fraction"),
        domain_area=doc.get("domain_area"),
        meta=doc.get("lattice_meta", {}),
    )


# --------------------------------------------------------------------------
# reports


REPORT_KIND = "report"


def save_report(path, report) -> str:
    """Write the JSON report to ``path`` and the table next to it (``.txt``)."""
    data = {"format": f"trilattice-{REPORT_KIND} {FORMAT_MAJOR}.{FORMAT_MINOR}", **report.as_dict()}
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    table_path = os.path.splitext(str(path))[0] + ".txt"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(report.table())
    return table_path


def load_report(path):
    from .validate import EvaluationReport

    with open(path, encoding="ascii") as fh:
        data = json.load(fh)
    header = str(data.pop("format", ""))
    kind, _, version = header.partition(" ")
    if kind != f"trilattice-{REPORT_KIND}":
        raise FormatError(f"not a report file: {header!r}")
    if int(version.split(".")[0]) != FORMAT_MAJOR:
        raise FormatError(f"unsupported report format version {version}")
    return EvaluationReport(**data)
