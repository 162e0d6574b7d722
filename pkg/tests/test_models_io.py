import numpy as np
import pytest

from msinv.config import parse_config
from msinv.inversion import InversionTrace
from msinv.io import export_model_vtk, export_trace_csv, dump_basis_triplets
from msinv.mesh import create_mesh
from msinv.models import (
    build_survey, compute_relative_error, generate_block_model, generate_salt_model,
)


def test_block_model_values():
    mesh = create_mesh(6, 6, 4)
    m = generate_block_model(mesh, [((1, 4, 1, 4, 1, 3), 0.1)], 0.01)
    vals = np.unique(m)
    assert np.allclose(np.sort(vals), np.sort([np.log(0.01), np.log(0.1)]))
    inside = np.isclose(np.exp(m), 0.1).sum()
    assert inside == 3 * 3 * 2


def test_block_model_empty_is_constant():
    mesh = create_mesh(3, 3, 3)
    m = generate_block_model(mesh, [], 0.5)
    assert np.allclose(m, np.log(0.5))


def test_block_model_two_disjoint_blocks_counts():
    mesh = create_mesh(8, 8, 4)
    m = generate_block_model(
        mesh, [((0, 2, 0, 2, 0, 2), 0.2), ((5, 8, 5, 8, 1, 4), 0.3)], 0.01)
    assert np.isclose(np.exp(m), 0.2).sum() == 8
    assert np.isclose(np.exp(m), 0.3).sum() == 27


def test_block_model_rejects_out_of_range():
    mesh = create_mesh(4, 4, 4)
    with pytest.raises(ValueError):
        generate_block_model(mesh, [((0, 5, 0, 1, 0, 1), 0.1)], 0.01)


def test_salt_model_contrast():
    mesh = create_mesh(10, 10, 8)
    m = generate_salt_model(mesh, background=0.1, body=3.0)
    sigma = np.exp(m)
    assert sigma.max() == pytest.approx(3.0)
    assert sigma.min() >= 0.1


def test_survey_layout_counts_and_sparsity():
    mesh = create_mesh(12, 12, 6)
    s = build_survey(mesh, n_src=(3, 3), n_rec=(8, 8))
    assert s.n_sources == 9
    assert s.n_receivers == 64
    # dipoles: two entries per source column summing to zero
    q = s.Q.toarray()
    assert np.allclose(q.sum(axis=0), 0.0)
    assert np.all((q != 0).sum(axis=0) == 2)
    # receivers on the top surface
    rows = s.P.tocoo().row
    k = mesh.node_triple(rows + 1)[2]
    assert np.all(k == mesh.n3)


def test_relative_error():
    b = np.array([3.0, 4.0])
    assert compute_relative_error(b, b) == 0.0
    assert compute_relative_error(2 * b, b) == pytest.approx(1.0)
    e = np.array([1.0, 2.0, 2.0])
    assert compute_relative_error(e + np.array([0.0, 0.0, 3.0]), e) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        compute_relative_error(b, np.zeros(2))


# ------------------------------------------------------------------ config

GOOD = """
# mesh
n1 = 8
n2 = 8
n3 = 4
b1 = 2
b2 = 2
b3 = 2
blocks = 1:3,1:3,1:3=0.1 ; 4:6,4:6,0:2=0.2
modes = full,ms-adaptive
alpha = 1e-8
"""


def test_parse_config_good():
    cfg = parse_config(GOOD)
    assert cfg.n1 == 8 and cfg.b3 == 2
    assert cfg.blocks == [((1, 3, 1, 3, 1, 3), 0.1), ((4, 6, 4, 6, 0, 2), 0.2)]
    assert cfg.modes == ("full", "ms-adaptive")
    assert cfg.alpha == 1e-8
    assert cfg.h1 == 1.0   # default
    mesh = cfg.mesh()
    assert mesh.n_cells == 8 * 8 * 4
    assert cfg.partition(mesh).n_blocks == 4 * 4 * 2


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("n1 = 2\nn2 = 2\nn3 = 2\nfrobnicate = 7\n")


def test_parse_config_requires_mesh():
    with pytest.raises(ValueError, match="missing required"):
        parse_config("n1 = 2\nn2 = 2\n")


def test_parse_config_rejects_bad_mode():
    with pytest.raises(ValueError, match="unknown mode"):
        parse_config("n1 = 2\nn2 = 2\nn3 = 2\nmodes = warp\n")


# ---------------------------------------------------------------------- io

def test_vtk_export_format_and_determinism(tmp_path):
    mesh = create_mesh(2, 2, 2, 0.5, 0.5, 0.5)
    m = np.full(mesh.n_cells, np.log(0.25))
    p1 = tmp_path / "a.vtk"
    p2 = tmp_path / "b.vtk"
    export_model_vtk(m, mesh, p1)
    export_model_vtk(m, mesh, p2)
    assert p1.read_bytes() == p2.read_bytes()

    # independent strict reader: structure, counts and values
    lines = p1.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII"
    assert lines[3] == "DATASET STRUCTURED_POINTS"
    dims = lines[4].split()
    assert dims[0] == "DIMENSIONS" and [int(x) for x in dims[1:]] == [2, 2, 2]
    assert lines[5].startswith("ORIGIN")
    assert lines[6].split() == ["SPACING", "0.5", "0.5", "0.5"]
    assert lines[7] == f"POINT_DATA {mesh.n_cells}"
    assert lines[8] == "SCALARS sigma double 1"
    assert lines[9] == "LOOKUP_TABLE default"
    vals = np.array([float(x) for x in lines[10:]])
    assert vals.size == mesh.n_cells
    assert np.allclose(vals, 0.25)


def test_trace_csv_row_count(tmp_path):
    trace = InversionTrace()
    trace.add(iter=0, phi=1.0, reg=0.1, total=1.1, pgnorm=2.0, step=0.0,
              cg_iters=0, active=0, rebuilt=True)
    for i in range(1, 4):
        trace.add(iter=i, phi=1.0 / (i + 1), reg=0.1, total=0.1 + 1.0 / (i + 1),
                  pgnorm=1.0 / i, step=0.5, cg_iters=3, active=2, rebuilt=False)
    path = tmp_path / "t.csv"
    export_trace_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,phi,reg,total,pgnorm,step,cg_iters,active,rebuilt"
    assert len(lines) == 1 + 4   # header + initial row + 3 iterations


def test_basis_triplet_dump(tmp_path):
    from msinv.basis import assemble_basis, generate_bc_lagrange
    from msinv.mesh import create_partition
    from msinv.operators import assemble_operator

    mesh = create_mesh(4, 4, 2)
    p = create_partition(mesh, 2, 2, 2)
    op = assemble_operator(mesh, np.zeros(mesh.n_cells))
    basis = assemble_basis(op, p, [generate_bc_lagrange(p)])
    path = tmp_path / "s.txt"
    dump_basis_triplets(basis, path)
    rows = [line.split() for line in path.read_text().splitlines()]
    S = np.zeros((basis.n, basis.k))
    for r, c, v in rows:
        S[int(r), int(c)] = float(v)
    assert np.allclose(S, basis.S.toarray())
