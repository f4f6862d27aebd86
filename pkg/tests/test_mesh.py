import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import CUBE_F, CUBE_V, cube_mesh, tet_mesh
from sddr.mesh import (DegenerateEntityError, MeshError, NonManifoldError, NonPlanarFaceError,
                       build_mesh, generate_mesh, load_mesh, regularity_report, save_mesh)


def affine_maps():
    """Well-conditioned random affine maps (either orientation)."""
    mat = st.lists(st.floats(-1, 1), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))
    shift = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)
    return st.tuples(mat, shift).map(lambda ms: (np.eye(3) * 1.2 + 0.5 * ms[0], ms[1])).filter(
        lambda ms: np.linalg.cond(ms[0]) < 20)


def check_orientation(m):
    for f in range(m.n_faces):
        nF = m.face_normal[f]
        area_sum = np.zeros(3)
        for i, e in enumerate(m.face_edges[f]):
            t = m.edge_tangent[e]
            nFE = m.face_edge_normal[f][i]
            assert np.linalg.det(np.column_stack([t, nFE, nF])) == pytest.approx(1.0, abs=1e-12)
            om = m.face_edge_orient[f][i]
            # outward in the face plane
            assert np.dot(m.edge_center[e] - m.face_center[f], om * nFE) > 0
            area_sum += om * m.edge_length[e] * nFE
        assert np.abs(area_sum).max() <= 1e-12 * m.face_diameter[f]
    for t in range(m.n_cells):
        s = np.zeros(3)
        for j, f in enumerate(m.cell_faces[t]):
            n_out = m.cell_face_orient[t][j] * m.face_normal[f]
            assert np.dot(m.face_center[f] - m.cell_center[t], n_out) > 0
            assert np.allclose(m.outward_normal(t, j), n_out)
            s += m.face_area[f] * n_out
        assert np.abs(s).max() <= 1e-12 * m.cell_diameter[t] ** 2
    for f, cells in enumerate(m.face_cells):
        assert len(cells) in (1, 2)
        if len(cells) == 2:
            signs = [m.cell_face_orient[c][list(m.cell_faces[c]).index(f)] for c in cells]
            assert signs[0] == -signs[1]


class TestConstruction:
    def test_reference_tet_counts(self):
        assert tet_mesh().counts() == {"vertices": 4, "edges": 6, "faces": 4, "cells": 1}

    def test_unit_cube_counts_and_diameter(self):
        m = cube_mesh()
        assert m.counts() == {"vertices": 8, "edges": 12, "faces": 6, "cells": 1}
        assert m.cell_diameter[0] == pytest.approx(math.sqrt(3), abs=1e-14)
        assert m.meshsize == pytest.approx(math.sqrt(3))

    def test_edges_ascending(self):
        m = generate_mesh("tet-subdiv", 2)
        assert np.all(m.edges[:, 0] < m.edges[:, 1])
        t = m.vertices[m.edges[:, 1]] - m.vertices[m.edges[:, 0]]
        assert np.allclose(m.edge_tangent, t / np.linalg.norm(t, axis=1)[:, None])

    def test_face_in_three_cells_rejected(self):
        X = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1], [1, 1, 1]]
        faces = [[0, 1, 2],
                 [0, 1, 3], [0, 3, 2], [1, 2, 3],
                 [0, 1, 4], [0, 4, 2], [1, 2, 4],
                 [0, 1, 5], [0, 5, 2], [1, 2, 5]]
        cells = [[0, 1, 2, 3], [0, 4, 5, 6], [0, 7, 8, 9]]
        with pytest.raises(NonManifoldError):
            build_mesh(X, faces, cells)

    def test_nonplanar_face_rejected(self):
        X = np.array(CUBE_V, float)
        X[6, 2] += 0.1
        with pytest.raises(NonPlanarFaceError):
            build_mesh(X, CUBE_F, [[0, 1, 2, 3, 4, 5]])

    def test_flat_tet_rejected(self):
        X = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
        with pytest.raises(MeshError):
            build_mesh(X, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], [[0, 1, 2, 3]])

    def test_repeated_vertex_is_degenerate(self):
        X = [[0, 0, 0], [1, 0, 0], [1, 0, 0], [0, 0, 1]]
        with pytest.raises(MeshError):
            build_mesh(X, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], [[0, 1, 2, 3]])

    def test_open_surface_rejected(self):
        with pytest.raises(MeshError):
            build_mesh(CUBE_V, CUBE_F[:5], [[0, 1, 2, 3, 4]])

    def test_error_hierarchy(self):
        for cls in (NonManifoldError, NonPlanarFaceError, DegenerateEntityError):
            assert issubclass(cls, MeshError) and issubclass(cls, ValueError)


class TestGenerators:
    def test_hex_grid_2(self):
        m = generate_mesh("hex-grid", 2)
        assert m.n_cells == 8 and m.n_faces == 36

    def test_tet_subdiv_1(self):
        m = generate_mesh("tet-subdiv", 1)
        assert m.n_cells == 6
        assert all(len(c) == 4 for c in m.cell_faces)

    @pytest.mark.parametrize("kind", ["hex-grid", "tet-subdiv"])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_volume_and_orientation(self, kind, n):
        m = generate_mesh(kind, n)
        assert m.cell_volume.sum() == pytest.approx(1.0, abs=1e-12)
        assert m.n_cells == n**3 * (6 if kind == "tet-subdiv" else 1)
        check_orientation(m)

    def test_boundary_faces(self):
        m = generate_mesh("hex-grid", 3)
        assert len(m.boundary_faces) == 6 * 9

    def test_bad_generator(self):
        with pytest.raises(MeshError):
            generate_mesh("voronoi", 2)
        with pytest.raises(MeshError):
            generate_mesh("hex-grid", 0)


class TestIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        m = generate_mesh("tet-subdiv", 2)
        p = tmp_path / "m.json"
        save_mesh(m, p)
        m2 = load_mesh(p)
        for a, b in zip(m.cell_face_orient, m2.cell_face_orient):
            assert np.array_equal(a, b)
        for a, b in zip(m.face_edge_orient, m2.face_edge_orient):
            assert np.array_equal(a, b)
        assert np.array_equal(m.face_normal, m2.face_normal)

    def test_json_poly_schema(self, tmp_path):
        p = tmp_path / "tet.json"
        p.write_text(json.dumps({"vertices": [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                                 "faces": [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
                                 "cells": [[0, 1, 2, 3]]}))
        assert load_mesh(p).counts()["cells"] == 1

    def test_parse_error(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises((MeshError, ValueError)):
            load_mesh(p)

    def test_unknown_format(self, tmp_path):
        with pytest.raises((MeshError, ValueError)):
            load_mesh(tmp_path / "x.obj", fmt="obj")


class TestRegularity:
    def test_unit_cube(self):
        rep = regularity_report(cube_mesh())
        assert rep.rho_cells[0] == pytest.approx(0.5 / math.sqrt(3), rel=1e-12)

    def test_regular_tet(self):
        X = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
        rep = regularity_report(tet_mesh(X))
        # inradius a / (2 sqrt 6) over the edge length a
        assert rep.rho_cells[0] == pytest.approx(1 / (2 * math.sqrt(6)), rel=1e-12)
        assert rep.rho_min > 0 and not rep.flagged_cells

    def test_sliver_flagged(self):
        X = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.3, 1e-6]]
        rep = regularity_report(tet_mesh(X))
        assert rep.rho_min < 1e-5
        assert rep.flagged_cells == [0]
        assert set(rep.to_dict()) >= {"rho_min", "flagged_cells"}


@settings(max_examples=25, deadline=None)
@given(affine_maps(), st.sampled_from(["hex-grid", "tet-subdiv"]))
def test_orientation_invariants_under_affine_maps(ms, kind):
    A, b = ms
    base = generate_mesh(kind, 2)
    X = base.vertices @ A.T + b
    faces = [list(f) for f in base.face_vertices]
    m = build_mesh(X, faces, [list(c) for c in base.cell_faces])
    check_orientation(m)
    assert m.cell_volume.sum() == pytest.approx(abs(np.linalg.det(A)), rel=1e-10)
