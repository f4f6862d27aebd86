from fractions import Fraction
from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from conftest import cube_mesh, tet_mesh
from sddr.mesh import build_mesh, generate_mesh
from sddr.quadrature import (QuadratureError, cell_rule, edge_rule, face_rule, segment_rule,
                             tetra_rule, triangle_rule)


def exps(d):
    return [(a, b, c) for a in range(d + 1) for b in range(d + 1 - a) for c in range(d + 1 - a - b)]


def test_edge_cubic():
    r = segment_rule(np.zeros(3), np.array([1.0, 0, 0]), 3)
    assert r.integrate(r.points[:, 0] ** 3) == pytest.approx(0.25, abs=1e-14)


def test_reference_tet_volume():
    r = cell_rule(tet_mesh(), 0, 0)
    assert r.weights.sum() == pytest.approx(1 / 6, abs=1e-15)


def test_unit_square_face():
    m = cube_mesh()
    f = next(i for i in range(m.n_faces) if np.allclose(m.face_center[i], [0.5, 0.5, 0]))
    r = face_rule(m, f, 2)
    assert r.integrate(r.points[:, 0] * r.points[:, 1]) == pytest.approx(0.25, abs=1e-14)


@pytest.mark.parametrize("d", [0, 1, 3, 6])
def test_unit_cube_monomials(d):
    r = cell_rule(cube_mesh(), 0, d)
    x = r.points
    for a, b, c in exps(d):
        exact = 1 / ((a + 1) * (b + 1) * (c + 1))
        assert r.integrate(x[:, 0]**a * x[:, 1]**b * x[:, 2]**c) == pytest.approx(exact, rel=1e-13)


@pytest.mark.parametrize("d", [2, 5, 8])
def test_reference_tet_monomials(d):
    # int_T x^a y^b z^c = a! b! c! / (a+b+c+3)!
    r = tetra_rule(np.zeros(3), np.eye(3)[0], np.eye(3)[1], np.eye(3)[2], d)
    x = r.points
    for a, b, c in exps(d):
        exact = Fraction(factorial(a) * factorial(b) * factorial(c), factorial(a + b + c + 3))
        assert r.integrate(x[:, 0]**a * x[:, 1]**b * x[:, 2]**c) == pytest.approx(float(exact), rel=1e-12)


def test_reference_triangle_monomials():
    r = triangle_rule(np.zeros(3), np.eye(3)[0], np.eye(3)[1], 7)
    x = r.points
    for a in range(8):
        for b in range(8 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert r.integrate(x[:, 0]**a * x[:, 1]**b) == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("kind", ["hex-grid", "tet-subdiv"])
def test_weights_positive_and_sum_to_measure(kind):
    m = generate_mesh(kind, 2)
    for t in range(m.n_cells):
        r = cell_rule(m, t, 4)
        assert np.all(r.weights > 0)
        assert r.weights.sum() == pytest.approx(m.cell_volume[t], rel=1e-13)
    for f in range(m.n_faces):
        r = face_rule(m, f, 4)
        assert np.all(r.weights > 0)
        assert r.weights.sum() == pytest.approx(m.face_area[f], rel=1e-13)
    for e in range(m.n_edges):
        assert edge_rule(m, e, 3).weights.sum() == pytest.approx(m.edge_length[e], rel=1e-13)


def test_degenerate_subsimplex_names_entity():
    import dataclasses
    m = cube_mesh()
    fc = m.face_center.copy()
    fc[2] = m.vertices[m.face_vertices[2][0]]   # fan apex on a vertex -> flat triangle
    bad = dataclasses.replace(m, face_center=fc)
    with pytest.raises(QuadratureError, match="face 2"):
        face_rule(bad, 2, 2)
    cc = m.cell_center.copy()
    cc[0] = m.vertices[0]
    with pytest.raises(QuadratureError, match="cell 0"):
        cell_rule(dataclasses.replace(m, cell_center=cc), 0, 2)


def test_quadrature_error_type():
    assert issubclass(QuadratureError, ValueError)


def random_convex_polyhedron(seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((12, 3))
    P /= np.linalg.norm(P, axis=1)[:, None]
    hull = ConvexHull(P)
    faces = []
    for s in hull.simplices:
        a, b, c = P[s]
        if np.dot(np.cross(b - a, c - a), a - P.mean(0)) < 0:
            s = s[[0, 2, 1]]
        faces.append(list(s))
    used = sorted({v for f in faces for v in f})
    ren = {v: i for i, v in enumerate(used)}
    return build_mesh(P[used], [[ren[v] for v in f] for f in faces], [list(range(len(faces)))])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_random_polyhedron_against_refined_rule(seed, d):
    m = random_convex_polyhedron(seed)
    rng = np.random.default_rng(seed + 1)
    coef = rng.standard_normal(len(exps(d)))

    def p(x):
        return sum(c * x[:, 0]**a * x[:, 1]**b * x[:, 2]**e for c, (a, b, e) in zip(coef, exps(d)))
    r, fine = cell_rule(m, 0, d), cell_rule(m, 0, d + 4)
    assert r.integrate(p(r.points)) == pytest.approx(fine.integrate(p(fine.points)), rel=1e-12, abs=1e-13)
    for f in range(m.n_faces):
        r, fine = face_rule(m, f, d), face_rule(m, f, d + 4)
        assert r.integrate(p(r.points)) == pytest.approx(fine.integrate(p(fine.points)), rel=1e-12, abs=1e-13)
