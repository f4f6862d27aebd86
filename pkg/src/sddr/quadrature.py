"""Quadrature on edges, polygons and polyhedra.

Simplices use collapsed Gauss-Jacobi (conical product) rules, which have
positive weights and any requested exactness. Polygons are split into a fan
around their centroid, polyhedra into pyramids from the cell centroid over the
face fans. Triangles and tetrahedra are integrated directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .mesh import PolyMesh

__all__ = [
    "QuadratureError",
    "QuadRule",
    "edge_rule",
    "face_rule",
    "cell_rule",
    "segment_rule",
    "triangle_rule",
    "tetra_rule",
]


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Sum ``weights * values`` over the first axis."""
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def _jacobi01(n: int, alpha: int):
    """n-point rule on [0, 1] for the weight (1 - x)^alpha."""
    x, w = roots_jacobi(n, alpha, 0)
    return (1 + x) / 2, w / 2 ** (alpha + 1)


@lru_cache(maxsize=None)
def _ref_segment(degree: int):
    n = degree // 2 + 1
    return _jacobi01(n, 0)


@lru_cache(maxsize=None)
def _ref_triangle(degree: int):
    n = degree // 2 + 1
    a, wa = _jacobi01(n, 1)
    b, wb = _jacobi01(n, 0)
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = np.column_stack([A.ravel(), ((1 - A) * B).ravel()])
    return pts, np.outer(wa, wb).ravel()


@lru_cache(maxsize=None)
def _ref_tetra(degree: int):
    n = degree // 2 + 1
    a, wa = _jacobi01(n, 2)
    b, wb = _jacobi01(n, 1)
    c, wc = _jacobi01(n, 0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    pts = np.column_stack([A.ravel(), ((1 - A) * B).ravel(), ((1 - A) * (1 - B) * C).ravel()])
    w = (wa[:, None, None] * wb[None, :, None] * wc[None, None, :]).ravel()
    return pts, w


def segment_rule(a: np.ndarray, b: np.ndarray, degree: int) -> QuadRule:
    s, w = _ref_segment(degree)
    L = np.linalg.norm(b - a)
    return QuadRule(a + s[:, None] * (b - a), w * L, degree)


def triangle_rule(a, b, c, degree: int) -> QuadRule:
    ref, w = _ref_triangle(degree)
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
    pts = a + ref[:, :1] * (b - a) + ref[:, 1:] * (c - a)
    return QuadRule(pts, w * 2 * area, degree)


def tetra_rule(a, b, c, d, degree: int) -> QuadRule:
    ref, w = _ref_tetra(degree)
    vol = abs(np.dot(np.cross(b - a, c - a), d - a)) / 6.0
    pts = a + ref[:, :1] * (b - a) + ref[:, 1:2] * (c - a) + ref[:, 2:] * (d - a)
    return QuadRule(pts, w * 6 * vol, degree)


def _merge(rules: list[QuadRule], degree: int) -> QuadRule:
    return QuadRule(np.vstack([r.points for r in rules]),
                    np.concatenate([r.weights for r in rules]), degree)


def edge_rule(mesh: PolyMesh, e: int, degree: int) -> QuadRule:
    a, b = mesh.vertices[mesh.edges[e]]
    return segment_rule(a, b, degree)


def face_triangles(mesh: PolyMesh, f: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    loop = mesh.vertices[mesh.face_vertices[f]]
    if len(loop) == 3:
        return [tuple(loop)]
    c = mesh.face_center[f]
    return [(c, a, b) for a, b in zip(loop, np.roll(loop, -1, axis=0))]


def face_rule(mesh: PolyMesh, f: int, degree: int) -> QuadRule:
    tris = face_triangles(mesh, f)
    tol = 1e-14 * mesh.face_diameter[f] ** 2
    for a, b, c in tris:
        if 0.5 * np.linalg.norm(np.cross(b - a, c - a)) <= tol:
            raise QuadratureError(f"face {f}: degenerate sub-triangle in fan")
    return _merge([triangle_rule(*t, degree) for t in tris], degree)


def cell_rule(mesh: PolyMesh, t: int, degree: int) -> QuadRule:
    faces = mesh.cell_faces[t]
    if len(faces) == 4 and all(len(mesh.face_vertices[f]) == 3 for f in faces):
        return tetra_rule(*mesh.vertices[mesh.cell_vertices[t]], degree)
    xc = mesh.cell_center[t]
    tol = 1e-14 * mesh.cell_diameter[t] ** 3
    rules = []
    for j, f in enumerate(faces):
        for a, b, c in face_triangles(mesh, f):
            vol = mesh.cell_face_orient[t][j] * np.dot(np.cross(b - a, c - a), a - xc) * \
                np.sign(np.dot(np.cross(b - a, c - a), mesh.face_normal[f])) / 6.0
            if vol <= tol:
                raise QuadratureError(f"cell {t}: degenerate or inverted sub-tetrahedron on face {f}")
            rules.append(tetra_rule(xc, a, b, c, degree))
    return _merge(rules, degree)
