"""Polyhedral meshes with oriented topology.

A mesh is read from (or written to) a small JSON format::

    {"vertices": [[x, y, z], ...],
     "faces": [[v0, v1, ...], ...],     # vertex loops, CCW w.r.t. the face normal
     "cells": [[f0, f1, ...], ...]}     # face indices bounding each cell

Face normals come from the stored loop (Newell's formula), edge tangents point
from the lower to the higher global vertex index, and relative orientations
are derived from those two conventions.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MeshError",
    "NonManifoldError",
    "NonPlanarFaceError",
    "DegenerateEntityError",
    "PolyMesh",
    "RegularityReport",
    "build_mesh",
    "load_mesh",
    "save_mesh",
    "generate_mesh",
    "regularity_report",
]

PLANARITY_TOL = 1e-10
MEASURE_TOL = 1e-13


class MeshError(ValueError):
    """Invalid mesh input."""


class NonManifoldError(MeshError):
    pass


class NonPlanarFaceError(MeshError):
    pass


class DegenerateEntityError(MeshError):
    pass


def _newell(pts: np.ndarray) -> np.ndarray:
    """Area vector of a closed planar loop (|n| = area)."""
    nxt = np.roll(pts, -1, axis=0)
    return 0.5 * np.cross(pts, nxt).sum(axis=0)


def _diameter(pts: np.ndarray) -> float:
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def _polygon_centroid(pts: np.ndarray, normal: np.ndarray) -> np.ndarray:
    c0 = pts.mean(axis=0)
    nxt = np.roll(pts, -1, axis=0)
    areas = np.cross(pts - c0, nxt - c0) @ normal * 0.5
    cents = (c0 + pts + nxt) / 3.0
    return (areas[:, None] * cents).sum(0) / areas.sum()


@dataclass(frozen=True, eq=False)
class PolyMesh:
    """Immutable polyhedral mesh with all orientation data precomputed.

    Attributes are numpy arrays (one row per entity) or tuples of arrays for
    ragged data. Relative orientations follow these rules:

    * ``face_edge_orient[f][i]`` is +1 when ``face_edge_normal[f][i]``
      (``n_F x t_E``) points out of the face, i.e. when the edge tangent runs
      against the counter-clockwise loop.
    * ``cell_face_orient[t][j]`` is +1 when ``face_normal`` points out of the cell.
    """

    vertices: np.ndarray
    edges: np.ndarray
    face_vertices: tuple
    face_edges: tuple
    face_edge_orient: tuple
    cell_faces: tuple
    cell_face_orient: tuple
    cell_edges: tuple
    cell_vertices: tuple
    edge_tangent: np.ndarray
    edge_length: np.ndarray
    edge_center: np.ndarray
    face_normal: np.ndarray
    face_axes: np.ndarray
    face_center: np.ndarray
    face_area: np.ndarray
    face_diameter: np.ndarray
    face_edge_normal: tuple
    cell_center: np.ndarray
    cell_volume: np.ndarray
    cell_diameter: np.ndarray
    face_cells: tuple = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cell_faces)

    @property
    def edge_diameter(self) -> np.ndarray:
        return self.edge_length

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        return np.array([f for f, c in enumerate(self.face_cells) if len(c) == 1], dtype=int)

    @cached_property
    def meshsize(self) -> float:
        return float(self.cell_diameter.max())

    def counts(self) -> dict:
        return {"vertices": self.n_vertices, "edges": self.n_edges,
                "faces": self.n_faces, "cells": self.n_cells}

    def outward_normal(self, t: int, j: int) -> np.ndarray:
        """Outward unit normal of cell ``t`` on its ``j``-th face."""
        return self.cell_face_orient[t][j] * self.face_normal[self.cell_faces[t][j]]

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "faces": [list(map(int, f)) for f in self.face_vertices],
            "cells": [list(map(int, c)) for c in self.cell_faces],
        }


def build_mesh(vertices, faces: Sequence[Sequence[int]], cells: Sequence[Sequence[int]]) -> PolyMesh:
    """Validate raw connectivity and compute the oriented mesh data."""
    X = np.asarray(vertices, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3:
        raise MeshError("vertices must be an (n, 3) array")
    nv = len(X)
    face_loops = []
    for f, loop in enumerate(faces):
        loop = np.asarray(loop, dtype=int)
        if len(loop) < 3:
            raise DegenerateEntityError(f"face {f} has fewer than 3 vertices")
        if len(set(loop.tolist())) != len(loop):
            raise DegenerateEntityError(f"face {f} repeats a vertex")
        if loop.min() < 0 or loop.max() >= nv:
            raise MeshError(f"face {f} references a missing vertex")
        face_loops.append(loop)

    # edges, ordered lexicographically by (low, high)
    pairs = set()
    for loop in face_loops:
        for a, b in zip(loop, np.roll(loop, -1)):
            pairs.add((min(a, b), max(a, b)))
    edges = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
    edge_index = {tuple(e): i for i, e in enumerate(edges.tolist())}
    evec = X[edges[:, 1]] - X[edges[:, 0]]
    elen = np.linalg.norm(evec, axis=1)
    scale = _diameter(X) if nv > 1 else 1.0
    bad = np.nonzero(elen <= MEASURE_TOL * scale)[0]
    if len(bad):
        raise DegenerateEntityError(f"edge {int(bad[0])} has zero length")
    etan = evec / elen[:, None]
    ectr = 0.5 * (X[edges[:, 0]] + X[edges[:, 1]])

    nf = len(face_loops)
    fnormal = np.zeros((nf, 3))
    faxes = np.zeros((nf, 2, 3))
    fctr = np.zeros((nf, 3))
    farea = np.zeros(nf)
    fdiam = np.zeros(nf)
    f_edges, f_orient, f_enorm = [], [], []
    for f, loop in enumerate(face_loops):
        P = X[loop]
        av = _newell(P)
        area = np.linalg.norm(av)
        diam = _diameter(P)
        if area <= MEASURE_TOL * diam**2:
            raise DegenerateEntityError(f"face {f} has zero area")
        n = av / area
        c = _polygon_centroid(P, n)
        if np.abs((P - c) @ n).max() > PLANARITY_TOL * diam:
            raise NonPlanarFaceError(f"face {f} is not planar")
        u = P[1] - P[0]
        u = u - (u @ n) * n
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        fnormal[f], faxes[f], fctr[f], farea[f], fdiam[f] = n, (u, v), c, area, diam
        eids, oris = [], []
        for a, b in zip(loop, np.roll(loop, -1)):
            eids.append(edge_index[(min(a, b), max(a, b))])
            # tangent follows the loop -> normal n x t points inward
            oris.append(-1 if a < b else 1)
        eids = np.array(eids, dtype=int)
        f_edges.append(eids)
        f_orient.append(np.array(oris, dtype=int))
        f_enorm.append(np.cross(n, etan[eids]))

    nc = len(cells)
    cfaces, corient, cedges, cverts = [], [], [], []
    cctr = np.zeros((nc, 3))
    cvol = np.zeros(nc)
    cdiam = np.zeros(nc)
    face_cells: list[list[int]] = [[] for _ in range(nf)]
    for t, flist in enumerate(cells):
        fl = np.asarray(flist, dtype=int)
        if len(fl) < 4:
            raise DegenerateEntityError(f"cell {t} has fewer than 4 faces")
        if len(set(fl.tolist())) != len(fl):
            raise NonManifoldError(f"cell {t} lists a face twice")
        if fl.min() < 0 or fl.max() >= nf:
            raise MeshError(f"cell {t} references a missing face")
        for f in fl:
            face_cells[f].append(t)
        ev = np.unique(np.concatenate([f_edges[f] for f in fl]))
        # each edge of a closed surface is shared by exactly two faces
        cnt = np.zeros(len(edges), dtype=int)
        for f in fl:
            cnt[f_edges[f]] += 1
        if np.any(cnt[ev] != 2):
            raise NonManifoldError(f"cell {t} boundary is not a closed surface")
        vv = np.unique(edges[ev].ravel())
        P = X[vv]
        c0 = P.mean(axis=0)
        ori = np.where(((fctr[fl] - c0) * fnormal[fl]).sum(1) > 0, 1, -1)
        vol, mom = 0.0, np.zeros(3)
        for f, o in zip(fl, ori):
            L = X[face_loops[f]]
            nxt = np.roll(L, -1, axis=0)
            cf = fctr[f]
            for a, b in zip(L, nxt):
                sv = o * np.dot(np.cross(a - cf, b - cf), cf - c0) / 6.0
                vol += sv
                mom += sv * (c0 + cf + a + b) / 4.0
        diam = _diameter(P)
        if vol <= MEASURE_TOL * diam**3:
            raise DegenerateEntityError(f"cell {t} has zero volume")
        xc = mom / vol
        ori = np.where(((fctr[fl] - xc) * fnormal[fl]).sum(1) > 0, 1, -1)
        cfaces.append(fl)
        corient.append(ori.astype(int))
        cedges.append(ev)
        cverts.append(vv)
        cctr[t], cvol[t], cdiam[t] = xc, vol, diam

    for f, cl in enumerate(face_cells):
        if len(cl) == 0:
            raise NonManifoldError(f"face {f} belongs to no cell")
        if len(cl) > 2:
            raise NonManifoldError(f"face {f} is shared by {len(cl)} cells")
        if len(cl) == 2:
            o = [int(corient[t][list(cfaces[t]).index(f)]) for t in cl]
            if o[0] == o[1]:
                raise NonManifoldError(f"face {f} is not consistently oriented between cells {cl}")

    return PolyMesh(
        vertices=X, edges=edges,
        face_vertices=tuple(face_loops), face_edges=tuple(f_edges),
        face_edge_orient=tuple(f_orient),
        cell_faces=tuple(cfaces), cell_face_orient=tuple(corient),
        cell_edges=tuple(cedges), cell_vertices=tuple(cverts),
        edge_tangent=etan, edge_length=elen, edge_center=ectr,
        face_normal=fnormal, face_axes=faxes, face_center=fctr,
        face_area=farea, face_diameter=fdiam, face_edge_normal=tuple(f_enorm),
        cell_center=cctr, cell_volume=cvol, cell_diameter=cdiam,
        face_cells=tuple(np.array(c, dtype=int) for c in face_cells),
    )


def load_mesh(path: str | Path, fmt: str = "json-poly") -> PolyMesh:
    if fmt != "json-poly":
        raise MeshError(f"unsupported mesh format {fmt!r}")
    with open(path) as fh:
        data = json.load(fh)
    try:
        return build_mesh(data["vertices"], data["faces"], data["cells"])
    except KeyError as exc:
        raise MeshError(f"missing key {exc} in {path}") from None


def save_mesh(mesh: PolyMesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(mesh.to_dict(), fh)


def _grid_vertices(n: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, n + 1)
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()])


def _hex_grid(n: int):
    X = _grid_vertices(n)
    vid = lambda i, j, k: i + (n + 1) * (j + (n + 1) * k)  # noqa: E731
    faces, cells, lookup = [], [], {}

    def face(loop):
        key = tuple(sorted(loop))
        if key not in lookup:
            lookup[key] = len(faces)
            faces.append(list(loop))
        return lookup[key]

    for k, j, i in itertools.product(range(n), repeat=3):
        c = {(a, b, d): vid(i + a, j + b, k + d) for a in (0, 1) for b in (0, 1) for d in (0, 1)}
        loops = [
            [c[0, 0, 0], c[0, 1, 0], c[1, 1, 0], c[1, 0, 0]],
            [c[0, 0, 1], c[1, 0, 1], c[1, 1, 1], c[0, 1, 1]],
            [c[0, 0, 0], c[1, 0, 0], c[1, 0, 1], c[0, 0, 1]],
            [c[0, 1, 0], c[0, 1, 1], c[1, 1, 1], c[1, 1, 0]],
            [c[0, 0, 0], c[0, 0, 1], c[0, 1, 1], c[0, 1, 0]],
            [c[1, 0, 0], c[1, 1, 0], c[1, 1, 1], c[1, 0, 1]],
        ]
        cells.append([face(l) for l in loops])
    return X, faces, cells


def _tet_subdiv(n: int):
    X = _grid_vertices(n)
    vid = lambda i, j, k: i + (n + 1) * (j + (n + 1) * k)  # noqa: E731
    faces, cells, lookup = [], [], {}

    def face(tri):
        key = tuple(sorted(tri))
        if key not in lookup:
            lookup[key] = len(faces)
            faces.append(list(tri))
        return lookup[key]

    unit = np.eye(3, dtype=int)
    for k, j, i in itertools.product(range(n), repeat=3):
        base = np.array([i, j, k])
        for perm in itertools.permutations(range(3)):
            p = [base.copy()]
            for ax in perm:
                p.append(p[-1] + unit[ax])
            ids = [vid(*q) for q in p]
            cells.append([face([ids[a] for a in tri]) for tri in itertools.combinations(range(4), 3)])
    return X, faces, cells


def generate_mesh(kind: str, n: int) -> PolyMesh:
    """Structured meshes of the unit cube.

    ``hex-grid`` gives n^3 cubes; ``tet-subdiv`` splits each cube into six
    tetrahedra sharing its main diagonal (conforming across cubes).
    """
    if n < 1:
        raise MeshError("n must be positive")
    if kind == "hex-grid":
        return build_mesh(*_hex_grid(n))
    if kind == "tet-subdiv":
        return build_mesh(*_tet_subdiv(n))
    raise MeshError(f"unknown mesh kind {kind!r}")


@dataclass
class RegularityReport:
    rho_min: float
    rho_cells: np.ndarray
    rho_faces: np.ndarray
    flagged_cells: list
    flagged_faces: list
    max_faces_per_cell: int
    max_edges_per_face: int

    def to_dict(self) -> dict:
        return {
            "rho_min": self.rho_min,
            "rho_cell_min": float(self.rho_cells.min()),
            "rho_face_min": float(self.rho_faces.min()),
            "flagged_cells": self.flagged_cells,
            "flagged_faces": self.flagged_faces,
            "max_faces_per_cell": self.max_faces_per_cell,
            "max_edges_per_face": self.max_edges_per_face,
        }


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    s = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - a - s * ab))


def _face_inradius(mesh: PolyMesh, f: int, p: np.ndarray) -> float:
    """Distance from an in-plane point to the boundary of face ``f`` (negative if outside)."""
    loop = mesh.vertices[mesh.face_vertices[f]]
    d = min(_point_segment_distance(p, a, b) for a, b in zip(loop, np.roll(loop, -1, axis=0)))
    # inside test: p on the inner side of every edge when the face is convex,
    # otherwise fall back on the winding of the fan
    nrm = mesh.face_normal[f]
    nxt = np.roll(loop, -1, axis=0)
    wind = np.sign(np.cross(loop - p, nxt - p) @ nrm)
    return d if np.all(wind > 0) else -d


def _point_polygon_distance(mesh: PolyMesh, f: int, p: np.ndarray) -> float:
    n = mesh.face_normal[f]
    c = mesh.face_center[f]
    h = np.dot(p - c, n)
    q = p - h * n
    r = _face_inradius(mesh, f, q)
    if r >= 0:
        return abs(h)
    return float(np.hypot(h, r))


def regularity_report(mesh: PolyMesh, rho_tol: float = 1e-3) -> RegularityReport:
    """Inscribed-ball ratio rho_P = r(x_P) / h_P for every cell and face.

    The ball is centred at the stored interior point (the centroid).
    """
    rc = np.empty(mesh.n_cells)
    for t in range(mesh.n_cells):
        x = mesh.cell_center[t]
        r = min(_point_polygon_distance(mesh, f, x) for f in mesh.cell_faces[t])
        rc[t] = r / mesh.cell_diameter[t]
    rf = np.array([_face_inradius(mesh, f, mesh.face_center[f]) / mesh.face_diameter[f]
                   for f in range(mesh.n_faces)])
    return RegularityReport(
        rho_min=float(min(rc.min(), rf.min())),
        rho_cells=rc, rho_faces=rf,
        flagged_cells=[int(t) for t in np.nonzero(rc < rho_tol)[0]],
        flagged_faces=[int(f) for f in np.nonzero(rf < rho_tol)[0]],
        max_faces_per_cell=max(len(c) for c in mesh.cell_faces),
        max_edges_per_face=max(len(f) for f in mesh.face_vertices),
    )
