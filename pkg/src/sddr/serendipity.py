"""Serendipity reduction of the DDR complex.

On each face and cell a set of ``eta_P`` boundaries (edges of a face, faces of
a cell) is selected; the element-interior polynomial components can then be
lowered to degree ``l_P = k + 1 - eta_P`` without losing the polynomial
consistency of the complex. Extension maps ``E`` rebuild full DDR vectors
from serendipity ones and reductions ``R`` go the other way, with ``R E = Id``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import comb
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .ddr import DDRComplex, DofLayout, LocalMap, ip, solve
from .mesh import PolyMesh
from .polyspace import space_dim

__all__ = [
    "SelectionError",
    "BoundarySelection",
    "select_boundaries",
    "dof_count",
    "SerendipityDDR",
    "MUTATIONS",
]

MUTATIONS = (None, "drop_hatu_correction", "plain_ecurl_projection")
_GEOM_TOL = 1e-12


class SelectionError(ValueError):
    """No admissible set of at least two boundaries exists."""


@dataclass(frozen=True)
class BoundarySelection:
    kind: str
    index: int
    boundaries: tuple   # edge ids (faces) or face ids (cells)
    theta: float

    @property
    def eta(self) -> int:
        return len(self.boundaries)

    def ell(self, k: int) -> int:
        return k + 1 - self.eta


def _candidates(mesh: PolyMesh, kind: str, i: int):
    """(boundary id, point on it, inward unit normal, vertices of P, h_P)."""
    if kind == "face":
        verts = mesh.vertices[mesh.face_vertices[i]]
        out = [(int(e), mesh.edge_center[e], -mesh.face_edge_orient[i][j] * mesh.face_edge_normal[i][j])
               for j, e in enumerate(mesh.face_edges[i])]
        return out, verts, mesh.face_diameter[i]
    verts = mesh.vertices[mesh.cell_vertices[i]]
    out = [(int(f), mesh.face_center[f], -mesh.cell_face_orient[i][j] * mesh.face_normal[f])
           for j, f in enumerate(mesh.cell_faces[i])]
    return out, verts, mesh.cell_diameter[i]


def select_boundaries(mesh: PolyMesh, kind: str, i: int, theta_min: float = 0.1) -> BoundarySelection:
    """Greedy choice of serendipity boundaries with separation ``theta >= theta_min``.

    A boundary is admissible if P lies on one side of its hyperplane; two
    boundaries on the same hyperplane are never selected together. The
    separation of a set is ``min dist_b(x_b')`` over ordered pairs, with
    ``dist_b`` the distance to the hyperplane of ``b`` scaled by ``h_P``.
    """
    cands, verts, h = _candidates(mesh, kind, i)
    ok = [c for c in cands if np.min((verts - c[1]) @ c[2]) >= -_GEOM_TOL * h]
    n = len(ok)
    dist = np.array([[(ok[b2][1] - ok[b][1]) @ ok[b][2] / h for b2 in range(n)] for b in range(n)])
    same_plane = (np.abs(dist) < _GEOM_TOL) & (np.abs(dist.T) < _GEOM_TOL)

    def theta(sel):
        return min(dist[a, b] for a in sel for b in sel if a != b)

    best, best_th = None, -np.inf
    for a in range(n):
        for b in range(a + 1, n):
            if same_plane[a, b]:
                continue
            th = min(dist[a, b], dist[b, a])
            if th > best_th + 1e-14:
                best, best_th = [a, b], th
    if best is None or best_th < theta_min:
        raise SelectionError(f"{kind} {i}: no pair of boundaries with theta >= {theta_min}")
    sel = best
    while True:
        pick, pick_th = None, -np.inf
        for c in range(n):
            if c in sel or any(same_plane[c, s] for s in sel):
                continue
            th = theta(sel + [c])
            if th > pick_th + 1e-14:
                pick, pick_th = c, th
        if pick is None or pick_th < theta_min:
            break
        sel = sel + [pick]
    sel = sorted(sel)
    return BoundarySelection(kind, i, tuple(ok[s][0] for s in sel), float(theta(sel)))


# --------------------------------------------------------------- counting
def _P(d: int, l: int) -> int:
    return comb(l + d, d) if l >= 0 else 0


def _entity_counts(k: int, space: str, nV: int, nE: int, eta_F: list[int], eta_T: int | None,
                   scheme: str) -> int:
    ser = scheme == "sddr"
    lF = [k + 1 - e if ser else k - 1 for e in eta_F]
    lT = (k + 1 - eta_T) if ser else k - 1
    if space == "grad":
        return nV + nE * k + sum(_P(2, l) for l in lF) + _P(3, lT)
    if space == "curl":
        face = sum(space_dim("Roly", 2, k - 1) + space_dim("cRoly", 2, (l + 1) if ser else k) for l in lF)
        cell = space_dim("Roly", 3, k - 1) + space_dim("cRoly", 3, (lT + 1) if ser else k)
        return nE * (k + 1) + face + cell
    if space == "div":
        return len(eta_F) * _P(2, k) + space_dim("Goly", 3, k - 1) + space_dim("cGoly", 3, k)
    if space == "l2":
        return _P(3, k)
    raise KeyError(space)


def dof_count(shape, k: int, space: str, scheme: str = "ddr", theta_min: float = 0.1) -> int:
    """Number of DOFs attached to one element (closure included).

    ``shape`` is ``"tetra"``, ``"hexa"`` or a ``(mesh, cell)`` pair for a
    general polyhedron, whose boundaries are then selected greedily.
    """
    if scheme not in ("ddr", "sddr"):
        raise KeyError(scheme)
    if shape == "tetra":
        return _entity_counts(k, space, 4, 6, [3] * 4, 4, scheme)
    if shape == "hexa":
        return _entity_counts(k, space, 8, 12, [4] * 6, 6, scheme)
    mesh, t = shape
    eta_F = [select_boundaries(mesh, "face", f, theta_min).eta for f in mesh.cell_faces[t]]
    eta_T = select_boundaries(mesh, "cell", t, theta_min).eta
    return _entity_counts(k, space, len(mesh.cell_vertices[t]), len(mesh.cell_edges[t]),
                          eta_F, eta_T, scheme)


# --------------------------------------------------------------- operators
@dataclass
class SFaceOps:
    SG: np.ndarray      # vP^k(F) x sgrad-local
    SC: np.ndarray      # vP^k(F) x scurl-local
    E_grad: np.ndarray  # full grad-local x sgrad-local
    E_curl: np.ndarray  # full curl-local x scurl-local
    R_grad: np.ndarray  # sgrad-local x full grad-local
    R_curl: np.ndarray  # scurl-local x full curl-local


@dataclass
class SCellOps:
    SG: np.ndarray
    SC: np.ndarray
    E_grad: np.ndarray  # own rows: P^{k-1}(T) x sgrad cell-local
    E_curl: np.ndarray  # own rows: R^{k-1}(T) x cR^k(T) by scurl cell-local
    R_grad: np.ndarray  # own rows: P^{l_T}(T) x full grad cell-local
    R_curl: np.ndarray  # own rows x full curl cell-local


def _skeleton_identity(n_full_own: int, n_ser_own: int, n_total_full: int, n_total_ser: int,
                       transpose: bool = False) -> np.ndarray:
    """Identity between the sub-entity parts of a full and a serendipity local vector."""
    nsk = n_total_full - n_full_own
    assert nsk == n_total_ser - n_ser_own
    M = np.zeros((n_total_full, n_total_ser))
    M[n_full_own:, n_ser_own:] = np.eye(nsk)
    return M.T if transpose else M


class SerendipityDDR:
    """Serendipity spaces, extensions, reductions and the reduced complex.

    Parameters
    ----------
    ddr:
        The underlying DDR complex.
    theta_min:
        Minimal separation accepted when selecting boundaries.
    mutation:
        Test-only perturbations: ``"drop_hatu_correction"`` uses the plain
        cell rotor component in the curl reduction; ``"plain_ecurl_projection"``
        extends the complement components by zero padding.
    """

    def __init__(self, ddr: DDRComplex, theta_min: float = 0.1, mutation: str | None = None):
        if mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {mutation!r}")
        self.ddr = ddr
        self.mesh = ddr.mesh
        self.k = ddr.k
        self.theta_min = theta_min
        self.mutation = mutation
        m, k = self.mesh, self.k
        self.face_selection = [select_boundaries(m, "face", f, theta_min) for f in range(m.n_faces)]
        self.cell_selection = [select_boundaries(m, "cell", t, theta_min) for t in range(m.n_cells)]
        self.ell_F = np.array([s.ell(k) for s in self.face_selection], dtype=int)
        self.ell_T = np.array([s.ell(k) for s in self.cell_selection], dtype=int)
        P2 = np.vectorize(lambda l: space_dim("Poly", 2, l))
        P3 = np.vectorize(lambda l: space_dim("Poly", 3, l))
        cR2 = np.vectorize(lambda l: space_dim("cRoly", 2, l))
        cR3 = np.vectorize(lambda l: space_dim("cRoly", 3, l))
        self.layout = {
            "grad": DofLayout(m, {"vertex": 1, "edge": k, "face": P2(self.ell_F), "cell": P3(self.ell_T)}),
            "curl": DofLayout(m, {"edge": k + 1,
                                  "face": space_dim("Roly", 2, k - 1) + cR2(self.ell_F + 1),
                                  "cell": space_dim("Roly", 3, k - 1) + cR3(self.ell_T + 1)}),
            "div": ddr.layout["div"],
            "l2": ddr.layout["l2"],
        }
        self._cache: dict = {}

    def dims(self) -> dict[str, int]:
        return {s: lay.ndofs for s, lay in self.layout.items()}

    # ------------------------------------------------------------- caching
    def _cached(self, kind: str, i: int, builder: Callable):
        ell = self.ell_F[i] if kind == "face" else (
            self.ell_T[i], tuple(self.ell_F[self.mesh.cell_faces[i]]))
        key = (builder.__name__, self.ddr.geometry_key(kind, i), ell)
        ops = self._cache.get(key)
        if ops is None:
            ops = builder(i)
            self._cache[key] = ops
        return ops

    def face_ops(self, f: int) -> SFaceOps:
        return self._cached("face", f, self._build_face)

    def cell_ops(self, t: int) -> SCellOps:
        return self._cached("cell", t, self._build_cell)

    def precompute(self) -> None:
        self.ddr.precompute()
        for f in range(self.mesh.n_faces):
            self.face_ops(f)
        for t in range(self.mesh.n_cells):
            self.cell_ops(t)

    # ---------------------------------------------------------- face level
    def _build_face(self, f: int) -> SFaceOps:
        d, m, k = self.ddr, self.mesh, self.k
        ell = int(self.ell_F[f])
        fs = d.spaces("face", f)
        fo = d.face_ops(f)
        q = fs.quad
        w, x = q.weights, q.points
        hF = m.face_diameter[f]
        lg_s, lc_s = self.layout["grad"].local("face", f), self.layout["curl"].local("face", f)
        lg, lc = d.layout["grad"].local("face", f), d.layout["curl"].local("face", f)
        vP = fs.basis("vPoly", k)
        vPv = fs.evaluate(vP, 2, x)
        nv = vP.shape[1]
        cRl = fs.basis("cRoly", ell + 1)
        cRlv = fs.evaluate(cRl, 2, x)
        rotv = fs.rot(vP)
        rotv_x = fs.evaluate(rotv, 1, x)

        K = hF**2 * ip(w, rotv_x, rotv_x)
        Lg_tau = np.zeros((nv, len(lg_s)))
        Lg_mu = np.zeros((cRl.shape[1], len(lg_s)))
        Lc_tau = np.zeros((nv, len(lc_s)))
        own_c = lc_s.block("face", f)
        nR = space_dim("Roly", 2, k - 1)
        Rv = fs.values("Roly", k - 1, x)
        Lc_tau[:, own_c.start:own_c.start + nR] = hF**2 * ip(w, fs.evaluate(fs.vrot(rotv), 2, x), Rv)
        Lg_mu[:, lg_s.block("face", f)] = -ip(w, fs.evaluate(fs.div(cRl), 1, x), fs.values("Poly", ell, x))
        QE_s = []
        cRk = fs.basis("cRoly", k)
        Ebnd = np.zeros((cRk.shape[1], len(lg_s)))
        for j, e in enumerate(m.face_edges[f]):
            om = int(m.face_edge_orient[f][j])
            es = d.spaces("edge", e)
            qe = es.quad
            eo = d.edge_ops(e)
            tE = fs.frame.axes @ m.edge_tangent[e]
            nFE = fs.frame.axes @ m.face_edge_normal[f][j]
            vt = fs.evaluate(vP, 2, qe.points) @ tE
            K += hF * ip(qe.weights, vt, vt)
            psi_k = es.values("Poly", k, qe.points)
            psi_k1 = es.values("Poly", k + 1, qe.points)
            Q = lg_s.embed(eo.rec, self.layout["grad"].local("edge", e))
            QE_s.append(Q)
            Lg_tau += hF * ip(qe.weights, vt, psi_k) @ eo.G @ Q
            Lg_mu += om * ip(qe.weights, fs.evaluate(cRl, 2, qe.points) @ nFE, psi_k1) @ Q
            Ebnd += om * ip(qe.weights, fs.evaluate(cRk, 2, qe.points) @ nFE, psi_k1) @ Q
            cols = lc_s.pos(self.layout["curl"].local("edge", e).dofs)
            Lc_tau[:, cols] += hF * ip(qe.weights, vt, psi_k)
            Lc_tau[:, cols] -= hF**2 * om * ip(qe.weights, fs.evaluate(rotv, 1, qe.points), psi_k)
        Mvc = ip(w, vPv, cRlv)
        nc = Mvc.shape[1]
        A = np.block([[K, -Mvc], [Mvc.T, np.zeros((nc, nc))]])
        Lc_mu = np.zeros((nc, len(lc_s)))
        Lc_mu[:, own_c.start + nR:own_c.stop] = np.eye(nc)
        SG = solve(A, np.vstack([Lg_tau, Lg_mu]))[:nv]
        SC = solve(A, np.vstack([Lc_tau, Lc_mu]))[:nv]

        # extensions
        Pkm1 = fs.values("Poly", k - 1, x)
        AE = ip(w, fs.evaluate(fs.div(cRk), 1, x), Pkm1)
        EPoly = solve(AE, Ebnd - ip(w, fs.evaluate(cRk, 2, x), vPv) @ SG)
        nown_g, nown_gs = lg.block("face", f).stop, lg_s.block("face", f).stop
        Eg = _skeleton_identity(nown_g, nown_gs, len(lg), len(lg_s))
        Eg[:nown_g] = EPoly
        nown_c, nown_cs = lc.block("face", f).stop, own_c.stop
        Ec = _skeleton_identity(nown_c, nown_cs, len(lc), len(lc_s))
        Ec[:nR, :nR] = np.eye(nR)
        if self.mutation == "plain_ecurl_projection":
            Ec[nR:nR + nc, nR:nR + nc] = np.eye(nc)
        else:
            Ec[nR:nown_c] = ip(w, fs.values("cRoly", k, x), vPv) @ SC

        # reductions: truncation in hierarchical bases
        Rg = _skeleton_identity(nown_g, nown_gs, len(lg), len(lg_s), transpose=True)
        Rg[:nown_gs, :nown_gs] = np.eye(nown_gs)
        Rc = _skeleton_identity(nown_c, nown_cs, len(lc), len(lc_s), transpose=True)
        Rc[:nown_cs, :nown_cs] = np.eye(nown_cs)
        return SFaceOps(SG, SC, Eg, Ec, Rg, Rc)

    # ---------------------------------------------------------- cell level
    def _build_cell(self, t: int) -> SCellOps:
        d, m, k = self.ddr, self.mesh, self.k
        ell = int(self.ell_T[t])
        cs = d.spaces("cell", t)
        co = d.cell_ops(t)
        q = cs.quad
        w, x = q.weights, q.points
        hT = m.cell_diameter[t]
        Lg_s, Lc_s = self.layout["grad"].local("cell", t), self.layout["curl"].local("cell", t)
        Lg, Lc = d.layout["grad"].local("cell", t), d.layout["curl"].local("cell", t)
        vP = cs.basis("vPoly", k)
        vPv = cs.evaluate(vP, 3, x)
        nv = vP.shape[1]
        curlv = cs.curl(vP)
        curlv_x = cs.evaluate(curlv, 3, x)
        cRl = cs.basis("cRoly", ell + 1)
        cRk = cs.basis("cRoly", k)
        cGk = cs.basis("cGoly", k)
        nR = space_dim("Roly", 3, k - 1)
        Rv = cs.values("Roly", k - 1, x)
        own_cs = Lc_s.block("cell", t)

        K = hT**2 * ip(w, curlv_x, curlv_x)
        Lg_tau = np.zeros((nv, len(Lg_s)))
        Lg_mu = np.zeros((cRl.shape[1], len(Lg_s)))
        Lg_mu[:, Lg_s.block("cell", t)] = -ip(w, cs.evaluate(cs.div(cRl), 1, x), cs.values("Poly", ell, x))
        Lc_tau = np.zeros((nv, len(Lc_s)))
        Lc_tau[:, own_cs.start:own_cs.start + nR] = hT**2 * ip(w, cs.evaluate(cs.curl(curlv), 3, x), Rv)
        Ebnd = np.zeros((cRk.shape[1], len(Lg_s)))
        RPbnd = np.zeros((cRl.shape[1], len(Lg)))
        RRbnd = np.zeros((cGk.shape[1], len(Lc)))
        for j, f in enumerate(m.cell_faces[t]):
            om = int(m.cell_face_orient[t][j])
            n = m.face_normal[f]
            fs = d.spaces("face", f)
            qf = fs.quad
            fo, sfo = d.face_ops(f), self.face_ops(f)
            lfs_g = self.layout["grad"].local("face", f)
            lfs_c = self.layout["curl"].local("face", f)
            lf_g = d.layout["grad"].local("face", f)
            lf_c = d.layout["curl"].local("face", f)
            GE = Lg_s.embed(fo.G @ sfo.E_grad, lfs_g)
            gE = Lg_s.embed(fo.gamma @ sfo.E_grad, lfs_g)
            gtE = Lc_s.embed(fo.gamma_t @ sfo.E_curl, lfs_c)
            gER = Lg.embed(fo.gamma @ sfo.E_grad @ sfo.R_grad, lf_g)
            gtER = Lc.embed(fo.gamma_t @ sfo.E_curl @ sfo.R_curl, lf_c)
            vb = cs.evaluate(vP, 3, qf.points)
            vn = vb @ n
            K += hT * (ip(qf.weights, vb, vb) - ip(qf.weights, vn, vn))
            psi3 = fs.to3d(fs.values("vPoly", k, qf.points))
            psi = fs.values("Poly", k + 1, qf.points)
            Vt = ip(qf.weights, vb, psi3)
            Lg_tau += hT * Vt @ GE
            Lg_mu += om * ip(qf.weights, cs.evaluate(cRl, 3, qf.points) @ n, psi) @ gE
            Ebnd += om * ip(qf.weights, cs.evaluate(cRk, 3, qf.points) @ n, psi) @ gE
            RPbnd += om * ip(qf.weights, cs.evaluate(cRl, 3, qf.points) @ n, psi) @ gER
            Lc_tau += hT * Vt @ gtE
            cxn = np.cross(cs.evaluate(curlv, 3, qf.points), n)
            Lc_tau += hT**2 * om * ip(qf.weights, cxn, psi3) @ gtE
            wxn = np.cross(cs.evaluate(cGk, 3, qf.points), n)
            RRbnd += om * ip(qf.weights, wxn, psi3) @ gtER
        Mvc = ip(w, vPv, cs.evaluate(cRl, 3, x))
        nc = Mvc.shape[1]
        A = np.block([[K, -Mvc], [Mvc.T, np.zeros((nc, nc))]])
        Lc_mu = np.zeros((nc, len(Lc_s)))
        Lc_mu[:, own_cs.start + nR:own_cs.stop] = np.eye(nc)
        SG = solve(A, np.vstack([Lg_tau, Lg_mu]))[:nv]
        SC = solve(A, np.vstack([Lc_tau, Lc_mu]))[:nv]

        Pkm1 = cs.values("Poly", k - 1, x)
        AE = ip(w, cs.evaluate(cs.div(cRk), 1, x), Pkm1)
        EPoly = solve(AE, Ebnd - ip(w, cs.evaluate(cRk, 3, x), vPv) @ SG)
        ncRk = cRk.shape[1]
        Ec = np.zeros((nR + ncRk, len(Lc_s)))
        Ec[:nR, :nR] = np.eye(nR)
        if self.mutation == "plain_ecurl_projection":
            Ec[nR:nR + nc, nR:nR + nc] = np.eye(nc)
        else:
            Ec[nR:] = ip(w, cs.evaluate(cRk, 3, x), vPv) @ SC

        AR = ip(w, cs.evaluate(cs.div(cRl), 1, x), cs.values("Poly", ell, x))
        RPoly = solve(AR, RPbnd - ip(w, cs.evaluate(cRl, 3, x), vPv) @ co.G)
        own_c = Lc.block("cell", t)
        if self.mutation == "drop_hatu_correction":
            RRoly = np.zeros((nR, len(Lc)))
            RRoly[:, :nR] = np.eye(nR)
        else:
            AR = ip(w, cs.evaluate(cs.curl(cGk), 3, x), Rv)
            RRoly = solve(AR, ip(w, cs.evaluate(cGk, 3, x), vPv) @ co.C - RRbnd)
        Rc = np.zeros((own_cs.stop, len(Lc)))
        Rc[:nR] = RRoly
        Rc[nR:, own_c.start + nR:own_c.start + nR + nc] = np.eye(nc)
        return SCellOps(SG, SC, EPoly, Ec, RPoly, Rc)

    # -------------------------------------------------------- global maps
    def _assemble(self, blocks, shape) -> sp.csr_matrix:
        return self.ddr._assemble(None, None, blocks, shape)

    def _skeleton_blocks(self, space: str):
        lay = self.layout[space]
        kinds = ("vertex", "edge") if space == "grad" else ("edge",)
        for kind in kinds:
            idx = lay.kind_range(kind)
            for i in idx:
                yield np.array([i]), np.array([i]), np.ones((1, 1))

    def _E_blocks(self, space: str):
        full, ser = self.ddr.layout[space], self.layout[space]
        yield from self._skeleton_blocks(space)
        for f in range(self.mesh.n_faces):
            op = getattr(self.face_ops(f), f"E_{space}")
            own = full.entity_dofs("face", f)
            yield own, ser.local("face", f).dofs, op[:len(own)]
        for t in range(self.mesh.n_cells):
            yield full.entity_dofs("cell", t), ser.local("cell", t).dofs, getattr(self.cell_ops(t), f"E_{space}")

    def _R_blocks(self, space: str):
        full, ser = self.ddr.layout[space], self.layout[space]
        yield from self._skeleton_blocks(space)
        for f in range(self.mesh.n_faces):
            op = getattr(self.face_ops(f), f"R_{space}")
            own = ser.entity_dofs("face", f)
            yield own, full.local("face", f).dofs, op[:len(own)]
        for t in range(self.mesh.n_cells):
            yield ser.entity_dofs("cell", t), full.local("cell", t).dofs, getattr(self.cell_ops(t), f"R_{space}")

    def extension(self, space: str) -> sp.csr_matrix:
        """E: serendipity space -> DDR space (identity on X_div and P^k)."""
        return self._map("E", space)

    def reduction(self, space: str) -> sp.csr_matrix:
        """R: DDR space -> serendipity space (identity on X_div and P^k)."""
        return self._map("R", space)

    def _map(self, which: str, space: str) -> sp.csr_matrix:
        key = ("map", which, space)
        if key in self._cache:
            return self._cache[key]
        if space in ("div", "l2"):
            M = sp.identity(self.layout[space].ndofs, format="csr")
        else:
            nf, ns = self.ddr.layout[space].ndofs, self.layout[space].ndofs
            if which == "E":
                M = self._assemble(self._E_blocks(space), (nf, ns))
            else:
                M = self._assemble(self._R_blocks(space), (ns, nf))
        self._cache[key] = M
        return M

    @cached_property
    def grad(self) -> sp.csr_matrix:
        return (self.reduction("curl") @ self.ddr.grad @ self.extension("grad")).tocsr()

    @cached_property
    def curl(self) -> sp.csr_matrix:
        return (self.ddr.curl @ self.extension("curl")).tocsr()

    @property
    def div(self) -> sp.csr_matrix:
        return self.ddr.div

    def operator(self, i: int) -> sp.csr_matrix:
        return (self.grad, self.curl, self.div)[i]

    def product(self, space: str) -> sp.csr_matrix:
        key = ("product", space)
        if key not in self._cache:
            E = self.extension(space)
            self._cache[key] = (E.T @ self.ddr.product(space) @ E).tocsr()
        return self._cache[key]

    def interpolate(self, space: str, fn: Callable) -> np.ndarray:
        return self.reduction(space) @ self.ddr.interpolate(space, fn)

    def potential(self, space: str, t: int, x: np.ndarray) -> np.ndarray:
        """Cell potential of a serendipity vector (through the extension)."""
        return self.ddr.potential(space, t, self.extension(space) @ x)

    def l2_error(self, space: str, x: np.ndarray, fn: Callable) -> float:
        return self.ddr.l2_error(space, self.extension(space) @ x, fn)

    # ----------------------------------------------------------- local views
    def local_map(self, which: str, space: str, kind: str, i: int) -> np.ndarray:
        """Dense local block of E or R on a face or cell (closure included)."""
        full = self.ddr.layout[space].local(kind, i)
        ser = self.layout[space].local(kind, i)
        if which == "E":
            return self.extension(space)[full.dofs][:, ser.dofs].toarray()
        return self.reduction(space)[ser.dofs][:, full.dofs].toarray()

    def local_sgrad(self, kind: str, i: int) -> np.ndarray:
        """Serendipity gradient SG_P on a face or cell (vP^k(P) x sgrad-local)."""
        return self.face_ops(i).SG if kind == "face" else self.cell_ops(i).SG

    def local_scurl(self, kind: str, i: int) -> np.ndarray:
        return self.face_ops(i).SC if kind == "face" else self.cell_ops(i).SC

    def serendipity_local(self, space: str, kind: str, i: int) -> LocalMap:
        return self.layout[space].local(kind, i)
