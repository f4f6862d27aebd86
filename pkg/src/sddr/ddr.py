"""Discrete de Rham complex of arbitrary degree on polyhedral meshes.

Spaces (components are coefficients in orthonormal local bases)::

    X_grad : vertex values, P^{k-1}(E), P^{k-1}(F), P^{k-1}(T)
    X_curl : P^k(E), R^{k-1}(F) x cR^k(F), R^{k-1}(T) x cR^k(T)
    X_div  : P^k(F), G^{k-1}(T) x cG^k(T)
    P^k(T_h)

Local operators are built face by face and cell by cell. Their matrices act
on the *local* DOF vector of an entity: its own block, then the blocks of its
faces, edges and vertices (see :class:`LocalMap`). Entities that are
translates of one another share their local matrices.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import PolyMesh
from .polyspace import EntitySpaces, cell_spaces, edge_spaces, face_spaces, space_dim

__all__ = ["DofLayout", "LocalMap", "DDRComplex", "SPACES", "ip", "solve"]

SPACES = ("grad", "curl", "div", "l2")
KINDS = ("vertex", "edge", "face", "cell")


def ip(w: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Discrete L2 inner products ``sum_q w_q A_qi . B_qj``."""
    if A.ndim == 2:
        return np.einsum("q,qi,qj->ij", w, A, B, optimize=True)
    return np.einsum("q,qic,qjc->ij", w, A, B, optimize=True)


def solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.zeros((0,) + B.shape[1:])
    return np.linalg.solve(A, B)


class LocalMap:
    """Global DOF indices of an entity and of its sub-entities, in local order."""

    def __init__(self, dofs: np.ndarray, blocks: dict):
        self.dofs = dofs
        self.blocks = blocks
        self._pos = None

    def __len__(self) -> int:
        return len(self.dofs)

    def block(self, kind: str, i: int) -> slice:
        return self.blocks[kind, int(i)]

    def pos(self, gdofs: np.ndarray) -> np.ndarray:
        if self._pos is None:
            self._pos = {int(g): j for j, g in enumerate(self.dofs)}
        return np.fromiter((self._pos[int(g)] for g in gdofs), dtype=int, count=len(gdofs))

    def embed(self, M: np.ndarray, sub: "LocalMap") -> np.ndarray:
        """Re-index the columns of ``M`` (ordered as ``sub``) into this map."""
        out = np.zeros((M.shape[0], len(self.dofs)))
        out[:, self.pos(sub.dofs)] = M
        return out


class DofLayout:
    """Global numbering: vertex blocks, then edges, faces and cells."""

    def __init__(self, mesh: PolyMesh, sizes: dict[str, np.ndarray]):
        self.mesh = mesh
        counts = {"vertex": mesh.n_vertices, "edge": mesh.n_edges,
                  "face": mesh.n_faces, "cell": mesh.n_cells}
        self.sizes = {}
        self.offsets = {}
        start = 0
        for kind in KINDS:
            s = np.broadcast_to(np.asarray(sizes.get(kind, 0), dtype=int), (counts[kind],)).copy()
            self.sizes[kind] = s
            off = np.zeros(counts[kind] + 1, dtype=int)
            np.cumsum(s, out=off[1:])
            self.offsets[kind] = off + start
            start += int(off[-1])
        self.ndofs = start
        self._local: dict = {}

    def __len__(self) -> int:
        return self.ndofs

    def entity_dofs(self, kind: str, i: int) -> np.ndarray:
        off = self.offsets[kind]
        return np.arange(off[i], off[i + 1])

    def kind_range(self, kind: str) -> np.ndarray:
        off = self.offsets[kind]
        return np.arange(off[0], off[-1])

    def subentities(self, kind: str, i: int) -> list[tuple[str, np.ndarray]]:
        m = self.mesh
        if kind == "cell":
            return [("face", m.cell_faces[i]), ("edge", m.cell_edges[i]), ("vertex", m.cell_vertices[i])]
        if kind == "face":
            return [("edge", m.face_edges[i]), ("vertex", m.face_vertices[i])]
        if kind == "edge":
            return [("vertex", m.edges[i])]
        return []

    def local(self, kind: str, i: int) -> LocalMap:
        key = (kind, int(i))
        lm = self._local.get(key)
        if lm is not None:
            return lm
        parts = [self.entity_dofs(kind, i)]
        blocks = {key: slice(0, len(parts[0]))}
        pos = len(parts[0])
        for sk, ids in self.subentities(kind, i):
            for j in ids:
                d = self.entity_dofs(sk, j)
                blocks[sk, int(j)] = slice(pos, pos + len(d))
                parts.append(d)
                pos += len(d)
        lm = LocalMap(np.concatenate(parts).astype(int), blocks)
        if kind != "cell":  # cells are visited once per assembly
            self._local[key] = lm
        return lm


def _round_key(X: np.ndarray, h: float) -> bytes:
    r = np.round((X - X[0]) / h, 9) + 0.0
    return r.tobytes() + f"{h:.9e}".encode()


@dataclass
class EdgeOps:
    rec: np.ndarray   # [moments, v_low, v_high] -> q_E in P^{k+1}(E)
    G: np.ndarray     # q_E coefficients -> q_E' in P^k(E)


@dataclass
class FaceOps:
    QE: list          # per face edge: face grad-local -> q_E coefficients
    G: np.ndarray     # vP^k(F) x grad-local
    gamma: np.ndarray  # P^{k+1}(F) x grad-local
    uG: np.ndarray    # (R^{k-1}(F), cR^k(F)) x grad-local
    C: np.ndarray     # P^k(F) x curl-local
    gamma_t: np.ndarray  # vP^k(F) x curl-local


@dataclass
class CellOps:
    G: np.ndarray
    P_grad: np.ndarray
    M_grad: np.ndarray
    uG: np.ndarray
    C: np.ndarray
    P_curl: np.ndarray
    M_curl: np.ndarray
    uC: np.ndarray
    D: np.ndarray
    P_div: np.ndarray
    M_div: np.ndarray


class DDRComplex:
    """DDR spaces, interpolators, operators and products of degree ``k``.

    Parameters
    ----------
    mesh:
        The polyhedral mesh.
    k:
        Polynomial degree (``k >= 0``).
    qdeg:
        Quadrature degree for cells and faces (default ``2 (k + 3)``).
    threads:
        Worker threads used to build distinct local operators.
    """

    def __init__(self, mesh: PolyMesh, k: int, qdeg: int | None = None, threads: int = 1):
        if k < 0:
            raise ValueError("degree must be nonnegative")
        self.mesh = mesh
        self.k = k
        self.qdeg = 2 * (k + 3) if qdeg is None else qdeg
        self.threads = max(1, int(threads))
        self._space_cache: dict = {}
        self._ops_cache: dict = {}
        self._keys: dict = {}
        m = mesh
        nR_F = space_dim("Roly", 2, k - 1) + space_dim("cRoly", 2, k)
        nR_T = space_dim("Roly", 3, k - 1) + space_dim("cRoly", 3, k)
        nG_T = space_dim("Goly", 3, k - 1) + space_dim("cGoly", 3, k)
        self.layout = {
            "grad": DofLayout(m, {"vertex": 1, "edge": k, "face": space_dim("Poly", 2, k - 1),
                                  "cell": space_dim("Poly", 3, k - 1)}),
            "curl": DofLayout(m, {"edge": k + 1, "face": nR_F, "cell": nR_T}),
            "div": DofLayout(m, {"face": space_dim("Poly", 2, k), "cell": nG_T}),
            "l2": DofLayout(m, {"cell": space_dim("Poly", 3, k)}),
        }

    # ------------------------------------------------------------------ keys
    def geometry_key(self, kind: str, i: int):
        """Translation-invariant signature of an entity and its local ordering."""
        key = self._keys.get((kind, i))
        if key is not None:
            return key
        m = self.mesh
        if kind == "edge":
            key = ("edge", _round_key(m.vertices[m.edges[i]], m.edge_length[i]))
        elif kind == "face":
            loop = m.face_vertices[i]
            ranks = tuple(np.argsort(np.argsort(loop)).tolist())
            key = ("face", _round_key(m.vertices[loop], m.face_diameter[i]), ranks)
        else:
            cv = m.cell_vertices[i]
            loops = tuple(tuple(np.searchsorted(cv, m.face_vertices[f]).tolist()) for f in m.cell_faces[i])
            key = ("cell", _round_key(m.vertices[cv], m.cell_diameter[i]), loops)
        self._keys[kind, i] = key
        return key

    def _anchor(self, kind: str, i: int) -> np.ndarray:
        m = self.mesh
        if kind == "edge":
            return m.vertices[m.edges[i][0]]
        if kind == "face":
            return m.vertices[m.face_vertices[i][0]]
        return m.vertices[m.cell_vertices[i][0]]

    def spaces(self, kind: str, i: int) -> EntitySpaces:
        """Local polynomial spaces of an entity (edges up to degree k+1, else k+2)."""
        key = self.geometry_key(kind, i)
        hit = self._space_cache.get(key)
        if hit is not None:
            proto, anchor = hit
            return proto.translated(self._anchor(kind, i) - anchor)
        k = self.k
        if kind == "edge":
            sp_ = edge_spaces(self.mesh, i, k + 1, 2 * k + 4)
        elif kind == "face":
            sp_ = face_spaces(self.mesh, i, k + 2, self.qdeg)
        else:
            sp_ = cell_spaces(self.mesh, i, k + 2, self.qdeg)
        self._space_cache[key] = (sp_, self._anchor(kind, i))
        return sp_

    def _cached(self, kind: str, i: int, builder: Callable):
        key = (builder.__name__, self.geometry_key(kind, i))
        ops = self._ops_cache.get(key)
        if ops is None:
            ops = builder(i)
            self._ops_cache[key] = ops
        return ops

    def edge_ops(self, e: int) -> EdgeOps:
        return self._cached("edge", e, self._build_edge)

    def face_ops(self, f: int) -> FaceOps:
        return self._cached("face", f, self._build_face)

    def cell_ops(self, t: int) -> CellOps:
        return self._cached("cell", t, self._build_cell)

    def precompute(self) -> None:
        """Build all distinct local operators (optionally on several threads)."""
        m = self.mesh
        for kind, n, fn in (("edge", m.n_edges, self.edge_ops), ("face", m.n_faces, self.face_ops),
                            ("cell", m.n_cells, self.cell_ops)):
            reps = {}
            for i in range(n):
                reps.setdefault(self.geometry_key(kind, i), i)
            idx = list(reps.values())
            if self.threads > 1 and len(idx) > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    list(pool.map(fn, idx))
            else:
                for i in idx:
                    fn(i)

    # ------------------------------------------------------------ edge level
    def _build_edge(self, e: int) -> EdgeOps:
        k = self.k
        es = self.spaces("edge", e)
        ends = self.mesh.vertices[self.mesh.edges[e]]
        phi = es.values("Poly", k + 1, ends)          # (2, k+2)
        A = np.zeros((k + 2, k + 2))
        A[:k, :k] = np.eye(k)
        A[k:, :] = phi
        rec = np.linalg.inv(A)
        q = es.quad
        dphi = es.evaluate(es.grad(es.basis("Poly", k + 1)), 1, q.points)
        G = ip(q.weights, es.values("Poly", k, q.points), dphi)
        return EdgeOps(rec, G)

    # ------------------------------------------------------------ face level
    def _face_edge_data(self, f: int, fs: EntitySpaces):
        """Per-edge quadrature, orientation and normal in face coordinates."""
        m = self.mesh
        out = []
        for i, e in enumerate(m.face_edges[f]):
            es = self.spaces("edge", e)
            nFE = fs.frame.axes @ m.face_edge_normal[f][i]
            out.append((e, int(m.face_edge_orient[f][i]), es, nFE))
        return out

    def _build_face(self, f: int) -> FaceOps:
        k = self.k
        fs = self.spaces("face", f)
        lg = self.layout["grad"].local("face", f)
        lc = self.layout["curl"].local("face", f)
        q = fs.quad
        w, x = q.weights, q.points
        vP = fs.basis("vPoly", k)
        vPv = fs.evaluate(vP, 2, x)
        divv = fs.evaluate(fs.div(vP), 1, x)
        Pkm1 = fs.values("Poly", k - 1, x)
        own_g = lg.block("face", f)
        own_c = lc.block("face", f)

        # gradient: G_F q = -q_F div v + sum_E w_FE q_E v.n_FE
        G = np.zeros((vP.shape[1], len(lg)))
        G[:, own_g] = -ip(w, divv, Pkm1)
        cR2 = fs.basis("cRoly", k + 2)
        cR2v = fs.evaluate(cR2, 2, x)
        rhs_g = np.zeros((cR2.shape[1], len(lg)))
        QE = []
        edata = self._face_edge_data(f, fs)
        Bq = []
        for e, om, es, nFE in edata:
            eo = self.edge_ops(e)
            le = self.layout["grad"].local("edge", e)
            Q = lg.embed(eo.rec, le)
            QE.append(Q)
            qe = es.quad
            psi = es.values("Poly", k + 1, qe.points)
            vn = fs.evaluate(vP, 2, qe.points) @ nFE
            G += om * ip(qe.weights, vn, psi) @ Q
            wn = fs.evaluate(cR2, 2, qe.points) @ nFE
            Bq.append((om, ip(qe.weights, wn, psi) @ Q))
        Pk1 = fs.values("Poly", k + 1, x)
        A = ip(w, fs.evaluate(fs.div(cR2), 1, x), Pk1)
        rhs_g -= ip(w, cR2v, vPv) @ G
        for om, B in Bq:
            rhs_g += om * B
        gamma = solve(A, rhs_g)
        Rv = fs.values("Roly", k - 1, x)
        cRv = fs.values("cRoly", k, x)
        uG = np.vstack([ip(w, Rv, vPv), ip(w, cRv, vPv)]) @ G

        # curl: C_F v = v_R . vrot r - sum_E w_FE v_E r
        nR = Rv.shape[1]
        Pk = fs.values("Poly", k, x)
        Cf = np.zeros((Pk.shape[1], len(lc)))
        vrot_P = fs.evaluate(fs.vrot(fs.basis("Poly", k)), 2, x)
        Cf[:, own_c.start:own_c.start + nR] = ip(w, vrot_P, Rv)
        P0 = fs.basis("Poly0", k + 1)
        vrot0 = fs.evaluate(fs.vrot(P0), 2, x)
        Pk_b = fs.basis("Poly", k)
        ebnd = []
        for e, om, es, nFE in edata:
            cols = lc.pos(self.layout["curl"].local("edge", e).dofs)
            qe = es.quad
            psi = es.values("Poly", k, qe.points)
            Cf[:, cols] -= om * ip(qe.weights, fs.evaluate(Pk_b, 1, qe.points), psi)
            ebnd.append((cols, om * ip(qe.weights, fs.evaluate(P0, 1, qe.points), psi)))
        rhs_r = ip(w, fs.evaluate(P0, 1, x), Pk) @ Cf
        for cols, B in ebnd:
            rhs_r[:, cols] += B
        ncR = cRv.shape[1]
        rhs_c = np.zeros((ncR, len(lc)))
        rhs_c[:, own_c.start + nR:own_c.stop] = np.eye(ncR)
        Atest = np.vstack([ip(w, vrot0, vPv), ip(w, cRv, vPv)])
        gamma_t = solve(Atest, np.vstack([rhs_r, rhs_c]))
        return FaceOps(QE, G, gamma, uG, Cf, gamma_t)

    # ------------------------------------------------------------ cell level
    def _cell_face_data(self, t: int, cs: EntitySpaces):
        m = self.mesh
        out = []
        for j, f in enumerate(m.cell_faces[t]):
            fs = self.spaces("face", f)
            out.append((f, int(m.cell_face_orient[t][j]), fs, m.face_normal[f]))
        return out

    def _build_cell(self, t: int) -> CellOps:
        k = self.k
        m = self.mesh
        cs = self.spaces("cell", t)
        Lg = self.layout["grad"].local("cell", t)
        Lc = self.layout["curl"].local("cell", t)
        Ld = self.layout["div"].local("cell", t)
        q = cs.quad
        w, x = q.weights, q.points
        vP = cs.basis("vPoly", k)
        vPv = cs.evaluate(vP, 3, x)
        nv = vP.shape[1]
        fdata = self._cell_face_data(t, cs)
        fops = [self.face_ops(f) for f, *_ in fdata]

        # ---- gradient
        Pkm1 = cs.values("Poly", k - 1, x)
        G = np.zeros((nv, len(Lg)))
        G[:, Lg.block("cell", t)] = -ip(w, cs.evaluate(cs.div(vP), 1, x), Pkm1)
        cR2 = cs.basis("cRoly", k + 2)
        Pk1 = cs.values("Poly", k + 1, x)
        A = ip(w, cs.evaluate(cs.div(cR2), 1, x), Pk1)
        bnd = np.zeros((cR2.shape[1], len(Lg)))
        gammas = []
        for (f, om, fs, n), fo in zip(fdata, fops):
            lf = self.layout["grad"].local("face", f)
            Gam = Lg.embed(fo.gamma, lf)
            gammas.append(Gam)
            qf = fs.quad
            psi = fs.values("Poly", k + 1, qf.points)
            G += om * ip(qf.weights, cs.evaluate(vP, 3, qf.points) @ n, psi) @ Gam
            bnd += om * ip(qf.weights, cs.evaluate(cR2, 3, qf.points) @ n, psi) @ Gam
        P_grad = solve(A, bnd - ip(w, cs.evaluate(cR2, 3, x), vPv) @ G)
        Rv = cs.values("Roly", k - 1, x)
        cRv = cs.values("cRoly", k, x)
        uG = np.vstack([ip(w, Rv, vPv), ip(w, cRv, vPv)]) @ G

        # ---- curl
        nR = Rv.shape[1]
        own_c = Lc.block("cell", t)
        Cc = np.zeros((nv, len(Lc)))
        Cc[:, own_c.start:own_c.start + nR] = ip(w, cs.evaluate(cs.curl(vP), 3, x), Rv)
        cG1 = cs.basis("cGoly", k + 1)
        bnd = np.zeros((cG1.shape[1], len(Lc)))
        gts = []
        for (f, om, fs, n), fo in zip(fdata, fops):
            lf = self.layout["curl"].local("face", f)
            Gt = Lc.embed(fo.gamma_t, lf)
            gts.append(Gt)
            qf = fs.quad
            psi3 = fs.to3d(fs.values("vPoly", k, qf.points))
            vxn = np.cross(cs.evaluate(vP, 3, qf.points), n)
            Cc += om * ip(qf.weights, vxn, psi3) @ Gt
            wxn = np.cross(cs.evaluate(cG1, 3, qf.points), n)
            bnd += om * ip(qf.weights, wxn, psi3) @ Gt
        ncR = cRv.shape[1]
        rhs_w = ip(w, cs.evaluate(cG1, 3, x), vPv) @ Cc - bnd
        rhs_z = np.zeros((ncR, len(Lc)))
        rhs_z[:, own_c.start + nR:own_c.stop] = np.eye(ncR)
        Atest = np.vstack([ip(w, cs.evaluate(cs.curl(cG1), 3, x), vPv), ip(w, cRv, vPv)])
        P_curl = solve(Atest, np.vstack([rhs_w, rhs_z]))
        Gv = cs.values("Goly", k - 1, x)
        cGv = cs.values("cGoly", k, x)
        uC = np.vstack([ip(w, Gv, vPv), ip(w, cGv, vPv)]) @ Cc

        # ---- divergence
        Pk = cs.values("Poly", k, x)
        own_d = Ld.block("cell", t)
        nG = Gv.shape[1]
        Dd = np.zeros((Pk.shape[1], len(Ld)))
        gradPk = cs.evaluate(cs.grad(cs.basis("Poly", k)), 3, x)
        Dd[:, own_d.start:own_d.start + nG] = -ip(w, gradPk, Gv)
        P0 = cs.basis("Poly0", k + 1)
        rhs_r = np.zeros((P0.shape[1], len(Ld)))
        for f, om, fs, n in fdata:
            qf = fs.quad
            psi = fs.values("Poly", k, qf.points)
            sl = Ld.block("face", f)
            Dd[:, sl] += om * ip(qf.weights, cs.evaluate(cs.basis("Poly", k), 1, qf.points), psi)
            rhs_r[:, sl] += om * ip(qf.weights, cs.evaluate(P0, 1, qf.points), psi)
        rhs_r -= ip(w, cs.evaluate(P0, 1, x), Pk) @ Dd
        ncG = cGv.shape[1]
        rhs_z = np.zeros((ncG, len(Ld)))
        rhs_z[:, own_d.start + nG:own_d.stop] = np.eye(ncG)
        Atest = np.vstack([ip(w, cs.evaluate(cs.grad(P0), 3, x), vPv), ip(w, cGv, vPv)])
        P_div = solve(Atest, np.vstack([rhs_r, rhs_z]))

        # ---- local products: consistent part plus boundary stabilisation
        Sg = np.zeros((len(Lg), len(Lg)))
        Sc = np.zeros((len(Lc), len(Lc)))
        Sd = np.zeros((len(Ld), len(Ld)))
        Pk1_b = cs.basis("Poly", k + 1)
        for (f, om, fs, n), Gam, Gt in zip(fdata, gammas, gts):
            qf = fs.quad
            hF = m.face_diameter[f]
            Tr = ip(qf.weights, fs.values("Poly", k + 1, qf.points), cs.evaluate(Pk1_b, 1, qf.points))
            Dg = Tr @ P_grad - Gam
            psi3 = fs.to3d(fs.values("vPoly", k, qf.points))
            vb = cs.evaluate(vP, 3, qf.points)
            Dc = ip(qf.weights, psi3, vb) @ P_curl - Gt
            Tn = ip(qf.weights, fs.values("Poly", k, qf.points), vb @ n)
            Dv = Tn @ P_div
            Dv[:, Ld.block("face", f)] -= np.eye(Dv.shape[0])
            Sg += hF * Dg.T @ Dg
            Sc += hF * Dc.T @ Dc
            Sd += hF * Dv.T @ Dv
        for e in m.cell_edges[t]:
            es = self.spaces("edge", e)
            qe = es.quad
            hE = m.edge_length[e]
            eo = self.edge_ops(e)
            QE = Lg.embed(eo.rec, self.layout["grad"].local("edge", e))
            Tr = ip(qe.weights, es.values("Poly", k + 1, qe.points), cs.evaluate(Pk1_b, 1, qe.points))
            Dg = Tr @ P_grad - QE
            tE = m.edge_tangent[e]
            Tt = ip(qe.weights, es.values("Poly", k, qe.points), cs.evaluate(vP, 3, qe.points) @ tE)
            Dc = Tt @ P_curl
            Dc[:, Lc.block("edge", e)] -= np.eye(k + 1)
            Sg += hE**2 * Dg.T @ Dg
            Sc += hE**2 * Dc.T @ Dc
        return CellOps(
            G=G, P_grad=P_grad, M_grad=P_grad.T @ P_grad + Sg, uG=uG,
            C=Cc, P_curl=P_curl, M_curl=P_curl.T @ P_curl + Sc, uC=uC,
            D=Dd, P_div=P_div, M_div=P_div.T @ P_div + Sd,
        )

    # ---------------------------------------------------------- dimensions
    def dims(self) -> dict[str, int]:
        return {s: self.layout[s].ndofs for s in SPACES}

    # ------------------------------------------------------- interpolation
    def interpolate(self, space: str, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Interpolate a function (points (n,3) -> values) into a discrete space."""
        m = self.mesh
        k = self.k
        lay = self.layout[space]
        out = np.zeros(lay.ndofs)
        if space == "grad":
            out[lay.kind_range("vertex")] = np.asarray(fn(m.vertices), dtype=float).reshape(-1)
        for e in range(m.n_edges) if space in ("grad", "curl") else ():
            es = self.spaces("edge", e)
            qe = es.quad
            val = np.asarray(fn(qe.points), dtype=float)
            if space == "curl":
                val = val @ m.edge_tangent[e]
            deg = k - 1 if space == "grad" else k
            out[lay.entity_dofs("edge", e)] = es.values("Poly", deg, qe.points).T @ (qe.weights * val)
        for f in range(m.n_faces) if space != "l2" else ():
            fs = self.spaces("face", f)
            qf = fs.quad
            val = np.asarray(fn(qf.points), dtype=float)
            if space == "grad":
                mom = fs.values("Poly", k - 1, qf.points).T @ (qf.weights * val)
            elif space == "div":
                mom = fs.values("Poly", k, qf.points).T @ (qf.weights * (val @ m.face_normal[f]))
            else:
                basis = np.concatenate([fs.to3d(fs.values("Roly", k - 1, qf.points)),
                                        fs.to3d(fs.values("cRoly", k, qf.points))], axis=1)
                mom = np.einsum("q,qic,qc->i", qf.weights, basis, val)
            out[lay.entity_dofs("face", f)] = mom
        for t in range(m.n_cells):
            cs = self.spaces("cell", t)
            qt = cs.quad
            val = np.asarray(fn(qt.points), dtype=float)
            if space in ("grad", "l2"):
                deg = k - 1 if space == "grad" else k
                mom = cs.values("Poly", deg, qt.points).T @ (qt.weights * val)
            else:
                tags = ("Roly", "cRoly") if space == "curl" else ("Goly", "cGoly")
                basis = np.concatenate([cs.values(tags[0], k - 1, qt.points),
                                        cs.values(tags[1], k, qt.points)], axis=1)
                mom = np.einsum("q,qic,qc->i", qt.weights, basis, val)
            out[lay.entity_dofs("cell", t)] = mom
        return out

    # ------------------------------------------------------ global matrices
    def _assemble(self, rows_of, cols_of, blocks, shape) -> sp.csr_matrix:
        R, C, V = [], [], []
        for r, c, B in blocks:
            rr, cc = np.meshgrid(r, c, indexing="ij")
            R.append(rr.ravel())
            C.append(cc.ravel())
            V.append(np.asarray(B).ravel())
        if not R:
            return sp.csr_matrix(shape)
        M = sp.coo_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))), shape=shape)
        M = M.tocsr()
        M.eliminate_zeros()
        return M

    def _grad_blocks(self):
        m, lg, lc = self.mesh, self.layout["grad"], self.layout["curl"]
        for e in range(m.n_edges):
            eo = self.edge_ops(e)
            yield lc.entity_dofs("edge", e), lg.local("edge", e).dofs, eo.G @ eo.rec
        for f in range(m.n_faces):
            yield lc.entity_dofs("face", f), lg.local("face", f).dofs, self.face_ops(f).uG
        for t in range(m.n_cells):
            yield lc.entity_dofs("cell", t), lg.local("cell", t).dofs, self.cell_ops(t).uG

    def _curl_blocks(self):
        m, lc, ld = self.mesh, self.layout["curl"], self.layout["div"]
        for f in range(m.n_faces):
            yield ld.entity_dofs("face", f), lc.local("face", f).dofs, self.face_ops(f).C
        for t in range(m.n_cells):
            yield ld.entity_dofs("cell", t), lc.local("cell", t).dofs, self.cell_ops(t).uC

    def _div_blocks(self):
        ld, l2 = self.layout["div"], self.layout["l2"]
        for t in range(self.mesh.n_cells):
            yield l2.entity_dofs("cell", t), ld.local("cell", t).dofs, self.cell_ops(t).D

    @cached_property
    def grad(self) -> sp.csr_matrix:
        """Discrete gradient X_grad -> X_curl."""
        return self._assemble(None, None, self._grad_blocks(),
                              (self.layout["curl"].ndofs, self.layout["grad"].ndofs))

    @cached_property
    def curl(self) -> sp.csr_matrix:
        """Discrete curl X_curl -> X_div."""
        return self._assemble(None, None, self._curl_blocks(),
                              (self.layout["div"].ndofs, self.layout["curl"].ndofs))

    @cached_property
    def div(self) -> sp.csr_matrix:
        """Discrete divergence X_div -> P^k(T_h)."""
        return self._assemble(None, None, self._div_blocks(),
                              (self.layout["l2"].ndofs, self.layout["div"].ndofs))

    def operator(self, i: int) -> sp.csr_matrix:
        return (self.grad, self.curl, self.div)[i]

    def product(self, space: str) -> sp.csr_matrix:
        """Global L2-like inner product matrix of a discrete space."""
        cache = self.__dict__.setdefault("_products", {})
        if space in cache:
            return cache[space]
        lay = self.layout[space]
        if space == "l2":
            M = sp.identity(lay.ndofs, format="csr")
        else:
            attr = {"grad": "M_grad", "curl": "M_curl", "div": "M_div"}[space]
            blocks = ((lay.local("cell", t).dofs, lay.local("cell", t).dofs,
                       getattr(self.cell_ops(t), attr)) for t in range(self.mesh.n_cells))
            M = self._assemble(None, None, blocks, (lay.ndofs, lay.ndofs))
            M = (0.5 * (M + M.T)).tocsr()
        cache[space] = M
        return M

    # ------------------------------------------------------------ potentials
    def potential(self, space: str, t: int, x: np.ndarray) -> np.ndarray:
        """Coefficients of the cell potential (in the orthonormal basis of
        P^{k+1}(T) for ``grad``, vP^k(T) otherwise) from a global vector."""
        ops = self.cell_ops(t)
        loc = x[self.layout[space].local("cell", t).dofs]
        if space == "l2":
            return loc
        return {"grad": ops.P_grad, "curl": ops.P_curl, "div": ops.P_div}[space] @ loc

    def potential_basis(self, space: str, t: int) -> tuple[np.ndarray, int]:
        cs = self.spaces("cell", t)
        k = self.k
        if space == "grad":
            return cs.basis("Poly", k + 1), 1
        if space == "l2":
            return cs.basis("Poly", k), 1
        return cs.basis("vPoly", k), 3

    def l2_error(self, space: str, x: np.ndarray, fn: Callable) -> float:
        """L2 distance between cell potentials of ``x`` and ``fn``."""
        tot = 0.0
        for t in range(self.mesh.n_cells):
            cs = self.spaces("cell", t)
            C, nc = self.potential_basis(space, t)
            q = cs.quad
            pv = cs.evaluate(C @ self.potential(space, t, x), nc, q.points)
            diff = pv - np.asarray(fn(q.points), dtype=float)
            tot += float(q.weights @ (diff**2 if diff.ndim == 1 else (diff**2).sum(-1)))
        return float(np.sqrt(tot))

    # ---------------------------------------------------------- local views
    def local_operator(self, i: int, kind: str, idx: int) -> np.ndarray:
        """Full local matrix of the ``i``-th operator on a face or cell.

        Rows follow the local layout of the target space, columns that of the
        source space.
        """
        names = ("grad", "curl", "div", "l2")
        src, dst = self.layout[names[i]].local(kind, idx), self.layout[names[i + 1]].local(kind, idx)
        full = {0: self.grad, 1: self.curl, 2: self.div}[i]
        return full[dst.dofs][:, src.dofs].toarray()

    def component_norm(self, space: str, kind: str, idx: int, layout: DofLayout | None = None,
                       edge_rec: bool = True) -> np.ndarray:
        """Quadratic form of the discrete component norm on an entity.

        Own components count with weight one, face components with ``h_F`` and
        edge components with ``h_F h_E`` (per face containing the edge).
        """
        m = self.mesh
        lay = self.layout[space] if layout is None else layout
        L = lay.local(kind, idx)
        N = np.zeros((len(L), len(L)))

        def add_block(sl, wgt):
            N[sl, sl] += wgt * np.eye(sl.stop - sl.start)

        def face_part(f, wgt):
            add_block(L.block("face", f), wgt)
            for e in m.face_edges[f]:
                he = m.edge_length[e]
                if space == "grad" and edge_rec:
                    le = lay.local("edge", e)
                    Q = L.embed(self.edge_ops(e).rec, le)
                    N[:] += wgt * he * Q.T @ Q
                else:
                    add_block(L.block("edge", e), wgt * he)

        add_block(L.block(kind, idx), 1.0)
        if kind == "face":
            for e in m.face_edges[idx]:
                he = m.edge_length[e]
                if space == "grad" and edge_rec:
                    Q = L.embed(self.edge_ops(e).rec, lay.local("edge", e))
                    N += he * Q.T @ Q
                else:
                    add_block(L.block("edge", e), he)
        elif kind == "cell":
            for f in m.cell_faces[idx]:
                face_part(f, m.face_diameter[f])
        return N

    def component_norm_matrix(self, space: str, layout: DofLayout | None = None) -> sp.csr_matrix:
        """Global component norm: sum over cells of the local quadratic forms."""
        lay = self.layout[space] if layout is None else layout
        if space == "l2":
            return sp.identity(lay.ndofs, format="csr")
        blocks = ((lay.local("cell", t).dofs, lay.local("cell", t).dofs,
                   self.component_norm(space, "cell", t, lay)) for t in range(self.mesh.n_cells))
        return self._assemble(None, None, blocks, (lay.ndofs, lay.ndofs))

    def potential_load(self, space: str, fn: Callable) -> np.ndarray:
        """Vector ``b`` with ``b @ x = sum_T int_T fn . P_T x`` for the cell potentials."""
        lay = self.layout[space]
        b = np.zeros(lay.ndofs)
        for t in range(self.mesh.n_cells):
            cs = self.spaces("cell", t)
            C, nc = self.potential_basis(space, t)
            q = cs.quad
            phi = cs.evaluate(C, nc, q.points)
            val = np.asarray(fn(q.points), dtype=float)
            mom = phi.T @ (q.weights * val) if nc == 1 else np.einsum("q,qic,qc->i", q.weights, phi, val)
            ops = self.cell_ops(t)
            P = {"grad": ops.P_grad, "curl": ops.P_curl, "div": ops.P_div}.get(space)
            loc = mom if P is None else P.T @ mom
            np.add.at(b, lay.local("cell", t).dofs, loc)
        return b

