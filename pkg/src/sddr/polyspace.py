"""Local polynomial spaces on cells, faces and edges.

Every entity carries a scaled monomial frame centred at its interior point.
Polynomials are stored as coefficient columns in that frame (component-major
for vector fields), so differential operators and multiplication by
coordinates are exact matrix operations.

Subspaces (``Poly``, ``vPoly``, ``Goly``, ``cGoly``, ``Roly``, ``cRoly``) are
orthonormalised in L2 degree by degree. The bases are hierarchical: the first
``dim(X^l)`` columns of the degree-``L`` basis span ``X^l`` for every ``l``,
so L2 projection onto a lower degree is a truncation of coefficients.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Callable

import numpy as np

from .mesh import PolyMesh
from .quadrature import QuadRule, cell_rule, edge_rule, face_rule

__all__ = [
    "RANK_TOL",
    "monomial_exponents",
    "MonomialFrame",
    "EntitySpaces",
    "SubspaceBasis",
    "cell_spaces",
    "face_spaces",
    "edge_spaces",
    "build_space",
    "l2_project",
    "differential",
    "trace_restrict",
    "space_dim",
]

RANK_TOL = 1e-10
TAGS = ("Poly", "Poly0", "vPoly", "Goly", "cGoly", "Roly", "cRoly")


@lru_cache(maxsize=None)
def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponents ordered by total degree, then reverse-lexicographically."""
    out = []
    for d in range(degree + 1):
        if dim == 1:
            out.append((d,))
            continue
        for a in range(d, -1, -1):
            if dim == 2:
                out.append((a, d - a))
            else:
                for b in range(d - a, -1, -1):
                    out.append((a, b, d - a - b))
    return np.array(out, dtype=int).reshape(-1, dim)


def _count(dim: int, degree: int) -> int:
    return comb(degree + dim, dim) if degree >= 0 else 0


def space_dim(tag: str, dim: int, ell: int) -> int:
    """Closed-form dimension of a local space (``dim`` is 1, 2 or 3)."""
    P = lambda l: _count(dim, l)  # noqa: E731
    if tag == "Poly":
        return P(ell)
    if tag == "Poly0":
        return max(P(ell) - 1, 0)
    if ell < 0:
        return 0
    if tag == "vPoly":
        return dim * P(ell)
    if dim == 3:
        table = {
            "Goly": P(ell + 1) - 1,
            "cGoly": 3 * P(ell) - P(ell + 1) + 1,
            "Roly": 3 * P(ell) - P(ell - 1),
            "cRoly": P(ell - 1),
        }
    elif dim == 2:
        table = {
            "Goly": P(ell + 1) - 1,
            "cGoly": P(ell - 1),
            "Roly": P(ell + 1) - 1,
            "cRoly": P(ell - 1),
        }
    else:
        raise ValueError("vector spaces need dim 2 or 3")
    return table[tag]


class MonomialFrame:
    """Monomials ``xi^alpha``, ``|alpha| <= degree``, in affine coordinates.

    Local coordinates are ``y = axes (x - center)`` (orthonormal axes: the
    identity on cells, the tangent frame on faces, the tangent on edges) and
    the monomial variable is ``xi = B y``. ``B`` is a scaling or a whitening
    transform chosen for conditioning; ``dy[i]`` and ``my[i]`` act on
    coefficients as ``d/dy_i`` and multiplication by ``y_i``.
    """

    def __init__(self, dim: int, degree: int, center, B, axes=None):
        self.dim = dim
        self.degree = degree
        self.center = np.asarray(center, dtype=float)
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.axes = np.eye(3) if axes is None else np.atleast_2d(np.asarray(axes, dtype=float))
        self.exponents = monomial_exponents(dim, degree)
        self.n = len(self.exponents)
        index = {tuple(a): i for i, a in enumerate(self.exponents.tolist())}
        deriv, mult = [], []
        for j in range(dim):
            D = np.zeros((self.n, self.n))
            X = np.zeros((self.n, self.n))
            for i, a in enumerate(self.exponents):
                if a[j] > 0:
                    b = a.copy()
                    b[j] -= 1
                    D[index[tuple(b)], i] = a[j]
                b = a.copy()
                b[j] += 1
                if tuple(b) in index:
                    X[index[tuple(b)], i] = 1.0
            deriv.append(D)
            mult.append(X)
        Binv = np.linalg.inv(self.B)
        self.deriv, self.mult = deriv, mult
        self.dy = [sum(self.B[j, i] * deriv[j] for j in range(dim)) for i in range(dim)]
        self.my = [sum(Binv[i, j] * mult[j] for j in range(dim)) for i in range(dim)]
        self.total_degree = self.exponents.sum(axis=1)

    def count(self, degree: int) -> int:
        return _count(self.dim, degree)

    def coords(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) @ self.axes.T @ self.B.T

    def vandermonde(self, points: np.ndarray) -> np.ndarray:
        xi = self.coords(points)
        pw = xi[:, :, None] ** np.arange(self.degree + 1)
        V = np.ones((len(xi), self.n))
        for j in range(self.dim):
            V *= pw[:, j, self.exponents[:, j]]
        return V


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis of a local space, as coefficient columns in a frame."""

    entity: "EntitySpaces"
    tag: str
    degree: int
    coef: np.ndarray
    ncomp: int

    @property
    def frame(self) -> MonomialFrame:
        return self.entity.frame

    @property
    def dim(self) -> int:
        return self.coef.shape[1]

    def values(self, points: np.ndarray) -> np.ndarray:
        return self.entity.evaluate(self.coef, self.ncomp, points)

    def gram(self, other: "SubspaceBasis | None" = None) -> np.ndarray:
        other = self if other is None else other
        return self.entity.inner(self.coef, other.coef, self.ncomp)


class EntitySpaces:
    """Frame, quadrature, mass matrix and cached hierarchical bases of one entity."""

    def __init__(self, kind: str, dim: int, degree: int, center, quad: QuadRule,
                 axes=None, normal=None, vertices=None):
        if quad.exact_degree < 2 * degree:
            raise ValueError("quadrature too weak for the mass matrix")
        self.kind = kind
        self.dim = dim
        self.degree = degree
        B = _whitening(quad, center, np.eye(3) if axes is None else np.atleast_2d(axes), vertices)
        self.frame = MonomialFrame(dim, degree, center, B, axes)
        self.quad = quad
        self.normal = normal
        self.V = self.frame.vandermonde(quad.points)
        self.mass = self.V.T @ (quad.weights[:, None] * self.V)
        self._bases: dict[str, tuple[np.ndarray, list[int]]] = {}

    def translated(self, shift: np.ndarray) -> "EntitySpaces":
        """Copy of this entity moved by ``shift``; bases and mass are shared."""
        other = copy.copy(self)
        other.frame = copy.copy(self.frame)
        other.frame.center = self.frame.center + shift
        other.quad = QuadRule(self.quad.points + shift, self.quad.weights, self.quad.exact_degree)
        return other

    # ---- coefficient algebra -------------------------------------------------
    @property
    def n(self) -> int:
        return self.frame.n

    def comp(self, C: np.ndarray, c: int) -> np.ndarray:
        return C[c * self.n:(c + 1) * self.n]

    def grad(self, C):
        return np.vstack([D @ C for D in self.frame.dy])

    def div(self, C):
        return sum(D @ self.comp(C, j) for j, D in enumerate(self.frame.dy))

    def curl(self, C):
        D = self.frame.dy
        c0, c1, c2 = (self.comp(C, j) for j in range(3))
        return np.vstack([D[1] @ c2 - D[2] @ c1, D[2] @ c0 - D[0] @ c2, D[0] @ c1 - D[1] @ c0])

    def vrot(self, C):
        """Rotated face gradient ``(d_v r, -d_u r)``."""
        D = self.frame.dy
        return np.vstack([D[1] @ C, -(D[0] @ C)])

    def rot(self, C):
        """Scalar face rotor ``d_u z_v - d_v z_u``."""
        D = self.frame.dy
        return D[0] @ self.comp(C, 1) - D[1] @ self.comp(C, 0)

    def times_x(self, C):
        """``(x - x_P) q``."""
        return np.vstack([X @ C for X in self.frame.my])

    def cross_x(self, C):
        X = self.frame.my
        c0, c1, c2 = (self.comp(C, j) for j in range(3))
        return np.vstack([X[1] @ c2 - X[2] @ c1, X[2] @ c0 - X[0] @ c2, X[0] @ c1 - X[1] @ c0])

    def perp_x(self, C):
        """``(x - x_F)^perp q`` with ``(a, b)^perp = (b, -a)``."""
        X = self.frame.my
        return np.vstack([X[1] @ C, -(X[0] @ C)])

    def evaluate(self, C: np.ndarray, ncomp: int, points: np.ndarray) -> np.ndarray:
        V = self.frame.vandermonde(points)
        if ncomp == 1:
            return V @ C
        return np.stack([V @ self.comp(C, j) for j in range(ncomp)], axis=-1)

    def to3d(self, vals: np.ndarray) -> np.ndarray:
        """Map frame components of face/edge vector values to 3D vectors."""
        return vals @ self.frame.axes

    def inner(self, A: np.ndarray, B: np.ndarray, ncomp: int = 1) -> np.ndarray:
        return sum(self.comp(A, j).T @ self.mass @ self.comp(B, j) for j in range(ncomp))

    # ---- subspaces -------------------------------------------------------------
    def ncomp(self, tag: str) -> int:
        return 1 if tag in ("Poly", "Poly0") else self.dim

    def max_degree(self, tag: str) -> int:
        return self.degree - 1 if tag in ("Goly", "Roly") else self.degree

    def _generators(self, tag: str, d: int) -> np.ndarray:
        fr = self.frame
        N = fr.n
        mono = lambda deg: np.eye(N)[:, fr.total_degree == deg]  # noqa: E731
        dim = self.dim
        if tag == "Poly":
            return mono(d)
        if tag == "vPoly":
            m = mono(d)
            return np.hstack([np.vstack([m if c == j else 0 * m for c in range(dim)]) for j in range(dim)])
        if tag == "Goly":
            return self.grad(mono(d + 1))
        if tag == "Roly":
            if dim == 3:
                m = mono(d + 1)
                return np.hstack([self.curl(np.vstack([m if c == j else 0 * m for c in range(3)]))
                                  for j in range(3)])
            return self.vrot(mono(d + 1))
        if tag == "cGoly":
            if d < 1:
                return np.zeros((dim * N, 0))
            m = mono(d - 1)
            if dim == 3:
                return np.hstack([self.cross_x(np.vstack([m if c == j else 0 * m for c in range(3)]))
                                  for j in range(3)])
            return self.perp_x(m)
        if tag == "cRoly":
            if d < 1:
                return np.zeros((dim * N, 0))
            return self.times_x(mono(d - 1))
        raise KeyError(tag)

    def _build(self, tag: str):
        if tag in self._bases:
            return self._bases[tag]
        if tag == "Poly0":
            C, dims = self._build("Poly")
            res = (C[:, 1:], [max(d - 1, 0) for d in dims])
            self._bases[tag] = res
            return res
        if tag != "Poly" and self.dim == 1:
            raise KeyError(f"{tag} undefined on edges")
        dirs, dims = [], []
        total = 0
        for d in range(self.max_degree(tag) + 1):
            G = self._generators(tag, d)
            if G.shape[1]:
                # generators of one group are homogeneous of degree d, hence
                # coefficient-orthogonal to all earlier groups
                U, s, _ = np.linalg.svd(G, full_matrices=False)
                keep = s > RANK_TOL * s[0] if s.size and s[0] > 0 else np.zeros(0, bool)
                dirs.append(U[:, keep])
                total += int(keep.sum())
            dims.append(total)
        nc = self.ncomp(tag)
        C = np.hstack(dirs) if dirs else np.zeros((nc * self.n, 0))
        for _ in range(2):  # Cholesky QR, repeated once for orthogonality
            G = self.inner(C, C, nc)
            L = np.linalg.cholesky(G)
            C = np.linalg.solve(L, C.T).T
        self._bases[tag] = (C, dims)
        return C, dims

    def dim_of(self, tag: str, ell: int) -> int:
        if ell < 0 and tag != "Poly0":
            return 0
        C, dims = self._build(tag)
        if ell > len(dims) - 1:
            raise ValueError(f"{tag}^{ell} exceeds frame degree {self.degree}")
        return dims[ell] if ell >= 0 else 0

    def basis(self, tag: str, ell: int) -> np.ndarray:
        """Coefficient matrix of the orthonormal basis of ``tag^ell``."""
        nc = self.ncomp(tag)
        if ell < 0:
            return np.zeros((nc * self.n, 0))
        C, _ = self._build(tag)
        return C[:, :self.dim_of(tag, ell)]

    def space(self, tag: str, ell: int) -> SubspaceBasis:
        return SubspaceBasis(self, tag, ell, self.basis(tag, ell), self.ncomp(tag))

    def values(self, tag: str, ell: int, points: np.ndarray) -> np.ndarray:
        return self.evaluate(self.basis(tag, ell), self.ncomp(tag), points)


def _whitening(quad: QuadRule, center, axes, vertices) -> np.ndarray:
    """Affine map making the entity isotropic and of unit radius in ``xi``."""
    y = (quad.points - center) @ axes.T
    S = (quad.weights[:, None] * y).T @ y / quad.weights.sum()
    w, U = np.linalg.eigh(S)
    B = U @ np.diag(w ** -0.5) @ U.T
    if vertices is not None:
        r = np.linalg.norm((vertices - center) @ axes.T @ B.T, axis=1).max()
        B = B / r
    return B


def cell_spaces(mesh: PolyMesh, t: int, degree: int, qdeg: int | None = None) -> EntitySpaces:
    qdeg = 2 * degree + 2 if qdeg is None else qdeg
    xc = mesh.cell_center[t]
    return EntitySpaces("cell", 3, degree, xc, cell_rule(mesh, t, qdeg),
                        vertices=mesh.vertices[mesh.cell_vertices[t]])


def face_spaces(mesh: PolyMesh, f: int, degree: int, qdeg: int | None = None) -> EntitySpaces:
    qdeg = 2 * degree + 2 if qdeg is None else qdeg
    xc = mesh.face_center[f]
    return EntitySpaces("face", 2, degree, xc, face_rule(mesh, f, qdeg), axes=mesh.face_axes[f],
                        normal=mesh.face_normal[f], vertices=mesh.vertices[mesh.face_vertices[f]])


def edge_spaces(mesh: PolyMesh, e: int, degree: int, qdeg: int | None = None) -> EntitySpaces:
    qdeg = 2 * degree + 2 if qdeg is None else qdeg
    return EntitySpaces("edge", 1, degree, mesh.edge_center[e], edge_rule(mesh, e, qdeg),
                        axes=mesh.edge_tangent[e][None, :], vertices=mesh.vertices[mesh.edges[e]])


def build_space(entity: EntitySpaces, tag: str, ell: int) -> SubspaceBasis:
    """Orthonormal hierarchical basis of ``tag^ell`` on ``entity``."""
    if tag not in TAGS:
        raise KeyError(tag)
    return entity.space(tag, ell)


def l2_project(target: SubspaceBasis, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Coefficients of the L2 projection of ``f`` on ``target``.

    ``f`` maps (n, 3) points to scalar values or to 3D vectors; vectors are
    reduced to the entity frame (tangential part on faces).
    """
    ent = target.entity
    q = ent.quad
    vals = np.asarray(f(q.points), dtype=float)
    phi = target.values(q.points)
    if target.ncomp == 1:
        if vals.ndim == 2:  # vector field on an edge: tangential component
            vals = vals @ ent.frame.axes[0]
        rhs = phi.T @ (q.weights * vals)
    else:
        loc = vals @ ent.frame.axes.T if vals.shape[-1] == 3 and ent.dim == 2 else vals
        rhs = np.einsum("q,qic,qc->i", q.weights, phi, loc)
    return np.linalg.solve(target.gram(), rhs)


def differential(basis: SubspaceBasis, op: str) -> SubspaceBasis:
    """Apply ``grad``, ``curl``, ``div``, ``rot`` or ``vrot`` to every basis function.

    The result is returned in the same frame (it is not orthonormal).
    """
    ent = basis.entity
    fn = {"grad": ent.grad, "curl": ent.curl, "div": ent.div, "rot": ent.rot, "vrot": ent.vrot}[op]
    ncomp = 1 if op in ("div", "rot") else ent.dim
    return SubspaceBasis(ent, f"{op}({basis.tag})", basis.degree, fn(basis.coef), ncomp)


def trace_restrict(basis: SubspaceBasis, sub: EntitySpaces, component: str = "auto") -> np.ndarray:
    """Coefficients of traces of ``basis`` on the sub-entity ``sub``.

    Scalars are restricted; vectors give their tangential part on faces
    (``component="tangential"``), their normal part on faces
    (``component="normal"``) or their tangential part on edges. The result is
    expressed in the orthonormal ``Poly``/``vPoly`` basis of matching degree.
    """
    q = sub.quad
    vals = basis.values(q.points)
    ell = basis.degree
    if basis.ncomp == 1:
        tgt = sub.basis("Poly", ell)
        phi = sub.evaluate(tgt, 1, q.points)
        return phi.T @ (q.weights[:, None] * vals)
    v3 = vals if basis.ncomp == 3 else basis.entity.to3d(vals)
    if sub.dim == 1:
        tgt = sub.basis("Poly", ell)
        phi = sub.evaluate(tgt, 1, q.points)
        return phi.T @ (q.weights[:, None] * (v3 @ sub.frame.axes[0]))
    if component == "normal":
        tgt = sub.basis("Poly", ell)
        phi = sub.evaluate(tgt, 1, q.points)
        return phi.T @ (q.weights[:, None] * (v3 @ sub.normal))
    tgt = sub.basis("vPoly", ell)
    phi = sub.to3d(sub.evaluate(tgt, 2, q.points))
    return np.einsum("q,qic,qjc->ij", q.weights, phi, v3)
