import functools

import numpy as np
import pytest

from sddr.ddr import DDRComplex
from sddr.mesh import build_mesh, generate_mesh
from sddr.serendipity import SerendipityDDR

TET_FACES = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
CUBE_V = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
CUBE_F = [[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4], [2, 3, 7, 6], [1, 2, 6, 5], [0, 4, 7, 3]]


def tet_mesh(X=None):
    X = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) if X is None else np.asarray(X, float)
    # orient the stored loops so that the mesh is valid whatever the vertex order
    vol = np.dot(np.cross(X[1] - X[0], X[2] - X[0]), X[3] - X[0])
    faces = TET_FACES if vol > 0 else [f[::-1] for f in TET_FACES]
    return build_mesh(X, faces, [[0, 1, 2, 3]])


def cube_mesh(X=None):
    X = np.array(CUBE_V, float) if X is None else np.asarray(X, float)
    return build_mesh(X, CUBE_F, [[0, 1, 2, 3, 4, 5]])


@functools.lru_cache(maxsize=None)
def named_mesh(name):
    if name == "tet":
        return tet_mesh()
    if name == "hex":
        return cube_mesh()
    if name == "hex2":
        return generate_mesh("hex-grid", 2)
    if name == "cube6":
        return generate_mesh("tet-subdiv", 1)
    raise KeyError(name)


@functools.lru_cache(maxsize=None)
def ddr(name, k):
    d = DDRComplex(named_mesh(name), k)
    d.precompute()
    return d


@functools.lru_cache(maxsize=None)
def sddr(name, k):
    s = SerendipityDDR(ddr(name, k))
    s.precompute()
    return s


MESHES = ("tet", "hex", "hex2", "cube6")


def rel(a, b):
    """max |a - b| relative to max |b| (or absolute when b vanishes)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = np.abs(b).max(initial=0.0)
    return np.abs(a - b).max(initial=0.0) / (scale if scale > 0 else 1.0)


def poly(degree, vector, seed, center=(0.3, 0.2, 0.1)):
    from sddr.verify import random_polynomial
    return random_polynomial(degree, vector, np.random.default_rng(seed), center)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class PolyField:
    """Random polynomial with exact derivatives, evaluated on (n, 3) points."""

    def __init__(self, degree, vector, seed, center=(0.3, 0.2, 0.1)):
        self.exps = np.array([(a, b, c) for a in range(degree + 1) for b in range(degree + 1 - a)
                              for c in range(degree + 1 - a - b)], dtype=int).reshape(-1, 3)
        self.coef = np.random.default_rng(seed).standard_normal((len(self.exps), 3 if vector else 1))
        self.center = np.asarray(center, float)
        self.vector = vector

    def _mono(self, x, shift=None):
        y = np.atleast_2d(x) - self.center
        e = self.exps.copy()
        fac = np.ones(len(e))
        if shift is not None:
            fac = e[:, shift].astype(float)
            e[:, shift] = np.maximum(e[:, shift] - 1, 0)
        return fac * np.prod(y[:, None, :] ** e[None], axis=2)

    def __call__(self, x):
        out = self._mono(x) @ self.coef
        return out if self.vector else out[:, 0]

    def d(self, x, i):
        """Partial derivative along axis i."""
        out = self._mono(x, i) @ self.coef
        return out if self.vector else out[:, 0]

    def grad(self, x):
        return np.stack([self.d(x, i) for i in range(3)], axis=-1)

    def curl(self, x):
        J = [self.d(x, i) for i in range(3)]   # J[i][:, c] = d_i u_c
        return np.stack([J[1][:, 2] - J[2][:, 1], J[2][:, 0] - J[0][:, 2], J[0][:, 1] - J[1][:, 0]], -1)

    def div(self, x):
        return sum(self.d(x, i)[:, i] for i in range(3))


def integrate(mesh_ddr, fn):
    """Integral over the mesh with the cell rules of a DDR complex."""
    tot = 0.0
    for t in range(mesh_ddr.mesh.n_cells):
        q = mesh_ddr.spaces("cell", t).quad
        tot += float(q.weights @ fn(q.points))
    return tot
