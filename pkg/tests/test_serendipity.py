import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from conftest import MESHES, PolyField, cube_mesh, ddr, named_mesh, rel, sddr, tet_mesh
from sddr.ddr import DDRComplex
from sddr.mesh import build_mesh, generate_mesh
from sddr.polyspace import space_dim
from sddr.serendipity import SelectionError, SerendipityDDR, dof_count, select_boundaries

CASES = [(m, k) for m in MESHES for k in (0, 1, 2)]
SPACES = ("grad", "curl", "div", "l2")

# element closure dimensions, DDR / SDDR, for k = 0, 1, 2
TABLE = {
    "tetra": {"grad": ((4, 4), (15, 10), (32, 20)), "curl": ((6, 6), (28, 23), (65, 53)),
              "div": ((4, 4), (18, 18), (44, 44)), "l2": ((1, 1), (4, 4), (10, 10))},
    "hexa": {"grad": ((8, 8), (27, 20), (54, 32)), "curl": ((12, 12), (46, 39), (99, 77)),
             "div": ((6, 6), (24, 24), (56, 56)), "l2": ((1, 1), (4, 4), (10, 10))},
}


def entities(mesh):
    return [("face", f) for f in range(mesh.n_faces)] + [("cell", t) for t in range(mesh.n_cells)]


def vector_moments(s, kind, i, tag, deg, fn):
    """Coefficients of the L2 projection of a 3D field on an orthonormal vector space."""
    es = s.ddr.spaces(kind, i)
    q = es.quad
    B = es.values(tag, deg, q.points)
    if kind == "face":
        B = es.to3d(B)
    return np.einsum("q,qic,qc->i", q.weights, B, fn(q.points))


def complement_coupling(s, kind, i, deg):
    """Rows: orthonormal cRoly^deg(P); columns: orthonormal vPoly^k(P)."""
    es = s.ddr.spaces(kind, i)
    nc = 2 if kind == "face" else 3
    return es.inner(es.basis("cRoly", deg), es.basis("vPoly", s.k), nc)


class TestSelection:
    def test_triangle_face(self):
        m = tet_mesh()
        for f in range(m.n_faces):
            sel = select_boundaries(m, "face", f)
            assert sel.eta == 3 and sel.ell(2) == 0
            assert sel.theta >= 0.1

    def test_square_face_and_hexa(self):
        m = cube_mesh()
        assert all(select_boundaries(m, "face", f).eta == 4 for f in range(m.n_faces))
        sel = select_boundaries(m, "cell", 0)
        assert sel.eta == 6 and sel.ell(1) == -4

    def test_tetra(self):
        assert select_boundaries(tet_mesh(), "cell", 0).eta == 4

    def test_theta_too_strict(self):
        with pytest.raises(SelectionError):
            select_boundaries(tet_mesh(), "cell", 0, theta_min=5.0)

    def test_nonconvex_face_skips_reentrant_edge(self):
        # an L-shaped prism: the reentrant side faces cut the cell and are never admissible
        pts2 = [(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)]
        X = [(x, y, 0.0) for x, y in pts2] + [(x, y, 1.0) for x, y in pts2]
        faces = [[5, 4, 3, 2, 1, 0], [6, 7, 8, 9, 10, 11]]
        faces += [[i, (i + 1) % 6, (i + 1) % 6 + 6, i + 6] for i in range(6)]
        m = build_mesh(X, faces, [list(range(8))])
        sel = select_boundaries(m, "cell", 0)
        reentrant = {4, 5}
        assert not reentrant & set(sel.boundaries)
        assert sel.eta >= 2


class TestDofCount:
    @pytest.mark.parametrize("shape", ["tetra", "hexa"])
    @pytest.mark.parametrize("space", SPACES)
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_table(self, shape, space, k):
        ddr_n, sddr_n = TABLE[shape][space][k]
        assert dof_count(shape, k, space, "ddr") == ddr_n
        assert dof_count(shape, k, space, "sddr") == sddr_n

    @pytest.mark.parametrize("space", SPACES)
    def test_lowest_order_no_reduction(self, space):
        assert dof_count("tetra", 0, space, "ddr") == dof_count("tetra", 0, space, "sddr")

    @pytest.mark.parametrize("name,shape", [("tet", "tetra"), ("hex", "hexa")])
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_general_shape_and_layouts(self, name, shape, k):
        m = named_mesh(name)
        s = sddr(name, k)
        for sp_ in SPACES:
            assert dof_count((m, 0), k, sp_, "sddr") == dof_count(shape, k, sp_, "sddr")
            assert len(s.layout[sp_].local("cell", 0)) == TABLE[shape][sp_][k][1]
            assert len(s.ddr.layout[sp_].local("cell", 0)) == TABLE[shape][sp_][k][0]

    def test_unknown_scheme(self):
        with pytest.raises(KeyError):
            dof_count("tetra", 1, "grad", "fem")


class TestPolynomialConsistency:
    @pytest.mark.parametrize("name,k", CASES)
    def test_extension_of_interpolate(self, name, k):
        s, d = sddr(name, k), ddr(name, k)
        for seed in range(3):
            q = PolyField(k + 1, False, 100 + seed)
            v = PolyField(k, True, 200 + seed)
            assert rel(s.extension("grad") @ s.interpolate("grad", q), d.interpolate("grad", q)) < 1e-10
            assert rel(s.extension("curl") @ s.interpolate("curl", v), d.interpolate("curl", v)) < 1e-10

    @pytest.mark.parametrize("name,k", CASES)
    def test_serendipity_operators(self, name, k):
        s = sddr(name, k)
        q = PolyField(k + 1, False, 300)
        v = PolyField(k, True, 301)
        xq, xv = s.interpolate("grad", q), s.interpolate("curl", v)
        for kind, i in entities(s.mesh):
            gq = s.local_sgrad(kind, i) @ xq[s.layout["grad"].local(kind, i).dofs]
            cv = s.local_scurl(kind, i) @ xv[s.layout["curl"].local(kind, i).dofs]
            assert rel(gq, vector_moments(s, kind, i, "vPoly", k, q.grad)) < 1e-10
            assert rel(cv, vector_moments(s, kind, i, "vPoly", k, v)) < 1e-10

    @pytest.mark.parametrize("k", [1, 2])
    def test_cell_rotor_reduction(self, k):
        s = sddr("tet", k)
        v = PolyField(k, True, 302)
        got = (s.reduction("curl") @ s.ddr.interpolate("curl", v))[s.layout["curl"].entity_dofs("cell", 0)]
        nR = space_dim("Roly", 3, k - 1)
        assert rel(got[:nR], vector_moments(s, "cell", 0, "Roly", k - 1, v)) < 1e-10

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_zero_input(self, k):
        s = sddr("hex", k)
        assert not np.any(s.local_sgrad("cell", 0) @ np.zeros(len(s.layout["grad"].local("cell", 0))))


class TestProjectionIdentities:
    @pytest.mark.parametrize("name,k", CASES)
    def test_extension_keeps_stored_component(self, name, k):
        # pi^{l_P} EPoly_P q = q_P: a prefix of the hierarchical P^{k-1} rows is a selector
        s = sddr(name, k)
        for kind, i in entities(s.mesh):
            E = s.local_map("E", "grad", kind, i)
            full, ser = s.ddr.layout["grad"].local(kind, i), s.layout["grad"].local(kind, i)
            own_f, own_s = full.block(kind, i), ser.block(kind, i)
            n = own_s.stop - own_s.start
            sel = np.zeros((n, len(ser)))
            sel[:, own_s] = np.eye(n)
            assert np.abs(E[own_f][:n] - sel).max(initial=0) < 1e-11

    @pytest.mark.parametrize("name,k", CASES)
    def test_complement_of_gradient(self, name, k):
        s = sddr(name, k)
        for kind, i in entities(s.mesh):
            G = (s.ddr.face_ops(i) if kind == "face" else s.ddr.cell_ops(i)).G
            E = s.local_map("E", "grad", kind, i)
            C = complement_coupling(s, kind, i, k)
            lhs, rhs = C @ G @ E, C @ s.local_sgrad(kind, i)
            assert np.abs(lhs - rhs).max(initial=0) < 1e-11 * max(np.abs(rhs).max(initial=0), 1)

    @pytest.mark.parametrize("name,k", CASES)
    def test_curl_serendipity_complement(self, name, k):
        s = sddr(name, k)
        for kind, i in entities(s.mesh):
            ell = int(s.ell_F[i] if kind == "face" else s.ell_T[i])
            lay = s.layout["curl"].local(kind, i)
            own = lay.block(kind, i)
            nR = space_dim("Roly", 2 if kind == "face" else 3, k - 1)
            C = complement_coupling(s, kind, i, ell + 1)
            sel = np.zeros((C.shape[0], len(lay)))
            sel[:, own.start + nR:own.stop] = np.eye(C.shape[0])
            assert np.abs(C @ s.local_scurl(kind, i) - sel).max(initial=0) < 1e-11


class TestCochain:
    @pytest.mark.parametrize("name,k", CASES)
    def test_reduction_and_extension(self, name, k):
        s, d = sddr(name, k), ddr(name, k)
        Rg, Rc, Eg, Ec = (s.reduction("grad"), s.reduction("curl"), s.extension("grad"), s.extension("curl"))
        sc = abs(d.grad).max()
        assert abs(Rc @ d.grad - s.grad @ Rg).max() < 1e-10 * sc
        assert abs(Ec @ s.grad - d.grad @ Eg).max() < 1e-10 * sc
        assert abs(d.curl @ Ec @ Rc - d.curl).max() < 1e-10 * abs(d.curl).max()
        assert abs(s.curl @ s.grad).max() < 1e-10 * abs(s.curl).max() * abs(s.grad).max()
        assert abs(s.div @ s.curl).max() < 1e-10 * abs(s.div).max() * abs(s.curl).max()

    @pytest.mark.parametrize("name,k", CASES)
    def test_R_E_identity(self, name, k):
        s = sddr(name, k)
        for sp_ in SPACES:
            RE = (s.reduction(sp_) @ s.extension(sp_)).toarray()
            assert np.abs(RE - np.eye(len(RE))).max() < 1e-11

    @pytest.mark.parametrize("name,k", CASES)
    def test_serendipity_commutation(self, name, k):
        # SC_P suG_P = SG_P on every face and cell
        s = sddr(name, k)
        rng = np.random.default_rng(k)
        for kind, i in entities(s.mesh):
            lg, lc = s.layout["grad"].local(kind, i), s.layout["curl"].local(kind, i)
            x = rng.standard_normal((len(lg), 3))
            suG = s.grad[lc.dofs][:, lg.dofs].toarray()
            lhs, rhs = s.local_scurl(kind, i) @ suG @ x, s.local_sgrad(kind, i) @ x
            assert rel(lhs, rhs) < 1e-10


class TestMutations:
    @pytest.mark.parametrize("mutation", ["drop_hatu_correction", "plain_ecurl_projection"])
    def test_mutation_breaks_an_identity(self, mutation):
        d = ddr("cube6", 2)
        s = SerendipityDDR(d, mutation=mutation)
        Rg, Rc, Eg, Ec = (s.reduction("grad"), s.reduction("curl"), s.extension("grad"), s.extension("curl"))
        sc = abs(d.grad).max()
        res = [abs(Rc @ d.grad - s.grad @ Rg).max() / sc,
               abs(Ec @ s.grad - d.grad @ Eg).max() / sc,
               abs(d.curl @ Ec @ Rc - d.curl).max() / abs(d.curl).max()]
        assert max(res) > 1e-6

    def test_unknown_mutation(self):
        with pytest.raises(ValueError):
            SerendipityDDR(ddr("tet", 1), mutation="nope")


class TestNorms:
    @pytest.mark.parametrize("space", ["grad", "curl"])
    def test_equivalence_band_stable(self, space):
        bands = []
        for n in (2, 3):
            s = SerendipityDDR(DDRComplex(generate_mesh("hex-grid", n), 1))
            M = s.product(space).toarray()
            N = s.ddr.component_norm_matrix(space, s.layout[space]).toarray()
            ev = sla.eigh(M, N, eigvals_only=True)
            assert ev.min() > 0
            bands.append((ev.min(), ev.max()))
        for a, b in zip(*bands):
            assert 0.5 < a / b < 2.0

    def test_products_are_isometric(self):
        s = sddr("cube6", 1)
        x = np.random.default_rng(0).standard_normal(s.layout["curl"].ndofs)
        Ex = s.extension("curl") @ x
        assert x @ s.product("curl") @ x == pytest.approx(Ex @ s.ddr.product("curl") @ Ex, rel=1e-12)


def test_caching_matches_uncached_build():
    s = SerendipityDDR(DDRComplex(generate_mesh("tet-subdiv", 2), 1))
    key = s.ddr.geometry_key
    a = 0
    b = next(t for t in range(1, s.mesh.n_cells) if key("cell", t) == key("cell", a))
    cached, fresh = s.cell_ops(a), s._build_cell(b)
    for name in ("SG", "SC", "E_grad", "E_curl", "R_grad", "R_curl"):
        assert np.allclose(getattr(cached, name), getattr(fresh, name), atol=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.lists(st.floats(-0.25, 0.25), min_size=12, max_size=12), st.integers(1, 2))
def test_perturbed_tetra_consistency(noise, k):
    X = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) + np.reshape(noise, (4, 3))
    if abs(np.dot(np.cross(X[1] - X[0], X[2] - X[0]), X[3] - X[0])) < 0.05:
        return
    try:
        s = SerendipityDDR(DDRComplex(tet_mesh(X), k))
    except SelectionError:
        return
    q = PolyField(k + 1, False, 9, center=X.mean(0))
    v = PolyField(k, True, 10, center=X.mean(0))
    assert rel(s.extension("grad") @ s.interpolate("grad", q), s.ddr.interpolate("grad", q)) < 1e-10
    assert rel(s.extension("curl") @ s.interpolate("curl", v), s.ddr.interpolate("curl", v)) < 1e-10
    assert abs(s.curl @ s.grad).max() < 1e-10 * abs(s.curl).max() * abs(s.grad).max()
