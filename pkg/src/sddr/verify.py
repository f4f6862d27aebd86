"""Numerical checks of the homological and analytical properties linking two complexes.

A :class:`ComplexBundle` holds a "top" complex (spaces with Gram matrices and
differentials), a "bottom" complex, and extension/reduction maps between
them. The checks here are all finite-dimensional linear algebra on those
matrices; every boolean in a report is stored next to the residual it was
derived from.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .ddr import DDRComplex
from .serendipity import SerendipityDDR

__all__ = [
    "SVD_TOL",
    "ComplexBundle",
    "VerificationReport",
    "bundle_from_ddr",
    "bundle_from_sddr",
    "cohomology_dims",
    "check_assumptions",
    "poincare_constant",
    "poincare_transfer",
    "reduction_norm",
    "xdiv_counterexample",
    "consistency_probe",
    "random_polynomial",
    "run_verification",
]

SVD_TOL = 1e-9
TOL = {"C1": 1e-11, "C2": 1e-9, "C3": 1e-10, "A2": 1e-10, "complex": 1e-10}
SPACES = ("grad", "curl", "div", "l2")


def _dense(A) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def _rel(num, den) -> float:
    den = float(den)
    return float(num) / den if den > 0 else float(num)


@dataclass
class ComplexBundle:
    """Top and bottom complexes with connecting maps.

    ``ops[i]`` maps space ``i`` to space ``i+1``; ``E[i]`` maps bottom to top
    and ``R[i]`` top to bottom. ``samples[i]`` are columns ``I_i p`` for a set
    of polynomials ``p`` (top space), used for polynomial consistency.
    """

    names: tuple
    grams: list
    ops: list
    s_grams: list
    s_ops: list
    E: list
    R: list
    samples: list | None = None
    s_norms: list | None = None

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.grams) == len(self.s_grams) == len(self.E) == len(self.R) == n):
            raise ValueError("inconsistent number of spaces")
        if not (len(self.ops) == len(self.s_ops) == n - 1):
            raise ValueError("need one operator between consecutive spaces")
        for i, d in enumerate(self.ops):
            if d.shape != (self.grams[i + 1].shape[0], self.grams[i].shape[0]):
                raise ValueError(f"operator {i} has incompatible shape")
        for i, d in enumerate(self.s_ops):
            if d.shape != (self.s_grams[i + 1].shape[0], self.s_grams[i].shape[0]):
                raise ValueError(f"bottom operator {i} has incompatible shape")

    @property
    def dims(self) -> list[int]:
        return [g.shape[0] for g in self.grams]

    @property
    def s_dims(self) -> list[int]:
        return [g.shape[0] for g in self.s_grams]


def bundle_from_ddr(ddr: DDRComplex) -> ComplexBundle:
    """Bundle linking a DDR complex to itself through identity maps."""
    grams = [ddr.product(s) for s in SPACES]
    ops = [ddr.grad, ddr.curl, ddr.div]
    I = [sp.identity(g.shape[0], format="csr") for g in grams]
    return ComplexBundle(SPACES, grams, ops, grams, ops, I, I)


def random_polynomial(degree: int, vector: bool, rng: np.random.Generator,
                      center=(0.5, 0.5, 0.5)) -> Callable:
    """Random polynomial (scalar or 3-vector) of total degree ``degree``."""
    exps = [(a, b, c) for a in range(degree + 1) for b in range(degree + 1 - a)
            for c in range(degree + 1 - a - b)]
    coef = rng.standard_normal((len(exps), 3 if vector else 1))
    cen = np.asarray(center)

    def fn(x):
        y = np.atleast_2d(x) - cen
        mono = np.column_stack([y[:, 0]**a * y[:, 1]**b * y[:, 2]**c for a, b, c in exps])
        out = mono @ coef
        return out if vector else out[:, 0]
    return fn


def _poly_samples(d: DDRComplex, nsamples: int, rng) -> list[np.ndarray]:
    k = d.k
    degrees = {"grad": (k + 1, False), "curl": (k, True), "div": (k, True), "l2": (k, False)}
    out = []
    for s in SPACES:
        deg, vec = degrees[s]
        out.append(np.column_stack([d.interpolate(s, random_polynomial(deg, vec, rng))
                                    for _ in range(nsamples)]))
    return out


def bundle_from_sddr(sddr: SerendipityDDR, nsamples: int = 3, seed: int = 0,
                     with_norms: bool = False) -> ComplexBundle:
    d = sddr.ddr
    rng = np.random.default_rng(seed)
    return ComplexBundle(
        names=SPACES,
        grams=[d.product(s) for s in SPACES],
        ops=[d.grad, d.curl, d.div],
        s_grams=[sddr.product(s) for s in SPACES],
        s_ops=[sddr.grad, sddr.curl, sddr.div],
        E=[sddr.extension(s) for s in SPACES],
        R=[sddr.reduction(s) for s in SPACES],
        samples=_poly_samples(d, nsamples, rng) if nsamples else None,
        s_norms=[d.component_norm_matrix(s, sddr.layout[s]) for s in SPACES] if with_norms else None,
    )


# ------------------------------------------------------------------ ranks
def _svd(A) -> np.ndarray:
    A = _dense(A)
    if A.size == 0:
        return np.zeros(0)
    return np.linalg.svd(A, compute_uv=False)


def _rank_gap(A) -> tuple[int, float]:
    s = _svd(A)
    if s.size == 0 or s[0] == 0:
        return 0, math.inf
    r = int((s > SVD_TOL * s[0]).sum())
    gap = s[r - 1] / s[r] if r < s.size and s[r] > 0 else math.inf
    return r, float(gap)


def _kernel(A) -> np.ndarray:
    A = _dense(A)
    if A.shape[0] == 0:
        return np.eye(A.shape[1])
    _, s, Vt = np.linalg.svd(A)
    r = int((s > SVD_TOL * s[0]).sum()) if s.size and s[0] > 0 else 0
    return Vt[r:].T


def _complex_residual(ops: Sequence) -> float:
    out = 0.0
    for a, b in zip(ops[:-1], ops[1:]):
        nb, na = np.abs(_dense(b)).max(initial=0), np.abs(_dense(a)).max(initial=0)
        out = max(out, _rel(np.abs(_dense(b @ a)).max(initial=0), nb * na))
    return out


def cohomology_dims(ops: Sequence, dims: Sequence[int] | None = None, tol: float = TOL["complex"]):
    """Betti numbers ``dim ker d_i - rank d_{i-1}`` of a finite complex.

    ``ops`` are the differentials; ``dims`` the space dimensions (inferred
    from the operator shapes when omitted).
    """
    if dims is None:
        dims = [ops[0].shape[1]] + [d.shape[0] for d in ops]
    res = _complex_residual(ops)
    if res > tol:
        raise ValueError(f"complex property violated (relative residual {res:.2e})")
    ranks = [_rank_gap(d)[0] for d in ops]
    out = []
    for i, n in enumerate(dims):
        r_out = ranks[i] if i < len(ranks) else 0
        r_in = ranks[i - 1] if i > 0 else 0
        out.append(int(n - r_out - r_in))
    return out


# -------------------------------------------------------------- analytics
def reduction_norm(R, M, sM) -> float:
    """Operator norm of ``R`` from (top, M) to (bottom, sM)."""
    A = _dense(R.T @ sM @ R)
    B = _dense(M)
    if A.shape[0] == 0:
        return 0.0
    ev = sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True)
    return float(np.sqrt(max(ev[-1], 0.0)))


def poincare_constant(d, M_in, M_out) -> float:
    """Smallest ``c`` with ``||x|| <= c ||d x||`` on the orthogonal complement of ``ker d``.

    Returns ``inf`` when ``d`` vanishes on a nonzero space.
    """
    D = _dense(d)
    r, _ = _rank_gap(D)
    if r == 0:
        return math.inf if D.shape[1] else 0.0
    A = D.T @ _dense(M_out) @ D
    B = _dense(M_in)
    ev = sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True)
    lam = ev[-r:].min()
    return float(1.0 / np.sqrt(lam)) if lam > 0 else math.inf


def poincare_transfer(bundle: ComplexBundle, i: int) -> dict:
    c = poincare_constant(bundle.ops[i], bundle.grams[i], bundle.grams[i + 1])
    cs = poincare_constant(bundle.s_ops[i], bundle.s_grams[i], bundle.s_grams[i + 1])
    nR = reduction_norm(bundle.R[i], bundle.grams[i], bundle.s_grams[i])
    bound = c * nR * (1 + 1e-8)
    return {"c_P": c, "c_P_bottom": cs, "norm_R": nR, "bound": bound, "pass": bool(cs <= bound)}


# ----------------------------------------------------------------- report
@dataclass
class VerificationReport:
    names: list
    cohomology_top: list
    cohomology_bottom: list
    complex_residual_top: float
    complex_residual_bottom: float
    C1: dict = field(default_factory=dict)
    C1_everywhere: dict = field(default_factory=dict)
    C2: dict = field(default_factory=dict)
    C3: dict = field(default_factory=dict)
    A2: dict = field(default_factory=dict)
    norm_R: dict = field(default_factory=dict)
    poincare: dict = field(default_factory=dict)
    norm_equivalence: dict = field(default_factory=dict)
    rank_gaps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def passed(self, prop: str) -> bool:
        entries = getattr(self, prop)
        return all(v["pass"] for v in entries.values())

    @property
    def all_passed(self) -> bool:
        return (all(self.passed(p) for p in ("C1", "C1_everywhere", "C2", "C3", "A2"))
                and all(v["pass"] for v in self.poincare.values())
                and self.cohomology_top == self.cohomology_bottom)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _plain(o):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer, int)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        o = float(o)
        return o if math.isfinite(o) else ("inf" if o > 0 else "-inf" if o < 0 else "nan")
    return o


def _entry(res: float, tol: float) -> dict:
    return {"residual": float(res), "tol": tol, "pass": bool(res <= tol)}


def check_assumptions(bundle: ComplexBundle, poincare: bool = True) -> VerificationReport:
    """Check C1-C3 and A2, measure A1 and the Poincare transfer, for every slice."""
    names = list(bundle.names)
    n = len(names)
    rep = VerificationReport(
        names=names,
        cohomology_top=cohomology_dims(bundle.ops, bundle.dims, tol=math.inf),
        cohomology_bottom=cohomology_dims(bundle.s_ops, bundle.s_dims, tol=math.inf),
        complex_residual_top=_complex_residual(bundle.ops),
        complex_residual_bottom=_complex_residual(bundle.s_ops),
    )
    for i, name in enumerate(names):
        E, R = _dense(bundle.E[i]), _dense(bundle.R[i])
        ns = E.shape[1]
        # C1 on ker of the bottom differential, and everywhere
        K = _kernel(bundle.s_ops[i]) if i < n - 1 else np.eye(ns)
        res = np.abs(R @ E @ K - K).max(initial=0.0)
        rep.C1[name] = _entry(res, TOL["C1"])
        rep.C1_everywhere[name] = _entry(np.abs(R @ E - np.eye(ns)).max(initial=0.0), TOL["C1"])
        # C2: (E R - Id) ker d_i inside Im d_{i-1}
        K = _kernel(bundle.ops[i]) if i < n - 1 else np.eye(E.shape[0])
        Y = E @ R @ K - K
        if i > 0 and Y.size:
            D = _dense(bundle.ops[i - 1])
            Z = np.linalg.lstsq(D, Y, rcond=None)[0]
            Y = Y - D @ Z
        res = np.abs(Y).max(initial=0.0) / max(np.abs(K).max(initial=1.0), 1.0)
        rep.C2[name] = _entry(res, TOL["C2"])
        # C3: cochain maps
        if i < n - 1:
            d, ds = _dense(bundle.ops[i]), _dense(bundle.s_ops[i])
            Rn, En = _dense(bundle.R[i + 1]), _dense(bundle.E[i + 1])
            scale = max(np.abs(d).max(initial=0.0), 1e-300)
            r1 = np.abs(Rn @ d - ds @ R).max(initial=0.0) / scale
            r2 = np.abs(En @ ds - d @ E).max(initial=0.0) / scale
            rep.C3[name] = {"R_residual": float(r1), "E_residual": float(r2), "tol": TOL["C3"],
                            "pass": bool(max(r1, r2) <= TOL["C3"])}
            r, gap = _rank_gap(bundle.ops[i])
            rs, gaps = _rank_gap(bundle.s_ops[i])
            rep.rank_gaps[name] = {"rank_top": r, "gap_top": gap, "rank_bottom": rs, "gap_bottom": gaps}
        # A2: E R I p = I p
        if bundle.samples is not None:
            S = bundle.samples[i]
            res = np.abs(E @ (R @ S) - S).max(initial=0.0) / max(np.abs(S).max(initial=0.0), 1e-300)
            rep.A2[name] = _entry(res, TOL["A2"])
        rep.norm_R[name] = reduction_norm(bundle.R[i], bundle.grams[i], bundle.s_grams[i])
        if bundle.s_norms is not None:
            A, B = _dense(bundle.s_grams[i]), _dense(bundle.s_norms[i])
            if A.shape[0]:
                ev = sla.eigh(A, B, eigvals_only=True)
                rep.norm_equivalence[name] = {"min": float(ev[0]), "max": float(ev[-1])}
        if poincare and i < n - 1:
            rep.poincare[name] = poincare_transfer(bundle, i)
    return rep


# -------------------------------------------------- divergence counterexample
def xdiv_counterexample(sddr: SerendipityDDR, t: int, m_T: int) -> dict:
    """Witness that lowering the cG component of X_div breaks local exactness.

    Takes the rotor component orthogonal to ``Roly^{m_T}(T)``, extends it to a
    full curl vector and applies the hypothetical reduced divergence-space
    reduction (truncation of the cG component to degree ``m_T + 1``). The
    image must vanish while the vector stays away from the image of the local
    serendipity gradient.
    """
    d = sddr.ddr
    k = d.k
    if k < 1:
        raise ValueError("needs k >= 1")
    cs = d.spaces("cell", t)
    nR_m = cs.dim_of("Roly", m_T)
    nR = cs.dim_of("Roly", k - 1)
    if m_T >= k - 1 or nR_m >= nR:
        return {"defect": False, "reason": "no defect demonstrable: m_T >= k-1 leaves the space unchanged"}
    Ls = sddr.layout["curl"].local("cell", t)
    Lf = d.layout["curl"].local("cell", t)
    Ld = d.layout["div"].local("cell", t)
    Lg = sddr.layout["grad"].local("cell", t)
    v = np.zeros(len(Ls))
    v[Ls.block("cell", t).start + nR_m] = 1.0
    Ec = sddr.extension("curl")[Lf.dofs][:, Ls.dofs].toarray()
    uC = d.curl[Ld.dofs][:, Lf.dofs].toarray()
    w = uC @ (Ec @ v)
    nG = cs.dim_of("Goly", k - 1)
    keep = np.ones(len(w), dtype=bool)
    own = Ld.block("cell", t)
    keep[own.start + nG + cs.dim_of("cGoly", m_T + 1):own.stop] = False
    reduced = w[keep]
    scale = np.linalg.norm(uC, 2) * np.linalg.norm(v)
    residual = float(np.linalg.norm(reduced) / scale)
    G = sddr.grad[Ls.dofs][:, Lg.dofs].toarray()
    N = d.component_norm("curl", "cell", t, sddr.layout["curl"])
    Lc = np.linalg.cholesky(N)
    A, b = Lc.T @ G, Lc.T @ v
    z = np.linalg.lstsq(A, b, rcond=None)[0]
    dist = float(np.linalg.norm(b - A @ z))
    vnorm = float(np.linalg.norm(b))
    return {
        "defect": bool(residual < 1e-11 and dist > 0.5 * vnorm),
        "m_T": m_T, "k": k, "cell": t,
        "witness": v.tolist(),
        "kernel_residual": residual,
        "full_curl_norm": float(np.linalg.norm(w) / scale),
        "distance_from_image": dist,
        "witness_norm": vnorm,
        "distance_ratio": dist / vnorm,
    }


# ----------------------------------------------------------- consistency
def consistency_probe(sddr: SerendipityDDR, slice_: str, u: Callable, Du: Callable,
                      w: Callable | None = None, Dstar_w: Callable | None = None) -> dict:
    """Measured consistency errors of one slice of the serendipity complex.

    ``slice_`` is ``grad``, ``curl`` or ``div``; ``u`` is in its domain and
    ``Du`` its image. The optional pair ``(w, Dstar_w)`` is used for the
    adjoint consistency quotient, maximized over the whole discrete space in
    the graph norm.
    """
    order = {"grad": ("grad", "curl"), "curl": ("curl", "div"), "div": ("div", "l2")}
    s_in, s_out = order[slice_]
    i = SPACES.index(s_in)
    d = sddr.ddr
    x = sddr.interpolate(s_in, u)
    xo = sddr.interpolate(s_out, Du)
    M, Mo = sddr.product(s_in), sddr.product(s_out)
    dx = sddr.operator(i) @ x
    l2sq = 0.0
    for t in range(d.mesh.n_cells):
        q = d.spaces("cell", t).quad
        val = np.asarray(u(q.points), dtype=float)
        l2sq += float(q.weights @ (val**2 if val.ndim == 1 else (val**2).sum(-1)))
    out = {
        "primal": abs(float(x @ (M @ x)) - l2sq),
        "potential": sddr.l2_error(s_in, x, u),
        "potential_of_difference": sddr.l2_error(s_out, dx, Du),
        "commutation": float(np.abs(dx - xo).max() / max(np.abs(xo).max(), 1e-300)),
    }
    if w is not None and Dstar_w is not None:
        wo = sddr.interpolate(s_out, w)
        ell = sddr.operator(i).T @ (Mo @ wo)
        ell = ell + sddr.extension(s_in).T @ d.potential_load(s_in, Dstar_w)
        D = sddr.operator(i)
        G = _dense(M + D.T @ Mo @ D)
        out["adjoint"] = float(np.sqrt(max(ell @ np.linalg.solve(G, ell), 0.0)))
    return out


def run_verification(mesh, k: int, theta_min: float = 0.1, nsamples: int = 3, seed: int = 0) -> VerificationReport:
    """Full check of a DDR/SDDR pair on a mesh."""
    d = DDRComplex(mesh, k)
    s = SerendipityDDR(d, theta_min=theta_min)
    rep = check_assumptions(bundle_from_sddr(s, nsamples=nsamples, seed=seed))
    rep.meta = {"k": k, "theta_min": theta_min, "mesh": mesh.counts(),
                "dims_ddr": d.dims(), "dims_sddr": s.dims()}
    return rep
