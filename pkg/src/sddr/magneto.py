"""Mixed magnetostatics on X_curl x X_div with DDR or serendipity DDR, and a convergence study CLI.

Unknowns are ``sigma = curl u`` in the discrete H(curl) space and ``u`` in the
discrete H(div) space, with

    (sigma, tau)_curl - (u, C tau)_div              = -sum_F int_F gamma_t(tau) . (u x n)
    (C sigma, v)_div  + int D u D v                 =  int J . P_div v + sum_F int_F (div u) v.n

where ``J = curl curl u - grad div u``. Boundary conditions are natural: the
boundary sums run over boundary faces and use the exact trace data.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

from .ddr import DDRComplex
from .mesh import PolyMesh, generate_mesh, load_mesh
from .serendipity import SerendipityDDR

__all__ = [
    "CSV_COLUMNS",
    "StudyConfig",
    "StudyRow",
    "ManufacturedSolution",
    "trig_solution",
    "polynomial_solution",
    "SaddleSystem",
    "assemble_scheme",
    "CondensedSystem",
    "static_condensation",
    "solve_system",
    "available_solvers",
    "discrete_error",
    "run_study",
    "write_csv",
    "main",
]

CSV_COLUMNS = ("h", "dofs_total", "dofs_condensed", "err_rel", "eoc",
               "t_asm_wall", "t_asm_proc", "t_solve_wall", "t_solve_proc")


# ------------------------------------------------------------- exact data
@dataclass(frozen=True)
class ManufacturedSolution:
    """Vectorised callables ``points (n, 3) -> values`` for the exact fields."""
    u: Callable
    sigma: Callable
    div_u: Callable
    J: Callable


def _lambdify(exprs, X) -> Callable:
    f = sympy.lambdify(X, exprs, "numpy")

    def call(p):
        p = np.atleast_2d(p)
        out = f(p[:, 0], p[:, 1], p[:, 2])
        if isinstance(out, list):
            return np.column_stack([np.broadcast_to(np.asarray(o, dtype=float), (len(p),)) for o in out])
        return np.broadcast_to(np.asarray(out, dtype=float), (len(p),)).copy()
    return call


def manufactured(u_exprs: Sequence, symbols) -> ManufacturedSolution:
    """Build a manufactured solution from sympy expressions of ``u``."""
    x, y, z = symbols
    u = sympy.Matrix(u_exprs)

    def curl(w):
        return sympy.Matrix([sympy.diff(w[2], y) - sympy.diff(w[1], z),
                             sympy.diff(w[0], z) - sympy.diff(w[2], x),
                             sympy.diff(w[1], x) - sympy.diff(w[0], y)])
    s = curl(u)
    d = sympy.diff(u[0], x) + sympy.diff(u[1], y) + sympy.diff(u[2], z)
    J = curl(s) - sympy.Matrix([sympy.diff(d, v) for v in (x, y, z)])
    X = (x, y, z)
    return ManufacturedSolution(
        u=_lambdify(list(u), X), sigma=_lambdify(list(s), X),
        div_u=_lambdify(d, X), J=_lambdify([sympy.simplify(j) for j in J], X))


@lru_cache(maxsize=None)
def trig_solution() -> ManufacturedSolution:
    """Smooth field with nonzero curl and divergence."""
    x, y, z = sympy.symbols("x y z")
    pi = sympy.pi
    return manufactured([sympy.sin(pi * x) * sympy.cos(pi * y),
                         sympy.sin(pi * y) * sympy.cos(pi * z),
                         sympy.sin(pi * z) * sympy.cos(pi * x)], (x, y, z))


@lru_cache(maxsize=None)
def polynomial_solution(k: int) -> ManufacturedSolution:
    """Field of degree ``k`` (so that ``sigma`` has degree ``k - 1``)."""
    x, y, z = sympy.symbols("x y z")
    if k == 0:
        u = [sympy.Integer(1), sympy.Integer(-2), sympy.Integer(3)]
    else:
        u = [y**k + x * z**(k - 1), z**k - 2 * x**k, x**(k - 1) * y + z**k]
    return manufactured(u, (x, y, z))


# ---------------------------------------------------------------- system
@dataclass
class SaddleSystem:
    """Block system ``[[A, -B^T], [B, C]] [sigma; u] = [f; g]``."""
    A: sp.csr_matrix
    B: sp.csr_matrix
    Cm: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    n_sigma: int
    n_u: int
    interior: list = field(default_factory=list)   # per cell: global indices of cell unknowns
    scheme: str = "ddr"
    complex: object = None

    @property
    def ndofs(self) -> int:
        return self.n_sigma + self.n_u

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.A, -self.B.T], [self.B, self.Cm]], format="csr")

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.f, self.g])


def _boundary_loads(d: DDRComplex, sol: ManufacturedSolution) -> tuple[np.ndarray, np.ndarray]:
    m, k = d.mesh, d.k
    f = np.zeros(d.layout["curl"].ndofs)
    g = np.zeros(d.layout["div"].ndofs)
    for fi in m.boundary_faces:
        t = int(m.face_cells[fi][0])
        j = int(np.flatnonzero(np.asarray(m.cell_faces[t]) == fi)[0])
        om = float(m.cell_face_orient[t][j])
        n_out = om * m.face_normal[fi]
        fs = d.spaces("face", fi)
        q = fs.quad
        # tangential part: gamma_t tau against u x n
        basis = fs.to3d(fs.values("vPoly", k, q.points))
        uxn = np.cross(sol.u(q.points), n_out)
        mom = np.einsum("q,qic,qc->i", q.weights, basis, uxn)
        lc = d.layout["curl"].local("face", fi)
        np.add.at(f, lc.dofs, -d.face_ops(fi).gamma_t.T @ mom)
        # normal part: face components of v are L2-orthonormal moments of v.n_F
        pk = fs.values("Poly", k, q.points)
        g[d.layout["div"].entity_dofs("face", fi)] += om * (pk.T @ (q.weights * sol.div_u(q.points)))
    return f, g


def _cell_unknowns(d: DDRComplex, curl_layout, n_sigma: int) -> list[np.ndarray]:
    out = []
    for t in range(d.mesh.n_cells):
        a = curl_layout.entity_dofs("cell", t)
        b = d.layout["div"].entity_dofs("cell", t) + n_sigma
        out.append(np.concatenate([a, b]).astype(int))
    return out


def assemble_scheme(mesh: PolyMesh, k: int, scheme: str = "ddr", sol: ManufacturedSolution | None = None,
                    threads: int = 1, theta_min: float = 0.1) -> SaddleSystem:
    """Assemble the mixed magnetostatics system for the DDR or SDDR scheme."""
    if scheme not in ("ddr", "sddr"):
        raise ValueError(f"unknown scheme {scheme!r}")
    sol = trig_solution() if sol is None else sol
    d = DDRComplex(mesh, k, threads=threads)
    d.precompute()
    Md = d.product("div")
    Cm = (d.div.T @ d.div).tocsr()
    f, g = _boundary_loads(d, sol)
    g = g + d.potential_load("div", sol.J)
    if scheme == "ddr":
        cx, A, curl, lay = d, d.product("curl"), d.curl, d.layout["curl"]
    else:
        s = SerendipityDDR(d, theta_min=theta_min)
        s.precompute()
        cx, A, curl, lay = s, s.product("curl"), s.curl, s.layout["curl"]
        f = s.extension("curl").T @ f
    B = (Md @ curl).tocsr()
    n_s = A.shape[0]
    return SaddleSystem(A=A.tocsr(), B=B, Cm=Cm, f=np.asarray(f), g=g, n_sigma=n_s, n_u=Md.shape[0],
                        interior=_cell_unknowns(d, lay, n_s), scheme=scheme, complex=cx)


# ----------------------------------------------------- static condensation
class SingularBlockError(np.linalg.LinAlgError):
    pass


@dataclass
class CondensedSystem:
    S: sp.csr_matrix
    rhs: np.ndarray
    skeleton: np.ndarray
    interior: np.ndarray
    inv_II: sp.csr_matrix
    K_IS: sp.csr_matrix
    b_I: np.ndarray

    @property
    def ndofs(self) -> int:
        return self.S.shape[0]

    def recover(self, x_S: np.ndarray) -> np.ndarray:
        """Full solution from the skeleton part."""
        n = len(self.skeleton) + len(self.interior)
        x = np.zeros(n)
        x[self.skeleton] = x_S
        x[self.interior] = self.inv_II @ (self.b_I - self.K_IS @ x_S)
        return x


def static_condensation(K: sp.spmatrix, b: np.ndarray, blocks: Sequence[np.ndarray],
                        cond_tol: float = 1e14) -> CondensedSystem:
    """Eliminate block-diagonal interior unknowns ``blocks`` by a Schur complement.

    The interior-interior coupling must be block diagonal with respect to
    ``blocks`` (true for cell unknowns, which only talk to their own cell).
    """
    K = sp.csr_matrix(K)
    n = K.shape[0]
    blocks = [np.asarray(bl, dtype=int) for bl in blocks if len(bl)]
    I = np.concatenate(blocks) if blocks else np.zeros(0, dtype=int)
    mask = np.ones(n, dtype=bool)
    mask[I] = False
    S_idx = np.flatnonzero(mask)
    pos = np.empty(n, dtype=int)
    pos[I] = np.arange(len(I))
    inv_blocks = []
    for bl in blocks:
        Kb = K[bl][:, bl].toarray()
        c = np.linalg.cond(Kb)
        if not np.isfinite(c) or c > cond_tol:
            raise SingularBlockError(f"interior block of size {len(bl)} is singular (cond {c:.2e})")
        inv_blocks.append(np.linalg.inv(Kb))
    inv_II = sp.block_diag(inv_blocks, format="csr") if inv_blocks else sp.csr_matrix((0, 0))
    K_SS = K[S_idx][:, S_idx]
    K_SI = K[S_idx][:, I]
    K_IS = K[I][:, S_idx].tocsr()
    b_I = b[I]
    S = (K_SS - K_SI @ inv_II @ K_IS).tocsr()
    S.eliminate_zeros()
    rhs = b[S_idx] - K_SI @ (inv_II @ b_I)
    return CondensedSystem(S=S, rhs=rhs, skeleton=S_idx, interior=I, inv_II=inv_II, K_IS=K_IS, b_I=b_I)


def _pardiso():
    """pypardiso when importable (locating the MKL runtime if needed), else None."""
    if "PYPARDISO_MKL_RT" not in os.environ:
        for d in (Path(sys.prefix) / "lib", Path("/usr/local/lib"), Path("/usr/lib")):
            hits = sorted(d.glob("libmkl_rt.so*")) if d.is_dir() else []
            if hits:
                os.environ["PYPARDISO_MKL_RT"] = str(hits[0])
                break
    try:
        import pypardiso
    except (ImportError, OSError):
        return None
    return pypardiso


def available_solvers() -> list[str]:
    return (["pardiso"] if _pardiso() is not None else []) + ["superlu"]


def solve_system(K: sp.spmatrix, b: np.ndarray, solver: str = "auto") -> np.ndarray:
    """Direct sparse solve: PARDISO when available, else SuperLU with COLAMD ordering."""
    if solver == "auto":
        solver = available_solvers()[0]
    if solver == "pardiso":
        pp = _pardiso()
        if pp is None:
            raise RuntimeError("pypardiso is not available")
        x = pp.spsolve(sp.csr_matrix(K), np.asarray(b, dtype=float))
    elif solver == "superlu":
        x = spla.splu(sp.csc_matrix(K), permc_spec="COLAMD").solve(b)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("direct solve produced non-finite values")
    return x


def discrete_error(system: SaddleSystem, x: np.ndarray, sol: ManufacturedSolution,
                   reference: str = "full") -> tuple[float, float]:
    """Absolute and relative error in the discrete H(curl) x H(div) norm.

    With ``reference="full"`` the curl unknown is extended (for SDDR) and
    compared with the full interpolant in the DDR norm, so both schemes are
    measured against the same quantity. ``reference="serendipity"`` compares
    with the serendipity interpolant in the serendipity norm instead.
    """
    cx = system.complex
    ser = isinstance(cx, SerendipityDDR)
    d = cx.ddr if ser else cx
    sig = x[:system.n_sigma]
    if reference == "full":
        Is, Mc = d.interpolate("curl", sol.sigma), d.product("curl")
        if ser:
            sig = cx.extension("curl") @ sig
    elif reference == "serendipity":
        Is, Mc = cx.interpolate("curl", sol.sigma), cx.product("curl")
    else:
        raise ValueError(f"unknown reference {reference!r}")
    Iu = d.interpolate("div", sol.u)
    es, eu = Is - sig, Iu - x[system.n_sigma:]
    Md = d.product("div")
    err = float(es @ (Mc @ es) + eu @ (Md @ eu))
    ref = float(Is @ (Mc @ Is) + Iu @ (Md @ Iu))
    err = math.sqrt(max(err, 0.0))
    return err, err / math.sqrt(ref) if ref > 0 else err


# ------------------------------------------------------------------ study
@dataclass
class StudyConfig:
    degree: int
    scheme: str = "ddr"
    generate: str | None = None            # "tet-subdiv" or "hex-grid"
    refinements: tuple = ()                # grid parameters n for the generator
    mesh_paths: tuple = ()
    output: str | None = None
    threads: int = 1
    verify: bool = False
    verify_max_dofs: int = 4000
    theta_min: float = 0.1
    solver: str = "auto"
    error_reference: str = "full"

    def __post_init__(self):
        if not 0 <= self.degree <= 3:
            raise ValueError("degree must lie in [0, 3]")
        if self.scheme not in ("ddr", "sddr"):
            raise ValueError("scheme must be 'ddr' or 'sddr'")
        if (self.generate is None) == (not self.mesh_paths):
            raise ValueError("give exactly one of a generator or mesh files")
        if self.generate is not None:
            if not self.refinements:
                raise ValueError("generator needs at least one refinement level")
            n = list(self.refinements)
            if any(b <= a for a, b in zip(n[:-1], n[1:])):
                raise ValueError("refinement list must give strictly decreasing h")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.solver not in ("auto", "pardiso", "superlu"):
            raise ValueError("solver must be auto, pardiso or superlu")
        if self.error_reference not in ("full", "serendipity"):
            raise ValueError("error_reference must be full or serendipity")

    def meshes(self):
        if self.generate is not None:
            for n in self.refinements:
                yield generate_mesh(self.generate, int(n))
        else:
            for p in self.mesh_paths:
                yield load_mesh(p)


@dataclass
class StudyRow:
    h: float
    dofs_total: int
    dofs_condensed: int
    err_rel: float
    eoc: float | None
    t_asm_wall: float
    t_asm_proc: float
    t_solve_wall: float
    t_solve_proc: float
    error: str | None = None

    def __post_init__(self):
        for name in ("t_asm_wall", "t_asm_proc", "t_solve_wall", "t_solve_proc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not math.isnan(self.err_rel) and self.err_rel < 0:
            raise ValueError("error must be nonnegative")

    def as_csv(self) -> list[str]:
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(v) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, c)) for c in CSV_COLUMNS]


class _Timer:
    def __enter__(self):
        self.w, self.p = time.perf_counter(), time.process_time()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.w
        self.proc = time.process_time() - self.p


def _eoc(prev: StudyRow | None, row: StudyRow) -> float | None:
    if prev is None or prev.error or row.error or prev.err_rel <= 0 or row.err_rel <= 0:
        return None
    return math.log(prev.err_rel / row.err_rel) / math.log(prev.h / row.h)


def run_study(config: StudyConfig, sol: ManufacturedSolution | None = None, log=None) -> list[StudyRow]:
    """Assemble, condense and solve on every mesh; write the CSV when asked."""
    sol = trig_solution() if sol is None else sol
    rows: list[StudyRow] = []
    reports = []
    prev_h = math.inf
    for mesh in config.meshes():
        h = float(mesh.meshsize)
        if h >= prev_h:
            raise ValueError("mesh sequence must have strictly decreasing h")
        prev_h = h
        err_msg = None
        n_cond, err_rel = 0, math.nan
        with _Timer() as ta:
            system = assemble_scheme(mesh, config.degree, config.scheme, sol, config.threads, config.theta_min)
            K, b = system.matrix, system.rhs
            try:
                cond = static_condensation(K, b, system.interior)
                n_cond = cond.ndofs
            except np.linalg.LinAlgError as exc:
                cond, err_msg = None, str(exc)
        x = None
        with _Timer() as ts:
            if cond is not None:
                try:
                    x = cond.recover(solve_system(cond.S, cond.rhs, config.solver))
                except (np.linalg.LinAlgError, RuntimeError) as exc:
                    err_msg = str(exc)
        if x is not None:
            err_rel = discrete_error(system, x, sol, config.error_reference)[1]
        row = StudyRow(h, system.ndofs, n_cond, err_rel, None, ta.wall, ta.proc, ts.wall, ts.proc, err_msg)
        row.eoc = _eoc(rows[-1] if rows else None, row)
        rows.append(row)
        if log is not None:
            log(f"h={h:.4g} dofs={row.dofs_total} cond={n_cond} err={err_rel:.3e} eoc={row.eoc} "
                f"asm={ta.wall:.2f}s solve={ts.wall:.2f}s" + (f" FAILED: {err_msg}" if err_msg else ""))
        if config.verify:
            reports.append(_verify_entry(system, h, config))
    if config.output:
        write_csv(rows, config.output)
        if config.verify:
            path = Path(config.output).with_suffix(".verify.json")
            path.write_text(json.dumps(reports, indent=2))
    return rows


def _verify_entry(system: SaddleSystem, h: float, config: StudyConfig) -> dict:
    from .verify import bundle_from_ddr, bundle_from_sddr, check_assumptions
    cx = system.complex
    d = cx.ddr if isinstance(cx, SerendipityDDR) else cx
    if sum(d.dims().values()) > config.verify_max_dofs:
        return {"h": h, "skipped": f"more than {config.verify_max_dofs} unknowns in the full complex"}
    bundle = bundle_from_sddr(cx) if isinstance(cx, SerendipityDDR) else bundle_from_ddr(cx)
    rep = check_assumptions(bundle)
    out = rep.to_dict()
    out.update(h=h, all_passed=rep.all_passed)
    return out


def write_csv(rows: Sequence[StudyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


# -------------------------------------------------------------------- CLI
def _parse_generate(text: str) -> tuple[str, tuple[int, ...]]:
    try:
        kind, ns = text.split(":")
        return kind, tuple(int(n) for n in ns.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected <kind>:<n1,n2,...>, e.g. tet-subdiv:2,4,8") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sddr-magneto",
        description="Convergence and timing study for mixed magnetostatics with DDR or serendipity DDR. "
                    "Boundary conditions are natural; the boundary terms use the exact solution.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", nargs="+", metavar="PATH", help="mesh files (json-poly), coarse to fine")
    src.add_argument("--generate", type=_parse_generate, metavar="KIND:N1,N2,...",
                     help="generated meshes, KIND is tet-subdiv or hex-grid")
    p.add_argument("--degree", "-k", type=int, required=True)
    p.add_argument("--scheme", choices=("ddr", "sddr"), default="ddr")
    p.add_argument("--output", "-o", help="CSV path (the verification report goes next to it)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--verify", action="store_true", help="check the complex properties on each mesh")
    p.add_argument("--theta-min", type=float, default=0.1)
    p.add_argument("--solver", choices=("auto", "pardiso", "superlu"), default="auto",
                   help="direct solver; auto prefers PARDISO (pypardiso) and falls back to SuperLU")
    p.add_argument("--error-reference", choices=("full", "serendipity"), default="full",
                   help="interpolant the curl unknown is compared with (default: full DDR interpolant)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    kind, ns = args.generate if args.generate else (None, ())
    try:
        cfg = StudyConfig(degree=args.degree, scheme=args.scheme, generate=kind, refinements=ns,
                          mesh_paths=tuple(args.mesh or ()), output=args.output, threads=args.threads,
                          verify=args.verify, theta_min=args.theta_min, solver=args.solver,
                          error_reference=args.error_reference)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = run_study(cfg, log=lambda s: print(s, file=sys.stderr))
    if not args.output:
        w = csv.writer(sys.stdout)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
    return 1 if any(r.error for r in rows) else 0


if __name__ == "__main__":
    sys.exit(main())
