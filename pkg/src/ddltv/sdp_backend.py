"""Structured LMI/SDP problems and a conic-solver adapter.

Problems are built from matrix decision variables, block-partitioned PSD
constraints affine in those variables, affine matrix equalities and an
optional linear (trace) objective.  Dimension errors surface at build time.
Solving is delegated to the Clarabel interior-point solver behind a fixed
status contract, and every returned solution is re-verified by an
independent eigenvalue/residual checker before the status is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import clarabel
import numpy as np
from scipy import sparse

from .ltv_core import ContractViolation

__all__ = [
    "SdpStatus",
    "MatrixVar",
    "Term",
    "BlockExpr",
    "LmiBuilder",
    "LmiProblem",
    "SdpTolerances",
    "SdpSolution",
    "solve",
    "check_solution",
]

#: default margin factor realizing strict inequalities as >= margin * I
STRICT_MARGIN_REL = 1e-7

_SQRT2 = np.sqrt(2.0)


class SdpStatus(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"

    @property
    def ok(self) -> bool:
        return self in (SdpStatus.OPTIMAL, SdpStatus.FEASIBLE)


@dataclass(frozen=True)
class MatrixVar:
    """Matrix decision variable; symmetric variables store the upper triangle."""

    name: str
    rows: int
    cols: int
    symmetric: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractViolation(f"variable {self.name}: dimensions must be positive")
        if self.symmetric and self.rows != self.cols:
            raise ContractViolation(f"symmetric variable {self.name} must be square")

    @property
    def size(self) -> int:
        if self.symmetric:
            return self.rows * (self.rows + 1) // 2
        return self.rows * self.cols

    def basis(self, t: int) -> np.ndarray:
        """Dense basis matrix of scalar coordinate ``t``."""
        mat = np.zeros((self.rows, self.cols))
        if self.symmetric:
            i, j = _sym_coords(self.rows)[t]
            mat[i, j] = 1.0
            mat[j, i] = 1.0
        else:
            i, j = divmod(t, self.cols)
            mat[i, j] = 1.0
        return mat

    def reshape(self, flat: np.ndarray) -> np.ndarray:
        """Assemble the matrix value from its scalar coordinates."""
        if self.symmetric:
            mat = np.zeros((self.rows, self.cols))
            for t, (i, j) in enumerate(_sym_coords(self.rows)):
                mat[i, j] = flat[t]
                mat[j, i] = flat[t]
            return mat
        return np.asarray(flat, dtype=float).reshape(self.rows, self.cols)


def _sym_coords(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


@dataclass(frozen=True)
class Term:
    """One affine term ``scale * left @ op(V) @ right`` of a block entry."""

    var: str
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    transpose: bool = False
    scale: float = 1.0

    def transposed(self) -> "Term":
        left = None if self.right is None else np.asarray(self.right).T
        right = None if self.left is None else np.asarray(self.left).T
        return Term(self.var, left, right, not self.transpose, self.scale)

    def apply(self, mat: np.ndarray) -> np.ndarray:
        out = mat.T if self.transpose else mat
        if self.left is not None:
            out = self.left @ out
        if self.right is not None:
            out = out @ self.right
        return self.scale * out


class BlockExpr:
    """Affine block matrix expression over a declared row/col partition.

    ``mirror=True`` (for symmetric expressions) lets callers set only the
    upper-triangle blocks; the lower triangle is generated by transposition
    when the expression is assembled.
    """

    def __init__(self, row_dims: Sequence[int], col_dims: Sequence[int] | None = None,
                 mirror: bool = False):
        self.row_dims = list(row_dims)
        self.col_dims = list(col_dims) if col_dims is not None else list(row_dims)
        if mirror and self.row_dims != self.col_dims:
            raise ContractViolation("mirrored expressions must be square")
        self.mirror = mirror
        self._const: dict = {}
        self._terms: dict = {}
        self._touched: set = set()

    @classmethod
    def sym(cls, dims: Sequence[int]) -> "BlockExpr":
        return cls(dims, mirror=True)

    @property
    def rows(self) -> int:
        return sum(self.row_dims)

    @property
    def cols(self) -> int:
        return sum(self.col_dims)

    def _check_block(self, i, j):
        if not (0 <= i < len(self.row_dims) and 0 <= j < len(self.col_dims)):
            raise ContractViolation(f"block index ({i}, {j}) out of range")
        if self.mirror and i != j and (j, i) in self._touched:
            raise ContractViolation(
                f"mirrored expression: block ({j}, {i}) already set; set one triangle only"
            )
        self._touched.add((i, j))

    def const(self, i: int, j: int, mat) -> "BlockExpr":
        self._check_block(i, j)
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        want = (self.row_dims[i], self.col_dims[j])
        if mat.shape != want:
            raise ContractViolation(
                f"constant block ({i},{j}) has shape {mat.shape}, expected {want}"
            )
        self._const[(i, j)] = self._const.get((i, j), np.zeros(want)) + mat
        return self

    def term(self, i: int, j: int, var: "MatrixVar", left=None, right=None,
             transpose: bool = False, scale: float = 1.0) -> "BlockExpr":
        self._check_block(i, j)
        rows, cols = (var.cols, var.rows) if transpose else (var.rows, var.cols)
        left_m = None if left is None else np.atleast_2d(np.asarray(left, dtype=float))
        right_m = None if right is None else np.atleast_2d(np.asarray(right, dtype=float))
        if left_m is not None:
            if left_m.shape[1] != rows:
                raise ContractViolation(
                    f"term ({i},{j}) on {var.name}: left factor {left_m.shape} does not "
                    f"conform to op(var) rows {rows}"
                )
            rows = left_m.shape[0]
        if right_m is not None:
            if right_m.shape[0] != cols:
                raise ContractViolation(
                    f"term ({i},{j}) on {var.name}: right factor {right_m.shape} does not "
                    f"conform to op(var) cols {cols}"
                )
            cols = right_m.shape[1]
        if (rows, cols) != (self.row_dims[i], self.col_dims[j]):
            raise ContractViolation(
                f"term ({i},{j}) on {var.name} evaluates to {(rows, cols)}, block wants "
                f"{(self.row_dims[i], self.col_dims[j])}"
            )
        self._terms.setdefault((i, j), []).append(
            Term(var.name, left_m, right_m, transpose, scale)
        )
        return self

    def _entries(self):
        """Blocks including mirrored lower triangle: {(i, j): (const, [terms])}."""
        out = {}
        for (i, j), mat in self._const.items():
            const, terms = out.setdefault((i, j), [np.zeros_like(mat), []])
            out[(i, j)][0] = out[(i, j)][0] + mat
        for (i, j), terms in self._terms.items():
            slot = out.setdefault(
                (i, j), [np.zeros((self.row_dims[i], self.col_dims[j])), []]
            )
            slot[1].extend(terms)
        if self.mirror:
            for (i, j) in list(out.keys()):
                if i == j:
                    continue
                const, terms = out[(i, j)]
                slot = out.setdefault(
                    (j, i), [np.zeros((self.row_dims[j], self.col_dims[i])), []]
                )
                slot[0] = slot[0] + const.T
                slot[1].extend(t.transposed() for t in terms)
        return out

    def referenced_vars(self):
        names = set()
        for terms in self._terms.values():
            names.update(t.var for t in terms)
        return names

    def assemble(self, variables: dict) -> tuple[np.ndarray, dict]:
        """Return ``(F0, {global_coord: F_t})`` dense coefficient matrices."""
        offsets = np.cumsum([0] + self.row_dims)
        coffsets = np.cumsum([0] + self.col_dims)
        f0 = np.zeros((self.rows, self.cols))
        coeffs: dict[int, np.ndarray] = {}
        for (i, j), (const, terms) in self._entries().items():
            r0, c0 = offsets[i], coffsets[j]
            f0[r0:r0 + self.row_dims[i], c0:c0 + self.col_dims[j]] += const
            for term in terms:
                var = variables[term.var]
                base = var.offset
                for t in range(var.spec.size):
                    contrib = term.apply(var.spec.basis(t))
                    mat = coeffs.setdefault(base + t, np.zeros((self.rows, self.cols)))
                    mat[r0:r0 + self.row_dims[i], c0:c0 + self.col_dims[j]] += contrib
        return f0, coeffs


@dataclass
class _VarSlot:
    spec: MatrixVar
    offset: int


@dataclass
class _PsdConstraint:
    name: str
    f0: np.ndarray
    coeffs: dict
    strict: bool
    margin: float
    dim: int


@dataclass
class _EqConstraint:
    name: str
    f0: np.ndarray
    coeffs: dict
    shape: tuple


@dataclass(frozen=True)
class SdpTolerances:
    """Solver targets plus the certificate-checker acceptance tolerances.

    ``feas``/``gap_*`` are what the interior-point method aims for; the
    independent checker accepts a solution when every PSD block clears
    ``-check_feas`` (scaled) and every equality residual stays below ``eq``
    (scaled).  Solver fallbacks that still pass the checker are reported as
    feasible/optimal; ones that do not are numerical failures.
    """

    feas: float = 1e-9
    gap_abs: float = 1e-10
    gap_rel: float = 1e-10
    eq: float = 1e-7
    check_feas: float = 1e-8
    max_iter: int = 200
    check_scale_floor: float = 1.0
    solver: str = "clarabel"  # or "cvxopt"
    solver_overrides: tuple = ()  # extra (setting, value) pairs for the solver




#: preset for oracle-comparison solves where suboptimality must be tiny
HIGH_ACCURACY = SdpTolerances(
    feas=1e-11,
    gap_abs=1e-13,
    gap_rel=1e-13,
    max_iter=400,
    solver_overrides=(
        ("static_regularization_constant", 1e-10),
        ("equilibrate_max_iter", 50),
    ),
)

#: fallback ladder: tight targets first, stock settings as the safety net
ORACLE_CHAIN = (HIGH_ACCURACY, SdpTolerances())


@dataclass
class CheckReport:
    """Independent re-verification of a solution against the raw constraints."""

    ok: bool
    psd_min_eig: dict
    psd_required: dict
    eq_residual: dict
    eq_allowed: dict


@dataclass
class SdpSolution:
    status: SdpStatus
    values: dict | None
    objective: float | None
    solver_status: str
    iterations: int
    r_prim: float
    r_dual: float
    check: CheckReport | None

    @property
    def ok(self) -> bool:
        return self.status.ok


class LmiProblem:
    """Validated, assembled problem; immutable once built."""

    def __init__(self, variables, psd, eqs, objective, obj_const):
        self.variables = variables
        self.psd = psd
        self.eqs = eqs
        self.objective = objective
        self.obj_const = obj_const
        self.num_scalars = sum(v.spec.size for v in variables.values())

    def value_of(self, x: np.ndarray, name: str) -> np.ndarray:
        slot = self.variables[name]
        return slot.spec.reshape(x[slot.offset:slot.offset + slot.spec.size])

    def dump(self, path):
        """Text-based interchange dump (JSON) for debugging."""
        doc = {
            "vars": [
                {"name": v.spec.name, "rows": v.spec.rows, "cols": v.spec.cols,
                 "symmetric": v.spec.symmetric}
                for v in self.variables.values()
            ],
            "objective": {name: mat.tolist() for name, mat in self.objective.items()},
            "objective_constant": self.obj_const,
            "psd": [
                {"name": c.name, "strict": c.strict, "margin": c.margin,
                 "f0": c.f0.tolist(),
                 "coeffs": {str(t): m.tolist() for t, m in c.coeffs.items()}}
                for c in self.psd
            ],
            "eq": [
                {"name": c.name, "f0": c.f0.tolist(),
                 "coeffs": {str(t): m.tolist() for t, m in c.coeffs.items()}}
                for c in self.eqs
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)


class LmiBuilder:
    """Fluent builder for :class:`LmiProblem`; all validation happens here."""

    def __init__(self, margin_rel: float = STRICT_MARGIN_REL):
        self._vars: dict[str, MatrixVar] = {}
        self._psd: list = []
        self._eqs: list = []
        self._objective: dict[str, np.ndarray] = {}
        self._obj_const = 0.0
        self._margin_rel = margin_rel

    def add_var(self, name: str, rows: int, cols: int, symmetric: bool = False) -> MatrixVar:
        if name in self._vars:
            raise ContractViolation(f"duplicate variable id {name!r}")
        var = MatrixVar(name, rows, cols, symmetric)
        self._vars[name] = var
        return var

    def add_psd(self, expr: BlockExpr, strict: bool = False, name: str | None = None):
        if expr.row_dims != expr.col_dims:
            raise ContractViolation("PSD constraints need a square block partition")
        self._psd.append((name or f"psd{len(self._psd)}", expr, strict))
        return self

    def add_eq(self, expr: BlockExpr, name: str | None = None):
        """Assert ``expr == 0`` entrywise."""
        self._eqs.append((name or f"eq{len(self._eqs)}", expr))
        return self

    def add_box(self, var: MatrixVar, lo: float, hi: float):
        """Sugar for ``lo * I <= var <= hi * I`` (two PSD constraints)."""
        if not var.symmetric:
            raise ContractViolation("box constraints apply to symmetric variables")
        n = var.rows
        low = BlockExpr.sym([n]).const(0, 0, -lo * np.eye(n)).term(0, 0, var)
        high = BlockExpr.sym([n]).const(0, 0, hi * np.eye(n)).term(0, 0, var, scale=-1.0)
        self.add_psd(low, name=f"{var.name}_lo")
        self.add_psd(high, name=f"{var.name}_hi")
        return self

    def add_objective_term(self, coeff, var: MatrixVar):
        """Accumulate ``trace(coeff @ var)`` into the minimized objective."""
        coeff = np.atleast_2d(np.asarray(coeff, dtype=float))
        if coeff.shape != (var.cols, var.rows):
            raise ContractViolation(
                f"objective coefficient for {var.name} has shape {coeff.shape}, "
                f"expected {(var.cols, var.rows)}"
            )
        self._objective[var.name] = self._objective.get(var.name, 0.0) + coeff
        return self

    def add_objective_const(self, value: float):
        self._obj_const += float(value)
        return self

    def build(self) -> LmiProblem:
        variables = {}
        offset = 0
        for var in self._vars.values():
            variables[var.name] = _VarSlot(var, offset)
            offset += var.size

        referenced = set()
        for _, expr, _ in self._psd:
            referenced |= expr.referenced_vars()
        for _, expr in self._eqs:
            referenced |= expr.referenced_vars()
        for name in referenced - set(self._vars):
            raise ContractViolation(f"unknown variable {name!r} in constraint")
        for name in set(self._vars) - referenced:
            raise ContractViolation(f"variable {name!r} is not referenced by any constraint")

        psd = []
        for name, expr, strict in self._psd:
            f0, coeffs = expr.assemble(variables)
            _audit_symmetry(name, f0, coeffs)
            mag = max(
                [np.abs(f0).max(initial=0.0)] + [np.abs(m).max() for m in coeffs.values()]
            )
            margin = self._margin_rel * max(1.0, mag) if strict else 0.0
            psd.append(_PsdConstraint(name, f0, coeffs, strict, margin, expr.rows))
        eqs = []
        for name, expr in self._eqs:
            f0, coeffs = expr.assemble(variables)
            eqs.append(_EqConstraint(name, f0, coeffs, (expr.rows, expr.cols)))
        return LmiProblem(variables, psd, eqs, dict(self._objective), self._obj_const)


def _audit_symmetry(name, f0, coeffs, tol=1e-9):
    scale = max(1.0, np.abs(f0).max(initial=0.0))
    if np.abs(f0 - f0.T).max(initial=0.0) > tol * scale:
        raise ContractViolation(f"PSD constraint {name!r}: constant part is not symmetric")
    for t, mat in coeffs.items():
        mscale = max(1.0, np.abs(mat).max())
        if np.abs(mat - mat.T).max() > tol * mscale:
            raise ContractViolation(
                f"PSD constraint {name!r}: coefficient of coordinate {t} is not symmetric"
            )


def _svec(mat: np.ndarray) -> np.ndarray:
    """Scaled upper-triangle (column-major) vectorization used by Clarabel."""
    n = mat.shape[0]
    out = np.empty(n * (n + 1) // 2)
    idx = 0
    for j in range(n):
        for i in range(j + 1):
            out[idx] = mat[i, j] * (_SQRT2 if i < j else 1.0)
            idx += 1
    return out


def _objective_vector(problem: LmiProblem) -> np.ndarray:
    q = np.zeros(problem.num_scalars)
    for name, coeff in problem.objective.items():
        slot = problem.variables[name]
        for t in range(slot.spec.size):
            q[slot.offset + t] = np.trace(coeff @ slot.spec.basis(t))
    return q


def solve(problem: LmiProblem, tol=None, verbose: bool = False) -> SdpSolution:
    """Solve and reconcile the solver verdict with the independent checker.

    Status contract: ``Optimal``/``Feasible`` only when the checker confirms
    every constraint at the tolerance; infeasibility comes from the solver's
    dual certificate; anything else is ``NumericalFailure`` (a status, never
    an exception).  ``tol`` is an :class:`SdpTolerances` (``tol.solver``
    picks the conic backend) or a sequence of them tried in order until one
    yields a definitive verdict.
    """
    if tol is not None and not isinstance(tol, SdpTolerances):
        last = None
        for entry in tol:
            last = solve(problem, entry, verbose)
            if last.status is not SdpStatus.NUMERICAL_FAILURE:
                return last
        return last
    tol = tol or SdpTolerances()
    if problem.num_scalars == 0 and not problem.psd and not problem.eqs:
        return SdpSolution(SdpStatus.OPTIMAL, {}, problem.obj_const, "Trivial",
                           0, 0.0, 0.0, CheckReport(True, {}, {}, {}, {}))
    if tol.solver == "cvxopt":
        return _solve_cvxopt(problem, tol, verbose)
    if tol.solver == "clarabel":
        return _solve_clarabel(problem, tol, verbose)
    raise ContractViolation(f"unknown solver {tol.solver!r}")


def _finish(problem, tol, raw, x, iterations, r_prim, r_dual):
    """Common post-processing: extract values, re-verify, settle the status."""
    q = _objective_vector(problem)
    has_objective = bool(problem.objective)
    values = {name: problem.value_of(x, name) for name in problem.variables}
    report = check_solution(problem, values, tol)
    objective = float(q @ x + problem.obj_const) if has_objective else None
    if not report.ok:
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE, values, objective, raw,
                           iterations, r_prim, r_dual, report)
    status = SdpStatus.OPTIMAL if has_objective else SdpStatus.FEASIBLE
    return SdpSolution(status, values, objective, raw,
                       iterations, r_prim, r_dual, report)


def _solve_clarabel(problem: LmiProblem, tol: SdpTolerances, verbose: bool) -> SdpSolution:
    q = _objective_vector(problem)
    rows_a, cols_a, vals_a = [], [], []
    b_parts = []
    cones = []
    row0 = 0
    for eq in problem.eqs:
        count = eq.f0.size
        b_parts.append(-eq.f0.reshape(-1))
        for t, mat in eq.coeffs.items():
            flat = mat.reshape(-1)
            nz = np.nonzero(flat)[0]
            rows_a.extend(row0 + nz)
            cols_a.extend([t] * len(nz))
            vals_a.extend(flat[nz])
        cones.append(clarabel.ZeroConeT(count))
        row0 += count
    for con in problem.psd:
        f0 = con.f0 - con.margin * np.eye(con.dim) if con.strict else con.f0
        svec0 = _svec(f0)
        b_parts.append(svec0)
        for t, mat in con.coeffs.items():
            flat = _svec(mat)
            nz = np.nonzero(flat)[0]
            rows_a.extend(row0 + nz)
            cols_a.extend([t] * len(nz))
            vals_a.extend(-flat[nz])
        cones.append(clarabel.PSDTriangleConeT(con.dim))
        row0 += len(svec0)

    a_mat = sparse.csc_matrix(
        (vals_a, (rows_a, cols_a)), shape=(row0, problem.num_scalars)
    )
    b_vec = np.concatenate(b_parts) if b_parts else np.zeros(0)
    p_mat = sparse.csc_matrix((problem.num_scalars, problem.num_scalars))

    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = tol.max_iter
    settings.tol_feas = tol.feas
    settings.tol_gap_abs = tol.gap_abs
    settings.tol_gap_rel = tol.gap_rel
    settings.max_threads = 1
    for key, value in tol.solver_overrides:
        setattr(settings, key, value)

    try:
        solver = clarabel.DefaultSolver(p_mat, q, a_mat, b_vec, cones, settings)
        sol = solver.solve()
    except BaseException as exc:  # solver panics surface as NumericalFailure
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE, None, None,
                           f"SolverError({exc})", 0, np.inf, np.inf, None)

    raw = str(sol.status)
    if raw in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SdpSolution(SdpStatus.INFEASIBLE, None, None, raw,
                           sol.iterations, sol.r_prim, sol.r_dual, None)
    if raw not in ("Solved", "AlmostSolved"):
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE, None, None, raw,
                           sol.iterations, sol.r_prim, sol.r_dual, None)
    x = np.asarray(sol.x, dtype=float)
    return _finish(problem, tol, raw, x, sol.iterations, sol.r_prim, sol.r_dual)


def _solve_cvxopt(problem: LmiProblem, tol: SdpTolerances, verbose: bool) -> SdpSolution:
    import cvxopt
    import cvxopt.solvers

    q = _objective_vector(problem)
    nx = problem.num_scalars
    g_rows, h_parts, s_dims = [], [], []
    for con in problem.psd:
        f0 = con.f0 - con.margin * np.eye(con.dim) if con.strict else con.f0
        g_block = np.zeros((con.dim * con.dim, nx))
        for t, mat in con.coeffs.items():
            g_block[:, t] = -mat.reshape(-1, order="F")
        g_rows.append(g_block)
        h_parts.append(f0.reshape(-1, order="F"))
        s_dims.append(con.dim)
    a_rows, b_parts = [], []
    for eq in problem.eqs:
        a_block = np.zeros((eq.f0.size, nx))
        for t, mat in eq.coeffs.items():
            a_block[:, t] = mat.reshape(-1)
        a_rows.append(a_block)
        b_parts.append(-eq.f0.reshape(-1))
    if a_rows:
        # conelp requires full-row-rank equalities; drop numerically dependent
        # rows after confirming they are consistent
        a_full = np.vstack(a_rows)
        b_full = np.concatenate(b_parts)
        from scipy import linalg as _sla

        _, r_fac, piv = _sla.qr(a_full.T, pivoting=True, mode="economic")
        diag = np.abs(np.diag(r_fac))
        rank = int((diag > diag.max(initial=0.0) * 1e-12).sum())
        if rank < a_full.shape[0]:
            x_ls, *_ = np.linalg.lstsq(a_full, b_full, rcond=None)
            resid = np.abs(a_full @ x_ls - b_full).max(initial=0.0)
            scale = max(1.0, np.abs(b_full).max(initial=0.0))
            if resid > 1e-8 * scale:
                return SdpSolution(SdpStatus.INFEASIBLE, None, None,
                                   "cvxopt:inconsistent equalities", 0,
                                   float(resid), np.inf, None)
            keep = np.sort(piv[:rank])
            a_rows, b_parts = [a_full[keep]], [b_full[keep]]

    options = {
        "show_progress": verbose,
        "maxiters": tol.max_iter,
        "abstol": tol.gap_abs,
        "reltol": max(tol.gap_rel, 1e-12),
        "feastol": tol.feas,
    }
    options.update(dict(tol.solver_overrides))
    kwargs = {}
    if a_rows:
        kwargs["A"] = cvxopt.matrix(np.vstack(a_rows))
        kwargs["b"] = cvxopt.matrix(np.concatenate(b_parts))
    try:
        sol = cvxopt.solvers.conelp(
            cvxopt.matrix(q),
            cvxopt.matrix(np.vstack(g_rows)),
            cvxopt.matrix(np.concatenate(h_parts)),
            {"l": 0, "q": [], "s": s_dims},
            options=options,
            **kwargs,
        )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE, None, None,
                           f"SolverError({exc})", 0, np.inf, np.inf, None)

    raw = f"cvxopt:{sol['status']}"
    iterations = int(sol.get("iterations", 0))
    r_prim = float(sol["primal infeasibility"] or np.inf) \
        if sol.get("primal infeasibility") is not None else np.inf
    r_dual = float(sol["dual infeasibility"] or np.inf) \
        if sol.get("dual infeasibility") is not None else np.inf
    if sol["status"] == "primal infeasible":
        return SdpSolution(SdpStatus.INFEASIBLE, None, None, raw,
                           iterations, r_prim, r_dual, None)
    if sol["status"] == "dual infeasible" or sol["x"] is None:
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE, None, None, raw,
                           iterations, r_prim, r_dual, None)
    x = np.asarray(sol["x"], dtype=float).reshape(-1)
    return _finish(problem, tol, raw, x, iterations, r_prim, r_dual)


def _flatten_values(problem: LmiProblem, values: dict) -> np.ndarray:
    x = np.zeros(problem.num_scalars)
    for name, slot in problem.variables.items():
        mat = np.atleast_2d(np.asarray(values[name], dtype=float))
        if slot.spec.symmetric:
            coords = _sym_coords(slot.spec.rows)
            for t, (i, j) in enumerate(coords):
                x[slot.offset + t] = mat[i, j]
        else:
            x[slot.offset:slot.offset + slot.spec.size] = mat.reshape(-1)
    return x


def check_solution(problem: LmiProblem, values: dict,
                   tol: SdpTolerances | None = None) -> CheckReport:
    """Recompute every PSD minimum eigenvalue and equality residual from raw values.

    Strict constraints must clear their build-time margin (up to the
    tolerance); plain ones must clear zero.  Tolerances scale with the
    magnitude of the evaluated expression's ingredients.
    """
    tol = tol or SdpTolerances()
    x = _flatten_values(problem, values)
    min_eigs, required, eq_res, eq_allowed = {}, {}, {}, {}
    ok = True
    for con in problem.psd:
        mat = con.f0.copy()
        scale = np.abs(con.f0).max(initial=0.0)
        for t, coeff in con.coeffs.items():
            contrib = x[t] * coeff
            mat += contrib
            scale = max(scale, np.abs(contrib).max())
        lam = float(np.linalg.eigvalsh((mat + mat.T) / 2.0).min())
        need = (con.margin if con.strict else 0.0) - tol.check_feas * max(tol.check_scale_floor, scale)
        min_eigs[con.name] = lam
        required[con.name] = need
        ok = ok and lam >= need
    for eq in problem.eqs:
        mat = eq.f0.copy()
        scale = np.abs(eq.f0).max(initial=0.0)
        for t, coeff in eq.coeffs.items():
            contrib = x[t] * coeff
            mat += contrib
            scale = max(scale, np.abs(contrib).max())
        res = float(np.abs(mat).max(initial=0.0))
        allowed = tol.eq * max(tol.check_scale_floor, scale)
        eq_res[eq.name] = res
        eq_allowed[eq.name] = allowed
        ok = ok and res <= allowed
    return CheckReport(ok, min_eigs, required, eq_res, eq_allowed)
