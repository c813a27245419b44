"""Canonical semidefinite-program layer shared by every synthesis routine.

A problem holds named scalar and matrix variables, affine matrix constraints
required positive semidefinite after a small interiorization margin, affine
scalar constraints, and a linear objective optionally extended with weighted
L1 terms over designated matrix entries.

The numeric backend is pluggable behind solve(); residual_check() re-evaluates
every constraint with plain numpy so results never have to trust the solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownEntryError

DEFAULT_SOLVER = "CLARABEL"
# Interiorization margin for strict inequalities, scaled by the constant term.
DEFAULT_EPS_COEFF = 1e-8
# Residual tolerance for reporting a solution as numerically valid.
DEFAULT_TOL_REPORT = 1e-6


def _as_2d(value) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    return arr


@dataclass(frozen=True)
class ConstTerm:
    value: np.ndarray

    def evaluate(self, assignment) -> np.ndarray:
        return self.value

    def transposed(self) -> "ConstTerm":
        return ConstTerm(self.value.T)


@dataclass(frozen=True)
class ScalarTerm:
    """scalar variable times a constant coefficient matrix."""

    name: str
    coeff: np.ndarray

    def evaluate(self, assignment) -> np.ndarray:
        return float(assignment[self.name]) * self.coeff

    def transposed(self) -> "ScalarTerm":
        return ScalarTerm(self.name, self.coeff.T)


@dataclass(frozen=True)
class MatTerm:
    """left @ V @ right (or left @ V.T @ right) for a matrix variable V."""

    name: str
    left: np.ndarray
    right: np.ndarray
    transpose: bool = False

    def evaluate(self, assignment) -> np.ndarray:
        V = np.asarray(assignment[self.name], dtype=float)
        if self.transpose:
            V = V.T
        return self.left @ V @ self.right

    def transposed(self) -> "MatTerm":
        return MatTerm(self.name, self.right.T, self.left.T, not self.transpose)


class AffineMat:
    """Affine matrix expression: a sum of constant/scalar/matrix terms."""

    def __init__(self, shape: tuple[int, int], terms=()):
        self.shape = shape
        self.terms = list(terms)

    @staticmethod
    def constant(C) -> "AffineMat":
        C = _as_2d(C)
        return AffineMat(C.shape, [ConstTerm(C)])

    @staticmethod
    def zeros(rows: int, cols: int) -> "AffineMat":
        return AffineMat((rows, cols), [])

    @staticmethod
    def scalar(name: str, coeff) -> "AffineMat":
        coeff = _as_2d(coeff)
        return AffineMat(coeff.shape, [ScalarTerm(name, coeff)])

    @staticmethod
    def matvar(name: str, left, right, transpose: bool = False) -> "AffineMat":
        left, right = _as_2d(left), _as_2d(right)
        return AffineMat((left.shape[0], right.shape[1]), [MatTerm(name, left, right, transpose)])

    def __add__(self, other: "AffineMat") -> "AffineMat":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return AffineMat(self.shape, self.terms + other.terms)

    def transposed(self) -> "AffineMat":
        return AffineMat((self.shape[1], self.shape[0]), [t.transposed() for t in self.terms])

    def evaluate(self, assignment) -> np.ndarray:
        out = np.zeros(self.shape)
        for t in self.terms:
            out = out + t.evaluate(assignment)
        return out

    def to_cvxpy(self, varmap):
        import cvxpy as cp

        parts = []
        for t in self.terms:
            if isinstance(t, ConstTerm):
                parts.append(cp.Constant(t.value))
            elif isinstance(t, ScalarTerm):
                parts.append(varmap[t.name] * t.coeff)
            else:
                V = varmap[t.name]
                V = V.T if t.transpose else V
                parts.append(t.left @ V @ t.right)
        if not parts:
            return cp.Constant(np.zeros(self.shape))
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out


def block_lmi(blocks) -> AffineMat:
    """Assemble a symmetric affine matrix from a grid of upper-triangle blocks.

    blocks[r][c] for r <= c may be an AffineMat, an ndarray (constant), or
    None (zero). Lower-triangle entries are filled with the transposes, so the
    result is symmetric by construction; anything supplied below the diagonal
    is rejected.
    """
    nb = len(blocks)
    sizes = [None] * nb

    def norm(b):
        if b is None:
            return None
        if isinstance(b, AffineMat):
            return b
        return AffineMat.constant(b)

    grid = [[norm(b) for b in row] for row in blocks]
    for r in range(nb):
        for c in range(nb):
            if r > c and grid[r][c] is not None:
                raise ValueError("provide upper-triangle blocks only")
            b = grid[r][c]
            if b is None:
                continue
            for dim, k in ((b.shape[0], r), (b.shape[1], c)):
                if sizes[k] is None:
                    sizes[k] = dim
                elif sizes[k] != dim:
                    raise ValueError(f"inconsistent size for block {k}")
    if any(s is None for s in sizes):
        raise ValueError("every block row/column needs at least one sized block")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    total = int(offsets[-1])

    def embed(expr: AffineMat, r: int, c: int) -> AffineMat:
        er = np.zeros((total, sizes[r]))
        er[offsets[r]:offsets[r + 1], :] = np.eye(sizes[r])
        ec = np.zeros((sizes[c], total))
        ec[:, offsets[c]:offsets[c + 1]] = np.eye(sizes[c])
        terms = []
        for t in expr.terms:
            if isinstance(t, ConstTerm):
                terms.append(ConstTerm(er @ t.value @ ec))
            elif isinstance(t, ScalarTerm):
                terms.append(ScalarTerm(t.name, er @ t.coeff @ ec))
            else:
                terms.append(MatTerm(t.name, er @ t.left, t.right @ ec, t.transpose))
        return AffineMat((total, total), terms)

    out = AffineMat.zeros(total, total)
    for r in range(nb):
        for c in range(r, nb):
            b = grid[r][c]
            if b is None:
                continue
            out = out + embed(b, r, c)
            if c > r:
                out = out + embed(b.transposed(), c, r)
    return out


@dataclass
class LinearExpr:
    """const + sum(scalar coeffs) + sum(matrix-entry coeffs)."""

    const: float = 0.0
    scalars: dict = field(default_factory=dict)          # name -> coeff
    entries: dict = field(default_factory=dict)          # (name, i, j) -> coeff

    def evaluate(self, assignment) -> float:
        val = self.const
        for name, c in self.scalars.items():
            val += c * float(assignment[name])
        for (name, i, j), c in self.entries.items():
            val += c * float(np.asarray(assignment[name])[i, j])
        return val

    def to_cvxpy(self, varmap):
        expr = self.const
        for name, c in self.scalars.items():
            expr = expr + c * varmap[name]
        for (name, i, j), c in self.entries.items():
            expr = expr + c * varmap[name][i, j]
        return expr


@dataclass
class LMIConstraint:
    name: str
    expr: AffineMat
    eps: float  # interiorization margin actually applied

    def residual(self, assignment) -> float:
        M = self.expr.evaluate(assignment)
        M = 0.5 * (M + M.T)
        return float(np.linalg.eigvalsh(M)[0])


class SDPProblem:
    """Mutable container for one semidefinite program."""

    def __init__(self, name: str = "", eps_coeff: float = DEFAULT_EPS_COEFF):
        self.name = name
        self.eps_coeff = eps_coeff
        self.scalar_vars: list[str] = []
        self.matrix_vars: dict[str, dict] = {}   # name -> {shape, symmetric}
        self.lmis: list[LMIConstraint] = []
        self.ineqs: list[LinearExpr] = []        # each required >= 0
        self.eqs: list[LinearExpr] = []          # each required == 0
        self.objective: dict[str, float] = {}    # scalar name -> coeff (minimize)
        self.zero_entries: list[tuple[str, int, int]] = []
        self._slack_count = 0

    # --- declarations -----------------------------------------------------
    def add_scalar_var(self, name: str) -> str:
        if name in self.scalar_vars or name in self.matrix_vars:
            raise ValueError(f"duplicate variable {name!r}")
        self.scalar_vars.append(name)
        return name

    def add_matrix_var(self, name: str, rows: int, cols: int, symmetric: bool = False) -> str:
        if name in self.scalar_vars or name in self.matrix_vars:
            raise ValueError(f"duplicate variable {name!r}")
        if symmetric and rows != cols:
            raise ValueError("symmetric variables must be square")
        self.matrix_vars[name] = {"shape": (rows, cols), "symmetric": symmetric}
        return name

    def fix_entry_zero(self, name: str, i: int, j: int) -> None:
        """Pin a structural zero; extraction returns exactly 0.0 there."""
        self._check_entry(name, i, j)
        self.zero_entries.append((name, i, j))
        self.eqs.append(LinearExpr(entries={(name, i, j): 1.0}))

    # --- constraints and objective -----------------------------------------
    def add_lmi(self, expr: AffineMat, name: str = "", eps: float | None = None) -> None:
        """Require expr - eps*I >= 0 (PSD). eps defaults to
        eps_coeff * (1 + ||constant part||_F); pass eps=0.0 for the closed cone."""
        if expr.shape[0] != expr.shape[1]:
            raise ValueError("LMI constraints must be square")
        if eps is None:
            const = np.zeros(expr.shape)
            for t in expr.terms:
                if isinstance(t, ConstTerm):
                    const = const + t.value
            eps = self.eps_coeff * (1.0 + float(np.linalg.norm(const)))
        self.lmis.append(LMIConstraint(name or f"lmi{len(self.lmis)}", expr, float(eps)))

    def add_ineq(self, expr: LinearExpr) -> None:
        self.ineqs.append(expr)

    def add_eq(self, expr: LinearExpr) -> None:
        self.eqs.append(expr)

    def add_objective(self, scalars: dict) -> None:
        for name, coeff in scalars.items():
            self.objective[name] = self.objective.get(name, 0.0) + float(coeff)

    def _check_entry(self, name: str, i: int, j: int) -> None:
        if name not in self.matrix_vars:
            raise UnknownEntryError(f"unknown matrix variable {name!r}")
        rows, cols = self.matrix_vars[name]["shape"]
        if not (0 <= i < rows and 0 <= j < cols):
            raise UnknownEntryError(f"entry ({i},{j}) outside {name!r} of shape {rows}x{cols}")

    def add_l1_epigraph(self, entries, weights) -> list[str]:
        """Add slack t_k >= |entry_k| and weight the slacks into the objective.

        entries: iterable of (matrix_name, i, j); weights: matching floats.
        Returns the slack variable names.
        """
        entries = list(entries)
        weights = list(weights)
        if len(entries) != len(weights):
            raise ValueError("entries and weights must have equal length")
        names = []
        for (name, i, j), w in zip(entries, weights):
            self._check_entry(name, i, j)
            slack = f"_l1_{self._slack_count}"
            self._slack_count += 1
            self.add_scalar_var(slack)
            self.add_ineq(LinearExpr(scalars={slack: 1.0}, entries={(name, i, j): -1.0}))
            self.add_ineq(LinearExpr(scalars={slack: 1.0}, entries={(name, i, j): 1.0}))
            if w:
                self.add_objective({slack: float(w)})
            names.append(slack)
        return names


@dataclass
class SDPSolution:
    status: str                 # optimal | feasible | infeasible | failure
    assignment: dict
    objective: float | None
    worst_residual: float | None
    diagnostics: dict
    residuals: dict

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def solve(
    problem: SDPProblem,
    solver: str = DEFAULT_SOLVER,
    solver_tol: float | None = None,
    verbose: bool = False,
) -> SDPSolution:
    """Lower the problem to the conic backend and classify the outcome.

    Infeasibility is reported only for a solver-certified status; anything
    ambiguous (inaccurate, unbounded, exceptions) becomes status="failure".
    """
    import cvxpy as cp

    varmap = {}
    for name in problem.scalar_vars:
        varmap[name] = cp.Variable(name=name)
    for name, info in problem.matrix_vars.items():
        rows, cols = info["shape"]
        varmap[name] = cp.Variable((rows, cols), name=name, symmetric=info["symmetric"])

    constraints = []
    for lmi in problem.lmis:
        expr = lmi.expr.to_cvxpy(varmap)
        expr = 0.5 * (expr + expr.T)
        n = lmi.expr.shape[0]
        if n == 1:
            constraints.append(expr[0, 0] >= lmi.eps)
        else:
            constraints.append(expr >> lmi.eps * np.eye(n))
    for ineq in problem.ineqs:
        constraints.append(ineq.to_cvxpy(varmap) >= 0)
    for eq in problem.eqs:
        constraints.append(eq.to_cvxpy(varmap) == 0)

    # backend sees a normalized objective; reported value is scaled back
    obj_scale = max((abs(c) for c in problem.objective.values()), default=1.0)
    obj_scale = max(obj_scale, 1.0)
    cost = 0
    for name, coeff in problem.objective.items():
        cost = cost + (coeff / obj_scale) * varmap[name]
    prob = cp.Problem(cp.Minimize(cost), constraints)

    kwargs = {}
    if solver_tol is not None and solver.upper() == "CLARABEL":
        kwargs = {
            "tol_feas": solver_tol,
            "tol_gap_abs": solver_tol,
            "tol_gap_rel": solver_tol,
        }
    diagnostics: dict = {"solver": solver}
    try:
        prob.solve(solver=solver, verbose=verbose, **kwargs)
    except (cp.error.SolverError, Exception) as exc:  # noqa: BLE001 backend opacity
        return SDPSolution("failure", {}, None, None,
                           {**diagnostics, "exception": repr(exc)}, {})

    diagnostics["backend_status"] = prob.status
    if prob.status == cp.INFEASIBLE:
        return SDPSolution("infeasible", {}, None, None, diagnostics, {})
    if prob.status not in (cp.OPTIMAL,):
        return SDPSolution("failure", {}, None, None, diagnostics, {})

    assignment = {}
    for name in problem.scalar_vars:
        assignment[name] = float(varmap[name].value)
    for name in problem.matrix_vars:
        assignment[name] = np.asarray(varmap[name].value, dtype=float).copy()
    for name, i, j in problem.zero_entries:
        assignment[name][i, j] = 0.0

    residuals = residual_check(problem, assignment)
    worst = min(residuals.values()) if residuals else None
    status = "optimal" if problem.objective else "feasible"
    return SDPSolution(status, assignment, float(prob.value) * obj_scale, worst,
                       diagnostics, residuals)


def residual_check(problem: SDPProblem, assignment: dict) -> dict:
    """Re-evaluate every LMI block numerically; min eigenvalue per block.

    Pure numpy on the raw (margin-free) matrices; this is the oracle the
    acceptance suite uses to verify solver output.
    """
    return {lmi.name: lmi.residual(assignment) for lmi in problem.lmis}


# --- JSON serialization ----------------------------------------------------
# Schema (self-contained, all matrices as nested lists):
# {
#   "name": str, "eps_coeff": float,
#   "scalars": [str, ...],
#   "matrices": [{"name": str, "rows": int, "cols": int, "symmetric": bool}],
#   "lmis": [{"name": str, "eps": float, "rows": int, "cols": int, "terms": [
#       {"kind": "const", "value": [[...]]} |
#       {"kind": "scalar", "var": str, "coeff": [[...]]} |
#       {"kind": "matrix", "var": str, "left": [[...]], "right": [[...]],
#        "transpose": bool}]}],
#   "ineqs"/"eqs": [{"const": float, "scalars": {name: coeff},
#                    "entries": [[name, i, j, coeff], ...]}],
#   "objective": {name: coeff},
#   "zero_entries": [[name, i, j], ...]
# }

def _term_to_json(t):
    if isinstance(t, ConstTerm):
        return {"kind": "const", "value": t.value.tolist()}
    if isinstance(t, ScalarTerm):
        return {"kind": "scalar", "var": t.name, "coeff": t.coeff.tolist()}
    return {
        "kind": "matrix",
        "var": t.name,
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "transpose": t.transpose,
    }


def _term_from_json(d):
    if d["kind"] == "const":
        return ConstTerm(np.asarray(d["value"], dtype=float))
    if d["kind"] == "scalar":
        return ScalarTerm(d["var"], np.asarray(d["coeff"], dtype=float))
    return MatTerm(
        d["var"],
        np.asarray(d["left"], dtype=float),
        np.asarray(d["right"], dtype=float),
        bool(d["transpose"]),
    )


def _linexpr_to_json(e: LinearExpr):
    return {
        "const": e.const,
        "scalars": dict(e.scalars),
        "entries": [[name, i, j, c] for (name, i, j), c in e.entries.items()],
    }


def _linexpr_from_json(d) -> LinearExpr:
    return LinearExpr(
        const=float(d["const"]),
        scalars={k: float(v) for k, v in d["scalars"].items()},
        entries={(name, int(i), int(j)): float(c) for name, i, j, c in d["entries"]},
    )


def dump_problem(problem: SDPProblem) -> dict:
    return {
        "name": problem.name,
        "eps_coeff": problem.eps_coeff,
        "scalars": list(problem.scalar_vars),
        "matrices": [
            {"name": n, "rows": info["shape"][0], "cols": info["shape"][1],
             "symmetric": info["symmetric"]}
            for n, info in problem.matrix_vars.items()
        ],
        "lmis": [
            {"name": l.name, "eps": l.eps, "rows": l.expr.shape[0],
             "cols": l.expr.shape[1], "terms": [_term_to_json(t) for t in l.expr.terms]}
            for l in problem.lmis
        ],
        "ineqs": [_linexpr_to_json(e) for e in problem.ineqs],
        "eqs": [_linexpr_to_json(e) for e in problem.eqs],
        "objective": dict(problem.objective),
        "zero_entries": [[n, i, j] for n, i, j in problem.zero_entries],
    }


def load_problem(data: dict) -> SDPProblem:
    problem = SDPProblem(name=data["name"], eps_coeff=float(data["eps_coeff"]))
    for n in data["scalars"]:
        problem.scalar_vars.append(n)
    for m in data["matrices"]:
        problem.matrix_vars[m["name"]] = {
            "shape": (int(m["rows"]), int(m["cols"])),
            "symmetric": bool(m["symmetric"]),
        }
    for l in data["lmis"]:
        expr = AffineMat((int(l["rows"]), int(l["cols"])),
                         [_term_from_json(t) for t in l["terms"]])
        problem.lmis.append(LMIConstraint(l["name"], expr, float(l["eps"])))
    problem.ineqs = [_linexpr_from_json(e) for e in data["ineqs"]]
    problem.eqs = [_linexpr_from_json(e) for e in data["eqs"]]
    problem.objective = {k: float(v) for k, v in data["objective"].items()}
    problem.zero_entries = [(n, int(i), int(j)) for n, i, j in data["zero_entries"]]
    return problem


def dump_problem_json(problem: SDPProblem, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(dump_problem(problem), fh, indent=1)


def load_problem_json(path: str) -> SDPProblem:
    with open(path) as fh:
        return load_problem(json.load(fh))
