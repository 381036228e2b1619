"""Small conic-programming layer used by every optimizer in the package.

Problems are modelled with cvxpy and solved by the Clarabel interior-point
solver. Complex Hermitian matrices never reach the solver: a Hermitian PSD
variable ``X`` is carried by a real PSD matrix ``Z`` of twice the size with

    Re X = (Z11 + Z22) / 2,    Im X = (Z21 - Z12) / 2,

and a Hermitian affine LMI ``H = Hr + j Hi >= 0`` is imposed as
``[[Hr, -Hi], [Hi, Hr]] >= 0``.

Debug dumps use the sparse triplet text format::

    %%tdisac-conic v1
    name <label>
    sense min|max|feasibility
    cones zero=<n> nonneg=<n> soc=<d1,d2,...> psd=<n1,n2,...>
    c <n_vars>
    <index> <value>          (one line per nonzero)
    A <n_rows> <n_cols> <nnz>
    <row> <col> <value>      (one line per nonzero)
    b <n_rows>
    <index> <value>

describing ``min c^T x  s.t.  b - A x in K`` in Clarabel's cone order
(PSD cones in scaled upper-triangular vectorization).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import SolverError

log = logging.getLogger(__name__)

FEAS_TOL = 1e-7
MAX_ITERS = 200

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"


def realify(H: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Real symmetric embedding [[Re H, -Im H], [Im H, Re H]] of a Hermitian matrix.

    The embedding has every eigenvalue of ``H`` twice, so ``H >= 0`` iff the
    result is PSD.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {H.shape}")
    scale = max(np.abs(H).max(initial=0.0), 1.0)
    if np.abs(H - H.conj().T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix is not Hermitian within tolerance")
    re, im = H.real, H.imag
    return np.block([[re, -im], [im, re]])


def realify_hermitian_lmi(re, im):
    """Symmetric real LMI expression for the Hermitian affine map ``re + j im``.

    ``re`` and ``im`` may be numpy arrays or cvxpy expressions; the result is
    symmetrized so cvxpy treats it as a symmetric PSD argument.
    """
    if isinstance(re, np.ndarray) and isinstance(im, np.ndarray):
        return realify(re + 1j * im)
    block = cp.bmat([[re, -im], [im, re]])
    return (block + block.T) / 2


class HermitianVariable:
    """Complex Hermitian PSD variable carried by a real PSD variable of size 2n."""

    def __init__(self, n: int, name: str | None = None):
        self.n = n
        self.Z = cp.Variable((2 * n, 2 * n), PSD=True, name=name)
        self.re = (self.Z[:n, :n] + self.Z[n:, n:]) / 2
        self.im = (self.Z[n:, :n] - self.Z[:n, n:]) / 2

    @property
    def trace(self):
        return cp.trace(self.Z) / 2

    def re_inner(self, C: np.ndarray):
        """Re Tr(X C) for a constant complex matrix C."""
        C = np.asarray(C)
        return cp.sum(cp.multiply(self.re, C.real.T)) - cp.sum(cp.multiply(self.im, C.imag.T))

    def quad(self, a: np.ndarray):
        """a^H X a (real) for a constant vector a."""
        a = np.asarray(a)
        return self.re_inner(np.outer(a, a.conj()))

    @property
    def value(self) -> np.ndarray | None:
        Z = self.Z.value
        if Z is None:
            return None
        n = self.n
        X = (Z[:n, :n] + Z[n:, n:]) / 2 + 1j * (Z[n:, :n] - Z[:n, n:]) / 2
        return (X + X.conj().T) / 2


@dataclass
class ConicSolution:
    status: str
    objective: float | None
    residual: float
    values: dict = field(default_factory=dict)
    solver_status: str = ""
    iterations: int | None = None
    solve_time: float | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def infeasible(self) -> bool:
        return self.status == INFEASIBLE


class ConicProblem:
    """A linear objective plus labelled conic constraints.

    ``objective`` is ``None`` for feasibility problems. The compiled cvxpy
    problem is cached so parameterized problems re-solve without recompiling.
    """

    def __init__(self, name: str = "problem"):
        self.name = name
        self.variables: dict = {}
        self.parameters: dict = {}
        self.constraints: list = []
        self.labels: list = []
        self.objective = None
        self.sense = "feasibility"
        self._compiled = None

    # -- modelling ----------------------------------------------------------
    def variable(self, name, shape=(), cone="free"):
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        if cone == "hermitian_psd":
            var = HermitianVariable(shape, name)
        elif cone == "psd":
            var = cp.Variable((shape, shape), PSD=True, name=name)
        elif cone == "nonneg":
            var = cp.Variable(shape, nonneg=True, name=name)
        elif cone == "free":
            var = cp.Variable(shape, name=name)
        elif cone == "symmetric":
            var = cp.Variable((shape, shape), symmetric=True, name=name)
        else:
            raise ValueError(f"unknown cone {cone!r}")
        self.variables[name] = var
        self._compiled = None
        return var

    def parameter(self, name, shape=(), value=None, nonneg=False):
        par = cp.Parameter(shape, name=name, nonneg=nonneg)
        if value is not None:
            par.value = value
        self.parameters[name] = par
        self._compiled = None
        return par

    def add(self, constraint, label: str = ""):
        self.constraints.append(constraint)
        self.labels.append(label or f"c{len(self.constraints)}")
        self._compiled = None
        return constraint

    def add_psd(self, expr, label: str = ""):
        """expr >= 0 for a (symbolically) symmetric real expression."""
        return self.add(cp.PSD((expr + expr.T) / 2) if not _is_numeric(expr) else expr, label)

    def add_hermitian_lmi(self, re, im, label: str = ""):
        return self.add(cp.PSD(realify_hermitian_lmi(re, im)), label)

    def add_soc(self, t, x, label: str = ""):
        """||x||_2 <= t."""
        return self.add(cp.SOC(t, x), label)

    def minimize(self, expr):
        self.objective, self.sense = expr, "min"
        self._compiled = None

    def maximize(self, expr):
        self.objective, self.sense = expr, "max"
        self._compiled = None

    # -- compilation --------------------------------------------------------
    @property
    def cvxpy_problem(self) -> cp.Problem:
        if self._compiled is None:
            if self.sense == "min":
                obj = cp.Minimize(self.objective)
            elif self.sense == "max":
                obj = cp.Maximize(self.objective)
            else:
                obj = cp.Minimize(0)
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message=".*too many subexpressions.*")
                self._compiled = cp.Problem(obj, self.constraints)
        return self._compiled

    def set(self, **values):
        for key, val in values.items():
            self.parameters[key].value = val

    def dump(self, path) -> None:
        """Write the solver-level problem data in the sparse text format."""
        data, _, _ = self.cvxpy_problem.get_problem_data(cp.CLARABEL)
        dims = data["dims"]
        A = data["A"].tocoo()
        c, b = np.asarray(data["c"]), np.asarray(data["b"])
        lines = ["%%tdisac-conic v1", f"name {self.name}", f"sense {self.sense}",
                 "cones zero={} nonneg={} soc={} psd={}".format(
                     dims.zero, dims.nonneg, ",".join(map(str, dims.soc)),
                     ",".join(map(str, dims.psd)))]
        lines.append(f"c {len(c)}")
        lines += [f"{i} {c[i]:.17g}" for i in np.flatnonzero(c)]
        lines.append(f"A {A.shape[0]} {A.shape[1]} {A.nnz}")
        lines += [f"{r} {q} {v:.17g}" for r, q, v in zip(A.row, A.col, A.data)]
        lines.append(f"b {len(b)}")
        lines += [f"{i} {b[i]:.17g}" for i in np.flatnonzero(b)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _is_numeric(expr) -> bool:
    return isinstance(expr, np.ndarray)


def _violation(constraint) -> float:
    try:
        v = constraint.violation()
    except (ValueError, TypeError):
        return np.inf
    v = np.asarray(v, dtype=float)
    return float(v.max(initial=0.0)) if v.size else 0.0


def constraint_residual(problem: ConicProblem) -> float:
    """Largest constraint violation (PSD: negative part of the minimum eigenvalue)."""
    worst = 0.0
    for con in problem.constraints:
        if isinstance(con, cp.constraints.PSD):
            X = con.args[0].value
            if X is None:
                return np.inf
            X = (X + X.T) / 2
            worst = max(worst, -float(np.linalg.eigvalsh(X)[0]))
        else:
            worst = max(worst, _violation(con))
    return worst


def solve(problem: ConicProblem, tol: float = FEAS_TOL, max_iters: int = MAX_ITERS,
          raise_on_failure: bool = False) -> ConicSolution:
    """Solve with Clarabel and map the outcome to optimal / infeasible / numerical-failure.

    "infeasible" is only reported when the solver returns an infeasibility
    certificate; anything else that is not a verified optimum is a
    numerical failure (logged, optionally raised).
    """
    prob = problem.cvxpy_problem
    settings = dict(tol_feas=tol, tol_gap_abs=tol, tol_gap_rel=tol, max_iter=max_iters,
                    tol_infeas_abs=tol, tol_infeas_rel=tol)
    try:
        with warnings.catch_warnings():
            # inaccurate solutions are classified below from the residual
            warnings.filterwarnings("ignore", message=".*Solution may be inaccurate.*")
            warnings.filterwarnings("ignore", message=".*too many subexpressions.*")
            prob.solve(solver=cp.CLARABEL, **settings)
        status = prob.status
    except cp.error.SolverError as exc:
        status = f"solver-error: {exc}"
    stats = getattr(prob, "solver_stats", None)
    iters = getattr(stats, "num_iters", None) if stats else None
    stime = getattr(stats, "solve_time", None) if stats else None

    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return ConicSolution(INFEASIBLE, None, np.inf, {}, status, iters, stime)
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        residual = constraint_residual(problem)
        if residual <= 10 * tol or (status == cp.OPTIMAL and residual <= 1e-5):
            values = {}
            for name, var in problem.variables.items():
                values[name] = var.value
            obj = None if problem.sense == "feasibility" else float(prob.value)
            return ConicSolution(OPTIMAL, obj, residual, values, status, iters, stime)
        msg = f"{problem.name}: solver returned {status} with residual {residual:.3e}"
    else:
        msg = f"{problem.name}: solver returned {status}"
    log.warning(msg)
    if raise_on_failure:
        raise SolverError(msg)
    return ConicSolution(NUMERICAL_FAILURE, None, np.inf, {}, str(status), iters, stime)
