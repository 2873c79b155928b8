"""Small dense semidefinite programs over the PSD cone.

Problems have the form

    minimize    <C, A>
    subject to  <C_k, A> <= b_k   (or >=)
                <C_e, A>  = b_e
                A symmetric positive semidefinite, d x d

solved by a primal interior-point method: log-det barrier for the cone,
log barriers for the inequalities, Newton steps on the d(d+1)/2 upper
triangle entries.  Equalities are eliminated onto their nullspace.  The
solver is deterministic and sized for the tiny instances produced by
basic operations of the constraint solver (d <= 8, a few dozen rows).

Among optimizers the method is biased toward small trace: a relative
1e-9 trace term is folded into the internal objective, so degenerate
problems (for instance one with no constraints at all) come back with a
canonical answer instead of an arbitrary point of the optimal face.
Reported values are always the true <C, A> of the returned matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np

from . import _kernels


class SdpError(Exception):
    pass


class DimensionMismatch(SdpError):
    pass


class SdpValidationError(SdpError):
    pass


class SdpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class LinearFunctional:
    """A |-> <C, A> = sum_ij C_ij A_ij with C symmetric."""

    matrix: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.matrix, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise DimensionMismatch(f"coefficient matrix must be square, got {C.shape}")
        scale = max(1.0, float(np.abs(C).max()))
        if np.abs(C - C.T).max() > 1e-12 * scale:
            raise SdpValidationError("coefficient matrix must be symmetric")
        object.__setattr__(self, "matrix", (C + C.T) / 2.0)

    @classmethod
    def from_vector(cls, r: np.ndarray) -> "LinearFunctional":
        """Quadratic form r r^T, so <C, A> = r^T A r."""
        r = np.asarray(r, dtype=float).ravel()
        return cls(np.outer(r, r))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, A: np.ndarray) -> float:
        return float(np.sum(self.matrix * A))


Direction = Literal["<=", ">="]


@dataclass
class SdpProblem:
    dim: int
    objective: LinearFunctional
    inequalities: list[tuple[LinearFunctional, float, Direction]] = field(default_factory=list)
    equalities: list[tuple[LinearFunctional, float]] = field(default_factory=list)
    max_constraints: int | None = None

    def constraint_cap(self) -> int:
        if self.max_constraints is not None:
            return self.max_constraints
        return 4 * (self.dim + 3) * self.dim // 2 + 8

    def validate(self) -> None:
        if self.dim < 1:
            raise SdpValidationError(f"dimension must be positive, got {self.dim}")
        if self.objective.dim != self.dim:
            raise DimensionMismatch("objective dimension does not match problem")
        n = len(self.inequalities) + len(self.equalities)
        if n > self.constraint_cap():
            raise SdpValidationError(
                f"{n} constraints exceed the cap {self.constraint_cap()} for d={self.dim}"
            )
        for lf, b, direction in self.inequalities:
            if lf.dim != self.dim:
                raise DimensionMismatch("inequality dimension does not match problem")
            if direction not in ("<=", ">="):
                raise SdpValidationError(f"bad direction {direction!r}")
            if not np.isfinite(b):
                raise SdpValidationError("bounds must be finite")
        for lf, b in self.equalities:
            if lf.dim != self.dim:
                raise DimensionMismatch("equality dimension does not match problem")
            if not np.isfinite(b):
                raise SdpValidationError("bounds must be finite")


@dataclass
class SdpResult:
    status: SdpStatus
    value: float
    matrix: np.ndarray | None
    iterations: int
    max_residual: float
    message: str = ""


@lru_cache(maxsize=32)
def sym_basis(d: int) -> np.ndarray:
    """Basis of symmetric d x d matrices, upper-triangle order.

    Entry (i, i) maps to e_i e_i^T and (i, j), i < j, to
    e_i e_j^T + e_j e_i^T.  Shape (d(d+1)/2, d, d).
    """
    s = d * (d + 1) // 2
    mats = np.zeros((s, d, d))
    k = 0
    for i in range(d):
        for j in range(i, d):
            mats[k, i, j] = 1.0
            mats[k, j, i] = 1.0
            k += 1
    return mats


@lru_cache(maxsize=32)
def _diag_positions(d: int) -> np.ndarray:
    pos = []
    k = 0
    for i in range(d):
        for j in range(i, d):
            if i == j:
                pos.append(k)
            k += 1
    return np.array(pos, dtype=np.int64)


def coeff_vector(C: np.ndarray) -> np.ndarray:
    """Row of <C, .> in the upper-triangle coordinates.

    Off-diagonal coefficients are doubled because each basis matrix
    carries both (i, j) and (j, i).
    """
    d = C.shape[0]
    out = np.empty(d * (d + 1) // 2)
    k = 0
    for i in range(d):
        out[k] = C[i, i]
        k += 1
        for j in range(i + 1, d):
            out[k] = 2.0 * C[i, j]
            k += 1
    return out


def mat_from_vec(x: np.ndarray, d: int) -> np.ndarray:
    A = np.zeros((d, d))
    k = 0
    for i in range(d):
        for j in range(i, d):
            A[i, j] = x[k]
            A[j, i] = x[k]
            k += 1
    return A


# status strings for minimize_rows
_OPT = "optimal"
_INF = "infeasible"
_FAIL = "numerical_failure"

_MAX_NEWTON = 500
_MU = 100.0
# Weight of the canonicalizing trace term, relative to the normalized
# objective.  Large enough that the artificial curvature it creates
# stays within float64 Newton conditioning, small enough that the value
# perturbation (second order, so ~1e-10 relative) is far below the
# advertised gap tolerance.
_TIE_TRACE = 1e-5


def minimize_rows(
    d: int,
    c: np.ndarray,
    rows_a: np.ndarray,
    rows_b: np.ndarray,
    eq_a: np.ndarray | None = None,
    eq_b: np.ndarray | None = None,
    feas_tol: float = 1e-7,
    gap_tol: float = 1e-7,
) -> tuple[str, float, np.ndarray | None, int, str]:
    """Array-level core: minimize c.x with rows_a @ x <= rows_b.

    x lives in the upper-triangle coordinates of sym_basis(d); all ">="
    rows must already be negated into "<=" form.  Returns
    (status, value, x, newton_steps, message) with value = c.x; the
    caller maps x back to a matrix.  This is the single code path every
    public entry point funnels into.
    """
    s = d * (d + 1) // 2
    m = rows_a.shape[0]
    diag = _diag_positions(d)

    # pull the problem toward unit scale: substitute A = sigma * Abar
    norms = np.linalg.norm(rows_a, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.abs(rows_b) / norms
    ratios = ratios[(norms > 0) & (np.abs(rows_b) > 0) & np.isfinite(ratios)]
    sigma = float(np.median(ratios)) if ratios.size else 1.0
    if not np.isfinite(sigma) or sigma <= 0:
        sigma = 1.0

    A_rows = rows_a * sigma
    b_rows = rows_b.astype(float).copy()
    if m:
        div = np.maximum(np.linalg.norm(A_rows, axis=1), np.abs(b_rows))
        div = np.maximum(div, 1e-30)
        A_rows = A_rows / div[:, None]
        b_rows = b_rows / div
    else:
        div = np.zeros(0)

    c_scaled = c * sigma
    c_norm = max(1.0, float(np.abs(c_scaled).max()) if c_scaled.size else 1.0)
    c_int = c_scaled / c_norm
    # small trace bias selects a canonical optimizer on flat faces
    c_int = c_int.copy()
    c_int[diag] += _TIE_TRACE

    target = max(gap_tol * 1e-1, 1e-12)
    newton_total = 0

    if eq_a is not None and eq_a.shape[0] > 0:
        reduced = _eliminate_equalities(d, eq_a * sigma, eq_b, A_rows, b_rows)
        if isinstance(reduced, str):
            if reduced == _INF:
                return _INF, np.inf, None, 0, "inconsistent equalities"
            return _FAIL, np.nan, None, 0, "dependent equalities"
        xp, N, red_rows, red_b = reduced
        q = N.shape[1]
        if q == 0:
            # fully determined by the equalities
            x = sigma * xp
            return _OPT, float(c @ x), x, 0, ""
        M0 = mat_from_vec(xp, d)
        Ms = np.stack([mat_from_vec(N[:, j], d) for j in range(q)])
        c_red = N.T @ c_int
        y0 = _feasible_start_reduced(d, xp, N, red_rows, red_b)
        if y0 is None:
            return _FAIL, np.nan, None, 0, "no interior point found under equalities"
        theta = float(d + red_rows.shape[0])
        t0 = max(1.0, theta / (10.0 * (1.0 + abs(float(c_red @ y0)))))
        status, v_int, iters, t_end = _kernels.solve_barrier(
            c_red, M0, Ms, red_rows, red_b, y0, theta, t0, _MU, target,
            _MAX_NEWTON, -np.inf,
        )
        newton_total += iters
        if not _acceptable(status, theta, t_end, v_int, gap_tol):
            return _FAIL, np.nan, None, newton_total, _kernel_failure(status)
        x = sigma * (xp + N @ y0)
        return _OPT, float(c @ x), x, newton_total, ""

    # inequality-only path
    x0 = _feasible_start(d, A_rows, b_rows)
    if x0 is None:
        x0, slack_total, iters, ok = _phase_one(d, A_rows, b_rows, feas_tol, div)
        newton_total += iters
        if not ok:
            thresh = 10.0 * feas_tol
            if slack_total > thresh:
                return _INF, np.inf, None, newton_total, (
                    f"residual slack {slack_total:.3e} above {thresh:.1e}"
                )
            return _FAIL, np.nan, None, newton_total, (
                f"feasible region numerically tight (slack {slack_total:.3e})"
            )

    basis = sym_basis(d)
    M0 = np.zeros((d, d))
    theta = float(d + m)
    y = x0.copy()
    t0 = max(1.0, theta / (10.0 * (1.0 + abs(float(c_int @ x0)))))
    status, v_int, iters, t_end = _kernels.solve_barrier(
        c_int, M0, basis, A_rows, b_rows, y, theta, t0, _MU, target,
        _MAX_NEWTON, -np.inf,
    )
    newton_total += iters
    if not _acceptable(status, theta, t_end, v_int, gap_tol):
        return _FAIL, np.nan, None, newton_total, _kernel_failure(status)
    x = sigma * y
    return _OPT, float(c @ x), x, newton_total, ""


def _acceptable(status: int, theta: float, t_end: float, v_int: float,
                gap_tol: float) -> bool:
    """Did the barrier run deliver the promised gap?

    The internal target is two orders tighter than gap_tol; runs that
    stall or hit the step cap after reaching the promised tolerance are
    still fine.  Degenerate optima (rank-deficient, multiple active
    boundaries) routinely end this way.
    """
    if status in (_kernels.OK, _kernels.EARLY_STOP):
        return True
    if status in (_kernels.ITER_CAP, _kernels.STALLED):
        return theta / t_end <= gap_tol * (1.0 + abs(v_int))
    return False


def _kernel_failure(status: int) -> str:
    if status == _kernels.FEAS_LOST:
        return "barrier lost feasibility"
    if status == _kernels.ITER_CAP:
        return "newton step cap reached"
    return "line search stalled before target gap"


def _spherical_interval(d: int, A_rows: np.ndarray, b_rows: np.ndarray):
    """Feasible scalar interval for A = c*I, or None if empty.

    Rows are linear in c through their diagonal coefficient sum, so
    strict feasibility of a spherical start reduces to interval
    intersection.  Cheap, and it short-circuits phase 1 for most metric
    subproblems.
    """
    diag = _diag_positions(d)
    tr = A_rows[:, diag].sum(axis=1) if A_rows.shape[0] else np.zeros(0)
    lo, hi = 0.0, np.inf
    for k in range(A_rows.shape[0]):
        t = tr[k]
        b = b_rows[k]
        if abs(t) < 1e-300:
            if b <= 0:
                return None
            continue
        bound = b / t
        if t > 0:
            hi = min(hi, bound)
        else:
            lo = max(lo, bound)
    if lo >= hi:
        return None
    return lo, hi


def _strictly_inside(d: int, x: np.ndarray, A_rows: np.ndarray, b_rows: np.ndarray) -> bool:
    if A_rows.shape[0] and (A_rows @ x - b_rows).max() > -1e-10:
        return False
    A = mat_from_vec(x, d)
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def _feasible_start(d: int, A_rows: np.ndarray, b_rows: np.ndarray) -> np.ndarray | None:
    """Strictly feasible point from cheap candidates, else None.

    Tries a spherical matrix (exact interval arithmetic) and a couple of
    least-squares points aiming below the bounds.  Phase 1 is the
    fallback; skipping it pays for these attempts many times over.
    """
    s = d * (d + 1) // 2
    iv = _spherical_interval(d, A_rows, b_rows)
    if iv is not None:
        lo, hi = iv
        if hi == np.inf:
            cstar = 1.0 if lo == 0.0 else 2.0 * lo
        elif lo == 0.0:
            cstar = 0.5 * hi
        else:
            cstar = float(np.sqrt(lo * hi))
            if not (lo < cstar < hi):
                cstar = 0.5 * (lo + hi)
        x0 = np.zeros(s)
        x0[_diag_positions(d)] = cstar
        if _strictly_inside(d, x0, A_rows, b_rows):
            return x0
    if A_rows.shape[0]:
        span = max(1.0, float(np.abs(b_rows).max()))
        for gamma in (0.25, 0.05):
            xls, *_ = np.linalg.lstsq(A_rows, b_rows - gamma * span, rcond=None)
            if _strictly_inside(d, xls, A_rows, b_rows):
                return xls
    return None


def _phase_one(d, A_rows, b_rows, feas_tol, div):
    """Sum-of-slacks feasibility search.

    Returns (x, total_slack_original_units, newton_steps, ok).  ok means
    a strictly feasible x was extracted.  Runs the barrier in short
    chunks and bails out the moment the matrix block turns strictly
    feasible; full convergence is only needed to certify infeasibility.
    """
    s = d * (d + 1) // 2
    m = A_rows.shape[0]
    q = s + m
    basis = sym_basis(d)
    Ms = np.zeros((q, d, d))
    Ms[:s] = basis
    M0 = np.zeros((d, d))

    G = np.zeros((2 * m, q))
    h = np.zeros(2 * m)
    G[:m, :s] = A_rows
    G[:m, s:] = -np.eye(m)
    h[:m] = b_rows
    G[m:, s:] = -np.eye(m)

    x_init = np.zeros(s)
    x_init[_diag_positions(d)] = 1.0
    resid = A_rows @ x_init - b_rows
    z = np.concatenate([x_init, np.maximum(resid, 0.0) + 1.0])

    c = np.zeros(q)
    c[s:] = 1.0
    # the slack objective alone leaves the matrix block uncoerced and the
    # barrier would ride -logdet to infinity; the trace term bounds it
    c[_diag_positions(d)] += _TIE_TRACE
    theta = float(d + 2 * m)

    t = 1.0
    total = 0
    for _ in range(12):
        status, value, iters, t = _kernels.solve_barrier(
            c, M0, Ms, G, h, z, theta, t, _MU, 1e-7, 60, -np.inf,
        )
        total += iters
        x = z[:s]
        resid = A_rows @ x - b_rows
        if resid.max() < -1e-9:
            slack_now = float(np.sum(z[s:] * div))
            return x, slack_now, total, True
        if status != _kernels.ITER_CAP:
            break
    x = z[:s]
    resid = A_rows @ x - b_rows
    total_orig = float(np.sum(z[s:] * div))
    ok = bool(resid.max() < -1e-12)
    return x, total_orig, total, ok


def _eliminate_equalities(d, Eq_a, eq_b, A_rows, b_rows):
    """Project out equality rows; returns (xp, N, rows, b) or a status."""
    m_eq = Eq_a.shape[0]
    div = np.maximum(np.linalg.norm(Eq_a, axis=1), 1e-30)
    Eq = Eq_a / div[:, None]
    be = eq_b / div
    U, sv, Vt = np.linalg.svd(Eq, full_matrices=True)
    tol = max(Eq.shape) * np.finfo(float).eps * (sv[0] if sv.size else 1.0)
    rank = int(np.sum(sv > tol))
    if rank < m_eq:
        # might still be consistent, but the contract is to refuse
        # dependent systems rather than guess
        xp_try, *_ = np.linalg.lstsq(Eq, be, rcond=None)
        if np.abs(Eq @ xp_try - be).max() > 1e-8:
            return _INF
        return _FAIL
    xp, *_ = np.linalg.lstsq(Eq, be, rcond=None)
    N = Vt[rank:].T
    if A_rows.shape[0]:
        b_new = b_rows - A_rows @ xp
        rows_new = A_rows @ N
    else:
        rows_new = np.zeros((0, N.shape[1]))
        b_new = np.zeros(0)
    return xp, N, rows_new, b_new


def _feasible_start_reduced(d, xp, N, rows, b) -> np.ndarray | None:
    s = d * (d + 1) // 2
    diag = _diag_positions(d)
    q = N.shape[1]

    def ok(y):
        x = xp + N @ y
        A = mat_from_vec(x, d)
        try:
            np.linalg.cholesky(A + 0.0)
        except np.linalg.LinAlgError:
            return False
        if rows.shape[0] and (rows @ y - b).max() > -1e-10:
            return False
        return True

    y0 = np.zeros(q)
    if ok(y0):
        return y0
    # nudge toward multiples of the identity within the affine slice
    target = np.zeros(s)
    for cval in (1.0, 0.1, 10.0, 0.01, 100.0, 1000.0):
        target[diag] = cval
        y, *_ = np.linalg.lstsq(N, target - xp, rcond=None)
        if ok(y):
            return y
    return None


def minimize(problem: SdpProblem, feas_tol: float = 1e-7, gap_tol: float = 1e-7) -> SdpResult:
    """Solve the program; see the module docstring for the method.

    The returned matrix of an Optimal result is strictly inside the PSD
    cone (interior-point iterates never touch the boundary) and
    satisfies every constraint within feas_tol.  The value is within
    gap_tol relative of the optimum; internally the gap is driven two
    orders tighter than asked.
    """
    problem.validate()
    d = problem.dim
    c = coeff_vector(problem.objective.matrix)

    rows_a = []
    rows_b = []
    for lf, b, direction in problem.inequalities:
        a = coeff_vector(lf.matrix)
        if direction == "<=":
            rows_a.append(a)
            rows_b.append(b)
        else:
            rows_a.append(-a)
            rows_b.append(-b)
    s = d * (d + 1) // 2
    A_rows = np.array(rows_a) if rows_a else np.zeros((0, s))
    b_rows = np.array(rows_b) if rows_b else np.zeros(0)

    eq_a = None
    eq_b = None
    if problem.equalities:
        eq_a = np.array([coeff_vector(lf.matrix) for lf, _ in problem.equalities])
        eq_b = np.array([b for _, b in problem.equalities])

    status, _, x, iters, message = minimize_rows(
        d, c, A_rows, b_rows, eq_a, eq_b, feas_tol=feas_tol, gap_tol=gap_tol
    )
    if status == _INF:
        return SdpResult(SdpStatus.INFEASIBLE, np.inf, None, iters, np.inf, message)
    if status == _FAIL:
        return SdpResult(SdpStatus.NUMERICAL_FAILURE, np.nan, None, iters, np.nan, message)

    A = mat_from_vec(x, d)
    value = problem.objective.apply(A)
    report = feasibility_report(A, problem, tol=0.0)
    max_residual = report[0][1] if report else 0.0
    if max_residual > feas_tol:
        return SdpResult(
            SdpStatus.NUMERICAL_FAILURE, value, A, iters, max_residual,
            f"constraint residual {max_residual:.3e} above feas_tol",
        )
    return SdpResult(SdpStatus.OPTIMAL, value, A, iters, max_residual, "")


def feasibility_report(
    A: np.ndarray, problem: SdpProblem, tol: float = 1e-7
) -> list[tuple[int, float]]:
    """Constraints violated beyond tol, as (index, residual), worst first.

    Indices count inequalities in listed order, then equalities.
    Residuals are positive amounts by which the constraint fails.
    """
    out = []
    idx = 0
    for lf, b, direction in problem.inequalities:
        v = lf.apply(A)
        resid = v - b if direction == "<=" else b - v
        if resid > tol:
            out.append((idx, float(resid)))
        idx += 1
    for lf, b in problem.equalities:
        resid = abs(lf.apply(A) - b)
        if resid > tol:
            out.append((idx, float(resid)))
        idx += 1
    out.sort(key=lambda t: -t[1])
    return out
