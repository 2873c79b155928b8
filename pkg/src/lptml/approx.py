"""Subsampling approximation scheme over the exact metric solver.

The driver sweeps a grid of sampling rates p = (1+eps)^-i, drawing for
each grid cell an independent subsample of the constraints, solving it
exactly, and scoring the resulting matrix by the number of violated
constraints on the full set.  Row i = 0 keeps every constraint, so a
satisfiable instance is always solved exactly by the first cell.  A
total budget of t cells is spread over the rows, filling column by
column so every sampling rate gets its share whatever the budget.

Cell seeds derive from (master_seed, i, j) only, making results
reproducible across worker counts.  When a cell attains zero exact
violations the remaining cells are skipped at the next fixed-size
chunk boundary, which keeps the skip deterministic too.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import sdp
from .lptype import RecursionGuardExceeded, solve_lptype
from .metric import (
    ConstraintSet,
    MetricMatrix,
    MetricInstance,
    SolverFailure,
    factor_transform,
    make_instance,
)
from .runner import GridRunner, Task, derived_seed, make_grid

# cells are dispatched and merged in fixed-size chunks so the early
# exit lands at the same place for every worker count
_EARLY_CHUNK = 16
# spawn-key namespace for the regularized variant's guess index; far
# above any row index so cell keys can never collide with it
_GUESS_KEY = 7919


class AllSubproblemsFailed(RuntimeError):
    """Every grid cell came back infeasible or failed."""


@dataclass(frozen=True)
class LptmlConfig:
    epsilon: float = 0.2
    t: int = 2000
    approx_count: bool = False
    sample_size: int | None = None
    master_seed: int = 0
    workers: int = 1
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    use_move_to_front: bool = True
    use_pivoting: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.t < 1:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.workers < 1:
            raise ValueError(f"workers must be positive, got {self.workers}")
        if self.master_seed < 0:
            raise ValueError("master_seed must be nonnegative")
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be positive when given")

    def resolved_sample_size(self, n: int) -> int:
        """Counting sample size, capped at the constraint count."""
        if self.sample_size is not None:
            base = self.sample_size
        else:
            e = self.epsilon
            base = max(100, math.ceil(4.0 / e**2 * math.log(4.0 / e)))
        return max(1, min(base, n))


@dataclass(frozen=True)
class GridRecord:
    i: int
    j: int
    p: float
    seed: int
    status: str  # optimal | infeasible | failed | estimated
    violations: int | None
    fraction: float | None
    subset_size: int
    value: float
    seconds: float
    message: str = ""


@dataclass
class LptmlResult:
    best: MetricMatrix
    violations: int
    fraction: float
    best_cell: tuple[int, int]
    grid: list[GridRecord]
    wall_time: float
    n_constraints: int
    eta: float | None = None
    reg_value: float | None = None
    cost: float | None = None
    guesses: list[tuple[float, int, float, float]] | None = None


def subsample(F: Sequence[int], p: float, rng: np.random.Generator) -> list[int]:
    """Keep each element independently with probability p, order kept."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"sampling rate must be in (0, 1], got {p}")
    keep = rng.random(len(F)) < p
    return [h for h, k in zip(F, keep) if k]


def approx_count_violations(A: np.ndarray | MetricMatrix, cs: ConstraintSet,
                            cfg: LptmlConfig, rng: np.random.Generator,
                            handles: Sequence[int] | None = None,
                            _inst: MetricInstance | None = None) -> float:
    """Unbiased estimate of the violated fraction from a sample drawn
    with replacement.  Ranking only; reported counts are always exact."""
    if isinstance(A, MetricMatrix):
        A = A.A
    inst = _inst if _inst is not None else make_instance(cs, 0, feas_tol=cfg.feas_tol)
    pool = np.arange(inst.size) if handles is None else np.asarray(list(handles))
    k = cfg.resolved_sample_size(pool.size)
    picks = pool[rng.integers(0, pool.size, size=k)]
    m = inst.margins(A, picks)
    return float(np.count_nonzero(m > inst.violation_tol)) / k


def grid_cells(n: int, epsilon: float, t: int) -> list[tuple[int, int, float]]:
    """The (i, j, p) cells a budget of t covers.

    Rows are i = 0 .. ceil(log_{1+eps} n) with p = (1+eps)^-i; the
    budget fills column by column, so row 0 (the exact full solve) is
    always present and rows differ by at most one cell.
    """
    if n < 1:
        raise ValueError("need at least one constraint")
    rows = 1 if n == 1 else math.ceil(math.log(n) / math.log1p(epsilon)) + 1
    per, extra = divmod(t, rows)
    cells = []
    for i in range(rows):
        width = per + (1 if i < extra else 0)
        p = (1.0 + epsilon) ** (-i)
        cells.extend((i, j, p) for j in range(1, width + 1))
    return cells


@dataclass(frozen=True)
class _CellOutput:
    status: str
    matrix: np.ndarray | None
    value: float
    subset_size: int
    seconds: float
    estimate: float | None
    message: str = ""


def _lptml_cell(task: Task, context: tuple) -> _CellOutput:
    cs, handles, cfg, extra = context
    t0 = time.perf_counter()
    rng = np.random.default_rng(task.seed)
    sub = subsample(handles, task.p, rng)
    try:
        inst = make_instance(cs, rng, feas_tol=cfg.feas_tol, gap_tol=cfg.gap_tol,
                             extra_ineqs=extra)
        basis, _ = solve_lptype(inst, sub, rng=rng,
                                use_move_to_front=cfg.use_move_to_front,
                                use_pivoting=cfg.use_pivoting)
    except (SolverFailure, RecursionGuardExceeded, sdp.SdpError) as exc:
        return _CellOutput("failed", None, np.nan, len(sub),
                           time.perf_counter() - t0, None,
                           f"{type(exc).__name__}: {exc}")
    if basis.infeasible:
        return _CellOutput("infeasible", None, np.inf, len(sub),
                           time.perf_counter() - t0, None)
    est = None
    if cfg.approx_count:
        est = approx_count_violations(basis.solution, cs, cfg, rng,
                                      handles=handles, _inst=inst)
    return _CellOutput("optimal", np.asarray(basis.solution), float(basis.value),
                       len(sub), time.perf_counter() - t0, est)


def _chunks(seq: Sequence, size: int) -> Iterable[Sequence]:
    for k in range(0, len(seq), size):
        yield seq[k:k + size]


def lptml(F: Sequence[int], cs: ConstraintSet, cfg: LptmlConfig, *,
          extra_ineqs: Sequence[tuple[Any, float]] = (),
          _master_seed: int | None = None) -> LptmlResult:
    """Best matrix over the sampling grid, scored by exact violations on F.

    F holds integer handles into cs (use range(cs.size) for all of it).
    Ties in the exact count go to the smallest (i, j).  Raises
    AllSubproblemsFailed when no cell produces a finite-value solution.
    """
    start = time.perf_counter()
    handles = [int(h) for h in F]
    n = len(handles)
    if n == 0:
        raise ValueError("F must be non-empty")
    master = cfg.master_seed if _master_seed is None else _master_seed
    grid = make_grid(grid_cells(n, cfg.epsilon, cfg.t), master, cfg.workers)

    counter = make_instance(cs, 0, feas_tol=cfg.feas_tol)
    extra = tuple((np.asarray(C, float) if not isinstance(C, sdp.LinearFunctional)
                   else C.coefficients, float(b)) for C, b in extra_ineqs)

    outcomes = []
    exact_counts: dict[int, int] = {}  # outcome index -> violations on F

    def recount(k: int, out: _CellOutput) -> int:
        c = exact_counts.get(k)
        if c is None:
            c = counter.count_violations(out.matrix, handles=handles,
                                         tol=cfg.feas_tol)[0]
            exact_counts[k] = c
        return c

    with GridRunner(cfg.workers, _lptml_cell, (cs, handles, cfg, extra)) as runner:
        for chunk in _chunks(grid.tasks, _EARLY_CHUNK):
            base = len(outcomes)
            outcomes.extend(runner.run(chunk))
            hit_zero = False
            for k in range(base, len(outcomes)):
                oc = outcomes[k]
                if not (oc.ok and oc.value.status == "optimal"):
                    continue
                if cfg.approx_count and oc.value.estimate > 0.0:
                    continue  # deferred to the pruning pass below
                if recount(k, oc.value) == 0:
                    hit_zero = True
            if hit_zero:
                break

    optimal = [k for k, oc in enumerate(outcomes)
               if oc.ok and oc.value.status == "optimal"]
    if cfg.approx_count and optimal:
        pending = [k for k in optimal if k not in exact_counts]
        if pending:
            ests = [outcomes[k].value.estimate for k in optimal]
            margin = 2.0 * math.sqrt(math.log(400.0) /
                                     (2.0 * cfg.resolved_sample_size(n)))
            cut = min(ests) + margin
            for k in pending:
                if outcomes[k].value.estimate <= cut:
                    recount(k, outcomes[k].value)
    else:
        for k in optimal:
            recount(k, outcomes[k].value)

    best_k = None
    for k in optimal:
        if k in exact_counts:
            if best_k is None or exact_counts[k] < exact_counts[best_k]:
                best_k = k
    if best_k is None:
        raise AllSubproblemsFailed(
            f"none of {len(outcomes)} grid cells produced a usable solution")

    records = []
    for k, oc in enumerate(outcomes):
        task = oc.task
        if not oc.ok:
            records.append(GridRecord(task.i, task.j, task.p, task.seed, "failed",
                                      None, None, 0, np.nan, 0.0, oc.error))
            continue
        out = oc.value
        status, cnt, frac = out.status, None, None
        if status == "optimal":
            if k in exact_counts:
                cnt = exact_counts[k]
                frac = cnt / n
            else:
                status = "estimated"
                frac = out.estimate
        records.append(GridRecord(task.i, task.j, task.p, task.seed, status,
                                  cnt, frac, out.subset_size, out.value,
                                  out.seconds, out.message))

    best_out = outcomes[best_k].value
    best_task = outcomes[best_k].task
    violations = exact_counts[best_k]
    return LptmlResult(
        best=factor_transform(best_out.matrix),
        violations=violations,
        fraction=violations / n,
        best_cell=(best_task.i, best_task.j),
        grid=records,
        wall_time=time.perf_counter() - start,
        n_constraints=n,
    )


def lptml_regularized(F: Sequence[int], cs: ConstraintSet, cfg: LptmlConfig,
                      eta: float, reg: Any) -> LptmlResult:
    """Sweep guesses for the regularizer budget and pick by costic.

    cost'(A) = violations(A) + eta * <reg, A>.  Each guess reruns the
    grid with the extra constraint <reg, A> <= (1+eps)^i; the loosest
    guess omits the constraint, so with eta = 0 the sweep reproduces
    the plain driver exactly.  Guesses run loosest first and the
    incumbent only changes on strict improvement.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if isinstance(reg, sdp.LinearFunctional):
        C = reg.coefficients
    else:
        C = np.asarray(reg, dtype=float)
        C = 0.5 * (C + C.T)
    n = len(F)
    if n == 0:
        raise ValueError("F must be non-empty")
    if np.abs(C).max() > float(n) ** 3:
        raise ValueError(
            f"regularizer coefficients exceed the n^3 bound ({np.abs(C).max():.3g})")

    e = cfg.epsilon
    step = math.log1p(e)
    lo = math.floor(math.log(e**3) / step)
    hi = math.ceil(math.log(n**3 / e) / step)

    best: LptmlResult | None = None
    best_cost = np.inf
    guesses: list[tuple[float, int, float, float]] = []
    for gi, i_exp in enumerate(range(hi, lo - 1, -1)):
        bound = (1.0 + e) ** i_exp
        if gi == 0:
            extra: tuple = ()
            master = None  # plain master seed: bitwise equal to lptml()
        else:
            extra = ((C, bound),)
            master = derived_seed(cfg.master_seed, _GUESS_KEY, gi)
        try:
            res = lptml(F, cs, cfg, extra_ineqs=extra, _master_seed=master)
        except AllSubproblemsFailed:
            continue
        reg_value = float(np.tensordot(C, res.best.A))
        cost = res.violations + eta * reg_value
        guesses.append((bound, res.violations, reg_value, cost))
        if best is None or cost < best_cost - 1e-12 * (1.0 + abs(best_cost)):
            best_cost = cost
            best = replace(res, eta=eta, reg_value=reg_value, cost=cost)
    if best is None:
        raise AllSubproblemsFailed("every regularizer guess failed")
    best.guesses = guesses
    return best


def save_grid_csv(records: Sequence[GridRecord], path: Any) -> None:
    """Plot-ready cell log: i,j,p,violations,status,seconds."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "p", "violations", "status", "seconds"])
        for r in records:
            writer.writerow([r.i, r.j, f"{r.p:.10g}",
                             "" if r.violations is None else r.violations,
                             r.status, f"{r.seconds:.6f}"])
