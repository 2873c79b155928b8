"""Randomized solver for LP-type problems.

An LP-type problem assigns a value w(F) to every subset F of its
constraints such that w is monotone under inclusion and local: when
w(F) = w(G) for F inside G, any constraint violating a minimizer of G
also violates one of F.  A basis is an inclusion-minimal subset with
the same value.  The solver only touches the problem through three
basic operations supplied by the instance:

    initial_basis(F)        a valid starting basis
    violation_test(B, h)    does h violate the optimum of basis B
    basis_computation(B, h) a basis of B + {h} with h included

The recursion removes a uniformly random constraint h, solves the rest,
and re-solves with h forced into the basis when the reduced optimum
violates it.  Two heuristics are threaded through: move-to-front keeps
reordering the constraint list so recently violated constraints come
first, and pivoting resolves a violation event by admitting the most
violated constraint instead of the one that happened to be drawn.

Degenerate instances can tie several subsets at the same value, which
is exactly the situation where the locality axiom gives no guarantee.
A final verify-and-repair scan keeps the returned optimum honest: any
constraint still violated is pushed into the basis and the recursion is
rerun, a bounded number of times.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np


class LpTypeError(Exception):
    pass


class ConstraintNotFound(LpTypeError):
    pass


class EmptyCandidates(LpTypeError):
    pass


class RecursionGuardExceeded(LpTypeError):
    """Basis growth or repair rounds exceeded the combinatorial bound.

    In exact arithmetic this cannot happen; tolerance-induced cycling
    can. Aborting beats looping forever on a poisoned subproblem.
    """


@dataclass(frozen=True, eq=False)
class Basis:
    """Constraint handles with the optimum they pin down.

    value is +inf for an infeasible basis, in which case solution is
    None.  Handles keep the order in which basis_computation retained
    them (the forced constraint last).
    """

    constraints: tuple[Any, ...]
    value: float
    solution: Any

    @property
    def infeasible(self) -> bool:
        return self.value == np.inf


@dataclass
class SolverStats:
    violation_tests: int = 0
    basis_computations: int = 0
    max_depth: int = 0


class LpTypeInstance(Protocol):
    max_basis_size: int
    violation_tol: float

    def initial_basis(self, F: Sequence[Any]) -> Basis: ...

    def violation_test(self, basis: Basis, h: Any) -> bool: ...

    def violation_margin(self, solution: Any, handles: Sequence[Any]) -> np.ndarray: ...

    def basis_computation(self, basis: Basis, h: Any) -> Basis: ...


def move_to_front(order: Sequence[Any], h: Any) -> list[Any]:
    """New list with h first and the remaining order preserved."""
    out = [c for c in order if c != h]
    if len(out) == len(order):
        raise ConstraintNotFound(f"{h!r} is not in the constraint list")
    return [h] + out


def pick_pivot(solution: Any, candidates: Sequence[Any], instance: LpTypeInstance) -> Any:
    """Most violated candidate; ties go to the lowest handle.

    Candidates must all be violated by the solution; the margin used
    for ranking is whatever the instance defines as violation size.
    """
    if not candidates:
        raise EmptyCandidates("pick_pivot needs at least one violated constraint")
    ordered = sorted(candidates)
    margins = instance.violation_margin(solution, ordered)
    return ordered[int(np.argmax(margins))]


def _check_basis_size(instance: LpTypeInstance, basis: Basis) -> None:
    if len(basis.constraints) > instance.max_basis_size + 1:
        raise RecursionGuardExceeded(
            f"basis grew to {len(basis.constraints)} constraints, "
            f"bound is {instance.max_basis_size}"
        )


def _solve(instance, F, basis, rng, stats, mtf, pivot, depth):
    if depth > stats.max_depth:
        stats.max_depth = depth
    if not F or basis.infeasible:
        return basis, F
    i = int(rng.integers(len(F)))
    h = F[i]
    rest = F[:i] + F[i + 1:]
    b1, rest = _solve(instance, rest, basis, rng, stats, mtf, pivot, depth + 1)
    stats.violation_tests += 1
    if b1.infeasible or not instance.violation_test(b1, h):
        if not mtf:
            return b1, F
        out = list(rest)
        out.insert(min(i, len(out)), h)
        return b1, out

    current = [h] + rest
    if pivot and len(current) > 1:
        stats.violation_tests += len(current)
        margins = instance.violation_margin(b1.solution, current)
        violated = [c for c, m in zip(current, margins) if m > instance.violation_tol]
        hstar = pick_pivot(b1.solution, violated, instance) if violated else h
    else:
        hstar = h

    stats.basis_computations += 1
    b2 = instance.basis_computation(b1, hstar)
    _check_basis_size(instance, b2)
    remainder = [c for c in current if c != hstar]
    b3, remainder = _solve(instance, remainder, b2, rng, stats, mtf, pivot, depth + 1)
    if not mtf:
        return b3, F
    return b3, [hstar] + remainder


def solve_lptype(
    instance: LpTypeInstance,
    F: Sequence[Any],
    basis: Basis | None = None,
    rng: np.random.Generator | int | None = None,
    use_move_to_front: bool = True,
    use_pivoting: bool = True,
) -> tuple[Basis, SolverStats]:
    """Optimal basis of F, starting from an optional known basis.

    Deterministic given the rng state.  Raises RecursionGuardExceeded
    when basis size or repair rounds pass their combinatorial bounds,
    which signals a subproblem too degenerate to trust.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    order = list(F)
    if basis is None:
        basis = instance.initial_basis(order)
    stats = SolverStats()

    limit = 3 * len(order) + 500
    if sys.getrecursionlimit() < limit:
        sys.setrecursionlimit(limit)

    basis, order = _solve(instance, order, basis, rng, stats,
                          use_move_to_front, use_pivoting, 1)

    max_rounds = 3 * instance.max_basis_size + 10
    rounds = 0
    while not basis.infeasible and order:
        margins = instance.violation_margin(basis.solution, order)
        stats.violation_tests += len(order)
        violated = [c for c, m in zip(order, margins) if m > instance.violation_tol]
        if not violated:
            break
        rounds += 1
        if rounds > max_rounds:
            raise RecursionGuardExceeded(
                f"{rounds} repair rounds without a clean optimum"
            )
        hstar = pick_pivot(basis.solution, violated, instance) if use_pivoting else violated[0]
        stats.basis_computations += 1
        basis = instance.basis_computation(basis, hstar)
        _check_basis_size(instance, basis)
        remainder = [c for c in order if c != hstar]
        basis, remainder = _solve(instance, remainder, basis, rng, stats,
                                  use_move_to_front, use_pivoting, 1)
        if use_move_to_front:
            order = [hstar] + remainder
    return basis, stats
