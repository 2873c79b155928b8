"""Recursion mechanics on a one-dimensional toy instance.

The toy problem is "smallest x bounding all given numbers from above,
floored at zero": w(F) = max(values[F], 0).  Its bases have one
element, every operation is trivial, and the global answer is obvious,
which makes it a clean probe for the solver logic itself.
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lptml.lptype import (
    Basis,
    ConstraintNotFound,
    EmptyCandidates,
    RecursionGuardExceeded,
    move_to_front,
    pick_pivot,
    solve_lptype,
)


class MaxInstance:
    max_basis_size = 1
    violation_tol = 0.0

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def initial_basis(self, F):
        return Basis((), 0.0, 0.0)

    def violation_margin(self, solution, handles):
        return self.values[np.asarray(handles, dtype=int)] - solution

    def violation_test(self, basis, h):
        return float(self.values[h] - basis.solution) > self.violation_tol

    def basis_computation(self, basis, h):
        best, best_val = h, float(self.values[h])
        for c in basis.constraints:
            if float(self.values[c]) > best_val:
                best, best_val = c, float(self.values[c])
        value = max(best_val, basis.value)
        return Basis((best,), value, value)


@pytest.mark.parametrize("mtf", [True, False])
@pytest.mark.parametrize("pivot", [True, False])
def test_finds_maximum_under_any_heuristic_mix(mtf, pivot):
    rng = np.random.default_rng(5)
    values = rng.normal(size=40)
    inst = MaxInstance(values)
    basis, stats = solve_lptype(inst, range(40), rng=11,
                                use_move_to_front=mtf, use_pivoting=pivot)
    assert basis.value == pytest.approx(max(values.max(), 0.0))
    assert len(basis.constraints) <= 1
    assert stats.violation_tests > 0
    assert stats.max_depth >= 1


def test_all_negative_values_keep_empty_basis():
    inst = MaxInstance([-3.0, -1.5, -0.2])
    basis, _ = solve_lptype(inst, range(3), rng=0)
    assert basis.value == 0.0
    assert basis.constraints == ()


def test_deterministic_given_seed():
    values = np.random.default_rng(2).normal(size=60)
    inst = MaxInstance(values)
    b1, s1 = solve_lptype(inst, range(60), rng=123)
    b2, s2 = solve_lptype(inst, range(60), rng=123)
    assert b1.constraints == b2.constraints
    assert (s1.violation_tests, s1.basis_computations) == (s2.violation_tests, s2.basis_computations)


def test_large_instance_survives_python_recursion():
    values = np.random.default_rng(3).normal(size=3000)
    inst = MaxInstance(values)
    basis, _ = solve_lptype(inst, range(3000), rng=1)
    assert basis.value == pytest.approx(values.max())


def test_move_to_front_reorders():
    assert move_to_front([3, 1, 4, 1, 5], 4) == [4, 3, 1, 1, 5]


def test_move_to_front_missing_handle():
    with pytest.raises(ConstraintNotFound):
        move_to_front([1, 2, 3], 9)


@given(st.lists(st.integers(0, 30), min_size=1, max_size=15, unique=True),
       st.data())
def test_move_to_front_properties(order, data):
    h = data.draw(st.sampled_from(order))
    out = move_to_front(order, h)
    assert out[0] == h
    assert out[1:] == [c for c in order if c != h]
    assert sorted(out) == sorted(order)


def test_pick_pivot_prefers_largest_margin():
    inst = MaxInstance([0.5, 3.0, 2.0, 3.0])
    # solution 0: margins are the values themselves
    assert pick_pivot(0.0, [0, 1, 2, 3], inst) == 1  # ties on 3.0 -> lowest handle
    assert pick_pivot(0.0, [3, 2], inst) == 3


def test_pick_pivot_rejects_empty():
    inst = MaxInstance([1.0])
    with pytest.raises(EmptyCandidates):
        pick_pivot(0.0, [], inst)


class RunawayInstance(MaxInstance):
    """Misbehaving oracle whose bases keep growing."""

    def basis_computation(self, basis, h):
        grown = tuple(basis.constraints) + (h,)
        return Basis(grown, basis.value, basis.solution)


def test_runaway_basis_trips_guard():
    values = np.linspace(1.0, 2.0, 10)
    inst = RunawayInstance(values)
    with pytest.raises(RecursionGuardExceeded):
        solve_lptype(inst, range(10), rng=0)
