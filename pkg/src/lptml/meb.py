"""Minimum enclosing ball as an LP-type instance.

The classic validation problem for LP-type solvers: w(F) is the radius
of the smallest ball containing the points F, bases have at most d+1
points, and every basic operation is exact geometry on tiny point sets.
Running it through the same recursion as the metric problem checks the
solver logic independently of any semidefinite machinery.
"""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from .lptype import Basis, SolverStats, solve_lptype


def circumball(points: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Smallest ball with all given points on its boundary.

    None when the points are affinely dependent (no unique such ball).
    The center solves a linear system in the affine hull; a single
    point is its own ball of radius zero.
    """
    k, d = points.shape
    if k == 1:
        return points[0].copy(), 0.0
    base = points[0]
    U = points[1:] - base
    M = 2.0 * (U @ U.T)
    rhs = np.sum(U * U, axis=1)
    try:
        lam = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return None
    center = base + lam @ U
    radius = float(np.linalg.norm(center - base))
    return center, radius


def _ball_of_set(pts: np.ndarray, prefer: int | None = None) -> tuple[np.ndarray, float, tuple[int, ...]]:
    """Exact smallest enclosing ball of at most d+2 points.

    Enumerates candidate boundary subsets, keeps covering balls, and
    returns (center, radius, support).  Among radius ties a support
    containing the index `prefer` wins, then the smaller support.
    """
    n, d = pts.shape
    scale = 1.0 + float(np.abs(pts).max(initial=0.0))
    tol = 1e-9 * scale
    best = None
    max_support = min(n, d + 1)
    for size in range(1, max_support + 1):
        for sub in combinations(range(n), size):
            cb = circumball(pts[list(sub)])
            if cb is None:
                continue
            center, radius = cb
            if np.linalg.norm(pts - center, axis=1).max() > radius + tol:
                continue
            contains_pref = prefer is None or prefer in sub
            key = (radius, not contains_pref, size)
            if best is None or key < best[0]:
                best = (key, center, radius, sub)
    assert best is not None, "a single point always yields a ball"
    return best[1], best[2], best[3]


class MebInstance:
    """Point set wrapped in the LP-type oracle interface."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError(f"need a nonempty (n, d) point array, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        self.points = pts
        self.dim = pts.shape[1]
        self.max_basis_size = self.dim + 1
        self.violation_tol = 1e-9 * (1.0 + float(np.abs(pts).max()))

    def initial_basis(self, F: Sequence[int]) -> Basis:
        if not F:
            return Basis((), 0.0, (None, 0.0))
        h = F[0]
        return Basis((h,), 0.0, (self.points[h].copy(), 0.0))

    def violation_margin(self, solution, handles: Sequence[int]) -> np.ndarray:
        center, radius = solution
        if center is None:
            return np.full(len(handles), np.inf)
        idx = np.asarray(handles, dtype=int)
        return np.linalg.norm(self.points[idx] - center, axis=1) - radius

    def violation_test(self, basis: Basis, h: int) -> bool:
        return float(self.violation_margin(basis.solution, [h])[0]) > self.violation_tol

    def basis_computation(self, basis: Basis, h: int) -> Basis:
        handles = [c for c in basis.constraints if c != h] + [h]
        pts = self.points[handles]
        center, radius, support = _ball_of_set(pts, prefer=len(handles) - 1)
        kept = tuple(handles[i] for i in support)
        return Basis(kept, radius, (center, radius))


def solve_meb(
    points: np.ndarray, rng: np.random.Generator | int | None = 0
) -> tuple[np.ndarray, float, tuple[int, ...], SolverStats]:
    """Smallest enclosing ball via the LP-type recursion.

    Returns (center, radius, support point indices, solver stats).
    """
    inst = MebInstance(points)
    basis, stats = solve_lptype(inst, range(len(inst.points)), rng=rng)
    center, radius = basis.solution
    if center is None:
        center = inst.points[0].copy()
        radius = 0.0
    return center, radius, basis.constraints, stats
