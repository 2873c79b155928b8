"""Mahalanobis metric learning as an LP-type problem.

A constraint set holds similarity pairs, which ask the learned matrix A
to keep (p-q)^T A (p-q) <= u^2, and dissimilarity pairs, which ask for
>= l^2.  The instance value w(F) is the minimum of r^T A r over PSD
matrices A satisfying every constraint of F, with r a random unit
vector fixed at instance creation; w(F) = +inf when F is unsatisfiable.
The three basic operations the randomized solver consumes (initial
basis, violation test, basis recomputation) all reduce to small dense
SDP solves.

Violation margins are scaled by 1/(1 + threshold^2) so that a single
absolute tolerance means the same thing whatever the data scale; this
mirrors the row normalization inside the SDP solver, whose feasibility
guarantee is relative to row magnitude.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import sdp
from .lptype import Basis, SolverStats, solve_lptype

SIMILAR = "S"
DISSIMILAR = "D"


class InvalidConstraint(ValueError):
    pass


class NotPSD(ValueError):
    pass


class SolverFailure(RuntimeError):
    """The SDP backend reached neither certificate on a subproblem."""


def _as_point(x: Any) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise InvalidConstraint(f"points must be finite vectors, got {x!r}")
    return arr


@dataclass(frozen=True, eq=False)
class PairConstraint:
    """A similarity or dissimilarity demand on one pair of points."""

    kind: str
    p: np.ndarray
    q: np.ndarray
    diff: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in (SIMILAR, DISSIMILAR):
            raise InvalidConstraint(f"kind must be {SIMILAR!r} or {DISSIMILAR!r}")
        p = _as_point(self.p)
        q = _as_point(self.q)
        if p.shape != q.shape:
            raise InvalidConstraint("pair members live in different dimensions")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "diff", p - q)
        if self.kind == DISSIMILAR and not self.diff.any():
            raise InvalidConstraint("a point cannot be dissimilar to itself")

    @property
    def vacuous(self) -> bool:
        """True for a zero-difference pair, which says nothing about A."""
        return not self.diff.any()


def similar(p: Any, q: Any) -> PairConstraint:
    return PairConstraint(SIMILAR, p, q)


def dissimilar(p: Any, q: Any) -> PairConstraint:
    return PairConstraint(DISSIMILAR, p, q)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Pair constraints plus the two distance thresholds.

    Vacuous similarity pairs are dropped here, so every surviving
    constraint has a nonzero difference vector.
    """

    similars: tuple[PairConstraint, ...]
    dissimilars: tuple[PairConstraint, ...]
    u: float
    l: float

    def __post_init__(self) -> None:
        sims = tuple(c for c in self.similars if not c.vacuous)
        dis = tuple(self.dissimilars)
        if any(c.kind != SIMILAR for c in sims):
            raise InvalidConstraint("non-similar constraint in the similar list")
        if any(c.kind != DISSIMILAR for c in dis):
            raise InvalidConstraint("non-dissimilar constraint in the dissimilar list")
        u = float(self.u)
        l = float(self.l)
        if not (np.isfinite(u) and u > 0 and np.isfinite(l) and l > 0):
            raise InvalidConstraint(f"thresholds must be positive and finite, got u={u}, l={l}")
        dims = {c.p.size for c in sims + dis}
        if len(dims) > 1:
            raise InvalidConstraint(f"constraints mix dimensions {sorted(dims)}")
        object.__setattr__(self, "similars", sims)
        object.__setattr__(self, "dissimilars", dis)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "l", l)

    @property
    def size(self) -> int:
        return len(self.similars) + len(self.dissimilars)

    @property
    def all_constraints(self) -> tuple[PairConstraint, ...]:
        return self.similars + self.dissimilars

    @property
    def dim(self) -> int:
        if self.size == 0:
            raise InvalidConstraint("empty constraint set has no dimension")
        return self.all_constraints[0].p.size


def sidecar_path(path: Any) -> str:
    """JSON companion of a constraint CSV (thresholds and dimension)."""
    base, _ = os.path.splitext(str(path))
    return base + ".json"


def save_constraints(path: Any, rows: Iterable[tuple[str, int, int]],
                     u: float, l: float, d: int) -> None:
    """Write index-level constraints as CSV plus a JSON sidecar.

    Each row is (kind, index_p, index_q) into some points file; the
    sidecar records {"u", "l", "d"}.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "index_p", "index_q"])
        for kind, ip, iq in rows:
            if kind not in (SIMILAR, DISSIMILAR):
                raise InvalidConstraint(f"bad constraint kind {kind!r}")
            writer.writerow([kind, int(ip), int(iq)])
    with open(sidecar_path(path), "w") as fh:
        json.dump({"u": float(u), "l": float(l), "d": int(d)}, fh)
        fh.write("\n")


def load_constraints(path: Any, points: np.ndarray) -> ConstraintSet:
    """Read a constraint CSV back against its points matrix."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise InvalidConstraint("points must be an n x d matrix")
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    if int(meta["d"]) != points.shape[1]:
        raise InvalidConstraint(
            f"sidecar says d={meta['d']} but points have d={points.shape[1]}")
    sims: list[PairConstraint] = []
    dis: list[PairConstraint] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kind = row["kind"].strip()
            ip, iq = int(row["index_p"]), int(row["index_q"])
            if not (0 <= ip < len(points) and 0 <= iq < len(points)):
                raise InvalidConstraint(f"constraint indices ({ip}, {iq}) out of range")
            c = PairConstraint(kind, points[ip], points[iq])
            (sims if kind == SIMILAR else dis).append(c)
    return ConstraintSet(tuple(sims), tuple(dis), meta["u"], meta["l"])


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    """PSD matrix A with a factor G such that G^T G = A.

    G is what evaluation applies to points: distances under A equal
    Euclidean distances between transformed points.
    """

    A: np.ndarray
    G: np.ndarray

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.G.T


def factor_transform(A: np.ndarray) -> MetricMatrix:
    """Factor a (numerically) PSD matrix into a MetricMatrix.

    Eigenvalues slightly below zero are clamped; anything below -1e-6
    is treated as genuinely indefinite.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise sdp.DimensionMismatch(f"expected a square matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    lam, Q = np.linalg.eigh(A)
    if lam.min() < -1e-6:
        raise NotPSD(f"eigenvalue {lam.min():.3e} is too negative to clamp")
    lam = np.clip(lam, 0.0, None)
    G = np.sqrt(lam)[:, None] * Q.T
    clamped = (Q * lam) @ Q.T
    return MetricMatrix(0.5 * (clamped + clamped.T), G)


def identity_metric(d: int) -> MetricMatrix:
    return MetricMatrix(np.eye(d), np.eye(d))


def _quad_rows(diffs: np.ndarray) -> np.ndarray:
    """Rows in upper-triangle coordinates with row . x = v^T A v."""
    d = diffs.shape[1]
    iu, ju = np.triu_indices(d)
    return diffs[:, iu] * diffs[:, ju] * np.where(iu == ju, 1.0, 2.0)


def count_violations(A: np.ndarray | MetricMatrix, cs: ConstraintSet,
                     tol: float = 1e-7) -> tuple[int, float]:
    """Number and fraction of constraints A violates beyond tol.

    The tolerance applies to margins scaled by 1 + threshold^2, making
    it data-scale free and consistent with the solver's own violation
    test.
    """
    if isinstance(A, MetricMatrix):
        A = A.A
    A = np.asarray(A, dtype=float)
    if cs.size == 0:
        return 0, 0.0
    diffs = np.array([c.diff for c in cs.all_constraints])
    if A.shape != (diffs.shape[1],) * 2:
        raise sdp.DimensionMismatch(
            f"matrix is {A.shape}, constraints have d={diffs.shape[1]}")
    q = np.einsum("ij,jk,ik->i", diffs, A, diffs)
    n_sim = len(cs.similars)
    bound = np.empty(cs.size)
    bound[:n_sim] = cs.u ** 2
    bound[n_sim:] = cs.l ** 2
    raw = np.where(np.arange(cs.size) < n_sim, q - bound, bound - q)
    count = int(np.count_nonzero(raw / (1.0 + bound) > tol))
    return count, count / cs.size


class MetricInstance:
    """LP-type view of a constraint set.

    Handles are integer indices into the constraint list (similars
    first, then dissimilars).  All subproblem optima come from one SDP
    code path that returns a canonical minimizer on value-tied faces,
    which keeps the geometric violation test coherent with basis
    recomputation.  Subset solves are memoized, so repeated basis
    computations over overlapping subsets stay cheap.
    """

    def __init__(self, cs: ConstraintSet, r: np.ndarray, *,
                 feas_tol: float = 1e-7, gap_tol: float = 1e-7,
                 extra_ineqs: Sequence[tuple[Any, float]] = ()) -> None:
        self.cs = cs
        self.d = cs.dim
        r = np.asarray(r, dtype=float)
        if r.shape != (self.d,):
            raise sdp.DimensionMismatch(f"r has shape {r.shape}, constraints have d={self.d}")
        if abs(np.linalg.norm(r) - 1.0) > 1e-12:
            raise ValueError("objective direction r must be a unit vector")
        self.r = r
        self.max_basis_size = (self.d + 3) * self.d // 2
        self.feas_tol = float(feas_tol)
        self.gap_tol = float(gap_tol)
        self.violation_tol = self.feas_tol

        pairs = cs.all_constraints
        self.size = len(pairs)
        n_sim = len(cs.similars)
        self._diffs = np.array([c.diff for c in pairs]).reshape(self.size, self.d)
        self._is_sim = np.arange(self.size) < n_sim
        self._bound_sq = np.where(self._is_sim, cs.u ** 2, cs.l ** 2)
        self._margin_scale = 1.0 / (1.0 + self._bound_sq)
        quads = _quad_rows(self._diffs)
        sign = np.where(self._is_sim, 1.0, -1.0)
        self._rows_a = quads * sign[:, None]
        self._rows_b = self._bound_sq * sign
        self._obj = sdp.coeff_vector(np.outer(r, r))

        ea, eb = [], []
        for C, b in extra_ineqs:
            if isinstance(C, sdp.LinearFunctional):
                C = C.coefficients
            C = np.asarray(C, dtype=float)
            if C.shape != (self.d, self.d):
                raise sdp.DimensionMismatch(f"extra inequality has shape {C.shape}")
            b = float(b)
            if b < 0:
                # A = 0 must stay feasible or the trivial initial basis lies
                raise ValueError("extra inequality bounds must be nonnegative")
            ea.append(sdp.coeff_vector(0.5 * (C + C.T)))
            eb.append(b)
        s = self._obj.size
        self._extra_a = np.array(ea).reshape(len(ea), s) if ea else np.zeros((0, s))
        self._extra_b = np.array(eb)
        self._memo: dict[tuple[int, ...], tuple[str, float, np.ndarray | None, str]] = {}

    # -- margins ---------------------------------------------------------

    def margins(self, A: np.ndarray, handles: Sequence[int] | None = None) -> np.ndarray:
        """Scaled violation margins; positive means violated."""
        A = np.asarray(A, dtype=float)
        if handles is None:
            idx = np.arange(self.size)
        else:
            idx = np.asarray(list(handles), dtype=np.int64)
        if idx.size == 0:
            return np.zeros(0)
        Z = self._diffs[idx]
        q = np.einsum("ij,jk,ik->i", Z, A, Z)
        raw = np.where(self._is_sim[idx], q - self._bound_sq[idx],
                       self._bound_sq[idx] - q)
        return raw * self._margin_scale[idx]

    def violation_margin(self, solution: np.ndarray, handles: Sequence[int]) -> np.ndarray:
        return self.margins(solution, handles)

    def count_violations(self, A: np.ndarray | MetricMatrix,
                         handles: Sequence[int] | None = None,
                         tol: float | None = None) -> tuple[int, float]:
        if isinstance(A, MetricMatrix):
            A = A.A
        tol = self.violation_tol if tol is None else tol
        m = self.margins(A, handles)
        count = int(np.count_nonzero(m > tol))
        return count, (count / m.size if m.size else 0.0)

    # -- basic operations ------------------------------------------------

    def initial_basis(self, F: Sequence[int]) -> Basis:
        """Singleton basis of the first similarity constraint, else empty.

        A = 0 satisfies every similarity constraint and minimizes the
        objective over the PSD cone, so value 0 is exact either way.
        """
        A0 = np.zeros((self.d, self.d))
        for h in F:
            if self._is_sim[int(h)]:
                return Basis((int(h),), 0.0, A0)
        return Basis((), 0.0, A0)

    def violation_test(self, basis: Basis, h: int) -> bool:
        if basis.solution is None:
            return False
        return bool(self.margins(basis.solution, [int(h)])[0] > self.violation_tol)

    def _solve_subset(self, key: tuple[int, ...]) -> tuple[str, float, np.ndarray | None]:
        hit = self._memo.get(key)
        if hit is None:
            if key:
                ia = np.array(key, dtype=np.int64)
                rows, rhs = self._rows_a[ia], self._rows_b[ia]
            else:
                rows = np.zeros((0, self._obj.size))
                rhs = np.zeros(0)
            if self._extra_a.shape[0]:
                rows = np.vstack([rows, self._extra_a])
                rhs = np.concatenate([rhs, self._extra_b])
            status, value, x, _, msg = sdp.minimize_rows(
                self.d, self._obj, rows, rhs,
                feas_tol=self.feas_tol, gap_tol=self.gap_tol)
            hit = (status, value, x, msg)
            self._memo[key] = hit
        status, value, x, msg = hit
        if status == "numerical_failure":
            raise SolverFailure(msg or f"SDP failed on subset {key}")
        return status, value, x

    def basis_computation(self, basis: Basis, h: int) -> Basis:
        """Basis of basis.constraints + {h}, with h always retained.

        Constraints are dropped (in order, h last and exempt) when
        removal leaves the value unchanged and the dropped constraint
        still holds at the new optimum; the second condition blocks
        cycling between value-tied subsets.
        """
        h = int(h)
        T = [int(c) for c in basis.constraints if int(c) != h] + [h]
        status, value, x = self._solve_subset(tuple(sorted(T)))
        if status == "infeasible":
            return Basis(tuple(T), np.inf, None)
        A = sdp.mat_from_vec(x, self.d)
        drop_tol = 1e-7 * (1.0 + abs(value))

        def without(sub: list[int], removed: list[int]):
            st, val, xx = self._solve_subset(tuple(sorted(sub)))
            if st != "optimal" or val < value - drop_tol:
                return None
            Anew = sdp.mat_from_vec(xx, self.d)
            if removed and np.max(self.margins(Anew, removed)) > self.violation_tol:
                return None
            return val, Anew

        if len(T) > 1:
            # fast path: shed everything clearly slack in one solve
            m = self.margins(A, T[:-1])
            tight = [c for c, mc in zip(T[:-1], m) if mc > -1e-5] + [h]
            if len(tight) < len(T):
                got = without(tight, [c for c in T[:-1] if c not in tight])
                if got is not None:
                    T = tight
                    value, A = got
        i = 0
        while len(T) > 1 and i < len(T) - 1:
            got = without(T[:i] + T[i + 1:], [T[i]])
            if got is None:
                i += 1
            else:
                value, A = got
                T = T[:i] + T[i + 1:]
        return Basis(tuple(T), float(value), A)


def make_instance(cs: ConstraintSet, seed: Any, *,
                  feas_tol: float = 1e-7, gap_tol: float = 1e-7,
                  extra_ineqs: Sequence[tuple[Any, float]] = ()) -> MetricInstance:
    """Instance over cs with a fresh random objective direction.

    Deterministic given seed; r is a normalized standard normal draw,
    hence uniform on the unit sphere.
    """
    rng = np.random.default_rng(seed)
    d = cs.dim
    r = rng.standard_normal(d)
    nrm = np.linalg.norm(r)
    while nrm < 1e-12:
        r = rng.standard_normal(d)
        nrm = np.linalg.norm(r)
    return MetricInstance(cs, r / nrm, feas_tol=feas_tol, gap_tol=gap_tol,
                          extra_ineqs=extra_ineqs)


def solve_exact(cs: ConstraintSet, seed: Any = 0, F: Sequence[int] | None = None, *,
                use_move_to_front: bool = True, use_pivoting: bool = True,
                feas_tol: float = 1e-7, gap_tol: float = 1e-7,
                extra_ineqs: Sequence[tuple[Any, float]] = (),
                ) -> tuple[Basis, SolverStats, MetricInstance]:
    """Randomized exact solve over all (or the given) constraint handles.

    Returns (basis, stats, instance).  basis.value is +inf when the
    chosen constraints cannot all be satisfied by one PSD matrix.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_obj, s_rec = ss.spawn(2)
    inst = make_instance(cs, s_obj, feas_tol=feas_tol, gap_tol=gap_tol,
                         extra_ineqs=extra_ineqs)
    handles = list(range(inst.size)) if F is None else [int(c) for c in F]
    basis, stats = solve_lptype(inst, handles, rng=np.random.default_rng(s_rec),
                                use_move_to_front=use_move_to_front,
                                use_pivoting=use_pivoting)
    return basis, stats, inst
