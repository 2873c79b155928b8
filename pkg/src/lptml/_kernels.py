"""Compiled inner loops for the log-det barrier solver.

Everything here works on a generic affine matrix map

    A(y) = M0 + sum_j y[j] * Ms[j]

together with dense linear inequalities G y <= h.  The barrier is

    f_t(y) = t * c.y - logdet A(y) - sum_k log(h[k] - g_k.y)

minimized by damped Newton steps with backtracking.  Matrices are tiny
(d <= 8, a few dozen variables), so all factorizations are written out
by hand rather than going through LAPACK; the call overhead would
dominate otherwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# status codes shared with the wrapper
OK = 0
EARLY_STOP = 1
ITER_CAP = 2
FEAS_LOST = 3
STALLED = 4


@njit(cache=True, fastmath=True)
def _chol(A, L):
    """Lower Cholesky factor of A into L. Returns False if not SPD."""
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@njit(cache=True, fastmath=True)
def _chol_solve(L, b, x):
    """Solve L L^T x = b (forward then backward substitution)."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


@njit(cache=True, fastmath=True)
def _spd_inverse(L, S):
    """Inverse of A = L L^T into S, via column solves."""
    n = L.shape[0]
    b = np.zeros(n)
    x = np.empty(n)
    for j in range(n):
        b[j] = 1.0
        _chol_solve(L, b, x)
        for i in range(n):
            S[i, j] = x[i]
        b[j] = 0.0
    # symmetrize against round-off
    for i in range(n):
        for j in range(i):
            v = 0.5 * (S[i, j] + S[j, i])
            S[i, j] = v
            S[j, i] = v


@njit(cache=True, fastmath=True)
def _build_A(M0, Ms, y, A):
    d = M0.shape[0]
    q = y.shape[0]
    for a in range(d):
        for b in range(d):
            A[a, b] = M0[a, b]
    for j in range(q):
        yj = y[j]
        if yj != 0.0:
            for a in range(d):
                for b in range(d):
                    A[a, b] += yj * Ms[j, a, b]


@njit(cache=True, fastmath=True)
def _barrier_value(t, cvec, M0, Ms, G, h, y, A, L):
    """f_t(y), or +inf when y is outside the domain."""
    _build_A(M0, Ms, y, A)
    if not _chol(A, L):
        return np.inf
    d = A.shape[0]
    logdet = 0.0
    for i in range(d):
        logdet += np.log(L[i, i])
    logdet *= 2.0
    m = h.shape[0]
    q = y.shape[0]
    slacklog = 0.0
    for k in range(m):
        s = h[k]
        for j in range(q):
            s -= G[k, j] * y[j]
        if s <= 0.0:
            return np.inf
        slacklog += np.log(s)
    cy = 0.0
    for j in range(q):
        cy += cvec[j] * y[j]
    return t * cy - logdet - slacklog


@njit(cache=True, fastmath=True)
def solve_barrier(cvec, M0, Ms, G, h, y, theta, t0, mu, gap_rel,
                  max_newton, stop_below):
    """Path-following barrier minimization of c.y over the domain.

    y is updated in place and must start strictly feasible.  Stops when
    theta / t <= gap_rel * (1 + |c.y|), i.e. the duality gap bound is
    small relative to the attained value.  stop_below triggers an early
    exit as soon as c.y drops under it (phase-1 use).  Returns
    (status, value, newton_steps, t); theta / t bounds the remaining
    gap, so the caller can judge what a capped or stalled run achieved.
    """
    q = y.shape[0]
    d = M0.shape[0]
    m = h.shape[0]

    A = np.empty((d, d))
    L = np.empty((d, d))
    S = np.empty((d, d))
    T = np.empty((d, d))
    W = np.empty((d, d))
    grad = np.empty(q)
    H = np.empty((q, q))
    HL = np.empty((q, q))
    dx = np.empty(q)
    neg = np.empty(q)
    ytry = np.empty(q)
    Atry = np.empty((d, d))
    Ltry = np.empty((d, d))
    sig = np.empty(m)
    # S * Ms[j] * S for the PSD block of the Hessian
    SM = np.empty((q, d, d))

    t = t0
    iters = 0
    stall_stages = 0
    while True:
        steps_before = iters
        centered = False
        lam2 = np.inf
        stage_steps = 0
        small_alpha = 0
        while iters < max_newton and stage_steps < 40:
            _build_A(M0, Ms, y, A)
            if not _chol(A, L):
                return FEAS_LOST, _cdot(cvec, y), iters, t
            _spd_inverse(L, S)
            for k in range(m):
                s = h[k]
                for j in range(q):
                    s -= G[k, j] * y[j]
                if s <= 0.0:
                    return FEAS_LOST, _cdot(cvec, y), iters, t
                sig[k] = s

            # gradient: t*c - <S, Ms_j> + sum_k G[k]/sig[k]
            for j in range(q):
                g = 0.0
                for a in range(d):
                    for b in range(d):
                        g += S[a, b] * Ms[j, a, b]
                grad[j] = t * cvec[j] - g
            for k in range(m):
                inv = 1.0 / sig[k]
                for j in range(q):
                    grad[j] += G[k, j] * inv

            # Hessian: tr(S Ms_j S Ms_k) + sum_k g_k g_k^T / sig_k^2
            for j in range(q):
                # T = Ms[j] @ S ; W = S @ T
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for e in range(d):
                            s += Ms[j, a, e] * S[e, b]
                        T[a, b] = s
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for e in range(d):
                            s += S[a, e] * T[e, b]
                        W[a, b] = s
                for a in range(d):
                    for b in range(d):
                        SM[j, a, b] = W[a, b]
            for j in range(q):
                for k2 in range(j + 1):
                    s = 0.0
                    for a in range(d):
                        for b in range(d):
                            s += SM[j, a, b] * Ms[k2, a, b]
                    H[j, k2] = s
                    H[k2, j] = s
            for k in range(m):
                inv2 = 1.0 / (sig[k] * sig[k])
                for j in range(q):
                    gk = G[k, j]
                    if gk != 0.0:
                        for j2 in range(q):
                            H[j, j2] += gk * G[k, j2] * inv2

            # Newton direction, with ridge fallback for flat directions
            hmax = 0.0
            for j in range(q):
                if H[j, j] > hmax:
                    hmax = H[j, j]
            ridge = 1e-13 * hmax + 1e-300
            ok = False
            for _ in range(6):
                for j in range(q):
                    H[j, j] += ridge
                ok = _chol(H, HL)
                if ok:
                    break
                ridge *= 100.0
            if not ok:
                return STALLED, _cdot(cvec, y), iters, t
            for j in range(q):
                neg[j] = -grad[j]
            _chol_solve(HL, neg, dx)

            lam2 = 0.0
            for j in range(q):
                lam2 -= grad[j] * dx[j]
            if lam2 < 0.0:
                lam2 = 0.0
            if 0.5 * lam2 <= 1e-10:
                centered = True
                break

            # barrier value at y from the factorization already in hand
            logdet = 0.0
            for i in range(d):
                logdet += np.log(L[i, i])
            logdet *= 2.0
            slacklog = 0.0
            for k in range(m):
                slacklog += np.log(sig[k])
            cy = 0.0
            for j in range(q):
                cy += cvec[j] * y[j]
            fcur = t * cy - logdet - slacklog
            gdx = -lam2
            alpha = 1.0
            accepted = False
            while alpha >= 1e-10:
                for j in range(q):
                    ytry[j] = y[j] + alpha * dx[j]
                ftry = _barrier_value(t, cvec, M0, Ms, G, h, ytry, Atry, Ltry)
                if ftry <= fcur + 0.25 * alpha * gdx:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # direction exhausted at this t; approximately centered
                # is still usable, otherwise give up
                if 0.5 * lam2 <= 1e-6:
                    centered = True
                    break
                return STALLED, _cdot(cvec, y), iters, t
            for j in range(q):
                y[j] = ytry[j]
            iters += 1
            stage_steps += 1
            # repeated crumb-sized accepted steps while near the center
            # mean float64 cannot localize better; move on to the next t
            if alpha < 1e-4:
                small_alpha += 1
                if small_alpha >= 2 and 0.5 * lam2 <= 1e-4:
                    centered = True
                    break
            else:
                small_alpha = 0

        value = _cdot(cvec, y)
        if value < stop_below:
            return EARLY_STOP, value, iters, t
        if centered and theta / t <= gap_rel * (1.0 + abs(value)):
            return OK, value, iters, t
        if iters >= max_newton:
            return ITER_CAP, value, iters, t
        if iters == steps_before:
            # two stages in a row without an accepted step: float64 has
            # nothing left to give, the point is as good as it gets
            stall_stages += 1
            if stall_stages >= 2:
                if centered:
                    return OK, value, iters, t
                return STALLED, value, iters, t
        else:
            stall_stages = 0
        t *= mu


@njit(cache=True, fastmath=True)
def _cdot(c, y):
    s = 0.0
    for j in range(c.shape[0]):
        s += c[j] * y[j]
    return s


def warmup():
    """Force JIT compilation with a minimal problem (d=1, one row)."""
    c = np.array([1.0])
    M0 = np.zeros((1, 1))
    Ms = np.ones((1, 1, 1))
    G = np.array([[1.0]])
    h = np.array([2.0])
    y = np.array([1.0])
    solve_barrier(c, M0, Ms, G, h, y, 2.0, 1.0, 30.0, 1e-9, 500, -np.inf)
