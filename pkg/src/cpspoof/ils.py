"""Integer least squares: ``min_n ||y - R n||^2`` over integer vectors ``n``.

``ils_solve`` decorrelates the upper-triangular factor with an LLL
reduction and then runs a Schnorr-Euchner depth-first search with a
shrinking radius, seeded by successive rounding.  ``brute_force_ils`` is an
exhaustive box enumeration kept deliberately naive; tests use it as the
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

COND_LIMIT = 1e12


class IllConditionedError(ArithmeticError):
    """Triangular factor too poorly conditioned; fall back to the float solution."""


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class IlsProblem:
    target: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.target, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (y.size, y.size):
            raise ValueError("R must be square and match the target length")
        if np.any(np.tril(R, -1) != 0.0):
            raise ValueError("R must be upper triangular")
        if y.size and np.any(np.diag(R) == 0.0):
            raise IllConditionedError("singular triangular factor")
        object.__setattr__(self, "target", y)
        object.__setattr__(self, "R", R)

    @property
    def n(self):
        return self.target.size


def ils_cost(p, n):
    r = p.target - p.R @ np.asarray(n, dtype=float)
    return float(r @ r)


def float_ambiguities(p):
    """Real-valued minimizer ``R^{-1} y`` by back substitution."""
    if p.n == 0:
        return np.zeros(0)
    return solve_triangular(p.R, p.target, lower=False)


def _tie_tol(best):
    return 1e-12 * max(1.0, best)


def _pick(candidates, p):
    """Lowest cost; equal costs resolved to the lexicographically smallest vector."""
    scored = [(ils_cost(p, n), tuple(int(v) for v in n)) for n in candidates]
    best = min(c for c, _ in scored)
    tied = [n for c, n in scored if c <= best + _tie_tol(best)]
    n = np.array(min(tied), dtype=np.int64)
    return n, ils_cost(p, n)


def lll_reduce(R, y, delta=0.75):
    """LLL-reduce the columns of ``R``, keeping it upper triangular.

    Returns ``(R_red, y_red, Z)`` with ``||y - R Z z|| == ||y_red - R_red z||``
    for every ``z``; ``Z`` is unimodular.
    """
    R = np.array(R, dtype=float)
    y = np.array(y, dtype=float)
    n = R.shape[0]
    Z = np.eye(n, dtype=np.int64)
    k = 1
    while k < n:
        for j in range(k - 1, -1, -1):
            mu = np.rint(R[j, k] / R[j, j])
            if mu != 0.0:
                R[: j + 1, k] -= mu * R[: j + 1, j]
                Z[:, k] -= int(mu) * Z[:, j]
        if delta * R[k - 1, k - 1] ** 2 > R[k - 1, k] ** 2 + R[k, k] ** 2:
            R[:, [k - 1, k]] = R[:, [k, k - 1]]
            Z[:, [k - 1, k]] = Z[:, [k, k - 1]]
            a, b = R[k - 1, k - 1], R[k, k - 1]
            r = np.hypot(a, b)
            G = np.array([[a / r, b / r], [-b / r, a / r]])
            R[k - 1 : k + 1, k - 1 :] = G @ R[k - 1 : k + 1, k - 1 :]
            R[k, k - 1] = 0.0
            y[k - 1 : k + 1] = G @ y[k - 1 : k + 1]
            k = max(k - 1, 1)
        else:
            k += 1
    return R, y, Z


def _search(R, y):
    """Schnorr-Euchner enumeration; returns every candidate tied with the best."""
    n = R.shape[0]
    diag = np.diag(R)
    z = np.zeros(n)
    # successive rounding gives the initial radius
    for k in range(n - 1, -1, -1):
        c = (y[k] - R[k, k + 1 :] @ z[k + 1 :]) / diag[k]
        z[k] = np.rint(c)
    r0 = y - R @ z
    best = float(r0 @ r0)
    found = [z.copy()]

    center = np.zeros(n)
    step = np.zeros(n)
    partial = np.zeros(n + 1)
    k = n - 1
    center[k] = y[k] / diag[k]
    z[k] = np.rint(center[k])
    step[k] = 1.0 if center[k] >= z[k] else -1.0
    while True:
        inc = (diag[k] * (center[k] - z[k])) ** 2
        cost = partial[k + 1] + inc
        if cost <= best + _tie_tol(best):
            if k > 0:
                partial[k] = cost
                k -= 1
                center[k] = (y[k] - R[k, k + 1 :] @ z[k + 1 :]) / diag[k]
                z[k] = np.rint(center[k])
                step[k] = 1.0 if center[k] >= z[k] else -1.0
                continue
            if cost < best - _tie_tol(best):
                best = cost
                found = [f for f in found if _cost(R, y, f) <= best + _tie_tol(best)]
            found.append(z.copy())
            _advance(z, step, center, k)
        else:
            if k == n - 1:
                break
            k += 1
            _advance(z, step, center, k)
    return found


def _cost(R, y, z):
    r = y - R @ z
    return float(r @ r)


def _advance(z, step, center, k):
    """Next integer at level ``k`` in zig-zag order around the center."""
    z[k] += step[k]
    step[k] = -step[k] - np.sign(step[k])


def ils_solve(p, decorrelate=None):
    """Exact integer least-squares solution ``(n_fixed, J2)``.

    Raises
    ------
    IllConditionedError
        If the condition number of ``R`` exceeds 1e12.
    """
    if p.n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if np.linalg.cond(p.R) > COND_LIMIT:
        raise IllConditionedError("ILS factor ill-conditioned; use the float solution")
    if decorrelate is None:
        decorrelate = p.n > 1
    if decorrelate:
        R, y, Z = lll_reduce(p.R, p.target)
    else:
        R, y, Z = p.R, p.target, np.eye(p.n, dtype=np.int64)
    found = _search(R, y)
    cands = [Z @ np.rint(z).astype(np.int64) for z in found]
    return _pick(cands, p)


def brute_force_ils(p, radius=6, budget=20_000_000):
    """Exhaustive minimum over the integer box of half-width ``radius``
    centered on the rounded float solution."""
    n = p.n
    if n > 8 or radius > 8:
        raise BudgetExceededError("brute force limited to N <= 8 and radius <= 8")
    count = (2 * radius + 1) ** n
    if count > budget:
        raise BudgetExceededError(f"{count} candidates exceed the budget of {budget}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    center = np.rint(float_ambiguities(p))
    offsets = np.arange(-radius, radius + 1, dtype=float)
    axes = [
        (center[j] + offsets).reshape([-1 if i == j else 1 for i in range(n)]) for j in range(n)
    ]
    cost = np.zeros([2 * radius + 1] * n)
    for i in range(n):
        r = p.target[i] - sum(p.R[i, j] * axes[j] for j in range(i, n))
        cost = cost + r * r
    flat = cost.ravel()
    best = flat.min()
    idx = np.flatnonzero(flat <= best + _tie_tol(best) + 1e-9 * max(1.0, best))
    cands = [center + offsets[list(np.unravel_index(i, cost.shape))] for i in idx]
    return _pick([np.rint(c).astype(np.int64) for c in cands], p)


def enumeration_count(n, radius):
    return (2 * radius + 1) ** n
