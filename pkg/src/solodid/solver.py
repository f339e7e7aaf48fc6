"""Simplex-constrained ridge least squares.

Solves

    min_{c0, w}  || c0 * 1 + M w - b ||^2  +  penalty * ||w||^2
    s.t.         w >= 0,  sum(w) = 1,

where the intercept c0 is optional (fixed at 0 when disabled). This is
the weight program behind synthetic-control and synthetic-DiD unit and
time weights.

The solver is Frank-Wolfe with away steps and exact line search on the
quadratic objective. Linear minimization over the simplex is just a
vertex pick, so each iteration is O(nk); away steps restore linear
convergence on boundary optima where plain Frank-Wolfe zigzags at a
sublinear rate. A final "face polish" solves the equality-constrained
least-squares problem on the active support, which pins exact-fit
solutions down to machine precision.

Away steps need strong convexity for their linear rate. With a zero
penalty and more columns than rows the quadratic is flat along the
null space, the rate falls back to O(1/k), and wide problems (many
donors, few pre periods) stall short of tight tolerances. When that
happens the solver switches to a primal active-set phase: exact face
solves alternating with KKT-guided support growth, which walks a
finite sequence of faces instead of grinding out first-order steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import NoConvergence, NonFiniteInput


@dataclass
class SimplexRidgeProblem:
    """One weight program.

    Attributes
    ----------
    m : (n, k) array
        Regressor matrix; column j is candidate series j.
    b : (n,) array
        Target series.
    penalty : float
        Ridge coefficient on ||w||^2 (the caller applies any T_pre
        scaling before constructing the problem).
    with_intercept : bool
        Solve for a free additive constant c0.
    """

    m: np.ndarray
    b: np.ndarray
    penalty: float = 0.0
    with_intercept: bool = False

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.m.ndim != 2 or self.b.ndim != 1 or self.m.shape[0] != self.b.shape[0]:
            raise ValueError(
                f"shape mismatch: m {self.m.shape}, b {self.b.shape}"
            )
        if self.m.shape[1] < 1:
            raise ValueError("need at least one candidate column")
        if not (np.all(np.isfinite(self.m)) and np.all(np.isfinite(self.b))):
            raise NonFiniteInput("NaN or infinity in problem data")
        if not (np.isfinite(self.penalty) and self.penalty >= 0):
            raise NonFiniteInput(f"penalty must be finite and >= 0, got {self.penalty}")


@dataclass
class SimplexSolution:
    intercept: float
    weights: np.ndarray
    objective: float
    kkt_gap: float
    iterations: int
    converged: bool
    history: Optional[List[float]] = field(default=None, repr=False)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-based algorithm: find the largest support size rho such that
    shifting the rho biggest coordinates by a common theta keeps them
    positive, then clip the rest to zero.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("cannot project a non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _objective(mc, bc, penalty, w):
    r = mc @ w - bc
    return float(r @ r + penalty * (w @ w))


def _gradient(mc, bc, penalty, w):
    return 2.0 * (mc.T @ (mc @ w - bc) + penalty * w)


def _polish(mc, bc, penalty, w, support_tol=1e-12):
    """Solve the sum-to-one least squares restricted to w's support.

    KKT system for  min ||mc_S u - bc||^2 + penalty ||u||^2  s.t. 1'u = 1:

        [ 2(mc_S' mc_S + penalty I)   1 ] [u]   [2 mc_S' bc]
        [ 1'                          0 ] [nu] = [1        ]

    Coordinates that come out negative are dropped from the support and
    the solve repeats (a small active-set loop). Returns the polished
    point, or None if no feasible improvement was found.
    """
    support = np.nonzero(w > support_tol)[0]
    if support.size == 0:
        support = np.array([int(np.argmax(w))])
    for _ in range(max(2 * support.size, 4)):
        s = support.size
        ms = mc[:, support]
        kkt = np.zeros((s + 1, s + 1))
        kkt[:s, :s] = 2.0 * (ms.T @ ms + penalty * np.eye(s))
        kkt[:s, s] = 1.0
        kkt[s, :s] = 1.0
        rhs = np.concatenate([2.0 * ms.T @ bc, [1.0]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        u = sol[:s]
        if np.min(u) < -1e-12:
            if s == 1:
                return None
            support = support[u > np.min(u) + 1e-15]
            if support.size == 0:
                return None
            continue
        u = np.maximum(u, 0.0)
        total = u.sum()
        if total <= 0:
            return None
        candidate = np.zeros(w.size)
        candidate[support] = u / total
        return candidate
    return None


def _face_solution(mc, bc, penalty, support):
    """Equality-constrained minimizer on one face, zeros elsewhere."""
    s = support.size
    ms = mc[:, support]
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = 2.0 * (ms.T @ ms + penalty * np.eye(s))
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.concatenate([2.0 * ms.T @ bc, [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    if not np.all(np.isfinite(sol)):
        return None
    u = np.zeros(mc.shape[1])
    u[support] = sol[:s]
    return u


def _active_set_refine(mc, bc, penalty, w, tol):
    """Primal active-set descent in the Lawson-Hanson pattern.

    From a feasible point: solve the equality-constrained problem on
    the current support. If that face solution goes negative, step
    toward it only as far as the first coordinate to hit zero (ratio
    test) and drop the blocker; objective descent is monotone because
    the face solution minimizes a convex objective over the face's
    affine hull. At a face optimum the gradient is constant (nu) on
    the support and KKT requires g_i >= nu elsewhere, so the worst
    violator enters the support and the loop repeats. Terminates when
    the duality-gap certificate holds, no violator remains, or the
    round budget ends; returns the final (monotone-best) point.
    """
    k = w.size
    w = np.maximum(w, 0.0)
    total = float(w.sum())
    if total <= 0:
        return None
    w = w / total
    support = np.nonzero(w > 1e-12)[0]
    if support.size == 0:
        support = np.array([int(np.argmax(w))])
    for _ in range(6 * k):
        u = _face_solution(mc, bc, penalty, support)
        if u is None:
            return w
        if np.min(u[support]) < -1e-12:
            blockers = support[u[support] < 0]
            alphas = w[blockers] / (w[blockers] - u[blockers])
            alpha = min(1.0, float(np.min(alphas)))
            w = w + alpha * (u - w)
            w[w < 1e-15] = 0.0
            total = float(w.sum())
            if total <= 0:
                return None
            w = w / total
            support = np.nonzero(w > 1e-12)[0]
            if support.size == 0:
                return None
            continue
        w = np.maximum(u, 0.0)
        w = w / float(w.sum())
        support = np.nonzero(w > 1e-12)[0]
        if support.size == 0:
            return None
        f = _objective(mc, bc, penalty, w)
        g = _gradient(mc, bc, penalty, w)
        gap = float(g @ w) - float(np.min(g))
        if gap <= 0.5 * tol * (1.0 + abs(f)):
            return w
        entering = int(np.argmin(g))
        if w[entering] > 1e-15:
            return w
        support = np.sort(np.append(support, entering))
    return w


def solve(
    problem: SimplexRidgeProblem,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    strict: bool = True,
    keep_history: bool = False,
) -> SimplexSolution:
    """Minimize the simplex-constrained ridge objective.

    Starts from uniform weights and stops when the Frank-Wolfe duality
    gap falls below ``tol * (1 + |objective|)`` or the iteration budget
    runs out. Vertex ties are broken toward the lowest column index so
    runs are deterministic.

    Parameters
    ----------
    problem : SimplexRidgeProblem
    tol : float
        Relative duality-gap target, > 0.
    max_iter : int
        Iteration budget across polish rounds.
    strict : bool
        When True (default), raise :class:`NoConvergence` if the gap
        target is missed; the exception carries the best iterate. When
        False, return the flagged solution instead.
    keep_history : bool
        Record the objective value at every iteration.

    Returns
    -------
    SimplexSolution
        Feasible weights (sum to 1 within 1e-10), the reported
        ``kkt_gap`` being the final Frank-Wolfe duality gap.
    """
    if not (tol > 0):
        raise ValueError(f"tol must be > 0, got {tol}")
    m, b, penalty = problem.m, problem.b, problem.penalty
    n, k = m.shape

    # A free intercept is the mean of the residual at the optimum, so
    # centering columns and target solves the same program with c0
    # eliminated; c0 is recovered afterwards in closed form.
    if problem.with_intercept:
        mc = m - m.mean(axis=0)
        bc = b - b.mean()
    else:
        mc, bc = m, b

    w = np.full(k, 1.0 / k)
    f = _objective(mc, bc, penalty, w)
    history = [f] if keep_history else None
    gap = np.inf
    iterations = 0
    converged = False
    tried_active_set = False

    for _round in range(4):
        while iterations < max_iter:
            g = _gradient(mc, bc, penalty, w)
            s = int(np.argmin(g))          # FW vertex, lowest index on ties
            gw = float(g @ w)
            gap = gw - g[s]
            f = _objective(mc, bc, penalty, w)
            if gap <= tol * (1.0 + abs(f)):
                converged = True
                break

            # Away vertex: the worst coordinate currently in the support.
            support = np.nonzero(w > 1e-15)[0]
            a = support[int(np.argmax(g[support]))]
            fw_gain = gap                   # g.(w - e_s)
            away_gain = float(g[a]) - gw    # g.(e_a - w)

            if fw_gain >= away_gain:
                d = -w.copy()
                d[s] += 1.0
                gamma_max = 1.0
            else:
                d = w.copy()
                d[a] -= 1.0
                gamma_max = w[a] / (1.0 - w[a]) if w[a] < 1.0 else 1.0

            md = mc @ d
            denom = float(md @ md + penalty * (d @ d))
            gd = float(g @ d)
            if denom <= 0.0:
                gamma = gamma_max if gd < 0 else 0.0
            else:
                gamma = min(max(-gd / (2.0 * denom), 0.0), gamma_max)
            if gamma <= 0.0:
                # No progress possible along either direction: the gap
                # estimate is limited by round-off; accept the iterate.
                converged = gap <= max(tol * (1.0 + abs(f)), 64 * np.finfo(float).eps * (1 + abs(f)))
                break

            w = w + gamma * d
            np.clip(w, 0.0, None, out=w)
            w /= w.sum()
            iterations += 1
            if keep_history:
                history.append(_objective(mc, bc, penalty, w))

        if not converged and not tried_active_set:
            # the flat-direction stall: switch from first-order steps to
            # exact face solves with KKT-guided support growth
            tried_active_set = True
            cand = _active_set_refine(mc, bc, penalty, w, tol)
            if cand is not None:
                fc = _objective(mc, bc, penalty, cand)
                if fc < f:
                    w, f = cand, fc
                    if keep_history:
                        history.append(f)
                    g = _gradient(mc, bc, penalty, w)
                    gap = float(g @ w) - float(np.min(g))
                    if gap <= tol * (1.0 + abs(f)):
                        converged = True

        polished = _polish(mc, bc, penalty, w)
        if polished is None:
            break
        fp = _objective(mc, bc, penalty, polished)
        if fp <= f * (1 + 1e-14) + 1e-300:
            if np.allclose(polished, w, rtol=0, atol=1e-15):
                w = polished
                break
            w = polished
            if keep_history:
                history.append(fp)
        else:
            break
        # Re-check the gap from the polished point; loop once more if
        # the support changed enough to matter.
        g = _gradient(mc, bc, penalty, w)
        gap = float(g @ w) - float(np.min(g))
        f = _objective(mc, bc, penalty, w)
        if gap <= tol * (1.0 + abs(f)):
            converged = True
            break

    f = _objective(mc, bc, penalty, w)
    g = _gradient(mc, bc, penalty, w)
    gap = float(g @ w) - float(np.min(g))
    if gap <= tol * (1.0 + abs(f)):
        converged = True

    intercept = float(b.mean() - (m @ w).mean()) if problem.with_intercept else 0.0
    solution = SimplexSolution(
        intercept=intercept,
        weights=w,
        objective=f,
        kkt_gap=gap,
        iterations=iterations,
        converged=converged,
        history=history,
    )
    if not converged and strict:
        raise NoConvergence(solution)
    return solution
