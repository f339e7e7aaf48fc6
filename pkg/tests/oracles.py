"""Independent reference implementations used to check the package.

Everything here is written from first principles with the dumbest
correct algorithm available (exhaustive search, closed forms, raw
normal equations) so that agreement with the package is meaningful.
Nothing in this module imports from solodid.
"""

import numpy as np


# ---------------------------------------------------------------------------
# simplex lattice search
# ---------------------------------------------------------------------------

_COMP_CACHE: dict = {}


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``.

    Small-arity results are memoized (the recursion revisits them
    combinatorially often); enumeration order and contents are identical
    to the plain recursion, and callers never mutate the returned array.
    """
    if parts == 1:
        return np.array([[total]], dtype=np.int32)
    key = (total, parts)
    cached = _COMP_CACHE.get(key)
    if cached is not None:
        return cached
    blocks = []
    for first in range(total + 1):
        rest = _compositions(total - first, parts - 1)
        head = np.full((rest.shape[0], 1), first, dtype=np.int32)
        blocks.append(np.hstack([head, rest]))
    out = np.vstack(blocks)
    if parts <= 3:
        _COMP_CACHE[key] = out
    return out


def grid_simplex_minimum(m, b, penalty, with_intercept, step=0.005):
    """Exhaustive minimum of the simplex-ridge objective on a lattice.

    Enumerates every weight vector on the simplex grid with the given
    step, evaluating the objective directly (the intercept, when
    requested, is profiled out by centering the residual). Batched over
    the first coordinate to bound memory for 5-column problems.
    """
    m = np.asarray(m, dtype=float)
    b = np.asarray(b, dtype=float)
    k = m.shape[1]
    units = int(round(1.0 / step))
    best = np.inf
    best_w = None
    for first in range(units + 1):
        if k == 1:
            grid = np.array([[units]], dtype=np.int32) if first == units else None
            if grid is None:
                continue
        else:
            rest = _compositions(units - first, k - 1)
            head = np.full((rest.shape[0], 1), first, dtype=np.int32)
            grid = np.hstack([head, rest])
        w = grid.astype(float) * step
        resid = m @ w.T - b[:, None]
        if with_intercept:
            resid = resid - resid.mean(axis=0, keepdims=True)
        obj = np.einsum("ij,ij->j", resid, resid) + penalty * np.einsum(
            "ij,ij->i", w, w
        )
        j = int(np.argmin(obj))
        if obj[j] < best:
            best = float(obj[j])
            best_w = w[j].copy()
    return best, best_w


def kkt_simplex_projection(v) -> np.ndarray:
    """Euclidean projection onto the simplex by support enumeration.

    Tries every candidate support S, solves the equality-constrained
    KKT system on S, and returns the unique feasible solution whose
    multipliers certify optimality.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    for mask in range(1, 2**n):
        support = [i for i in range(n) if mask >> i & 1]
        lam = (1.0 - v[support].sum()) / len(support)
        w = np.zeros(n)
        w[support] = v[support] + lam
        if np.any(w[support] < -1e-12):
            continue
        off = [i for i in range(n) if not (mask >> i & 1)]
        if off and np.any(v[off] + lam > 1e-12):
            continue
        return np.clip(w, 0.0, None)
    raise AssertionError("no KKT point found, which cannot happen")


# ---------------------------------------------------------------------------
# two-way fixed effects by raw normal equations
# ---------------------------------------------------------------------------

def twoway_fe_tau(y: np.ndarray, post_start: int):
    """DiD coefficient from the dummy regression, built from scratch.

    ``y`` is (N, T) with the treated unit in row 0 and treatment
    beginning at column ``post_start``. Returns (tau, residual matrix).
    """
    n, t = y.shape
    rows = []
    target = []
    for j in range(n):
        for s in range(t):
            unit_d = [1.0 if j == u else 0.0 for u in range(1, n)]
            time_d = [1.0 if s == v else 0.0 for v in range(1, t)]
            d = 1.0 if (j == 0 and s >= post_start) else 0.0
            rows.append([1.0] + unit_d + time_d + [d])
            target.append(y[j, s])
    x = np.array(rows)
    beta, *_ = np.linalg.lstsq(x, np.array(target), rcond=None)
    resid = np.array(target) - x @ beta
    return float(beta[-1]), resid.reshape(n, t)


def clustered_sandwich_variance(y: np.ndarray, post_start: int) -> float:
    """Unit-clustered variance of the DiD coefficient, from scratch.

    Builds the same dummy design, forms the sandwich
    (X'X)^-1 (sum_g X_g' u_g u_g' X_g) (X'X)^-1 with the usual finite
    sample factor G/(G-1) * (n-1)/(n-k), and returns the tau entry.
    """
    n, t = y.shape
    rows = []
    target = []
    groups = []
    for j in range(n):
        for s in range(t):
            unit_d = [1.0 if j == u else 0.0 for u in range(1, n)]
            time_d = [1.0 if s == v else 0.0 for v in range(1, t)]
            d = 1.0 if (j == 0 and s >= post_start) else 0.0
            rows.append([1.0] + unit_d + time_d + [d])
            target.append(y[j, s])
            groups.append(j)
    x = np.array(rows)
    yy = np.array(target)
    groups = np.array(groups)
    beta, *_ = np.linalg.lstsq(x, yy, rcond=None)
    u = yy - x @ beta
    bread = np.linalg.pinv(x.T @ x)
    meat = np.zeros((x.shape[1], x.shape[1]))
    for g in range(n):
        xg = x[groups == g]
        ug = u[groups == g]
        s = xg.T @ ug
        meat += np.outer(s, s)
    nn, k = x.shape
    c = (n / (n - 1)) * ((nn - 1) / (nn - k))
    v = c * bread @ meat @ bread
    return float(v[-1, -1])


# ---------------------------------------------------------------------------
# ridge with explicit intercept, by augmented normal equations
# ---------------------------------------------------------------------------

def ridge_with_intercept(x, y, penalty):
    """Solve min ||c + X b - y||^2 + penalty ||b||^2 directly.

    Returns (intercept, coefficients). The intercept is unpenalized;
    the system is the (k+1)-dimensional augmented normal equations.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = x.shape
    a = np.empty((k + 1, k + 1))
    a[:k, :k] = x.T @ x + penalty * np.eye(k)
    a[:k, k] = x.sum(axis=0)
    a[k, :k] = x.sum(axis=0)
    a[k, k] = n
    rhs = np.concatenate([x.T @ y, [y.sum()]])
    sol = np.linalg.solve(a, rhs)
    return float(sol[k]), sol[:k]


# ---------------------------------------------------------------------------
# error process moments
# ---------------------------------------------------------------------------

def mixture_error_moments(rho: float, lam: float):
    """(variance, lag-1 autocovariance) of lam*eta + (1-lam)*e.

    eta is a stationary AR(1) with unit innovation variance, e is
    standard white noise, and the two are independent.
    """
    var_eta = 1.0 / (1.0 - rho**2)
    var = lam**2 * var_eta + (1.0 - lam) ** 2
    cov1 = lam**2 * rho * var_eta
    return var, cov1


def iid_cell_did_variance(n: int, n0: int, t_pre: int, t_post: int, sigma2: float):
    """Variance of the DiD estimate under iid N(0, sigma2) cells.

    tau_hat = (C_1 - mean of control C_j) with C_j = post mean - pre
    mean, so Var = sigma2 * (1/t_post + 1/t_pre) * (1 + 1/n0).
    """
    contrast_var = sigma2 * (1.0 / t_post + 1.0 / t_pre)
    return contrast_var * (1.0 + 1.0 / n0)


# ---------------------------------------------------------------------------
# quantiles
# ---------------------------------------------------------------------------

def quantile_type7(y, q: float) -> float:
    """Linear-interpolation quantile, written out by hand."""
    ys = np.sort(np.asarray(y, dtype=float))
    h = (ys.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, ys.size - 1)
    return float(ys[lo] + (h - lo) * (ys[hi] - ys[lo]))
