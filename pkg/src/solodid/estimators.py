"""Point estimators: DiD, synthetic control, synthetic DiD.

All estimators consume a :class:`~solodid.panel.BalancedPanel` (treated
unit in row 0) and return an :class:`EstimateResult`. The synthetic
methods obtain their weights from the simplex-ridge solver; the
regularization scales are data driven and overridable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import NoConvergence, RankDeficientDesign, SolverFailure
from .panel import BalancedPanel
from .solver import SimplexRidgeProblem, solve

METHOD_DID = "did"
METHOD_SC = "sc"
METHOD_SDID = "sdid"
METHOD_SC_BC = "sc-bc"


@dataclass
class WeightSet:
    """Unit and time weights for the synthetic DiD program.

    ``unit_weights`` lives on the simplex over control units (panel row
    order, treated excluded); ``time_weights`` on the simplex over
    pre-periods. Post periods always carry implicit uniform weight
    1/T_post. ``zeta`` and ``xi`` record the regularization scales the
    weights were computed under.
    """

    unit_intercept: float
    unit_weights: np.ndarray
    time_intercept: float
    time_weights: np.ndarray
    zeta: float
    xi: float


@dataclass
class RegularizationScales:
    """Data-driven ridge scales for the weight programs.

    ``zeta`` applies to unit weights, ``xi`` to time weights; ``sigma``
    is the standard deviation of control first differences over the
    pre-period that both derive from. ``zero_variance`` flags a
    constant panel (both scales collapse to 0).
    """

    zeta: float
    xi: float
    sigma: float
    zero_variance: bool = False


@dataclass
class EstimateResult:
    tau: float
    method: str
    weights: Optional[WeightSet] = None
    pre_rmspe: float = 0.0
    counterfactual: Optional[np.ndarray] = None
    diagnostics: Dict = field(default_factory=dict)


def did_estimate(panel: BalancedPanel) -> EstimateResult:
    """Difference-in-differences on the aggregate panel.

    tau = (treated post mean - treated pre mean)
        - (control post mean - control pre mean),

    controls averaged unweighted. For the balanced block design this
    equals the two-way fixed-effects coefficient on the treatment
    indicator. The counterfactual shifts the treated pre-period mean by
    the control group's per-period movement.
    """
    y_pre, y_post = panel.split_pre_post()
    treated_pre = y_pre[0].mean()
    ctrl_pre = y_pre[1:].mean()
    tau = (y_post[0].mean() - treated_pre) - (y_post[1:].mean() - ctrl_pre)

    ctrl_path_post = y_post[1:].mean(axis=0)
    counterfactual = treated_pre + (ctrl_path_post - ctrl_pre)
    pre_gap = (y_pre[0] - treated_pre) - (y_pre[1:].mean(axis=0) - ctrl_pre)
    return EstimateResult(
        tau=float(tau),
        method=METHOD_DID,
        counterfactual=counterfactual,
        pre_rmspe=float(np.sqrt(np.mean(pre_gap**2))),
    )


def _solve_or_fail(problem, tol, max_iter, accept_gap=None):
    """Run the solver, translating NoConvergence into SolverFailure.

    ``accept_gap`` loosens the failure threshold: an unconverged iterate
    whose relative gap still beats it is accepted (flagged in the
    result), which matters for penalty-free programs where the last
    digits of the gap can stall without moving the weights.
    """
    try:
        return solve(problem, tol=tol, max_iter=max_iter, strict=True)
    except NoConvergence as exc:
        sol = exc.solution
        if accept_gap is not None and sol.kkt_gap <= accept_gap * (1.0 + abs(sol.objective)):
            return sol
        raise SolverFailure(
            f"weight program did not converge (gap {sol.kkt_gap:.3e})"
        ) from exc


def sc_estimate(panel: BalancedPanel, tol: float = 1e-10, max_iter: int = 20_000) -> EstimateResult:
    """Synthetic control: convex donor combination, no intercept.

    Unit weights minimize the pre-period squared gap to the treated
    series with zero ridge penalty; tau is the mean post-period gap
    between the treated series and its synthetic counterpart.
    """
    y_pre, y_post = panel.split_pre_post()
    problem = SimplexRidgeProblem(
        m=y_pre[1:].T, b=y_pre[0], penalty=0.0, with_intercept=False
    )
    sol = _solve_or_fail(problem, tol, max_iter, accept_gap=1e-6)

    w = sol.weights
    synth_pre = y_pre[1:].T @ w
    synth_post = y_post[1:].T @ w
    gaps = y_post[0] - synth_post
    weights = WeightSet(
        unit_intercept=0.0,
        unit_weights=w,
        time_intercept=0.0,
        time_weights=np.full(panel.t_pre, 1.0 / panel.t_pre),
        zeta=0.0,
        xi=0.0,
    )
    return EstimateResult(
        tau=float(gaps.mean()),
        method=METHOD_SC,
        weights=weights,
        pre_rmspe=float(np.sqrt(np.mean((y_pre[0] - synth_pre) ** 2))),
        counterfactual=synth_post,
        diagnostics={"kkt_gap": sol.kkt_gap, "solver_converged": sol.converged},
    )


def compute_zeta(panel: BalancedPanel) -> RegularizationScales:
    """Data-driven regularization scales from control first differences.

    sigma^2 is the variance of Delta_jt = y_{j,t+1} - y_{jt} pooled
    over control units and adjacent pre-period pairs; with a single
    treated unit the unit-weight scale is

        zeta = T_post^(1/4) * sigma,

    and the time-weight scale is xi = 1e-6 * sigma (kept near zero for
    numerical stability only). A constant panel yields sigma = 0; both
    scales are then 0 and the ``zero_variance`` flag is set.
    """
    y_pre, _ = panel.split_pre_post()
    diffs = np.diff(y_pre[1:], axis=1)
    sigma = float(np.sqrt(np.var(diffs)))
    zero = not (sigma > 0)
    zeta = 0.0 if zero else float(panel.t_post ** 0.25 * sigma)
    xi = 0.0 if zero else 1e-6 * sigma
    return RegularizationScales(zeta=zeta, xi=xi, sigma=sigma, zero_variance=zero)


def sdid_weights(
    panel: BalancedPanel,
    zeta: Optional[float] = None,
    xi: Optional[float] = None,
    tol: float = 1e-8,
    max_iter: int = 20_000,
) -> WeightSet:
    """Solve both synthetic-DiD weight programs.

    Unit weights regress the treated pre-period series on the control
    pre-period series (free intercept, ridge penalty zeta^2 * T_pre);
    time weights regress the control post-period row means on the
    control pre-period columns (free intercept, penalty xi^2 * T_pre).
    Omitted scales default to :func:`compute_zeta`.
    """
    if zeta is None or xi is None:
        scales = compute_zeta(panel)
        zeta = scales.zeta if zeta is None else zeta
        xi = scales.xi if xi is None else xi

    y_pre, y_post = panel.split_pre_post()
    t_pre = panel.t_pre

    unit_problem = SimplexRidgeProblem(
        m=y_pre[1:].T,
        b=y_pre[0],
        penalty=zeta**2 * t_pre,
        with_intercept=True,
    )
    unit_sol = _solve_or_fail(unit_problem, tol, max_iter, accept_gap=1e-6)

    time_problem = SimplexRidgeProblem(
        m=y_pre[1:],
        b=y_post[1:].mean(axis=1),
        penalty=xi**2 * t_pre,
        with_intercept=True,
    )
    time_sol = _solve_or_fail(time_problem, tol, max_iter, accept_gap=1e-6)

    return WeightSet(
        unit_intercept=unit_sol.intercept,
        unit_weights=unit_sol.weights,
        time_intercept=time_sol.intercept,
        time_weights=time_sol.weights,
        zeta=float(zeta),
        xi=float(xi),
    )


def _sdid_tau_regression(panel: BalancedPanel, ws: WeightSet) -> float:
    """Treatment coefficient of the weighted two-way regression.

    Cell (j, t) carries weight r_j * c_t with r = (1, unit weights) and
    c = (time weights over pre, 1/T_post over post). Solved by weighted
    least squares on the dummy design; zero-weight cells drop out.
    """
    n, t = panel.n_units, len(panel.times)
    post = panel.post_mask
    r = np.concatenate([[1.0], ws.unit_weights])
    c = np.empty(t)
    c[~post] = ws.time_weights
    c[post] = 1.0 / panel.t_post
    cellw = np.outer(r, c).ravel()

    d = np.zeros((n, t))
    d[0, post] = 1.0
    unit_idx = np.repeat(np.arange(n), t)
    time_idx = np.tile(np.arange(t), n)
    cols = [np.ones(n * t)]
    for j in range(1, n):
        cols.append((unit_idx == j).astype(float))
    for s in range(1, t):
        cols.append((time_idx == s).astype(float))
    cols.append(d.ravel())
    x = np.column_stack(cols)

    keep = cellw > 0
    sw = np.sqrt(cellw[keep])
    xw = x[keep] * sw[:, None]
    yw = panel.y.ravel()[keep] * sw
    beta, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    return float(beta[-1])


def sdid_estimate(
    panel: BalancedPanel,
    zeta: Optional[float] = None,
    xi: Optional[float] = None,
    weights: Optional[WeightSet] = None,
) -> EstimateResult:
    """Synthetic difference-in-differences.

    tau is the weighted double difference

        (treated post mean - lambda-weighted treated pre)
      - sum_j omega_j (control_j post mean - lambda-weighted control_j pre),

    which equals the treatment coefficient of the omega x lambda
    weighted two-way regression; both are computed on every call and
    the regression value is kept in ``diagnostics['tau_regression']``
    as a consistency check.
    """
    ws = weights if weights is not None else sdid_weights(panel, zeta=zeta, xi=xi)

    y_pre, y_post = panel.split_pre_post()
    lam, omega = ws.time_weights, ws.unit_weights
    treated = y_post[0].mean() - y_pre[0] @ lam
    controls = y_post[1:].mean(axis=1) - y_pre[1:] @ lam
    tau = float(treated - omega @ controls)

    tau_reg = _sdid_tau_regression(panel, ws)

    # Counterfactual: synthetic post path plus the lambda-weighted
    # pre-period level gap between treated and synthetic.
    synth_post = y_post[1:].T @ omega
    level_gap = y_pre[0] @ lam - (y_pre[1:].T @ omega) @ lam
    counterfactual = synth_post + level_gap
    pre_fit = y_pre[0] - (ws.unit_intercept + y_pre[1:].T @ omega)
    return EstimateResult(
        tau=tau,
        method=METHOD_SDID,
        weights=ws,
        pre_rmspe=float(np.sqrt(np.mean(pre_fit**2))),
        counterfactual=counterfactual,
        diagnostics={"tau_regression": tau_reg, "tau_gap": abs(tau - tau_reg)},
    )


def adjust_covariates(panel: BalancedPanel) -> BalancedPanel:
    """Residualize outcomes on cell covariates.

    Fits y on covariates plus unit and time dummies over every cell
    except the treated post block, then subtracts the covariate
    contribution X @ beta from all cells (treated included). Raises
    :class:`RankDeficientDesign` naming the collinear covariate
    columns when the fit is not identified.
    """
    if panel.covariates is None:
        raise ValueError("panel has no cell covariates to adjust for")
    n, t = panel.n_units, len(panel.times)
    k = panel.covariates.shape[2]
    post = panel.post_mask

    unit_idx = np.repeat(np.arange(n), t)
    time_idx = np.tile(np.arange(t), n)
    xcov = panel.covariates.reshape(n * t, k)
    dummies = [np.ones(n * t)]
    for j in range(1, n):
        dummies.append((unit_idx == j).astype(float))
    for s in range(1, t):
        dummies.append((time_idx == s).astype(float))
    fe = np.column_stack(dummies)
    x = np.column_stack([fe, xcov])

    treated_post = (unit_idx == 0) & np.tile(post, n)
    keep = ~treated_post
    xk, yk = x[keep], panel.y.ravel()[keep]

    rank_fe = np.linalg.matrix_rank(fe[keep])
    if np.linalg.matrix_rank(xk) < rank_fe + k:
        bad = []
        base = fe[keep]
        rank = rank_fe
        for c in range(k):
            cand = np.column_stack([base, xcov[keep, c]])
            r = np.linalg.matrix_rank(cand)
            if r == rank:
                bad.append(panel.covariate_names[c])
            else:
                base, rank = cand, r
        raise RankDeficientDesign(bad or panel.covariate_names)

    beta, *_ = np.linalg.lstsq(xk, yk, rcond=None)
    beta_cov = beta[-k:]
    y_adj = panel.y - (xcov @ beta_cov).reshape(n, t)
    return panel.with_outcomes(y_adj)


def bias_corrected_sc(
    panel: BalancedPanel,
    ridge_penalty: Optional[float] = None,
    tol: float = 1e-10,
) -> EstimateResult:
    """Synthetic control with a regression bias correction.

    For each post period t a ridge regression of control outcomes y_jt
    on the controls' pre-period outcome vectors estimates m_t; the
    corrected per-period effect is

        (y_1t - m_t(x_1)) - sum_j omega_j (y_jt - m_t(x_j)),

    with omega the plain synthetic-control weights and x_j unit j's
    pre-period outcome vector. ``ridge_penalty`` defaults to
    1e-6 * trace(Gram)/dim and may be set to 0 for exact fits; a
    singular solve falls back to a scaled-up penalty and flags
    ``diagnostics['ill_conditioned']``.
    """
    base = sc_estimate(panel, tol=tol)
    omega = base.weights.unit_weights

    y_pre, y_post = panel.split_pre_post()
    x_ctrl = y_pre[1:]                      # (N0, T_pre) predictor rows
    x_treated = y_pre[0]
    xbar = x_ctrl.mean(axis=0)
    xc = x_ctrl - xbar
    gram = xc.T @ xc
    if ridge_penalty is None:
        ridge_penalty = 1e-6 * float(np.trace(gram)) / gram.shape[0]

    ill = False

    def fit_period(y_t):
        nonlocal ill
        pen = ridge_penalty
        for attempt in range(8):
            try:
                if pen == 0.0:
                    coef, *_ = np.linalg.lstsq(xc, y_t - y_t.mean(), rcond=None)
                else:
                    coef = np.linalg.solve(
                        gram + pen * np.eye(gram.shape[0]), xc.T @ (y_t - y_t.mean())
                    )
                return float(y_t.mean()), coef
            except np.linalg.LinAlgError:
                ill = True
                pen = max(pen, 1e-12 * (1 + np.trace(gram))) * 10.0
        raise SolverFailure("bias-correction ridge solve kept failing")

    post_gaps = []
    for tcol in range(y_post.shape[1]):
        y_t = y_post[1:, tcol]
        mean, coef = fit_period(y_t)
        m_treated = mean + (x_treated - xbar) @ coef
        m_ctrl = mean + xc @ coef
        post_gaps.append(
            (y_post[0, tcol] - m_treated) - omega @ (y_post[1:, tcol] - m_ctrl)
        )
    post_gaps = np.array(post_gaps)

    pre_gaps = []
    for scol in range(y_pre.shape[1]):
        y_s = y_pre[1:, scol]
        mean, coef = fit_period(y_s)
        m_treated = mean + (x_treated - xbar) @ coef
        m_ctrl = mean + xc @ coef
        pre_gaps.append(
            (y_pre[0, scol] - m_treated) - omega @ (y_pre[1:, scol] - m_ctrl)
        )

    counterfactual = y_post[0] - post_gaps
    return EstimateResult(
        tau=float(post_gaps.mean()),
        method=METHOD_SC_BC,
        weights=base.weights,
        pre_rmspe=base.pre_rmspe,
        counterfactual=counterfactual,
        diagnostics={
            "per_period_tau": post_gaps,
            "pre_gaps": np.array(pre_gaps),
            "ridge_penalty": ridge_penalty,
            "ill_conditioned": ill,
        },
    )
