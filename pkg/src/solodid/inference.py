"""Inference procedures for a single treated cluster.

Six strategies attach standard errors and p-values to panel estimates:
cluster-robust variance (CRVE), placebo reassignment with a normal or
t(N-2) reference, a cluster residual bootstrap (CRB), a modified block
bootstrap on micro records (MBB), the RMSPE ratio rank test, and the
rearrangement test with its heteroskedasticity robustness measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .errors import (
    EmptyResampledCell,
    SingularGram,
    TooFewControls,
)
from .estimators import (
    METHOD_DID,
    METHOD_SC,
    METHOD_SC_BC,
    METHOD_SDID,
    bias_corrected_sc,
    did_estimate,
    sc_estimate,
    sdid_estimate,
)
from .panel import BalancedPanel, MicroRecord
from .rng import method_rng

INFER_CRVE = "crve"
INFER_PLACEBO_NORMAL = "placebo-normal"
INFER_PLACEBO_T = "placebo-t"
INFER_CRB = "crb"
INFER_MBB = "mbb"
INFER_RMSPE = "rmspe-ratio"
INFER_REARRANGEMENT = "rearrangement"


@dataclass
class InferenceResult:
    se: Optional[float]
    p_value: float
    method: str
    replications: int = 0
    null_distribution: Optional[np.ndarray] = field(default=None, repr=False)
    extras: Dict = field(default_factory=dict)


@dataclass
class RearrangementFit:
    """Per-unit post-period coefficients and robustness margins.

    ``betas`` holds each unit's own pre/post contrast (treated first);
    ``rho_alpha`` maps a level alpha to the largest factor by which the
    control dispersion can be inflated with the rank test still
    rejecting at that level.
    """

    betas: np.ndarray
    treated_beta: float
    rho_alpha: Dict[float, float]
    base_p: float
    extras: Dict = field(default_factory=dict)


_ESTIMATORS: Dict[str, Callable[[BalancedPanel], object]] = {
    METHOD_DID: did_estimate,
    METHOD_SC: sc_estimate,
    METHOD_SDID: sdid_estimate,
    METHOD_SC_BC: bias_corrected_sc,
}


def _resolve_estimator(estimator):
    if callable(estimator):
        return estimator, getattr(estimator, "__name__", "custom")
    if estimator not in _ESTIMATORS:
        raise ValueError(f"unknown estimator tag {estimator!r}")
    return _ESTIMATORS[estimator], estimator


def _reorder_panel(panel: BalancedPanel, treated_pos: int, drop: Optional[int] = None) -> BalancedPanel:
    """New panel with row ``treated_pos`` first, optionally dropping a row."""
    order = [treated_pos] + [
        i for i in range(panel.n_units) if i != treated_pos and i != drop
    ]
    return BalancedPanel(
        [panel.units[i] for i in order],
        panel.times,
        panel.y[order],
        panel.treatment_start,
        cell_counts=None if panel.cell_counts is None else panel.cell_counts[order],
        covariates=None if panel.covariates is None else panel.covariates[order],
        covariate_names=panel.covariate_names,
    )


# ---------------------------------------------------------------------------
# CRVE
# ---------------------------------------------------------------------------

def _twoway_design(panel: BalancedPanel):
    """Dummy design for y_jt = mu + alpha_j + beta_t + tau D_jt."""
    n, t = panel.n_units, len(panel.times)
    unit_idx = np.repeat(np.arange(n), t)
    time_idx = np.tile(np.arange(t), n)
    cols = [np.ones(n * t)]
    for j in range(1, n):
        cols.append((unit_idx == j).astype(float))
    for s in range(1, t):
        cols.append((time_idx == s).astype(float))
    d = np.zeros((n, t))
    d[0, panel.post_mask] = 1.0
    cols.append(d.ravel())
    return np.column_stack(cols), panel.y.ravel(), unit_idx


def crve_se(panel: BalancedPanel) -> InferenceResult:
    """Cluster-robust sandwich inference on the two-way FE regression.

    Clusters are units. Applies the usual small-sample scaling
    G/(G-1) * (n-1)/(n-k) and refers t = tau/se to a t distribution
    with N-1 degrees of freedom. Known to over-reject badly with one
    treated cluster; provided as the benchmark everything else is
    judged against.
    """
    x, y, unit_idx = _twoway_design(panel)
    n_obs, k = x.shape
    xtx = x.T @ x
    if np.linalg.cond(xtx) > 1e12:
        raise SingularGram("two-way design Gram matrix is singular")
    xtx_inv = np.linalg.inv(xtx)
    beta = xtx_inv @ (x.T @ y)
    resid = y - x @ beta

    g = panel.n_units
    meat = np.zeros((k, k))
    for j in range(g):
        rows = unit_idx == j
        score = x[rows].T @ resid[rows]
        meat += np.outer(score, score)
    scale = (g / (g - 1.0)) * ((n_obs - 1.0) / (n_obs - k))
    vcov = scale * xtx_inv @ meat @ xtx_inv

    tau = float(beta[-1])
    se = float(np.sqrt(vcov[-1, -1]))
    dof = g - 1
    tstat = tau / se if se > 0 else np.inf
    p = float(2.0 * stats.t.sf(abs(tstat), df=dof))
    return InferenceResult(
        se=se,
        p_value=p,
        method=INFER_CRVE,
        extras={"tau": tau, "dof": dof, "t": tstat},
    )


# ---------------------------------------------------------------------------
# Placebo reassignment
# ---------------------------------------------------------------------------

def placebo_taus(
    panel: BalancedPanel,
    estimator: Union[str, Callable] = METHOD_DID,
    B: int = 200,
    rng: Optional[np.random.Generator] = None,
    seed: int = 0,
):
    """Placebo effect draws: a random control takes the treatment.

    Each of the B iterations samples a control uniformly with
    replacement, removes the true treated unit, marks the sampled
    control treated, and re-estimates. Re-estimation is cached per
    distinct control, so at most N0 panel fits happen regardless of B.

    Returns (tau_hat, taus) with ``tau_hat`` the estimate on the
    original panel.
    """
    fn, tag = _resolve_estimator(estimator)
    n0 = panel.n_controls
    if n0 < 3:
        raise TooFewControls(
            f"placebo reassignment needs at least 3 controls, got {n0}"
        )
    if rng is None:
        stream = {
            METHOD_DID: "placebo_did",
            METHOD_SDID: "placebo_sdid",
            METHOD_SC: "placebo_sc",
        }.get(tag, "placebo_did")
        rng = method_rng(seed, stream)

    tau_hat = fn(panel).tau
    draws = rng.integers(0, n0, size=B)
    cache: Dict[int, float] = {}
    for pos in np.unique(draws):
        placebo = _reorder_panel(panel, int(pos) + 1, drop=0)
        cache[int(pos)] = fn(placebo).tau
    taus = np.array([cache[int(pos)] for pos in draws])
    return tau_hat, taus


def placebo_inference(
    panel: BalancedPanel,
    estimator: Union[str, Callable] = METHOD_DID,
    B: int = 200,
    df_mode: str = "normal",
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> InferenceResult:
    """Placebo-based standard error with a normal or t(N-2) reference.

    The SE is the standard deviation of the placebo effects;
    ``df_mode`` picks the reference distribution for tau/SE ("normal"
    or "t" for the finite-sample correction). Switching df_mode changes
    only the p-value.
    """
    if df_mode not in ("normal", "t"):
        raise ValueError(f"df_mode must be 'normal' or 't', got {df_mode!r}")
    if B < 50:
        raise ValueError(f"placebo inference needs B >= 50, got {B}")
    tau_hat, taus = placebo_taus(panel, estimator, B=B, rng=rng, seed=seed)
    se = float(np.std(taus, ddof=1))
    extras = {"tau": tau_hat}
    if se == 0.0:
        extras["degenerate"] = True
        p = 1.0 if tau_hat == 0.0 else 0.0
    else:
        z = abs(tau_hat) / se
        if df_mode == "normal":
            p = float(2.0 * stats.norm.sf(z))
        else:
            p = float(2.0 * stats.t.sf(z, df=panel.n_units - 2))
    return InferenceResult(
        se=se,
        p_value=p,
        method=INFER_PLACEBO_NORMAL if df_mode == "normal" else INFER_PLACEBO_T,
        replications=B,
        null_distribution=taus,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# Cluster residual bootstrap
# ---------------------------------------------------------------------------

def _unit_contrasts(panel: BalancedPanel):
    """Per-unit post-mean minus pre-mean of outcomes."""
    y_pre, y_post = panel.split_pre_post()
    return y_post.mean(axis=1) - y_pre.mean(axis=1)


def cluster_residual_bootstrap(
    panel: BalancedPanel,
    B: int = 1000,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> InferenceResult:
    """Bootstrap of residual contrasts, rescaled for cluster size.

    Under the two-way FE model with the treatment effect imposed at
    zero, each unit's residual post-minus-pre contrast is
    W_j = C_j - mean(C) with C_j the raw contrast, and the DiD estimate
    is exactly tau = (N/N0) * W_treated. All N contrasts are
    null-consistent under the imposed model, so they form the reference
    pool: a variance law Var(W) = A + B_coef/M_j is fitted across
    controls (M_j = mean cell count), every contrast is rescaled to the
    treated unit's fitted variance (the treated's own factor is one by
    construction), and the null distribution is B single draws from the
    pool mapped through the same (N/N0) factor. The p-value is the
    two-sided placement of the observed tau among the draws, with the
    observed value counted in the reference set. Keeping the treated
    contrast in the pool makes the test conservative when N is small
    and approximately nominal as N grows.

    A non-positive fitted variance disables the rescaling (fallback to
    raw contrasts, ``extras['unscaled_fallback']`` set).
    """
    if panel.cell_counts is None:
        raise ValueError("cluster residual bootstrap needs cell_counts")
    if B < 200:
        raise ValueError(f"cluster residual bootstrap needs B >= 200, got {B}")
    if rng is None:
        rng = method_rng(seed, "crb")

    n = panel.n_units
    n0 = panel.n_controls
    contrasts = _unit_contrasts(panel)
    w = contrasts - contrasts.mean()
    tau_hat = (n / n0) * w[0]

    m = panel.cell_counts.mean(axis=1).astype(float)
    design = np.column_stack([np.ones(n0), 1.0 / m[1:]])
    coef, *_ = np.linalg.lstsq(design, w[1:] ** 2, rcond=None)
    fitted = coef[0] + coef[1] / m
    fallback = bool(np.any(fitted <= 0))
    if fallback:
        pool = w.copy()
    else:
        pool = w * np.sqrt(fitted[0] / fitted)

    null = (n / n0) * pool[rng.integers(0, n, size=B)]

    exceed = int(np.count_nonzero(np.abs(null) >= abs(tau_hat)))
    p = (1.0 + exceed) / (B + 1.0)
    return InferenceResult(
        se=float(np.std(null, ddof=1)),
        p_value=float(p),
        method=INFER_CRB,
        replications=B,
        null_distribution=null,
        extras={
            "tau": float(tau_hat),
            "variance_law": (float(coef[0]), float(coef[1])),
            "unscaled_fallback": fallback,
        },
    )


# ---------------------------------------------------------------------------
# Modified block bootstrap
# ---------------------------------------------------------------------------

def _weighted_mean(y, w):
    return float(np.dot(w, y) / w.sum())


def mbb_tau_distribution(
    treated_cells: Sequence,
    contrasts: np.ndarray,
    pre_mask: np.ndarray,
    B: int,
    rng: np.random.Generator,
    max_retries: int = 1000,
):
    """Core of the modified block bootstrap, on prebuilt cell arrays.

    ``treated_cells`` is a per-period sequence of (y, w) arrays holding
    the treated unit's micro records; ``contrasts`` the per-unit
    post/pre contrast of the aggregated panel (treated first). Each
    iteration draws N unit blocks with replacement; iterations without
    the treated block are redrawn (bounded by ``max_retries``). Treated
    copies get their individuals resampled within every cell; control
    blocks enter as their original aggregated series.
    """
    n = contrasts.shape[0]
    post = ~pre_mask
    t_pre = int(pre_mask.sum())
    t_post = int(post.sum())
    taus = np.empty(B)
    for b in range(B):
        for attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            if np.any(idx == 0):
                break
        else:
            raise EmptyResampledCell(
                f"treated block absent in {max_retries} consecutive draws"
            )
        n_treated = int(np.count_nonzero(idx == 0))
        treated_contrast = 0.0
        for _copy in range(n_treated):
            means = np.empty(len(treated_cells))
            for t, (y, wt) in enumerate(treated_cells):
                take = rng.integers(0, y.size, size=y.size)
                means[t] = _weighted_mean(y[take], wt[take])
            treated_contrast += means[post].sum() / t_post - means[pre_mask].sum() / t_pre
        treated_contrast /= n_treated
        ctrl_draws = contrasts[idx[idx != 0]]
        taus[b] = treated_contrast - ctrl_draws.mean()
    return taus


def modified_block_bootstrap(
    records: Sequence[MicroRecord],
    treated_unit: str,
    treatment_start: int,
    B: int = 300,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
    max_retries: int = 1000,
) -> InferenceResult:
    """Two-stage block bootstrap on micro records.

    Stage one resamples unit blocks with replacement (redrawing when
    the treated block is absent); stage two resamples individuals
    within each treated cluster-year cell, keeping sampling weights.
    Cells are re-aggregated, DiD re-estimated; the SE is the standard
    deviation of the bootstrap effects and the p-value refers
    tau/SE to a standard normal.
    """
    from .panel import aggregate_micro

    if B < 200:
        raise ValueError(f"modified block bootstrap needs B >= 200, got {B}")
    if rng is None:
        rng = method_rng(seed, "mbb")

    panel = aggregate_micro(records, treated_unit, treatment_start)
    tau_hat = did_estimate(panel).tau
    contrasts = _unit_contrasts(panel)

    by_cell: Dict[int, list] = {}
    for rec in records:
        if rec.unit == panel.treated_unit:
            by_cell.setdefault(rec.time, []).append(rec)
    treated_cells = []
    for t in panel.times:
        recs = by_cell[int(t)]
        treated_cells.append(
            (np.array([r.outcome for r in recs]), np.array([r.weight for r in recs]))
        )

    taus = mbb_tau_distribution(
        treated_cells, contrasts, ~panel.post_mask, B, rng, max_retries=max_retries
    )
    se = float(np.std(taus, ddof=1))
    if se == 0.0:
        p = 1.0 if tau_hat == 0.0 else 0.0
        extras = {"tau": tau_hat, "degenerate": True}
    else:
        p = float(2.0 * stats.norm.sf(abs(tau_hat) / se))
        extras = {"tau": tau_hat}
    return InferenceResult(
        se=se,
        p_value=p,
        method=INFER_MBB,
        replications=B,
        null_distribution=taus,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# RMSPE ratio rank test
# ---------------------------------------------------------------------------

def rmspe_ratio_test(
    panel: BalancedPanel,
    estimator: Union[str, Callable] = METHOD_SC,
) -> InferenceResult:
    """Exact rank test on post- over pre-period RMSPE ratios.

    The estimator is refit with every unit taking its turn as treated
    (all other units as donors). The p-value is the treated unit's
    placement rank divided by N, so the largest ratio gives 1/N; tied
    ratios take the midrank. A perfect pre-period fit makes the ratio
    infinite; such units are ranked first and flagged in
    ``extras['zero_pre']``.
    """
    fn, _tag = _resolve_estimator(estimator)
    n = panel.n_units
    ratios = np.empty(n)
    zero_pre = []
    for u in range(n):
        sub = panel if u == 0 else _reorder_panel(panel, u)
        est = fn(sub)
        y_post = sub.split_pre_post()[1]
        post_rmspe = float(np.sqrt(np.mean((y_post[0] - est.counterfactual) ** 2)))
        if est.pre_rmspe == 0.0:
            ratios[u] = np.inf
            zero_pre.append(panel.units[u])
        else:
            ratios[u] = post_rmspe / est.pre_rmspe

    treated = ratios[0]
    greater = int(np.count_nonzero(ratios > treated))
    ties = int(np.count_nonzero(ratios == treated))
    rank = greater + (ties + 1) / 2.0
    p = rank / n

    # Deterministic presentation order: ratio descending, ties broken
    # by placing the lowest unit index last.
    order = sorted(range(n), key=lambda i: (ratios[i], i))[::-1]
    return InferenceResult(
        se=None,
        p_value=float(p),
        method=INFER_RMSPE,
        replications=n,
        null_distribution=ratios,
        extras={"order": order, "zero_pre": zero_pre, "rank": rank},
    )


# ---------------------------------------------------------------------------
# Rearrangement test
# ---------------------------------------------------------------------------

def rearrangement_test(
    panel: BalancedPanel,
    alphas: Sequence[float] = (0.05, 0.10),
    max_inflation: float = 100.0,
    resolution: float = 0.01,
) -> RearrangementFit:
    """Rank test on per-unit post coefficients with robustness margins.

    Each unit's own OLS of outcome on a post indicator gives
    beta_j = post mean - pre mean. The base p-value is the placebo
    rank of |beta_treated| among all |beta_j|. For each alpha,
    rho_alpha is the largest inflation factor s >= 1 (grid-searched at
    ``resolution``) such that spreading the control betas around their
    mean by s still leaves the test rejecting at level alpha; 1.0 means
    no robustness margin. The search is capped at ``max_inflation``
    (``extras['capped']`` lists affected levels).
    """
    betas = _unit_contrasts(panel)
    treated = float(betas[0])
    n = panel.n_units
    base_p = float(np.count_nonzero(np.abs(betas) >= abs(treated)) / n)

    ctrl = betas[1:]
    center = ctrl.mean()
    grid = np.arange(1.0, max_inflation + resolution / 2, resolution)
    inflated = center + grid[:, None] * (ctrl - center)[None, :]
    counts = np.count_nonzero(np.abs(inflated) >= abs(treated), axis=1)
    p_grid = (1 + counts) / n

    rho: Dict[float, float] = {}
    capped = []
    for alpha in alphas:
        if base_p > alpha:
            rho[alpha] = 1.0
            continue
        rejecting = p_grid <= alpha
        if not rejecting.any():
            rho[alpha] = 1.0
            continue
        s = float(grid[np.nonzero(rejecting)[0][-1]])
        if rejecting[-1]:
            capped.append(alpha)
        rho[alpha] = round(s, 10)
    return RearrangementFit(
        betas=betas,
        treated_beta=treated,
        rho_alpha=rho,
        base_p=base_p,
        extras={"capped": capped},
    )
