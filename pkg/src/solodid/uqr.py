"""Unconditional quantile regression via recentered influence functions.

The influence function of the kappa-quantile q is
(kappa - 1{y <= q}) / f(q); adding q back recenters it so its mean is
the quantile itself. Regressing the recentered values on the policy
indicator plus unit and time dummies (and covariates) yields the
unconditional quantile treatment effect, here with cluster bootstrap,
cluster-robust, or HC2 standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import DegenerateDensity, RankDeficientDesign, TooFewControls
from .panel import MicroRecord
from .rng import method_rng

SE_BOOTSTRAP = "bootstrap"
SE_CRVE = "crve"
SE_HC2 = "hc2"


@dataclass
class RifSpec:
    """Ingredients of one recentered influence function."""

    kappa: float
    quantile: float
    density: float
    bandwidth: float


@dataclass
class QuantileEffectCurve:
    """Treatment effects across a quantile grid."""

    grid: np.ndarray
    tau: np.ndarray
    se: np.ndarray
    se_mode: str
    extras: Dict = field(default_factory=dict)


def _silverman_bandwidth(y: np.ndarray) -> float:
    n = y.size
    sd = float(np.std(y, ddof=1))
    iqr = float(np.subtract(*np.percentile(y, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        spread = max(abs(float(np.mean(y))), 1.0)
    return 0.9 * spread * n ** (-0.2)


def _gaussian_density_at(y: np.ndarray, point: float, bandwidth: float) -> float:
    z = (point - y) / bandwidth
    return float(np.mean(np.exp(-0.5 * z * z)) / (bandwidth * np.sqrt(2.0 * np.pi)))


def rif_transform(
    y: Sequence[float],
    kappa: float,
    bandwidth: Optional[float] = None,
) -> Tuple[RifSpec, np.ndarray]:
    """Recentered influence function of the kappa-quantile.

    The quantile uses linear interpolation on the order statistics; the
    density is a Gaussian kernel estimate at the quantile with a
    Silverman rule-of-thumb bandwidth unless one is supplied.

    Returns (spec, transformed sample) where each transformed value is
    q + (kappa - 1{y_i <= q}) / f(q).
    """
    y = np.asarray(y, dtype=float)
    if y.size < 30:
        raise ValueError(f"need at least 30 observations, got {y.size}")
    if not (0.0 < kappa < 1.0):
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    q = float(np.quantile(y, kappa))
    h = float(bandwidth) if bandwidth is not None else _silverman_bandwidth(y)
    if not (h > 0):
        raise ValueError(f"bandwidth must be positive, got {h}")
    f = _gaussian_density_at(y, q, h)
    if f < 1e-12:
        raise DegenerateDensity(
            f"estimated density {f:.2e} at the {kappa}-quantile; "
            "widen the bandwidth"
        )
    rif = q + (kappa - (y <= q)) / f
    return RifSpec(kappa=kappa, quantile=q, density=f, bandwidth=h), rif


def _micro_arrays(records: Sequence[MicroRecord], treated_unit: str, treatment_start: int):
    units = []
    seen = {}
    for rec in records:
        if rec.unit not in seen:
            seen[rec.unit] = len(units)
            units.append(rec.unit)
    if treated_unit not in seen:
        raise ValueError(f"treated unit {treated_unit!r} not in the records")
    times = sorted({rec.time for rec in records})
    time_pos = {t: i for i, t in enumerate(times)}
    cov_names = sorted({name for rec in records for name in rec.covariates})

    n = len(records)
    y = np.empty(n)
    w = np.empty(n)
    uidx = np.empty(n, dtype=int)
    tidx = np.empty(n, dtype=int)
    xcov = np.zeros((n, len(cov_names)))
    for i, rec in enumerate(records):
        y[i] = rec.outcome
        w[i] = rec.weight
        uidx[i] = seen[rec.unit]
        tidx[i] = time_pos[rec.time]
        for c, name in enumerate(cov_names):
            xcov[i, c] = rec.covariates.get(name, 0.0)
    treated_idx = seen[treated_unit]
    post = np.array([t >= treatment_start for t in times])
    d = (uidx == treated_idx) & post[tidx]
    return {
        "y": y,
        "w": w,
        "unit": uidx,
        "time": tidx,
        "x": xcov,
        "d": d.astype(float),
        "n_units": len(units),
        "n_times": len(times),
        "treated_idx": treated_idx,
        "cov_names": cov_names,
    }


def _dummy_design(unit, time, n_units, n_times, d, x):
    cols = [np.ones(unit.size)]
    for j in range(1, n_units):
        cols.append((unit == j).astype(float))
    for s in range(1, n_times):
        cols.append((time == s).astype(float))
    if x.shape[1]:
        cols.append(x)
    cols.append(d[:, None] if d.ndim == 1 else d)
    return np.column_stack(cols)


def _wls(xmat, y, w):
    sw = np.sqrt(w)
    xw = xmat * sw[:, None]
    yw = y * sw
    beta, _res, rank, _sv = np.linalg.lstsq(xw, yw, rcond=None)
    return beta, rank


def _fit_rif_did(arr, kappa, bandwidth):
    _spec, rif = rif_transform(arr["y"], kappa, bandwidth=bandwidth)
    xmat = _dummy_design(
        arr["unit"], arr["time"], arr["n_units"], arr["n_times"], arr["d"], arr["x"]
    )
    beta, rank = _wls(xmat, rif, arr["w"])
    if rank < xmat.shape[1]:
        raise RankDeficientDesign(arr["cov_names"] or ["<dummies>"])
    return float(beta[-1]), _spec, xmat, rif, beta


def uqr_did(
    records: Sequence[MicroRecord],
    treated_unit: str,
    treatment_start: int,
    kappa: float,
    se_mode: str = SE_BOOTSTRAP,
    B: int = 50,
    bandwidth: Optional[float] = None,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """Quantile treatment effect at one kappa, with a standard error.

    Fits weighted least squares of the recentered influence function on
    the policy indicator, unit dummies, time dummies, and any record
    covariates. ``se_mode`` picks the standard error: "bootstrap"
    resamples unit clusters with replacement (redrawing when the
    treated unit is absent) and recomputes the RIF on every resample;
    "crve" is the cluster-robust sandwich; "hc2" the leverage-adjusted
    heteroskedasticity-consistent estimate.
    """
    arr = _micro_arrays(records, treated_unit, treatment_start)
    tau, _spec, xmat, rif, beta = _fit_rif_did(arr, kappa, bandwidth)

    if se_mode == SE_BOOTSTRAP:
        se = _bootstrap_se(arr, kappa, bandwidth, B, rng or method_rng(seed, "uqr_bootstrap"))
    elif se_mode == SE_CRVE:
        se = _cluster_se(xmat, rif, arr["w"], beta, arr["unit"])
    elif se_mode == SE_HC2:
        se = _hc2_se(xmat, rif, arr["w"], beta)
    else:
        raise ValueError(f"unknown se_mode {se_mode!r}")
    return tau, se


def _cluster_se(xmat, y, w, beta, cluster) -> float:
    sw = np.sqrt(w)
    xw = xmat * sw[:, None]
    resid = (y - xmat @ beta) * sw
    xtx_inv = np.linalg.pinv(xw.T @ xw)
    g = int(cluster.max()) + 1
    meat = np.zeros((xmat.shape[1], xmat.shape[1]))
    for j in range(g):
        rows = cluster == j
        score = xw[rows].T @ resid[rows]
        meat += np.outer(score, score)
    n, k = xmat.shape
    scale = (g / (g - 1.0)) * ((n - 1.0) / (n - k))
    vcov = scale * xtx_inv @ meat @ xtx_inv
    return float(np.sqrt(vcov[-1, -1]))


def _hc2_se(xmat, y, w, beta) -> float:
    sw = np.sqrt(w)
    xw = xmat * sw[:, None]
    resid = (y - xmat @ beta) * sw
    xtx_inv = np.linalg.pinv(xw.T @ xw)
    lev = np.einsum("ij,jk,ik->i", xw, xtx_inv, xw)
    lev = np.clip(lev, None, 1.0 - 1e-10)
    u2 = resid**2 / (1.0 - lev)
    meat = xw.T @ (xw * u2[:, None])
    vcov = xtx_inv @ meat @ xtx_inv
    return float(np.sqrt(vcov[-1, -1]))


def _bootstrap_se(arr, kappa, bandwidth, B, rng, max_retries: int = 1000) -> float:
    """Two-stage cluster bootstrap of the RIF regression coefficient.

    Units are resampled with replacement; resampled copies of a unit
    get distinct pseudo-cluster dummies so the design keeps full rank.
    Copies of the treated unit additionally re-draw individuals within
    each cluster-year cell (the same second stage the block bootstrap
    uses), since the single treated cluster otherwise contributes no
    sampling variance. The RIF transform is recomputed on each
    resample.
    """
    n_units = arr["n_units"]
    treated_idx = arr["treated_idx"]
    rows_of = [np.nonzero(arr["unit"] == j)[0] for j in range(n_units)]
    treated_rows = rows_of[treated_idx]
    treated_cells = [
        treated_rows[arr["time"][treated_rows] == t]
        for t in range(arr["n_times"])
    ]
    treated_cells = [c for c in treated_cells if c.size]
    taus = np.empty(B)
    for b in range(B):
        for _ in range(max_retries + 1):
            pick = rng.integers(0, n_units, size=n_units)
            if np.any(pick == treated_idx):
                break
        else:
            raise TooFewControls(
                f"treated cluster absent in {max_retries} consecutive resamples"
            )
        picked_rows = []
        for j in pick:
            if j == treated_idx:
                picked_rows.append(np.concatenate([
                    rng.choice(c, size=c.size, replace=True)
                    for c in treated_cells
                ]))
            else:
                picked_rows.append(rows_of[j])
        rows = np.concatenate(picked_rows)
        pseudo = np.repeat(np.arange(n_units), [r.size for r in picked_rows])
        y = arr["y"][rows]
        d_unit = arr["unit"][rows] == treated_idx
        time = arr["time"][rows]
        post_by_time = np.zeros(arr["n_times"], dtype=bool)
        # Recover post periods from any treated row of the original data.
        post_by_time[np.unique(arr["time"][arr["d"] > 0])] = True
        d = (d_unit & post_by_time[time]).astype(float)
        sub = {
            "y": y,
            "w": arr["w"][rows],
            "unit": pseudo,
            "time": time,
            "x": arr["x"][rows],
            "d": d,
            "n_units": n_units,
            "n_times": arr["n_times"],
            "cov_names": arr["cov_names"],
        }
        taus[b], *_ = _fit_rif_did(sub, kappa, bandwidth)
    return float(np.std(taus, ddof=1))


def quantile_effect_curve(
    records: Sequence[MicroRecord],
    treated_unit: str,
    treatment_start: int,
    grid: Sequence[float],
    grid_is_threshold: bool = False,
    se_mode: str = SE_BOOTSTRAP,
    B: int = 50,
    bandwidth: Optional[float] = None,
    seed: int = 0,
) -> QuantileEffectCurve:
    """Quantile effects over a grid of kappas or outcome thresholds.

    With ``grid_is_threshold`` the grid is interpreted as outcome
    values and mapped to kappas through the pooled empirical CDF;
    points falling outside (0, 1) after mapping are rejected.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")

    kappas = grid
    thresholds = None
    if grid_is_threshold:
        y_all = np.array([r.outcome for r in records], dtype=float)
        kappas = np.array([float(np.mean(y_all <= v)) for v in grid])
        thresholds = grid
        if np.any((kappas <= 0) | (kappas >= 1)):
            raise ValueError("threshold grid maps outside the observed outcome range")

    taus = np.empty(kappas.size)
    ses = np.empty(kappas.size)
    for i, kap in enumerate(kappas):
        taus[i], ses[i] = uqr_did(
            records,
            treated_unit,
            treatment_start,
            float(kap),
            se_mode=se_mode,
            B=B,
            bandwidth=bandwidth,
            seed=seed,
        )
    extras = {"kappas": kappas}
    if thresholds is not None:
        extras["thresholds"] = thresholds
    return QuantileEffectCurve(grid=grid, tau=taus, se=ses, se_mode=se_mode, extras=extras)
