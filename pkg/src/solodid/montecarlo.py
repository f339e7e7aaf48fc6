"""Monte Carlo study of test size with a single treated cluster.

Panels are generated under a null DGP: a fixed base surface (unit and
time effects plus an individual covariate index, treatment effect zero)
with fresh cluster-level errors each replication,

    eps_jt = lambda_mix * eta_jt + (1 - lambda_mix) * e_jt,
    eta_jt = rho * eta_{j,t-1} + nu_jt,

eta started from its stationary distribution and nu, e standard normal.
Errors are added to cell means; micro-level noise enters only through
the base surface. Every requested inference method then runs on every
replication and the empirical rejection rate at the nominal level is
reported with its Monte Carlo standard error.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .estimators import did_estimate
from .inference import (
    cluster_residual_bootstrap,
    crve_se,
    mbb_tau_distribution,
    placebo_taus,
)
from .panel import BalancedPanel
from .rng import method_rng

REPORT_FORMAT_VERSION = 1

ALL_METHODS = (
    "crve",
    "crb",
    "mbb",
    "placebo-did-normal",
    "placebo-did-t",
    "placebo-sdid-normal",
    "placebo-sdid-t",
)


@dataclass
class DgpConfig:
    """One design point of the simulation study."""

    n_controls: int
    t: int
    t_pre: int
    rho: float
    lambda_mix: float = 0.95
    cell_size: int = 670
    replications: int = 500
    placebo_b: int = 100
    crb_b: int = 400
    mbb_b: int = 150
    seed: int = 0
    alpha: float = 0.05
    sigma_x: float = 3.0

    def __post_init__(self):
        if self.n_controls < 2:
            raise ValueError("need at least 2 control units")
        if not (2 <= self.t_pre < self.t):
            raise ValueError(
                f"need 2 <= t_pre < t, got t_pre={self.t_pre}, t={self.t}"
            )
        if not (0.0 <= self.rho < 1.0):
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError(f"lambda_mix must lie in [0, 1], got {self.lambda_mix}")
        if self.replications < 100:
            raise ValueError(f"need at least 100 replications, got {self.replications}")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("placebo_b", "crb_b", "mbb_b"):
            if getattr(self, name) < 50:
                raise ValueError(f"{name} must be >= 50")
        if self.crb_b < 200:
            raise ValueError("crb_b must be >= 200")
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be >= 0")

    @property
    def n_units(self) -> int:
        return self.n_controls + 1


@dataclass
class BaseSurface:
    """Fixed predicted outcomes, identical across replications."""

    alpha0: float
    gamma: np.ndarray                     # unit effects, length N
    delta: np.ndarray                     # time effects, length T
    cell_counts: np.ndarray               # (N, T) micro records per cell
    cell_values: List[List[np.ndarray]]   # individual predictions per cell
    cell_means: np.ndarray                # (N, T)


def build_base_surface(config: DgpConfig) -> BaseSurface:
    """Draw the fixed surface for one study (deterministic per seed).

    Unit effects are N(0, 0.5^2); time effects follow a linear drift of
    0.05 per period plus N(0, 0.1^2) noise; each cell gets a Poisson
    (``cell_size``) number of individuals whose covariate index is
    N(0, sigma_x^2) around the cell's structural mean. The treatment
    effect is zero by construction.
    """
    rng = method_rng(config.seed, "surface")
    n, t = config.n_units, config.t
    alpha0 = 27.0
    gamma = rng.normal(0.0, 0.5, size=n)
    delta = 0.05 * np.arange(t) + rng.normal(0.0, 0.1, size=t)
    counts = np.maximum(rng.poisson(config.cell_size, size=(n, t)), 1)

    values: List[List[np.ndarray]] = []
    means = np.empty((n, t))
    for j in range(n):
        row = []
        for s in range(t):
            base = alpha0 + gamma[j] + delta[s]
            cell = base + rng.normal(0.0, config.sigma_x, size=counts[j, s]) \
                if config.sigma_x > 0 else np.full(counts[j, s], base)
            row.append(cell)
            means[j, s] = cell.mean()
        values.append(row)
    return BaseSurface(
        alpha0=alpha0,
        gamma=gamma,
        delta=delta,
        cell_counts=counts,
        cell_values=values,
        cell_means=means,
    )


def draw_errors(config: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    """Cluster-level error matrix for one replication.

    eta_j0 is drawn from the stationary N(0, 1/(1-rho^2)); later
    periods follow the AR(1) recursion. The returned matrix is
    lambda_mix * eta + (1 - lambda_mix) * e with e white noise.
    """
    n, t = config.n_units, config.t
    rho = config.rho
    eta = np.empty((n, t))
    eta[:, 0] = rng.normal(0.0, 1.0 / np.sqrt(1.0 - rho**2), size=n)
    for s in range(1, t):
        eta[:, s] = rho * eta[:, s - 1] + rng.normal(size=n)
    e = rng.normal(size=(n, t))
    return config.lambda_mix * eta + (1.0 - config.lambda_mix) * e


def _panel_for(config: DgpConfig, surface: BaseSurface, eps: np.ndarray) -> BalancedPanel:
    units = [f"U{j:02d}" for j in range(config.n_units)]
    return BalancedPanel(
        units,
        np.arange(config.t),
        surface.cell_means + eps,
        treatment_start=config.t_pre,
        cell_counts=surface.cell_counts,
    )


def run_replication(
    config: DgpConfig,
    surface: BaseSurface,
    methods: Sequence[str],
    r: int,
):
    """Run every requested method on replication ``r``.

    Returns (rejects, failures): method tag -> bool, and method tag ->
    error message for methods that raised.
    """
    eps = draw_errors(config, method_rng(config.seed, "errors", r))
    panel = _panel_for(config, surface, eps)
    alpha = config.alpha
    rejects: Dict[str, bool] = {}
    failures: Dict[str, str] = {}

    def attempt(tags, fn):
        wanted = [tag for tag in tags if tag in methods]
        if not wanted:
            return
        try:
            out = fn()
        except Exception as exc:  # noqa: BLE001 - per-replication quarantine
            for tag in wanted:
                failures[tag] = f"{type(exc).__name__}: {exc}"
            return
        for tag in wanted:
            rejects[tag] = bool(out[tag] <= alpha)

    attempt(("crve",), lambda: {"crve": crve_se(panel).p_value})
    attempt(
        ("crb",),
        lambda: {
            "crb": cluster_residual_bootstrap(
                panel, B=config.crb_b, rng=method_rng(config.seed, "crb", r)
            ).p_value
        },
    )

    def run_mbb():
        tau_hat = did_estimate(panel).tau
        y_pre, y_post = panel.split_pre_post()
        contrasts = y_post.mean(axis=1) - y_pre.mean(axis=1)
        treated_cells = [
            (surface.cell_values[0][s] + eps[0, s], np.ones(surface.cell_counts[0, s]))
            for s in range(config.t)
        ]
        taus = mbb_tau_distribution(
            treated_cells,
            contrasts,
            ~panel.post_mask,
            config.mbb_b,
            method_rng(config.seed, "mbb", r),
        )
        se = float(np.std(taus, ddof=1))
        p = 1.0 if se == 0 else float(2.0 * stats.norm.sf(abs(tau_hat) / se))
        return {"mbb": p}

    attempt(("mbb",), run_mbb)

    def run_placebo(estimator, stream, tag_base):
        tau_hat, taus = placebo_taus(
            panel, estimator, B=config.placebo_b,
            rng=method_rng(config.seed, stream, r),
        )
        se = float(np.std(taus, ddof=1))
        if se == 0.0:
            p_n = p_t = 1.0 if tau_hat == 0.0 else 0.0
        else:
            z = abs(tau_hat) / se
            p_n = float(2.0 * stats.norm.sf(z))
            p_t = float(2.0 * stats.t.sf(z, df=panel.n_units - 2))
        return {f"{tag_base}-normal": p_n, f"{tag_base}-t": p_t}

    attempt(
        ("placebo-did-normal", "placebo-did-t"),
        lambda: run_placebo("did", "placebo_did", "placebo-did"),
    )
    attempt(
        ("placebo-sdid-normal", "placebo-sdid-t"),
        lambda: run_placebo("sdid", "placebo_sdid", "placebo-sdid"),
    )
    return rejects, failures


@dataclass
class RejectionReport:
    """Empirical rejection rates for one design point."""

    config: DgpConfig
    methods: List[str]
    rates: Dict[str, float]
    mc_se: Dict[str, float]
    effective_r: Dict[str, int]
    failures: Dict[str, int]
    runtime: float = 0.0

    def to_csv_text(self) -> str:
        lines = [
            f"# format_version={REPORT_FORMAT_VERSION}",
            "method,n0,t,tpre,rho,rate,mc_se,R,failures",
        ]
        c = self.config
        for m in self.methods:
            lines.append(
                f"{m},{c.n_controls},{c.t},{c.t_pre},{c.rho:g},"
                f"{self.rates[m]:.6f},{self.mc_se[m]:.6f},"
                f"{self.effective_r[m]},{self.failures[m]}"
            )
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        c = self.config
        head = (
            f"Rejection rates at nominal {c.alpha:g} "
            f"(N0={c.n_controls}, T={c.t}, T_pre={c.t_pre}, rho={c.rho:g}, "
            f"lambda={c.lambda_mix:g}, R={c.replications})"
        )
        width = max(len(m) for m in self.methods)
        lines = [head, "-" * len(head)]
        for m in self.methods:
            lines.append(
                f"{m:<{width}}  rate {self.rates[m]:6.3f}  "
                f"mc se {self.mc_se[m]:.4f}  R {self.effective_r[m]:5d}  "
                f"failures {self.failures[m]}"
            )
        return "\n".join(lines) + "\n"


def _checkpoint_path(out_dir: str) -> str:
    return os.path.join(out_dir, "checkpoint.jsonl")


def load_checkpoint(out_dir: str) -> Dict[int, dict]:
    """Read completed replications, tolerating a torn final line."""
    done: Dict[int, dict] = {}
    path = _checkpoint_path(out_dir)
    if not os.path.exists(path):
        return done
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                done[int(entry["replication"])] = entry
            except (ValueError, KeyError):
                continue
    return done


_WORKER_STATE: dict = {}


def _init_worker(config, surface, methods):
    _WORKER_STATE["args"] = (config, surface, methods)


def _worker_run(r: int):
    config, surface, methods = _WORKER_STATE["args"]
    rejects, failures = run_replication(config, surface, methods, r)
    return r, rejects, failures


def run_study(
    config: DgpConfig,
    methods: Optional[Sequence[str]] = None,
    out_dir: Optional[str] = None,
    workers: int = 1,
    resume: bool = False,
) -> RejectionReport:
    """Run the full study and assemble the rejection report.

    Replications are independent streams, so any worker count (and any
    interleaving of a resumed run) produces the identical report. With
    ``out_dir`` set, each completed replication is appended to
    ``checkpoint.jsonl``; ``resume`` skips replications already there.
    """
    methods = list(methods) if methods is not None else list(ALL_METHODS)
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}")
    started = time.monotonic()
    surface = build_base_surface(config)

    done: Dict[int, dict] = {}
    checkpoint = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if resume:
            done = load_checkpoint(out_dir)
        mode = "a" if resume else "w"
        checkpoint = open(_checkpoint_path(out_dir), mode, encoding="utf-8")

    todo = [r for r in range(config.replications) if r not in done]
    try:
        if workers > 1 and todo:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(
                max_workers=workers,
                initializer=_init_worker,
                initargs=(config, surface, methods),
            ) as pool:
                chunk = max(1, len(todo) // (workers * 8))
                for r, rejects, failures in pool.map(_worker_run, todo, chunksize=chunk):
                    entry = {
                        "format_version": REPORT_FORMAT_VERSION,
                        "replication": r,
                        "rejects": rejects,
                        "failures": failures,
                    }
                    done[r] = entry
                    if checkpoint is not None:
                        checkpoint.write(json.dumps(entry, sort_keys=True) + "\n")
                        checkpoint.flush()
        else:
            for r in todo:
                rejects, failures = run_replication(config, surface, methods, r)
                entry = {
                    "format_version": REPORT_FORMAT_VERSION,
                    "replication": r,
                    "rejects": rejects,
                    "failures": failures,
                }
                done[r] = entry
                if checkpoint is not None:
                    checkpoint.write(json.dumps(entry, sort_keys=True) + "\n")
                    checkpoint.flush()
    finally:
        if checkpoint is not None:
            checkpoint.close()

    rates: Dict[str, float] = {}
    mc_se: Dict[str, float] = {}
    effective: Dict[str, int] = {}
    fail_count: Dict[str, int] = {}
    for m in methods:
        n_reject = 0
        n_ok = 0
        n_fail = 0
        for r in range(config.replications):
            entry = done[r]
            if m in entry["rejects"]:
                n_ok += 1
                n_reject += int(bool(entry["rejects"][m]))
            elif m in entry["failures"]:
                n_fail += 1
        rate = n_reject / n_ok if n_ok else float("nan")
        rates[m] = rate
        mc_se[m] = float(np.sqrt(rate * (1 - rate) / n_ok)) if n_ok else float("nan")
        effective[m] = n_ok
        fail_count[m] = n_fail

    report = RejectionReport(
        config=config,
        methods=methods,
        rates=rates,
        mc_se=mc_se,
        effective_r=effective,
        failures=fail_count,
        runtime=time.monotonic() - started,
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv_text())
        with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.to_table_text())
    return report
