"""Command-line front door.

Subcommands:

* ``aggregate``      micro CSV -> balanced panel CSV of weighted cell means
* ``estimate``       panel CSV -> JSON (method x inference)
* ``estimate-micro`` micro CSV -> JSON via the block bootstrap
* ``simulate``       config file -> rejection-rate report directory
* ``uqr``            micro CSV -> quantile treatment effect curve CSV

Exit codes: 0 success, 2 I/O, 3 validation, 4 incompatible flags,
5 solver failure, 6 config parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    IncompatibleFlags,
    NoConvergence,
    NonFiniteInput,
    PanelError,
    RankDeficientDesign,
    SolodidError,
    SolverFailure,
    TooFewControls,
)
from .estimators import (
    METHOD_DID,
    METHOD_SC,
    METHOD_SC_BC,
    METHOD_SDID,
    adjust_covariates,
    bias_corrected_sc,
    did_estimate,
    sc_estimate,
    sdid_estimate,
)
from .inference import (
    cluster_residual_bootstrap,
    crve_se,
    modified_block_bootstrap,
    placebo_inference,
    rearrangement_test,
    rmspe_ratio_test,
)
from .manifest import RunManifest, sha256_file, sha256_text
from .montecarlo import ALL_METHODS, DgpConfig, run_study
from .panel import (
    BalancedPanel,
    aggregate_micro,
    read_micro_csv,
    read_panel_csv,
    write_panel_csv,
)
from .rng import method_rng
from .uqr import quantile_effect_curve

JSON_FORMAT_VERSION = 1

_INFERENCE_CHOICES = ("crve", "placebo", "placebo-t", "crb", "rmspe", "rearrangement")
_METHOD_CHOICES = (METHOD_DID, METHOD_SC, METHOD_SDID, METHOD_SC_BC)

_ESTIMATORS = {
    METHOD_DID: did_estimate,
    METHOD_SC: sc_estimate,
    METHOD_SDID: sdid_estimate,
    METHOD_SC_BC: bias_corrected_sc,
}


def _parse_time(text: str):
    """Interpret a time flag the same way pandas reads the column."""
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _seed_or_warn(args) -> int:
    if args.seed is None:
        print("warning: --seed not given, defaulting to 0", file=sys.stderr)
        return 0
    return args.seed


def _manifest_dict(command: Sequence[str], inputs: Dict[str, str], seed: int,
                   started: float, config_hash: str = "") -> dict:
    manifest = RunManifest(
        command=list(command),
        config_hash=config_hash,
        input_digests={p: sha256_file(p) for p in inputs.values()},
        seed=seed,
        version=__version__,
        wall_time_s=time.monotonic() - started,
    )
    return json.loads(manifest.to_json())


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------

def _trim_records(records, fraction: float):
    """Drop the extreme ``fraction`` of outcomes per cell, half per tail."""
    if fraction == 0.0:
        return records
    cells: Dict[Tuple, List] = {}
    for rec in records:
        cells.setdefault((rec.unit, rec.time), []).append(rec)
    kept = []
    for group in cells.values():
        group.sort(key=lambda rec: rec.outcome)
        k = int(len(group) * fraction / 2.0)
        kept.extend(group[k:len(group) - k] if k else group)
    return kept


def cmd_aggregate(args) -> int:
    records, _ = read_micro_csv(args.input)
    started = time.monotonic()
    records = _trim_records(records, args.trim)
    panel = aggregate_micro(records, args.treated, _parse_time(args.treatment_start))
    write_panel_csv(panel, args.out)
    manifest = _manifest_dict(
        ["aggregate", args.input], {"input": args.input}, seed=0, started=started
    )
    with open(args.out + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {panel.n_units * len(panel.times)} cells to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _check_compatibility(args, panel: BalancedPanel) -> None:
    if args.inference == "crve" and args.method != METHOD_DID:
        raise IncompatibleFlags(
            "--inference crve applies to the two-way regression only; use --method did"
        )
    if args.inference == "crb":
        if args.method != METHOD_DID:
            raise IncompatibleFlags("--inference crb is defined for --method did")
        if panel.cell_counts is None:
            raise IncompatibleFlags(
                "--inference crb requires a count column in the panel CSV"
            )


def _weights_payload(est) -> Optional[dict]:
    ws = est.weights
    if ws is None:
        return None
    payload: dict = {}
    if ws.unit_weights is not None:
        payload["unit_intercept"] = ws.unit_intercept
        payload["unit_weights"] = [float(w) for w in ws.unit_weights]
    if ws.time_weights is not None:
        payload["time_intercept"] = ws.time_intercept
        payload["time_weights"] = [float(w) for w in ws.time_weights]
    if ws.zeta is not None:
        payload["zeta"] = ws.zeta
        payload["xi"] = ws.xi
    return payload or None


def cmd_estimate(args) -> int:
    started = time.monotonic()
    panel = read_panel_csv(args.input, args.treated, _parse_time(args.treatment_start))
    if args.covariates:
        if panel.covariates is None:
            raise PanelError("--covariates given but the panel has no covariate columns")
        panel = adjust_covariates(panel)
    _check_compatibility(args, panel)

    est = _ESTIMATORS[args.method](panel)

    stochastic = args.inference in ("placebo", "placebo-t", "crb")
    seed = _seed_or_warn(args) if stochastic else (args.seed or 0)
    se: Optional[float] = None
    p: Optional[float] = None
    extras: dict = {}
    b_used: Optional[int] = None

    if args.inference == "crve":
        res = crve_se(panel)
        se, p = res.se, res.p_value
    elif args.inference in ("placebo", "placebo-t"):
        b_used = args.B or 200
        res = placebo_inference(
            panel, args.method, B=b_used, seed=seed,
            df_mode="t" if args.inference == "placebo-t" else "normal",
        )
        se, p = res.se, res.p_value
    elif args.inference == "crb":
        b_used = args.B or 1000
        res = cluster_residual_bootstrap(panel, B=b_used, seed=seed)
        se, p = res.se, res.p_value
    elif args.inference == "rmspe":
        res = rmspe_ratio_test(panel, estimator=args.method)
        p = res.p_value
        extras["post_pre_ratio"] = float(res.null_distribution[0])
        extras["rank"] = res.extras["rank"]
    elif args.inference == "rearrangement":
        fit = rearrangement_test(panel)
        p = fit.base_p
        extras["rho_alpha"] = {f"{a:g}": v for a, v in fit.rho_alpha.items()}
        extras["treated_beta"] = fit.treated_beta

    if args.latex:
        se_part = f" ({se:.3f})" if se is not None else ""
        p_part = f" [{p:.3f}]" if p is not None else ""
        print(f"{est.tau:.3f}{se_part}{p_part}")
        return 0

    post_times = [t for t, post in zip(panel.times, panel.post_mask) if post]
    payload = {
        "format_version": JSON_FORMAT_VERSION,
        "tau": est.tau,
        "se": se,
        "p": p,
        "method": args.method,
        "inference": args.inference,
        "pre_rmspe": est.pre_rmspe,
        "counterfactual": [float(v) for v in est.counterfactual]
        if est.counterfactual is not None else None,
        "B": b_used,
        "seed": seed if stochastic else None,
    }
    weights = _weights_payload(est)
    if weights is not None:
        payload["weights"] = weights
    payload.update(extras)
    payload["manifest"] = _manifest_dict(
        ["estimate", args.input], {"input": args.input}, seed=seed, started=started
    )
    print(json.dumps(payload, indent=2, sort_keys=True))

    if args.plot_data:
        y_treated = panel.y[0, panel.post_mask]
        with open(args.plot_data, "w", encoding="utf-8") as fh:
            fh.write(f"# format_version={JSON_FORMAT_VERSION}\n")
            fh.write("time,treated,counterfactual\n")
            for t, obs, cf in zip(post_times, y_treated, est.counterfactual):
                fh.write(f"{t},{obs:.10g},{cf:.10g}\n")
    return 0


# ---------------------------------------------------------------------------
# estimate-micro
# ---------------------------------------------------------------------------

def cmd_estimate_micro(args) -> int:
    started = time.monotonic()
    records, _ = read_micro_csv(args.input)
    seed = _seed_or_warn(args)
    res = modified_block_bootstrap(
        records, args.treated, _parse_time(args.treatment_start),
        B=args.B, seed=seed,
    )
    if args.latex:
        print(f"{res.extras['tau']:.3f} ({res.se:.3f}) [{res.p_value:.3f}]")
        return 0
    payload = {
        "format_version": JSON_FORMAT_VERSION,
        "tau": res.extras["tau"],
        "se": res.se,
        "p": res.p_value,
        "method": METHOD_DID,
        "inference": "mbb",
        "B": args.B,
        "seed": seed,
        "manifest": _manifest_dict(
            ["estimate-micro", args.input], {"input": args.input},
            seed=seed, started=started,
        ),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_SCALE_DEFAULTS = {
    "desk": {"replications": 500, "placebo_b": 100, "crb_b": 400, "mbb_b": 150},
    "full": {"replications": 10_000, "placebo_b": 200, "crb_b": 1000, "mbb_b": 300},
}

_INT_KEYS = ("n_controls", "t", "t_pre", "cell_size", "replications",
             "placebo_b", "crb_b", "mbb_b", "seed")
_FLOAT_KEYS = ("rho", "lambda_mix", "alpha", "sigma_x")
_KNOWN_KEYS = set(_INT_KEYS) | set(_FLOAT_KEYS) | {"scale", "methods"}


def parse_study_config(text: str) -> Tuple[DgpConfig, Tuple[str, ...], bool]:
    """Parse a flat ``key = value`` study config.

    Returns (config, methods, seed_was_given). Raises ConfigError with
    the offending key (or line) on any parse problem.
    """
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "duplicate key")
        raw[key] = value.strip()

    kwargs: Dict[str, object] = {}
    scale = raw.pop("scale", None)
    if scale is not None:
        if scale not in _SCALE_DEFAULTS:
            raise ConfigError("scale", f"must be 'desk' or 'full', got {scale!r}")
        kwargs.update(_SCALE_DEFAULTS[scale])

    methods = list(ALL_METHODS)
    if "methods" in raw:
        methods = [m.strip() for m in raw.pop("methods").split(",") if m.strip()]
        bad = [m for m in methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError("methods", f"unknown methods {bad}; known: {list(ALL_METHODS)}")
        if not methods:
            raise ConfigError("methods", "empty method list")

    for key, value in raw.items():
        cast = int if key in _INT_KEYS else float
        try:
            kwargs[key] = cast(value)
        except ValueError:
            raise ConfigError(key, f"expected {cast.__name__}, got {value!r}") from None

    missing = [k for k in ("n_controls", "t", "t_pre", "rho") if k not in kwargs]
    if missing:
        raise ConfigError(missing[0], "required key missing")

    seed_given = "seed" in kwargs
    try:
        config = DgpConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None
    return config, tuple(methods), seed_given


def cmd_simulate(args) -> int:
    started = time.monotonic()
    with open(args.config, "r", encoding="utf-8") as fh:
        text = fh.read()
    config, methods, seed_given = parse_study_config(text)
    if not seed_given:
        print("warning: no seed in config, defaulting to 0", file=sys.stderr)

    workers = args.workers
    if workers is None:
        workers = int(os.environ.get("SOLODID_WORKERS", "1"))
    report = run_study(
        config, methods=methods, out_dir=args.out,
        workers=workers, resume=args.resume,
    )
    manifest = RunManifest(
        command=["simulate", args.config],
        config_hash=sha256_text(text),
        input_digests={args.config: sha256_file(args.config)},
        seed=config.seed,
        version=__version__,
        wall_time_s=time.monotonic() - started,
    )
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(report.to_table_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# uqr
# ---------------------------------------------------------------------------

def cmd_uqr(args) -> int:
    started = time.monotonic()
    records, _ = read_micro_csv(args.input)
    if args.grid is not None:
        try:
            grid = np.array([float(v) for v in args.grid.split(",")], dtype=float)
        except ValueError:
            raise PanelError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    else:
        if args.grid_type == "threshold":
            raise IncompatibleFlags("--grid-type threshold requires an explicit --grid")
        grid = np.arange(5, 100) / 100.0

    seed = _seed_or_warn(args) if args.se == "bootstrap" else (args.seed or 0)
    curve = quantile_effect_curve(
        records, args.treated, _parse_time(args.treatment_start), grid,
        grid_is_threshold=(args.grid_type == "threshold"),
        se_mode=args.se, B=args.B, seed=seed,
    )
    if args.grid_type == "threshold":
        kappas = curve.extras["kappas"]
        thresholds = curve.grid
    else:
        kappas = curve.grid
        y_all = np.array([rec.outcome for rec in records])
        thresholds = np.quantile(y_all, curve.grid)

    lines = [f"# format_version={JSON_FORMAT_VERSION}", "kappa,threshold,tau,se"]
    for k, q, tau, se in zip(kappas, thresholds, curve.tau, curve.se):
        lines.append(f"{k:.4f},{q:.10g},{tau:.10g},{se:.10g}")
    out_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out_text)
        manifest = _manifest_dict(
            ["uqr", args.input], {"input": args.input}, seed=seed, started=started
        )
        with open(args.out + ".manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        print(out_text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="solodid",
        description="Treatment effect estimation with a single treated cluster",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="collapse micro records to a balanced panel")
    p.add_argument("input", help="micro CSV (unit,time,outcome[,weight,...])")
    p.add_argument("--out", required=True, help="panel CSV destination")
    p.add_argument("--treated", required=True, help="treated unit label")
    p.add_argument("--treatment-start", required=True,
                   help="first post-treatment period")
    p.add_argument("--trim", type=float, default=0.0,
                   help="total fraction of extreme outcomes to drop per cell "
                        "(half per tail)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("estimate", help="fit one estimator with one inference method")
    p.add_argument("input", help="panel CSV")
    p.add_argument("--treated", required=True)
    p.add_argument("--treatment-start", required=True)
    p.add_argument("--method", required=True, choices=_METHOD_CHOICES)
    p.add_argument("--inference", required=True, choices=_INFERENCE_CHOICES)
    p.add_argument("--covariates", action="store_true",
                   help="residualize outcomes on covariate columns first")
    p.add_argument("--B", type=int, default=None, help="bootstrap/placebo draws")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plot-data", default=None, metavar="PATH",
                   help="write per-period treated vs counterfactual CSV")
    p.add_argument("--latex", action="store_true",
                   help="print 'tau (se) [p]' instead of JSON")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("estimate-micro",
                       help="block bootstrap on micro records")
    p.add_argument("input", help="micro CSV")
    p.add_argument("--treated", required=True)
    p.add_argument("--treatment-start", required=True)
    p.add_argument("--B", type=int, default=300)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--latex", action="store_true")
    p.set_defaults(func=cmd_estimate_micro)

    p = sub.add_parser("simulate", help="run a rejection-rate study")
    p.add_argument("config", help="flat key = value study config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="process count (default: SOLODID_WORKERS or 1)")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoint.jsonl in --out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("uqr", help="unconditional quantile effect curve")
    p.add_argument("input", help="micro CSV")
    p.add_argument("--treated", required=True)
    p.add_argument("--treatment-start", required=True)
    p.add_argument("--grid", default=None,
                   help="comma-separated quantiles (default 0.05..0.99)")
    p.add_argument("--grid-type", choices=("kappa", "threshold"), default="kappa")
    p.add_argument("--se", choices=("bootstrap", "crve", "hc2"), default="bootstrap")
    p.add_argument("--B", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="curve CSV path (default stdout)")
    p.set_defaults(func=cmd_uqr)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IncompatibleFlags as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 6
    except (SolverFailure, NoConvergence) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return 5
    except NonFiniteInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (PanelError, RankDeficientDesign, TooFewControls, SolodidError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
