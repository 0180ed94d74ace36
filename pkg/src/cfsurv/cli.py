"""Command-line interface.

``cfsurv fit`` estimates the model on a CSV file (one row per subject, header
required, comma separated, '.' decimal); ``cfsurv simulate`` runs the Monte
Carlo study for one design cell.  Exit codes: 0 success, 2 input error,
3 estimation error, 4 fit did not converge (a partial report is still
written).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .estimation import (
    EstimationError,
    FitResult,
    fit_independent,
    fit_naive,
    fit_oracle,
    fit_two_step,
    normalize_variant,
)
from .model import FirstStageFamily, ObservationSet
from .numerics import NonFiniteObjectiveError, SingularMatrixError
from .simulation import SimulationDesign, run_monte_carlo, summary_table

__all__ = ["FitConfig", "InputError", "read_dataset_csv", "write_dataset_csv",
           "cmd_fit", "cmd_simulate", "main"]


class InputError(ValueError):
    """Malformed input file or configuration (CLI exit code 2)."""


@dataclass
class FitConfig:
    """Column mapping and options for ``cfsurv fit``."""

    input_path: str
    time_col: str
    status_col: str
    z_col: str
    w_col: str
    covariate_cols: list = field(default_factory=list)
    log_transform: bool = False
    family: str = "auto"
    variant: str = "two_step"
    v_col: str | None = None
    level: float = 0.95
    seed: int = 0
    output_path: str | None = None
    output_format: str = "text"


def _parse_float(raw, row: int, col: str) -> float:
    if raw is None or raw == "":
        raise InputError(f"row {row}: missing value in column {col!r}")
    try:
        val = float(raw)
    except ValueError:
        raise InputError(
            f"row {row}: cannot parse {raw!r} in column {col!r} as a number"
        ) from None
    if not math.isfinite(val):
        raise InputError(f"row {row}: non-finite value in column {col!r}")
    return val


def read_dataset_csv(config: FitConfig):
    """Load and validate the input CSV; returns ``(data, v_column_or_None)``.

    Rows are numbered from 1 (excluding the header) in error messages.
    Missing values are rejected, the status column must be 0/1, and under
    ``log_transform`` the time column must be strictly positive.
    """
    needed = [config.time_col, config.status_col, config.z_col, config.w_col]
    needed += list(config.covariate_cols)
    if config.v_col:
        needed.append(config.v_col)
    if len(set(needed)) != len(needed):
        raise InputError(f"column mapping contains duplicates: {needed}")
    try:
        handle = open(config.input_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {config.input_path}: {exc}") from None
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise InputError("input file is empty (a header row is required)")
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise InputError(
                f"missing column(s) {missing}; header has {reader.fieldnames}")
        y, delta, x_rows, w, z, v = [], [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if None in row.values() or None in row:
                raise InputError(f"row {row_no}: wrong number of fields")
            t_val = _parse_float(row[config.time_col], row_no, config.time_col)
            status = _parse_float(row[config.status_col], row_no,
                                  config.status_col)
            if status not in (0.0, 1.0):
                raise InputError(
                    f"row {row_no}: status column {config.status_col!r} must "
                    f"be 0 or 1, got {row[config.status_col]!r}")
            if config.log_transform:
                if t_val <= 0.0:
                    raise InputError(
                        f"row {row_no}: time column {config.time_col!r} must "
                        "be strictly positive under --log-transform")
                t_val = math.log(t_val)
            y.append(t_val)
            delta.append(int(status))
            x_rows.append([_parse_float(row[c], row_no, c)
                           for c in config.covariate_cols])
            w.append(_parse_float(row[config.w_col], row_no, config.w_col))
            z.append(_parse_float(row[config.z_col], row_no, config.z_col))
            if config.v_col:
                v.append(_parse_float(row[config.v_col], row_no, config.v_col))
    if not y:
        raise InputError("input file contains no data rows")
    if not config.covariate_cols:
        raise InputError("at least one covariate column is required")
    data = ObservationSet(y=y, delta=delta, x_tilde=np.asarray(x_rows),
                          w_tilde=w, z=z)
    return data, (np.asarray(v) if config.v_col else None)


def write_dataset_csv(data: ObservationSet, path: str, true_v=None,
                      y_col: str = "y") -> None:
    """Write a dataset with full float precision (``repr``), so a read-back
    reproduces every value bit for bit."""
    cols = [y_col, "status"] + [f"x{j + 1}" for j in range(data.m)] + ["w", "z"]
    if true_v is not None:
        cols.append("v")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(cols)
        for i in range(data.n):
            row = [repr(float(data.y[i])), str(int(data.delta[i]))]
            row += [repr(float(val)) for val in data.x_tilde[i]]
            row += [repr(float(data.w_tilde[i])), repr(float(data.z[i]))]
            if true_v is not None:
                row.append(repr(float(true_v[i])))
            writer.writerow(row)


def _infer_family(config: FitConfig, data: ObservationSet) -> FirstStageFamily:
    if config.family != "auto":
        return FirstStageFamily.parse(config.family)
    if np.all((data.z == 0.0) | (data.z == 1.0)):
        return FirstStageFamily.LOGIT
    return FirstStageFamily.LINEAR


def _display_rows(fit: FitResult, config: FitConfig):
    """(section, display label, index) triples in report order."""
    layout = fit.layout
    names = fit.param_names
    covs = list(config.covariate_cols)
    rows = []
    for idx, name in enumerate(names):
        if name.startswith("beta_"):
            side = name[5]
            j = int(name.split("_")[-1])
            label = "Intercept" if j == 0 else (
                covs[j - 1] if j - 1 < len(covs) else f"x{j}")
            section = "T" if side == "T" else "C"
        elif name in ("alpha_T", "alpha_C"):
            label = f"{config.z_col} [{name}]"
            section = name[-1]
        elif name in ("lambda_T", "lambda_C"):
            label = f"control [{name}]"
            section = name[-1]
        else:
            label = name
            section = "scale"
        rows.append((section, label, idx))
    return rows


def _format_fit_text(fit: FitResult, config: FitConfig,
                     family: FirstStageFamily) -> str:
    out = [f"cfsurv {__version__} | fit report",
           f"variant: {fit.variant} | family: {family.value} | "
           f"n: {fit.n} | seed: {config.seed}",
           f"input: {config.input_path} | log_transform: "
           f"{config.log_transform} | level: {fit.level:.0%}",
           f"converged: {fit.converged} | iterations: {fit.iterations} | "
           f"mean loglik: {fit.loglik:.6f}", ""]
    have_se = fit.std_errors is not None
    est = fit.estimates
    header = (f"  {'parameter':<24}{'estimate':>12}{'SE':>10}{'p-value':>10}"
              f"{'CI low':>12}{'CI high':>12}")
    rows = _display_rows(fit, config)
    for section, title in (("T", "T equation (survival)"),
                           ("C", "C equation (censoring)"),
                           ("scale", "scale / dependence")):
        out.append(title)
        out.append(header)
        for sec, label, idx in rows:
            if sec != section:
                continue
            if have_se:
                out.append(
                    f"  {label:<24}{est[idx]:>12.4f}"
                    f"{fit.std_errors[idx]:>10.4f}{fit.p_values[idx]:>10.4f}"
                    f"{fit.ci_lower[idx]:>12.4f}{fit.ci_upper[idx]:>12.4f}")
            else:
                out.append(f"  {label:<24}{est[idx]:>12.4f}"
                           f"{'--':>10}{'--':>10}{'--':>12}{'--':>12}")
        out.append("")
    if not fit.converged:
        out.append("WARNING: optimizer did not converge; no standard errors "
                   "were computed")
    return "\n".join(out)


def _fit_report_json(fit: FitResult, config: FitConfig) -> dict:
    names = fit.param_names
    est = fit.estimates
    have_se = fit.std_errors is not None
    return {
        "variant": fit.variant,
        "n": fit.n,
        "estimates": {k: float(v) for k, v in zip(names, est)},
        "std_errors": {k: float(v) for k, v in zip(names, fit.std_errors)}
                      if have_se else None,
        "ci": {k: [float(lo), float(hi)] for k, lo, hi in
               zip(names, fit.ci_lower, fit.ci_upper)} if have_se else None,
        "p_values": {k: float(v) for k, v in zip(names, fit.p_values)}
                    if have_se else None,
        "loglik": float(fit.loglik),
        "converged": bool(fit.converged),
        "seed": config.seed,
        "version": __version__,
    }


def _fit_report_csv(fit: FitResult) -> str:
    lines = ["parameter,estimate,std_error,ci_lower,ci_upper,p_value"]
    est = fit.estimates
    have_se = fit.std_errors is not None
    for j, name in enumerate(fit.param_names):
        if have_se:
            lines.append(",".join([
                name, repr(float(est[j])), repr(float(fit.std_errors[j])),
                repr(float(fit.ci_lower[j])), repr(float(fit.ci_upper[j])),
                repr(float(fit.p_values[j]))]))
        else:
            lines.append(f"{name},{float(est[j])!r},,,,")
    return "\n".join(lines) + "\n"


def run_fit(config: FitConfig):
    """Library-level fit driver used by ``cmd_fit``; returns the FitResult."""
    data, v = read_dataset_csv(config)
    variant = normalize_variant(config.variant)
    family = _infer_family(config, data)
    if variant == "oracle":
        if v is None:
            raise InputError("--variant oracle requires --v-col with the "
                             "observed control values")
        return fit_oracle(data, v, level=config.level), family
    if variant == "naive":
        return fit_naive(data, level=config.level), family
    if variant == "independent":
        return fit_independent(family, data, level=config.level), family
    return fit_two_step(family, data, level=config.level), family


def cmd_fit(config: FitConfig) -> int:
    """Run one fit end to end: parse, validate, estimate, report."""
    try:
        fit, family = run_fit(config)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, SingularMatrixError, NonFiniteObjectiveError,
            np.linalg.LinAlgError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    print(_format_fit_text(fit, config, family))
    if config.output_path:
        if config.output_format == "json":
            payload = json.dumps(_fit_report_json(fit, config), indent=2)
        elif config.output_format == "csv":
            payload = _fit_report_csv(fit)
        else:
            payload = _format_fit_text(fit, config, family) + "\n"
        with open(config.output_path, "w", encoding="utf-8") as handle:
            handle.write(payload)
    return 0 if fit.converged else 4


def _summary_json(summary) -> dict:
    return {
        "design": summary.design_id,
        "n": summary.n,
        "replications": summary.replications,
        "seed": summary.seed,
        "censoring_rate": summary.censoring_rate,
        "failures": summary.failures,
        "healthy": summary.healthy,
        "stats": {
            variant: [{"parameter": r.label, "truth": r.truth, "bias": r.bias,
                       "esd": r.esd, "rmse": r.rmse, "cr": r.cr,
                       "mean_se": r.mean_se}
                      for r in rows]
            for variant, rows in summary.stats.items()},
        "version": __version__,
    }


def cmd_simulate(args) -> int:
    if args.reps < 2:
        print("input error: --reps must be at least 2", file=sys.stderr)
        return 2
    try:
        variants = [normalize_variant(v)
                    for v in str(args.variants).split(",") if v]
        design = SimulationDesign(design_id=args.design, n=args.n,
                                  replications=args.reps, seed=args.seed)
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    summary = run_monte_carlo(design, variants, level=args.level,
                              n_jobs=max(1, args.threads))
    text, csv_text = summary_table(summary)
    print(text)
    if not summary.healthy:
        print("warning: more than 5% of replications failed for at least "
              "one variant", file=sys.stderr)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            if args.format == "json":
                handle.write(json.dumps(_summary_json(summary), indent=2))
            else:
                handle.write(csv_text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfsurv",
        description="Causal effects on dependently censored survival times "
                    "via a control-function two-step estimator.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit the model on a CSV file")
    fit.add_argument("--input", required=True, help="input CSV path")
    fit.add_argument("--time-col", required=True,
                     help="follow-up time column (log survival time unless "
                          "--log-transform)")
    fit.add_argument("--status-col", required=True,
                     help="event indicator column (1=event, 0=censored)")
    fit.add_argument("--z-col", required=True,
                     help="confounded regressor column")
    fit.add_argument("--w-col", required=True, help="instrument column")
    fit.add_argument("--covariates", default="",
                     help="comma-separated covariate columns")
    fit.add_argument("--log-transform", action="store_true",
                     help="apply a natural log to the time column")
    fit.add_argument("--family", default="auto",
                     choices=["auto", "linear", "probit", "logit"],
                     help="first-stage family (auto: logit when z is 0/1, "
                          "else linear)")
    fit.add_argument("--variant", default="two-step",
                     choices=["two-step", "two_step", "naive", "independent",
                              "oracle"])
    fit.add_argument("--v-col", default=None,
                     help="control-value column (required for --variant oracle)")
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--seed", type=int, default=0,
                     help="recorded in the report for reproducibility")
    fit.add_argument("--output", default=None, help="report output path")
    fit.add_argument("--format", default="text",
                     choices=["text", "json", "csv"])

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--design", type=int, required=True,
                     choices=[1, 2, 3, 4])
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--variants",
                     default="two-step,naive,independent,oracle",
                     help="comma-separated estimator variants")
    sim.add_argument("--out", default=None, help="summary output path")
    sim.add_argument("--format", default="csv", choices=["csv", "json"])
    sim.add_argument("--threads", type=int, default=1,
                     help="worker processes for replications")
    sim.add_argument("--level", type=float, default=0.95)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "fit":
        config = FitConfig(
            input_path=args.input, time_col=args.time_col,
            status_col=args.status_col, z_col=args.z_col, w_col=args.w_col,
            covariate_cols=[c for c in args.covariates.split(",") if c],
            log_transform=args.log_transform, family=args.family,
            variant=args.variant, v_col=args.v_col, level=args.level,
            seed=args.seed, output_path=args.output,
            output_format=args.format)
        return cmd_fit(config)
    return cmd_simulate(args)


if __name__ == "__main__":
    sys.exit(main())
