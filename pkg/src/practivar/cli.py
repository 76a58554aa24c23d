"""Command-line pipeline orchestration.

Every subcommand that writes files also writes a reproducibility manifest
(config echo, per-stage seeds, input/output digests, wall-clock per stage).
Exit codes: 0 success, 1 input/config error, 2 convergence failure,
3 internal error; the reason is printed as one line on stderr.
"""

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .analysis import (frailty_quintiles, quintile_characteristics,
                       risk_ranges_table, stability_frailty_table)
from .cohort import CONDITION_FLAGS, IMPUTABLE_FIELDS, load_cohort, save_cohort
from .errors import (ConfigError, ContractError, ConvergenceError, EstimationError,
                     GenerationError, InputError, PractivarError)
from .imputation import impute, pool, write_completed
from .manifest import RunManifest
from .riskmodel import default_table, load_coefficients
from .stability import (StabilityReport, missingness_stability,
                        multivariate_stability, variable_stability)
from .survival import (RandomInterceptCox, RandomSlopeCox, adjust_risk,
                       simulate_random_effect_draws)
from .synthgen import GeneratorConfig, generate, inject_misclassification, inject_missingness

STABILITY_VARIABLES = ("age", "sbp", "bmi", "chol_hdl_ratio", "smoking",
                       "ethnicity", "townsend") + CONDITION_FLAGS


def _out_dir(value):
    path = Path(value or os.environ.get("PRACTIVAR_OUT_DIR", "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _threads(value):
    # accepted for interface stability; all stages run deterministically
    # single-threaded regardless of this setting
    return int(value or os.environ.get("PRACTIVAR_THREADS", "1"))


def _write_table(frame, out_dir, stem, fmt, manifest):
    path = out_dir / f"{stem}.{fmt}"
    if fmt == "json":
        frame.to_json(path, orient="records", indent=2)
    else:
        frame.to_csv(path, index=False, float_format="%.12g")
    manifest.add_output(path)
    return path


def _load_table(path):
    return load_coefficients(path) if path else default_table()


@click.group(name="practivar")
@click.version_option(__version__)
def cli():
    """Stability metrics and Cox frailty models for multi-practice cohorts."""


@cli.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML generator config; defaults are used when omitted.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out-dir", default=None)
def cmd_generate(config_path, seed, out_dir):
    """Generate a synthetic cohort with known ground truth."""
    out = _out_dir(out_dir)
    config = GeneratorConfig.from_file(config_path) if config_path else GeneratorConfig()
    if seed is not None:
        config.seed = seed
    manifest = RunManifest(command="generate", config=config.to_dict(),
                           seeds={"generate": config.seed})
    if config_path:
        manifest.add_input(config_path)
    with manifest.time_stage("generate"):
        cohort, truth = generate(config)
        if config.missing_rates:
            cohort = inject_missingness(cohort, config.missing_rates, seed=config.seed)
        if config.flip_prob > 0:
            cohort = inject_misclassification(cohort, config.flip_prob, seed=config.seed)
    save_cohort(cohort, out / "cohort.csv")
    truth.to_csv(out / "ground_truth.csv")
    manifest.add_output(out / "cohort.csv")
    manifest.add_output(out / "ground_truth.csv")
    manifest.write(out)
    click.echo(f"generated {len(cohort)} patients in {cohort.n_practices} practices")


def _stability_frames(cohort, bins, components, joint_bins):
    reports = []
    for var in STABILITY_VARIABLES:
        reports.append(variable_stability(cohort, var, n_bins=bins,
                                          include_missing=False))
    for var in IMPUTABLE_FIELDS:
        reports.append(missingness_stability(cohort, var))
    flags = [f for f in CONDITION_FLAGS
             if cohort.frame[f].to_numpy(dtype=bool).std() > 0]
    if len(flags) >= components:
        reports.append(multivariate_stability(cohort, flags,
                                              n_components=components,
                                              joint_bins=joint_bins))
    return reports


@cli.command("stability")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--bins", type=int, default=20, show_default=True)
@click.option("--components", type=int, default=3, show_default=True)
@click.option("--joint-bins", type=int, default=5, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--out-dir", default=None)
def cmd_stability(cohort_path, bins, components, joint_bins, fmt, out_dir):
    """Per-variable, missingness and multivariate stability reports."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="stability",
                           config={"bins": bins, "components": components,
                                   "joint_bins": joint_bins})
    manifest.add_input(cohort_path)
    cohort = load_cohort(cohort_path)
    with manifest.time_stage("stability"):
        reports = _stability_frames(cohort, bins, components, joint_bins)
    table = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    _write_table(table, out, "stability_report", fmt, manifest)
    manifest.write(out)
    click.echo(f"wrote stability report for {len(reports)} variables")


@cli.command("impute")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--imputations", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default=None)
def cmd_impute(cohort_path, imputations, seed, out_dir):
    """Multiple imputation of missing risk factors."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="impute", config={"m": imputations},
                           seeds={"impute": seed})
    manifest.add_input(cohort_path)
    cohort = load_cohort(cohort_path)
    with manifest.time_stage("impute"):
        completed = impute(cohort, m=imputations, seed=seed)
        names = write_completed(completed, out)
    for name in names:
        manifest.add_output(out / name)
    manifest.add_output(out / "imputed_index.json")
    manifest.write(out)
    click.echo(f"wrote {len(names)} completed cohorts")


def _fit_intercept(cohort, table):
    frame = cohort.frame
    lp = table.linear_predictor(frame)
    model = RandomInterceptCox()
    model.fit(frame["follow_up_years"].to_numpy(), frame["event"].to_numpy(),
              lp, frame["practice_id"].to_numpy())
    return model


@cli.command("fit-intercept")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--coefficients", type=click.Path(exists=True), default=None)
@click.option("--out-dir", default=None)
def cmd_fit_intercept(cohort_path, coefficients, out_dir):
    """Random-intercept (frailty) Cox model with the lp as offset."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="fit-intercept", config={})
    manifest.add_input(cohort_path)
    cohort = load_cohort(cohort_path)
    table = _load_table(coefficients)
    with manifest.time_stage("fit"):
        model = _fit_intercept(cohort, table)
    model.frailty_frame().to_csv(out / "frailty.csv", index=False, float_format="%.12g")
    summary = {"random_intercept": _intercept_summary(model)}
    with open(out / "fit_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    manifest.add_output(out / "frailty.csv")
    manifest.add_output(out / "fit_summary.json")
    manifest.write(out)
    click.echo(f"sigma_b = {model.sigma_b_:.6f} over {len(model.practice_ids_)} practices")


def _intercept_summary(model):
    return {
        "sigma_b2": model.sigma_b2_,
        "sigma_b": model.sigma_b_,
        "loglik": model.loglik_,
        "marginal_loglik": model.marginal_loglik_,
        "boundary": model.boundary_,
        "converged": model.converged_,
    }


@cli.command("fit-slope")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--coefficients", type=click.Path(exists=True), default=None)
@click.option("--practice-subsample-frac", type=float, default=0.4, show_default=True)
@click.option("--repeats", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default=None)
def cmd_fit_slope(cohort_path, coefficients, practice_subsample_frac, repeats,
                  seed, out_dir):
    """Random intercept + random slope mixed-effects Cox model."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="fit-slope",
                           config={"subsample_frac": practice_subsample_frac,
                                   "repeats": repeats},
                           seeds={"fit_slope": seed})
    manifest.add_input(cohort_path)
    cohort = load_cohort(cohort_path)
    table = _load_table(coefficients)
    frame = cohort.frame
    lp = table.linear_predictor(frame)
    model = RandomSlopeCox(subsample_frac=practice_subsample_frac,
                           repeats=repeats, seed=seed)
    with manifest.time_stage("fit"):
        model.fit(frame["follow_up_years"].to_numpy(), frame["event"].to_numpy(),
                  lp, frame["practice_id"].to_numpy())
    summary = {"random_slope": _slope_summary(model, seed)}
    with open(out / "fit_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    manifest.add_output(out / "fit_summary.json")
    manifest.write(out)
    click.echo(f"sigma_u2 = {model.sigma_u2_:.6g}, gamma = {model.gamma_:.4f}")


def _slope_summary(model, seed):
    return {
        "sigma_b2": model.sigma_b2_,
        "sigma_u2": model.sigma_u2_,
        "gamma": model.gamma_,
        "loglik": model.loglik_,
        "boundary": model.boundary_,
        "subsample_estimates": model.subsample_estimates_.to_dict(orient="records"),
        "seed": seed,
    }


@cli.command("adjust-risk")
@click.option("--base", type=float, required=True)
@click.option("--frailty", type=float, required=True)
def cmd_adjust_risk(base, frailty):
    """Frailty-adjusted risk 1 - (1 - base)**frailty."""
    click.echo(f"{adjust_risk(base, frailty):.4f}")


@cli.command("simulate-effects")
@click.option("--sigma-b2", type=float, default=0.03, show_default=True)
@click.option("--sigma-u2", type=float, default=0.0, show_default=True)
@click.option("--base", type=float, default=0.10, show_default=True)
@click.option("--lp-scale", type=float, default=1.0, show_default=True)
@click.option("--draws", type=float, default=1e6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--out-dir", default=None)
def cmd_simulate_effects(sigma_b2, sigma_u2, base, lp_scale, draws, seed, fmt, out_dir):
    """Monte Carlo percentiles of frailty-adjusted risks."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="simulate-effects",
                           config={"sigma_b2": sigma_b2, "sigma_u2": sigma_u2,
                                   "base": base, "lp_scale": lp_scale,
                                   "draws": draws},
                           seeds={"simulate": seed})
    with manifest.time_stage("simulate"):
        summary = simulate_random_effect_draws(np.sqrt(sigma_b2), np.sqrt(sigma_u2),
                                               base, lp_scale=lp_scale,
                                               n_draws=int(draws), seed=seed)
    _write_table(summary.to_frame(), out, "effect_draws", fmt, manifest)
    manifest.write(out)
    for p in (2.5, 97.5):
        click.echo(f"p{p:g} = {summary.percentiles[p]:.4f}")


@cli.command("report")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--frailty", "frailty_path", type=click.Path(exists=True), required=True)
@click.option("--stability", "stability_path", type=click.Path(exists=True), default=None)
@click.option("--base", type=float, default=0.10, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--out-dir", default=None)
def cmd_report(cohort_path, frailty_path, stability_path, base, fmt, out_dir):
    """Assemble the quintile, correlation and risk-range tables."""
    out = _out_dir(out_dir)
    manifest = RunManifest(command="report", config={"base": base})
    manifest.add_input(cohort_path)
    manifest.add_input(frailty_path)
    cohort = load_cohort(cohort_path)
    frailty_df = pd.read_csv(frailty_path)
    frailty = dict(zip(frailty_df["practice_id"].astype(str),
                       frailty_df["exp_b"].astype(float)))
    reports = []
    if stability_path:
        manifest.add_input(stability_path)
        reports = _reports_from_csv(stability_path)
    with manifest.time_stage("report"):
        _emit_report_tables(cohort, frailty, reports, base, out, fmt, manifest)
    manifest.write(out)
    click.echo("report tables written")


def _reports_from_csv(path):
    table = pd.read_csv(path)
    reports = []
    for variable, grp in table.groupby("variable", sort=True):
        reports.append(StabilityReport(
            variable=variable,
            source_ids=grp["source_id"].astype(str).tolist(),
            spo=grp["spo"].to_numpy(dtype=float),
            gpd=float(grp["gpd"].iloc[0]),
            n_sources=int(grp["n_sources"].iloc[0]),
            clipped_mass=float(grp["clipped_mass"].iloc[0]),
        ))
    return reports


def _emit_report_tables(cohort, frailty, reports, base, out, fmt, manifest):
    assignment = frailty_quintiles(frailty)
    _write_table(quintile_characteristics(cohort, assignment), out,
                 "quintile_table", fmt, manifest)
    _write_table(risk_ranges_table(frailty, assignment, base_risk=base), out,
                 "risk_ranges", fmt, manifest)
    if reports:
        reports = [r for r in reports if r.variable != "multivariate"]
        correlations, plot_data, skipped = stability_frailty_table(reports, frailty, cohort)
        _write_table(correlations, out, "correlations", fmt, manifest)
        _write_table(plot_data, out, "plotdata_beeswarm", fmt, manifest)
        if skipped:
            _write_table(pd.DataFrame(skipped), out, "correlations_skipped", fmt, manifest)


@cli.command("pipeline")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--bins", type=int, default=20, show_default=True)
@click.option("--components", type=int, default=3, show_default=True)
@click.option("--joint-bins", type=int, default=5, show_default=True)
@click.option("--imputations", type=int, default=10, show_default=True)
@click.option("--bootstrap", type=int, default=1000, show_default=True,
              help="Accepted for interface parity; bootstrap runs only via the API.")
@click.option("--practice-subsample-frac", type=float, default=0.4, show_default=True)
@click.option("--repeats", type=int, default=10, show_default=True)
@click.option("--draws", type=float, default=1e6, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--base", type=float, default=0.10, show_default=True)
@click.option("--out-dir", default=None)
def cmd_pipeline(config_path, seed, bins, components, joint_bins, imputations,
                 bootstrap, practice_subsample_frac, repeats, draws, threads,
                 fmt, base, out_dir):
    """Run every stage in order: generate, stability, impute, fit, report."""
    out = _out_dir(out_dir)
    _threads(threads)
    config = GeneratorConfig.from_file(config_path) if config_path else GeneratorConfig()
    if seed is not None:
        config.seed = seed
    table = default_table()
    manifest = RunManifest(command="pipeline", config=config.to_dict(),
                           seeds={"generate": config.seed, "impute": config.seed,
                                  "fit_slope": config.seed, "simulate": config.seed})
    if config_path:
        manifest.add_input(config_path)

    with manifest.time_stage("generate"):
        cohort, truth = generate(config, table)
        observed = cohort
        if config.missing_rates:
            observed = inject_missingness(observed, config.missing_rates, seed=config.seed)
        if config.flip_prob > 0:
            observed = inject_misclassification(observed, config.flip_prob, seed=config.seed)
    save_cohort(observed, out / "cohort.csv")
    truth.to_csv(out / "ground_truth.csv")
    manifest.add_output(out / "cohort.csv")
    manifest.add_output(out / "ground_truth.csv")

    with manifest.time_stage("stability"):
        reports = _stability_frames(observed, bins, components, joint_bins)
    table_df = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    _write_table(table_df, out, "stability_report", fmt, manifest)

    with manifest.time_stage("impute"):
        completed = impute(observed, m=imputations, seed=config.seed)
        names = write_completed(completed, out)
    for name in names:
        manifest.add_output(out / name)

    with manifest.time_stage("fit_intercept"):
        fits = [_fit_intercept(c, table) for c in completed]
        sigma_b2 = float(pool([f.sigma_b2_ for f in fits])[0])
        b_pooled = pool([f.b_.to_numpy() for f in fits])
        se_pooled = pool([f.b_se_.to_numpy() for f in fits])
        practice_ids = fits[0].practice_ids_
    frailty_df = pd.DataFrame({
        "practice_id": practice_ids,
        "b": b_pooled,
        "exp_b": np.exp(b_pooled),
        "shrinkage_se": se_pooled,
    })
    frailty_df.to_csv(out / "frailty.csv", index=False, float_format="%.12g")
    manifest.add_output(out / "frailty.csv")

    with manifest.time_stage("fit_slope"):
        frame = completed.cohorts[0].frame
        lp = table.linear_predictor(frame)
        slope = RandomSlopeCox(subsample_frac=practice_subsample_frac,
                               repeats=repeats, seed=config.seed)
        slope.fit(frame["follow_up_years"].to_numpy(), frame["event"].to_numpy(),
                  lp, frame["practice_id"].to_numpy())
    summary = {
        "random_intercept": {"sigma_b2": sigma_b2,
                             "pooled_over_imputations": imputations,
                             "per_imputation": [_intercept_summary(f) for f in fits]},
        "random_slope": _slope_summary(slope, config.seed),
    }
    with open(out / "fit_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    manifest.add_output(out / "fit_summary.json")

    with manifest.time_stage("simulate"):
        draws_summary = simulate_random_effect_draws(
            np.sqrt(sigma_b2), np.sqrt(slope.sigma_u2_), base,
            n_draws=int(draws), seed=config.seed)
    _write_table(draws_summary.to_frame(), out, "effect_draws", fmt, manifest)

    with manifest.time_stage("report"):
        frailty = dict(zip(frailty_df["practice_id"], frailty_df["exp_b"]))
        _emit_report_tables(observed, frailty, reports, base, out, fmt, manifest)
    manifest.write(out)
    click.echo("pipeline complete")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        print("error: aborted", file=sys.stderr)
        return 1
    except click.ClickException as exc:
        print(f"error: {exc.format_message()}", file=sys.stderr)
        return 1
    except (InputError, ConfigError, ContractError, EstimationError,
            GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"error: convergence failure: {exc}", file=sys.stderr)
        return 2
    except PractivarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
