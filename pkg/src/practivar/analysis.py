"""Comparative analyses: frailty quintiles, quintile characteristic tables,
and correlation of stability metrics with practice frailty.

All quintile summaries use the practice, not the patient, as the
statistical unit: statistics are computed per practice and then averaged
across the practices within a quintile.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .cohort import CONDITION_FLAGS, CONTINUOUS_FIELDS, IMPUTABLE_FIELDS
from .errors import ContractError


@dataclass
class QuintileAssignment:
    """practice_id -> quintile index 1..5 with the cut rule that produced it."""

    mapping: dict
    cut_rule: str = "cumulative cuts at floor(N*k/5), ties broken by practice_id"

    def sizes(self):
        counts = [0] * 5
        for q in self.mapping.values():
            counts[q - 1] += 1
        return tuple(counts)

    def practices_in(self, quintile):
        return sorted(pid for pid, q in self.mapping.items() if q == quintile)


def frailty_quintiles(frailty) -> QuintileAssignment:
    """Rank practices by frailty and cut into quintiles.

    ``frailty`` maps practice_id to its fitted multiplier exp(b) (any
    strictly increasing transform gives the same assignment).  Cumulative
    cut points sit at floor(N*k/5), k = 1..4, so group sizes differ by at
    most one.
    """
    items = sorted(dict(frailty).items(), key=lambda kv: (kv[1], kv[0]))
    n = len(items)
    if n < 5:
        raise ContractError(">=5 practices required for quintiles")
    for _, value in items:
        if not np.isfinite(value):
            raise ContractError("frailty values must be finite")
    cuts = [int(np.floor(n * k / 5)) for k in range(1, 5)]
    mapping = {}
    for rank, (pid, _) in enumerate(items):
        mapping[pid] = 1 + sum(rank >= c for c in cuts)
    return QuintileAssignment(mapping=mapping)


def _practice_stats(frame):
    """Per-practice summary row: means of continuous factors, flag
    percentages, missing percentages, event count and size."""
    row = {}
    for var in CONTINUOUS_FIELDS:
        row[f"mean_{var}"] = float(frame[var].mean())
    for flag in CONDITION_FLAGS:
        row[f"pct_{flag}"] = 100.0 * float(frame[flag].mean())
    row["pct_current_smoker"] = 100.0 * float((frame["smoking"] >= 3).mean())
    for var in IMPUTABLE_FIELDS:
        row[f"pct_missing_{var}"] = 100.0 * float(frame[var].isna().mean())
    row["n_events"] = float(frame["event"].sum())
    row["n_patients"] = float(len(frame))
    return row


def practice_level_table(cohort, by_sex=True) -> pd.DataFrame:
    """One row per (practice, sex) of practice-level statistics."""
    rows = []
    frame = cohort.frame
    sexes = sorted(frame["sex"].unique()) if by_sex else [None]
    for pid, idx in sorted(cohort.practice_index.items()):
        sub = frame.iloc[idx]
        for sex in sexes:
            part = sub[sub["sex"] == sex] if sex else sub
            if len(part) == 0:
                continue
            row = {"practice_id": pid, "sex": sex or "all"}
            row.update(_practice_stats(part))
            rows.append(row)
    return pd.DataFrame(rows)


def quintile_characteristics(cohort, assignment: QuintileAssignment) -> pd.DataFrame:
    """Per-quintile, per-sex mean (SD) of practice-level statistics."""
    missing = set(cohort.practice_ids) - set(assignment.mapping)
    if missing:
        raise ContractError(f"assignment does not cover practices: {sorted(missing)}")
    per_practice = practice_level_table(cohort, by_sex=True)
    per_practice["quintile"] = per_practice["practice_id"].map(assignment.mapping)
    stat_cols = [c for c in per_practice.columns
                 if c not in ("practice_id", "sex", "quintile")]
    rows = []
    for (sex, quintile), grp in per_practice.groupby(["sex", "quintile"]):
        row = {"sex": sex, "quintile": int(quintile), "n_practices": len(grp)}
        for col in stat_cols:
            row[f"{col}"] = float(grp[col].mean())
            row[f"{col}_sd"] = float(grp[col].std(ddof=0))
        rows.append(row)
    return pd.DataFrame(rows).sort_values(["sex", "quintile"]).reset_index(drop=True)


def pearson_corr_ci(x, y, confidence=0.95):
    """Sample Pearson r with a Fisher-z confidence interval (SE 1/sqrt(n-3))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ContractError("x and y must have equal length")
    n = len(x)
    if n < 4:
        raise ContractError("need n >= 4 for a Fisher-z interval")
    if np.std(x) == 0 or np.std(y) == 0:
        raise ContractError("zero variance in x or y")
    r = float(np.corrcoef(x, y)[0, 1])
    if abs(r) >= 1.0:
        return r, r, r
    from scipy.stats import norm
    z = np.arctanh(r)
    half = norm.ppf(0.5 + confidence / 2) / np.sqrt(n - 3)
    return r, float(np.tanh(z - half)), float(np.tanh(z + half))


def stability_frailty_table(reports, frailty, cohort, sex_label="all"):
    """Correlate stability metrics and practice-level factor summaries with
    frailty.

    Returns (correlations, plot_data, skipped): one correlation row per
    variable for SPO-vs-frailty and one for the practice-level factor
    mean/percentage-vs-frailty, a percentile-binned beeswarm export, and the
    variables skipped because of degenerate (zero-variance) columns.
    """
    frailty = dict(frailty)
    practice_set = set(cohort.practice_ids)
    if set(frailty) != practice_set:
        diff = sorted(practice_set.symmetric_difference(frailty))
        raise ContractError(f"practice sets differ: {diff}")

    per_practice = practice_level_table(cohort, by_sex=False)
    per_practice = per_practice.set_index("practice_id")
    corr_rows, plot_rows, skipped = [], [], []

    def add_corr(variable, kind, series_by_pid):
        pids = sorted(series_by_pid)
        x = np.array([series_by_pid[p] for p in pids])
        y = np.array([frailty[p] for p in pids])
        try:
            r, lo, hi = pearson_corr_ci(x, y)
        except ContractError as exc:
            skipped.append({"variable": variable, "kind": kind, "reason": str(exc)})
            return
        corr_rows.append({"variable": variable, "kind": kind, "sex": sex_label,
                          "r": r, "lo": lo, "hi": hi, "n": len(pids)})
        # percentile bins of the x quantity for the beeswarm export
        ranks = pd.Series(x).rank(pct=True).to_numpy()
        for pid, pct, fr in zip(pids, ranks, y):
            plot_rows.append({"variable": variable, "kind": kind, "sex": sex_label,
                              "practice_id": pid, "percentile_bin": int(np.ceil(pct * 10)),
                              "frailty": fr, "reference_line": 1.0})

    for report in reports:
        if set(report.source_ids) != practice_set:
            diff = sorted(practice_set.symmetric_difference(report.source_ids))
            raise ContractError(f"practice sets differ for {report.variable}: {diff}")
        spo = dict(zip(report.source_ids, report.spo))
        add_corr(report.variable, "spo", spo)
        base = report.variable.split(":", 1)[-1]
        for col in (f"mean_{base}", f"pct_{base}"):
            if col in per_practice.columns:
                add_corr(base, "practice_level", per_practice[col].to_dict())
                break

    correlations = pd.DataFrame(corr_rows)
    plot_data = pd.DataFrame(plot_rows)
    return correlations, plot_data, skipped


def risk_ranges_table(frailty, assignment: QuintileAssignment, base_risk=0.10,
                      sex_label="all") -> pd.DataFrame:
    """Per quintile, the frailty range and the
    frailty-adjusted risk range at the given base risk."""
    from .survival import adjust_risk

    rows = []
    frailty = dict(frailty)
    for quintile in range(1, 6):
        pids = assignment.practices_in(quintile)
        values = np.array([frailty[p] for p in pids])
        rows.append({
            "sex": sex_label,
            "quintile": quintile,
            "n_practices": len(pids),
            "frailty_min": float(values.min()),
            "frailty_max": float(values.max()),
            "risk_min": float(adjust_risk(base_risk, values.min())),
            "risk_max": float(adjust_risk(base_risk, values.max())),
        })
    return pd.DataFrame(rows)
