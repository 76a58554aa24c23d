"""Multi-practice cohort data model, CSV ingestion, eligibility and censoring.

A cohort is a collection of patient records grouped by general practice.
Records are stored in a pandas DataFrame with a fixed, documented column
layout (see ``CSV_COLUMNS``); missing values of optional fields are empty
CSV cells and ``NaN`` in memory, never sentinel numerics.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ContractError, InputError, SchemaError

SEXES = ("female", "male")

CONDITION_FLAGS = (
    "atrial_fibrillation",
    "chronic_kidney_disease",
    "erectile_dysfunction",
    "family_history_chd_lt60",
    "migraines",
    "rheumatoid_arthritis",
    "sle",
    "severe_mental_illness",
    "type1_diabetes",
    "type2_diabetes",
    "bp_treatment",
    "atypical_antipsychotic",
    "regular_steroids",
)

CENSOR_REASONS = ("cvd_event", "statin_start", "deregistration", "study_end", "other_death")

# Fields that may legitimately be missing and are targets for imputation.
IMPUTABLE_FIELDS = ("sbp", "sbp_sd", "bmi", "chol_hdl_ratio", "smoking", "ethnicity", "townsend")

CONTINUOUS_FIELDS = ("age", "sbp", "sbp_sd", "bmi", "chol_hdl_ratio")
CATEGORICAL_FIELDS = ("smoking", "ethnicity", "townsend")

CSV_COLUMNS = (
    ("patient_id", "practice_id", "sex", "age")
    + IMPUTABLE_FIELDS[:4]  # sbp, sbp_sd, bmi, chol_hdl_ratio
    + ("smoking", "ethnicity", "townsend")
    + CONDITION_FLAGS
    + ("follow_up_years", "event", "censor_reason")
)

AGE_RANGE = (25.0, 84.0)

_CATEGORY_RANGES = {"smoking": (0, 4), "ethnicity": (1, 9), "townsend": (1, 5)}


@dataclass(frozen=True)
class PatientRecord:
    """One subject's risk factors, follow-up and censoring outcome."""

    patient_id: str
    practice_id: str
    sex: str
    age_at_index: float
    follow_up_years: float
    event: bool
    censor_reason: str
    sbp: Optional[float] = None
    sbp_sd: Optional[float] = None
    bmi: Optional[float] = None
    chol_hdl_ratio: Optional[float] = None
    smoking_status: Optional[int] = None
    ethnicity: Optional[int] = None
    townsend_quintile: Optional[int] = None
    condition_flags: dict = field(default_factory=dict)


class Cohort:
    """Immutable multi-practice cohort backed by a DataFrame.

    Construct via :meth:`from_frame` or :func:`load_cohort`.  The underlying
    frame is treated as read-only; all mutating operations in this package
    return a new Cohort.
    """

    def __init__(self, frame: pd.DataFrame, validate: bool = True):
        frame = frame.reset_index(drop=True)
        if validate:
            _validate_frame(frame)
        self._frame = frame
        self._practice_index = None

    @classmethod
    def from_frame(cls, frame, validate=True):
        return cls(frame, validate=validate)

    @classmethod
    def from_records(cls, records):
        rows = []
        for rec in records:
            row = {
                "patient_id": rec.patient_id,
                "practice_id": rec.practice_id,
                "sex": rec.sex,
                "age": rec.age_at_index,
                "sbp": rec.sbp,
                "sbp_sd": rec.sbp_sd,
                "bmi": rec.bmi,
                "chol_hdl_ratio": rec.chol_hdl_ratio,
                "smoking": rec.smoking_status,
                "ethnicity": rec.ethnicity,
                "townsend": rec.townsend_quintile,
                "follow_up_years": rec.follow_up_years,
                "event": rec.event,
                "censor_reason": rec.censor_reason,
            }
            for flag in CONDITION_FLAGS:
                row[flag] = bool(rec.condition_flags.get(flag, False))
            rows.append(row)
        return cls(pd.DataFrame(rows, columns=list(CSV_COLUMNS)))

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    @property
    def practice_index(self) -> dict:
        """practice_id -> integer row positions, disjoint and exhaustive."""
        if self._practice_index is None:
            grouped = self._frame.groupby("practice_id", sort=True).indices
            self._practice_index = {pid: np.asarray(idx) for pid, idx in grouped.items()}
        return self._practice_index

    @property
    def practice_ids(self):
        return sorted(self.practice_index)

    @property
    def n_practices(self):
        return len(self.practice_index)

    def __len__(self):
        return len(self._frame)

    def records(self):
        """Iterate rows as PatientRecord objects."""
        for row in self._frame.itertuples(index=False):
            yield PatientRecord(
                patient_id=str(row.patient_id),
                practice_id=str(row.practice_id),
                sex=row.sex,
                age_at_index=float(row.age),
                follow_up_years=float(row.follow_up_years),
                event=bool(row.event),
                censor_reason=row.censor_reason,
                sbp=_none_if_nan(row.sbp),
                sbp_sd=_none_if_nan(row.sbp_sd),
                bmi=_none_if_nan(row.bmi),
                chol_hdl_ratio=_none_if_nan(row.chol_hdl_ratio),
                smoking_status=_none_if_nan(row.smoking, int),
                ethnicity=_none_if_nan(row.ethnicity, int),
                townsend_quintile=_none_if_nan(row.townsend, int),
                condition_flags={f: bool(getattr(row, f)) for f in CONDITION_FLAGS},
            )

    def with_frame(self, frame, validate=True):
        return Cohort(frame, validate=validate)

    def subset_practices(self, practice_ids):
        keep = self._frame["practice_id"].isin(set(practice_ids))
        return Cohort(self._frame.loc[keep], validate=False)


def _none_if_nan(value, cast=float):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return None
    return cast(value)


def _validate_frame(frame):
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")
    if len(frame) == 0:
        raise InputError("no data rows")
    bad_sex = ~frame["sex"].isin(SEXES)
    if bad_sex.any():
        raise InputError(f"row {bad_sex.idxmax() + 2}: invalid sex value")
    if (frame["follow_up_years"] <= 0).any():
        raise ContractError("follow_up_years must be > 0 for every record")
    lo, hi = AGE_RANGE
    if ((frame["age"] < lo) | (frame["age"] > hi)).any():
        raise ContractError(f"age_at_index outside [{lo}, {hi}]; run apply_eligibility first")
    bad_reason = ~frame["censor_reason"].isin(CENSOR_REASONS)
    if bad_reason.any():
        raise InputError(f"row {bad_reason.idxmax() + 2}: unknown censor_reason")
    ev = frame["event"].astype(bool)
    if not (ev == (frame["censor_reason"] == "cvd_event")).all():
        raise ContractError("event must be true exactly when censor_reason is cvd_event")


def _read_header(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            return next(reader)
        except StopIteration:
            raise InputError("no data rows") from None


def load_cohort(path, schema=None) -> Cohort:
    """Load a cohort CSV.

    Parameters
    ----------
    path : str or Path
    schema : dict, optional
        Mapping from canonical column name to the column name used in the
        file, for files whose headers deviate from ``CSV_COLUMNS``.
    """
    schema = schema or {}
    header = _read_header(path)
    seen = set()
    for col in header:
        if col in seen:
            raise SchemaError(f"duplicate header column: {col}")
        seen.add(col)
    rename = {v: k for k, v in schema.items()}
    canonical = [rename.get(c, c) for c in header]
    missing = [c for c in CSV_COLUMNS if c not in canonical]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")

    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    raw.columns = canonical
    if len(raw) == 0:
        raise InputError("no data rows")

    frame = pd.DataFrame(index=raw.index)
    frame["patient_id"] = raw["patient_id"]
    frame["practice_id"] = raw["practice_id"]
    frame["sex"] = raw["sex"].str.strip().str.lower()
    for col in CONTINUOUS_FIELDS:
        frame[col] = _parse_numeric(raw[col], col, optional=col != "age")
    for col in CATEGORICAL_FIELDS:
        frame[col] = _parse_numeric(raw[col], col, optional=True, integer=True)
    for col in CONDITION_FLAGS:
        frame[col] = _parse_flag(raw[col], col)
    frame["follow_up_years"] = _parse_numeric(raw["follow_up_years"], "follow_up_years",
                                              optional=False)
    frame["event"] = _parse_flag(raw["event"], "event")
    frame["censor_reason"] = raw["censor_reason"].str.strip()
    return Cohort(frame)


def _parse_numeric(series, name, optional, integer=False):
    stripped = series.str.strip()
    blank = stripped == ""
    if blank.any() and not optional:
        raise InputError(f"row {int(blank.idxmax()) + 2}: empty cell in required column {name}")
    values = pd.to_numeric(stripped.where(~blank, None), errors="coerce")
    bad = values.isna() & ~blank
    if bad.any():
        raise InputError(f"row {int(bad.idxmax()) + 2}: unparseable value "
                         f"{stripped[bad.idxmax()]!r} in column {name}")
    if integer:
        lo, hi = _CATEGORY_RANGES.get(name, (None, None))
        if lo is not None:
            out_of_range = (~values.isna()) & ((values < lo) | (values > hi))
            if out_of_range.any():
                raise InputError(f"row {int(out_of_range.idxmax()) + 2}: {name} outside "
                                 f"[{lo}, {hi}]")
    return values.astype(float)


def _parse_flag(series, name):
    stripped = series.str.strip()
    bad = ~stripped.isin(("0", "1"))
    if bad.any():
        raise InputError(f"row {int(bad.idxmax()) + 2}: column {name} must be 0 or 1")
    return stripped == "1"


def save_cohort(cohort: Cohort, path):
    """Write a cohort back to CSV; missing optional values become empty cells."""
    out = cohort.frame.copy()
    for col in CONDITION_FLAGS + ("event",):
        out[col] = out[col].astype(bool).astype(int)
    for col in CATEGORICAL_FIELDS:
        out[col] = out[col].map(lambda v: "" if pd.isna(v) else str(int(v)))
    out = out[list(CSV_COLUMNS)]
    out.to_csv(path, index=False, na_rep="", float_format="%.12g")


def apply_eligibility(records: pd.DataFrame, age_range=AGE_RANGE):
    """Screen raw records for eligibility.

    ``records`` must carry the cohort columns plus optional ``prior_cvd`` and
    ``prior_statin`` 0/1 columns.  Returns the eligible Cohort and an
    exclusion log with one reason per excluded record; screening never fails.
    """
    records = records.reset_index(drop=True)
    lo, hi = age_range
    prior_cvd = records.get("prior_cvd", pd.Series(0, index=records.index)).astype(bool)
    prior_statin = records.get("prior_statin", pd.Series(0, index=records.index)).astype(bool)
    age_bad = (records["age"] < lo) | (records["age"] > hi)

    reason = pd.Series(None, index=records.index, dtype=object)
    reason[prior_statin] = "prior_statin"
    reason[prior_cvd] = "prior_cvd"
    reason[age_bad] = "age_out_of_range"  # highest precedence, assigned last

    excluded = reason.notna()
    log = pd.DataFrame({
        "patient_id": records.loc[excluded, "patient_id"],
        "reason": reason[excluded],
    }).reset_index(drop=True)
    kept = records.loc[~excluded].drop(columns=["prior_cvd", "prior_statin"], errors="ignore")
    return Cohort(kept), log


def resolve_censoring(cvd_time=None, statin_time=None, dereg_time=None,
                      death_time=None, horizon=None):
    """Pick the earliest censoring cause and the resulting follow-up time.

    Ties are broken by the precedence
    cvd_event > statin_start > deregistration > other_death > study_end.
    """
    candidates = [
        ("cvd_event", cvd_time),
        ("statin_start", statin_time),
        ("deregistration", dereg_time),
        ("other_death", death_time),
        ("study_end", horizon),
    ]
    present = [(reason, float(t)) for reason, t in candidates if t is not None]
    if not present:
        raise ContractError("no candidate censoring times supplied")
    if horizon is not None and horizon <= 0:
        raise ContractError("horizon must be > 0")
    for reason, t in present:
        if t < 0:
            raise ContractError(f"candidate time for {reason} must be >= 0")
    best_reason, best_time = min(present, key=lambda rt: rt[1])  # stable: precedence order
    return best_time, best_reason == "cvd_event", best_reason
