"""Configurable per-sex linear predictor and 10-year risk evaluation.

A coefficient table specifies, separately for each sex, a set of continuous
terms (transform, centering constant, coefficient), categorical terms (one
coefficient per level with a zero-coefficient reference level), age-by-factor
interaction terms, and a 10-year baseline survival.  The transform registry
is closed: tables referencing anything outside it are rejected at load time.

The exact coefficients of published clinical scores are not shipped; a
documented synthetic default table with plausible magnitudes is provided for
pipelines and tests.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ContractError, SchemaError


def _pow(p):
    return lambda x: np.power(x, p)


def _pow_ln(p):
    return lambda x: np.power(x, p) * np.log(x)


TRANSFORMS = {"identity": lambda x: x, "ln": np.log}
for _p in (-2, -1, -0.5, 0.5, 1, 2, 3):
    _name = f"pow_{_p:g}"
    TRANSFORMS[_name] = _pow(_p)
    TRANSFORMS[_name + "_ln"] = _pow_ln(_p)


@dataclass(frozen=True)
class ContinuousTerm:
    variable: str
    transform: str
    center: float
    coefficient: float


@dataclass(frozen=True)
class InteractionTerm:
    """age-transform x factor interaction: coef * (T(age) - center) * 1[factor == level]."""

    variable: str
    level: str
    age_transform: str
    age_center: float
    coefficient: float


@dataclass
class SexModel:
    continuous: list = field(default_factory=list)
    categorical: dict = field(default_factory=dict)  # variable -> {level: coef}
    interactions: list = field(default_factory=list)
    baseline_survival_10y: float = None


class CoefficientTable:
    """Per-sex linear-predictor specification."""

    def __init__(self, models: dict):
        for sex, model in models.items():
            _validate_sex_model(sex, model)
        self.models = models

    def sexes(self):
        return sorted(self.models)

    def baseline_survival(self, sex):
        return self._model(sex).baseline_survival_10y

    def _model(self, sex):
        if sex not in self.models:
            raise ContractError(f"no coefficient model for sex {sex!r}")
        return self.models[sex]

    def linear_predictor(self, data, sex=None):
        """Evaluate the linear predictor.

        ``data`` may be a PatientRecord, a mapping of variable values, or a
        DataFrame (vectorized; uses its ``sex`` column unless ``sex`` given).
        Referenced values must be present: a missing value raises rather than
        silently contributing zero.
        """
        if isinstance(data, pd.DataFrame):
            return self._lp_frame(data, sex)
        values = _as_mapping(data)
        use_sex = sex or values.get("sex")
        model = self._model(use_sex)
        lp = 0.0
        for term in model.continuous:
            lp += term.coefficient * (_transform_scalar(term, values) - term.center)
        for variable, levels in model.categorical.items():
            lp += levels[_level_of(values, variable)]
        for term in model.interactions:
            if _level_of(values, term.variable) == term.level:
                age = _required(values, "age")
                lp += term.coefficient * (TRANSFORMS[term.age_transform](age) - term.age_center)
        return lp

    def _lp_frame(self, frame, sex=None):
        lp = np.zeros(len(frame))
        sexes = pd.Series(sex, index=frame.index) if sex else frame["sex"]
        for s, model in self.models.items():
            mask = (sexes == s).to_numpy()
            if not mask.any():
                continue
            sub = frame.loc[mask]
            part = np.zeros(mask.sum())
            for term in model.continuous:
                vals = _required_column(sub, term.variable)
                part += term.coefficient * (TRANSFORMS[term.transform](vals) - term.center)
            for variable, levels in model.categorical.items():
                vals = _required_column(sub, variable, numeric=False)
                part += np.array([levels[_level_key(v, variable)] for v in vals])
            for term in model.interactions:
                vals = _required_column(sub, term.variable, numeric=False)
                hit = np.array([_level_key(v, term.variable) == term.level for v in vals])
                if hit.any():
                    age = _required_column(sub, "age")
                    tr = TRANSFORMS[term.age_transform](age) - term.age_center
                    part += term.coefficient * tr * hit
            lp[mask] = part
        unknown = ~sexes.isin(self.models.keys())
        if unknown.any():
            raise ContractError(f"no coefficient model for sex {sexes[unknown].iloc[0]!r}")
        return lp

    def risk(self, lp, sex):
        """10-year risk 1 - S0 ** exp(lp)."""
        return risk_from_lp(lp, self, sex)


def risk_from_lp(lp, table, sex):
    s0 = table.baseline_survival(sex)
    return 1.0 - np.power(s0, np.exp(np.asarray(lp, dtype=float)))


def linear_predictor(record, table, sex=None):
    return table.linear_predictor(record, sex=sex)


def _as_mapping(record):
    if hasattr(record, "condition_flags"):  # PatientRecord
        values = {
            "sex": record.sex,
            "age": record.age_at_index,
            "sbp": record.sbp,
            "sbp_sd": record.sbp_sd,
            "bmi": record.bmi,
            "chol_hdl_ratio": record.chol_hdl_ratio,
            "smoking": record.smoking_status,
            "ethnicity": record.ethnicity,
            "townsend": record.townsend_quintile,
        }
        for flag, val in record.condition_flags.items():
            values[flag] = val
        return values
    return dict(record)


def _required(values, variable):
    if variable not in values or values[variable] is None:
        raise ContractError(f"missing value for referenced variable {variable!r}")
    val = values[variable]
    if isinstance(val, float) and np.isnan(val):
        raise ContractError(f"missing value for referenced variable {variable!r}")
    return val


def _required_column(frame, variable, numeric=True):
    if variable not in frame.columns:
        raise ContractError(f"missing value for referenced variable {variable!r}")
    col = frame[variable]
    if col.isna().any():
        raise ContractError(f"missing value for referenced variable {variable!r}")
    return col.to_numpy(dtype=float) if numeric else col.to_numpy()


def _transform_scalar(term, values):
    return TRANSFORMS[term.transform](float(_required(values, term.variable)))


def _level_key(value, variable):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, float) and float(value).is_integer():
        return str(int(value))
    return str(value)


def _level_of(values, variable):
    return _level_key(_required(values, variable), variable)


def _validate_sex_model(sex, model):
    if sex not in ("female", "male"):
        raise SchemaError(f"unknown sex {sex!r}")
    if model.baseline_survival_10y is None or not (0 < model.baseline_survival_10y < 1):
        raise SchemaError(f"baseline_survival_10y for {sex} must lie in (0, 1)")
    seen = set()
    for term in model.continuous:
        if term.transform not in TRANSFORMS:
            raise SchemaError(f"unknown transform {term.transform!r}")
        key = (term.variable, term.transform)
        if key in seen:
            raise SchemaError(f"duplicate term for variable {term.variable!r}")
        seen.add(key)
    for variable, levels in model.categorical.items():
        if not any(coef == 0.0 for coef in levels.values()):
            raise SchemaError(f"categorical variable {variable!r} lacks a "
                              "zero-coefficient reference level")
    for term in model.interactions:
        if term.age_transform not in TRANSFORMS:
            raise SchemaError(f"unknown transform {term.age_transform!r}")


_COEF_HEADER = ["sex", "kind", "variable", "transform", "centering", "level", "coefficient"]


def load_coefficients(path) -> CoefficientTable:
    """Load a coefficient table from its documented CSV schema."""
    with open(path, newline="") as fh:
        return _parse_coefficients(fh)


def loads_coefficients(text) -> CoefficientTable:
    return _parse_coefficients(io.StringIO(text))


def _parse_coefficients(fh):
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != _COEF_HEADER:
        raise SchemaError(f"coefficient file header must be {','.join(_COEF_HEADER)}")
    models = {}
    cat_seen = set()
    for row in reader:
        sex = row["sex"].strip()
        model = models.setdefault(sex, SexModel())
        kind = row["kind"].strip()
        if kind == "baseline":
            if model.baseline_survival_10y is not None:
                raise SchemaError(f"duplicate baseline row for sex {sex}")
            model.baseline_survival_10y = float(row["coefficient"])
        elif kind == "continuous":
            model.continuous.append(ContinuousTerm(
                variable=row["variable"].strip(),
                transform=row["transform"].strip(),
                center=float(row["centering"] or 0.0),
                coefficient=float(row["coefficient"]),
            ))
        elif kind == "categorical":
            variable, level = row["variable"].strip(), row["level"].strip()
            if (sex, variable, level) in cat_seen:
                raise SchemaError(f"duplicate term for variable {variable!r}")
            cat_seen.add((sex, variable, level))
            model.categorical.setdefault(variable, {})[level] = float(row["coefficient"])
        elif kind == "interaction":
            model.interactions.append(InteractionTerm(
                variable=row["variable"].strip(),
                level=row["level"].strip(),
                age_transform=row["transform"].strip(),
                age_center=float(row["centering"] or 0.0),
                coefficient=float(row["coefficient"]),
            ))
        else:
            raise SchemaError(f"unknown term kind {kind!r}")
    return CoefficientTable(models)


def save_coefficients(table: CoefficientTable, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COEF_HEADER)
        for sex in table.sexes():
            model = table.models[sex]
            writer.writerow([sex, "baseline", "", "", "", "", repr(model.baseline_survival_10y)])
            for t in model.continuous:
                writer.writerow([sex, "continuous", t.variable, t.transform,
                                 repr(t.center), "", repr(t.coefficient)])
            for variable, levels in model.categorical.items():
                for level, coef in levels.items():
                    writer.writerow([sex, "categorical", variable, "", "", level, repr(coef)])
            for t in model.interactions:
                writer.writerow([sex, "interaction", t.variable, t.age_transform,
                                 repr(t.age_center), t.level, repr(t.coefficient)])


def default_table() -> CoefficientTable:
    """Synthetic coefficient table with plausible magnitudes.

    Not a published clinical score; centerings sit near population means so
    an average subject has a linear predictor close to zero.
    """
    def smoking_levels(scale):
        return {"0": 0.0, "1": 0.12 * scale, "2": 0.35 * scale,
                "3": 0.55 * scale, "4": 0.75 * scale}

    def ethnicity_levels():
        coefs = [0.0, 0.28, 0.35, 0.22, 0.18, -0.10, -0.05, 0.08, 0.02]
        return {str(i + 1): c for i, c in enumerate(coefs)}

    def townsend_levels():
        return {str(i + 1): 0.06 * i for i in range(5)}

    def flags(items):
        return [("categorical", name, {"0": 0.0, "1": coef}) for name, coef in items]

    models = {}
    for sex, baseline, age_coef, sbp_coef in (("female", 0.985, 0.062, 0.011),
                                              ("male", 0.975, 0.058, 0.010)):
        model = SexModel(baseline_survival_10y=baseline)
        model.continuous = [
            ContinuousTerm("age", "identity", 47.0, age_coef),
            ContinuousTerm("age", "pow_2", 2209.0, -0.00015),
            ContinuousTerm("sbp", "identity", 127.0, sbp_coef),
            ContinuousTerm("sbp_sd", "identity", 9.0, 0.012),
            ContinuousTerm("bmi", "ln", float(np.log(26.3)), 0.9),
            ContinuousTerm("chol_hdl_ratio", "identity", 4.0, 0.15),
        ]
        model.categorical = {
            "smoking": smoking_levels(1.0 if sex == "female" else 0.9),
            "ethnicity": ethnicity_levels(),
            "townsend": townsend_levels(),
        }
        for kind, name, levels in flags([
            ("atrial_fibrillation", 0.85), ("chronic_kidney_disease", 0.55),
            ("erectile_dysfunction", 0.20 if sex == "male" else 0.0),
            ("family_history_chd_lt60", 0.45), ("migraines", 0.25),
            ("rheumatoid_arthritis", 0.22), ("sle", 0.50),
            ("severe_mental_illness", 0.12), ("type1_diabetes", 1.0),
            ("type2_diabetes", 0.55), ("bp_treatment", 0.50),
            ("atypical_antipsychotic", 0.10), ("regular_steroids", 0.25),
        ]):
            model.categorical[name] = levels
        model.interactions = [
            InteractionTerm("type2_diabetes", "1", "identity", 47.0, -0.006),
            InteractionTerm("bp_treatment", "1", "identity", 47.0, -0.004),
        ]
        models[sex] = model
    return CoefficientTable(models)
