"""Synthetic multi-practice cohorts with known ground-truth heterogeneity.

Survival times are drawn by inverse transform from a Weibull cumulative
hazard (exponential as shape = 1) scaled by exp((1 + u_p) * lp_i + b_p),
where b_p ~ N(0, intercept_sd^2) is the practice random intercept and
u_p ~ N(0, slope_sd^2) the practice random slope on the whole linear
predictor.  Every stochastic mechanism draws from its own documented,
seed-derived RNG stream, so toggling one mechanism never shifts the others'
draws.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
import yaml

from .cohort import (CATEGORICAL_FIELDS, CONDITION_FLAGS, Cohort, CSV_COLUMNS,
                     IMPUTABLE_FIELDS, resolve_censoring)
from .errors import ConfigError, GenerationError
from .riskmodel import CoefficientTable, default_table

# fixed purpose tags for the per-mechanism RNG streams
_STREAMS = {"sizes": 1, "effects": 2, "factors": 3, "survival": 4,
            "censoring": 5, "missingness": 6, "flips": 7}


def _stream(seed, purpose, practice=None):
    key = (int(seed), _STREAMS[purpose]) + (() if practice is None else (int(practice),))
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class FactorSpec:
    """Population distribution of one risk factor plus its practice-level shift."""

    name: str
    kind: str                      # continuous | categorical | flag
    mean: float = None
    sd: float = None
    lower: float = None
    upper: float = None
    levels: tuple = None
    probs: tuple = None
    prevalence: float = None
    practice_shift_sd: float = 0.0


def default_factor_model():
    cont = [
        ("age", 47.0, 11.0, 25.0, 84.0, 1.5),
        ("sbp", 127.0, 14.0, 80.0, 220.0, 2.0),
        ("sbp_sd", 9.0, 3.0, 0.5, 40.0, 0.5),
        ("bmi", 26.3, 4.2, 14.0, 55.0, 0.4),
        ("chol_hdl_ratio", 4.0, 1.0, 1.0, 12.0, 0.1),
    ]
    specs = [FactorSpec(name=n, kind="continuous", mean=m, sd=s, lower=lo, upper=hi,
                        practice_shift_sd=shift)
             for n, m, s, lo, hi, shift in cont]
    specs.append(FactorSpec(name="smoking", kind="categorical",
                            levels=tuple(range(5)),
                            probs=(0.45, 0.15, 0.18, 0.14, 0.08),
                            practice_shift_sd=0.15))
    specs.append(FactorSpec(name="ethnicity", kind="categorical",
                            levels=tuple(range(1, 10)),
                            probs=(0.80, 0.04, 0.03, 0.03, 0.03, 0.02, 0.02, 0.02, 0.01),
                            practice_shift_sd=0.3))
    specs.append(FactorSpec(name="townsend", kind="categorical",
                            levels=tuple(range(1, 6)),
                            probs=(0.2, 0.2, 0.2, 0.2, 0.2),
                            practice_shift_sd=0.25))
    prevalences = {
        "atrial_fibrillation": 0.008, "chronic_kidney_disease": 0.010,
        "erectile_dysfunction": 0.015, "family_history_chd_lt60": 0.035,
        "migraines": 0.060, "rheumatoid_arthritis": 0.006, "sle": 0.001,
        "severe_mental_illness": 0.070, "type1_diabetes": 0.002,
        "type2_diabetes": 0.013, "bp_treatment": 0.065,
        "atypical_antipsychotic": 0.004, "regular_steroids": 0.001,
    }
    specs.extend(FactorSpec(name=n, kind="flag", prevalence=p, practice_shift_sd=0.1)
                 for n, p in prevalences.items())
    return specs


@dataclass
class GeneratorConfig:
    n_practices: int = 20
    patients_per_practice: float = 200.0
    patient_count_dispersion: float = 0.0   # SD of a log-normal size multiplier
    intercept_sd: float = 0.0
    slope_sd: float = 0.0
    baseline_shape: float = 1.0
    baseline_scale: float = 100.0           # years; exponential rate = 1/scale at shape 1
    horizon: float = 10.0
    random_censor_rate: float = 0.0         # per-year deregistration rate
    factor_model: list = field(default_factory=default_factor_model)
    missing_rates: dict = field(default_factory=dict)  # var -> rate or (alpha, beta)
    flip_prob: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_practices < 1 or self.patients_per_practice < 1:
            raise ConfigError("n_practices and patients_per_practice must be >= 1")
        if self.intercept_sd < 0 or self.slope_sd < 0:
            raise ConfigError("intercept_sd and slope_sd must be >= 0")
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if not (0 <= self.flip_prob <= 0.5):
            raise ConfigError("flip_prob must lie in [0, 0.5]")
        if self.random_censor_rate < 0 or self.patient_count_dispersion < 0:
            raise ConfigError("rates must be >= 0")
        if self.baseline_shape <= 0 or self.baseline_scale <= 0:
            raise ConfigError("baseline shape and scale must be > 0")
        return self

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "factor_model" in raw:
            raw["factor_model"] = [FactorSpec(**spec) for spec in raw["factor_model"]]
        if "missing_rates" in raw:
            raw["missing_rates"] = {k: tuple(v) if isinstance(v, (list, tuple)) else float(v)
                                    for k, v in raw["missing_rates"].items()}
        return cls(**raw).validate()

    def to_dict(self):
        out = asdict(self)
        out["factor_model"] = [asdict(s) for s in self.factor_model]
        return out


@dataclass
class GroundTruth:
    """The practice effects and baseline actually used by the generator."""

    practice_ids: list
    b: np.ndarray
    u: np.ndarray
    baseline_shape: float
    baseline_scale: float

    def to_frame(self):
        return pd.DataFrame({"practice_id": self.practice_ids, "b": self.b, "u": self.u})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.12g")


def generate(config: GeneratorConfig, table: CoefficientTable = None):
    """Generate a cohort and the ground truth that produced it."""
    config.validate()
    table = table or default_table()
    seed = config.seed
    P = config.n_practices
    practice_ids = [f"P{k:04d}" for k in range(P)]

    eff = _stream(seed, "effects")
    b = eff.normal(0.0, config.intercept_sd, size=P) if config.intercept_sd > 0 else np.zeros(P)
    u = eff.normal(0.0, config.slope_sd, size=P) if config.slope_sd > 0 else np.zeros(P)

    size_rng = _stream(seed, "sizes")
    if config.patient_count_dispersion > 0:
        mult = np.exp(size_rng.normal(0.0, config.patient_count_dispersion, size=P))
    else:
        mult = np.ones(P)
    sizes = np.maximum(1, np.round(config.patients_per_practice * mult).astype(int))

    frames = []
    for k, pid in enumerate(practice_ids):
        frames.append(_generate_practice(config, table, seed, k, pid,
                                         int(sizes[k]), b[k], u[k]))
    frame = pd.concat(frames, ignore_index=True)[list(CSV_COLUMNS)]
    truth = GroundTruth(practice_ids=practice_ids, b=b, u=u,
                        baseline_shape=config.baseline_shape,
                        baseline_scale=config.baseline_scale)
    return Cohort(frame), truth


def _generate_practice(config, table, seed, k, pid, n, b_k, u_k):
    fr = _stream(seed, "factors", k)
    frame = pd.DataFrame({
        "patient_id": [f"{pid}-{i:05d}" for i in range(n)],
        "practice_id": pid,
        "sex": np.where(fr.random(n) < 0.5, "female", "male"),
    })
    for spec in config.factor_model:
        frame[spec.name] = _draw_factor(spec, fr, n)
    for flag in CONDITION_FLAGS:
        if flag not in frame.columns:
            frame[flag] = False

    lp = table.linear_predictor(frame)
    if not np.all(np.isfinite(lp)):
        bad = int(np.argmax(~np.isfinite(lp)))
        culprit = _first_nonfinite_factor(frame, bad)
        raise GenerationError(f"non-finite linear predictor in practice {pid} "
                              f"(factor {culprit})")

    sv = _stream(seed, "survival", k)
    eta = (1.0 + u_k) * lp + b_k
    # inverse transform through the Weibull cumulative hazard
    exp_draw = sv.exponential(1.0, size=n)
    t_event = config.baseline_scale * np.power(exp_draw / np.exp(eta),
                                               1.0 / config.baseline_shape)

    cz = _stream(seed, "censoring", k)
    if config.random_censor_rate > 0:
        t_dereg = cz.exponential(1.0 / config.random_censor_rate, size=n)
    else:
        t_dereg = np.full(n, np.inf)

    fu = np.empty(n)
    ev = np.empty(n, dtype=bool)
    reasons = np.empty(n, dtype=object)
    for i in range(n):
        dereg = None if not np.isfinite(t_dereg[i]) else float(t_dereg[i])
        fu[i], ev[i], reasons[i] = resolve_censoring(
            cvd_time=float(t_event[i]), dereg_time=dereg, horizon=config.horizon)
    fu = np.maximum(fu, 1e-6)  # keep follow-up strictly positive
    frame["follow_up_years"] = fu
    frame["event"] = ev
    frame["censor_reason"] = reasons
    return frame


def _first_nonfinite_factor(frame, row):
    for spec_name in frame.columns:
        val = frame.iloc[row][spec_name]
        if isinstance(val, (float, np.floating)) and not np.isfinite(val):
            return spec_name
    return "unknown"


def _draw_factor(spec: FactorSpec, rng, n):
    if spec.kind == "continuous":
        mean = spec.mean + (rng.normal(0.0, spec.practice_shift_sd)
                            if spec.practice_shift_sd > 0 else 0.0)
        vals = rng.normal(mean, spec.sd, size=n)
        return np.clip(vals, spec.lower, spec.upper)
    if spec.kind == "categorical":
        logp = np.log(np.asarray(spec.probs, dtype=float))
        if spec.practice_shift_sd > 0:
            logp = logp + rng.normal(0.0, spec.practice_shift_sd, size=len(logp))
        probs = np.exp(logp - logp.max())
        probs /= probs.sum()
        return rng.choice(np.asarray(spec.levels, dtype=float), size=n, p=probs)
    if spec.kind == "flag":
        logit = np.log(spec.prevalence / (1 - spec.prevalence))
        if spec.practice_shift_sd > 0:
            logit += rng.normal(0.0, spec.practice_shift_sd)
        p = 1.0 / (1.0 + np.exp(-logit))
        return rng.random(n) < p
    raise ConfigError(f"unknown factor kind {spec.kind!r}")


# age effect on the odds of missingness under MAR_age (log-odds per year
# above age 50); documented in the README schema notes
MAR_AGE_SLOPE = 0.04


def inject_missingness(cohort: Cohort, missing_rates, mechanism="MCAR", seed=0) -> Cohort:
    """Blank imputable fields at per-practice rates.

    ``missing_rates`` maps a variable to either a scalar rate in [0, 1]
    (same for every practice) or a (alpha, beta) Beta hyper-parameter pair
    from which one rate per practice is drawn.  ``MAR_age`` multiplies the
    odds of missingness by exp(MAR_AGE_SLOPE * (age - 50)); follow-up and
    event fields are never blanked.
    """
    if mechanism not in ("MCAR", "MAR_age"):
        raise ConfigError(f"unknown missingness mechanism {mechanism!r}")
    frame = cohort.frame.copy()
    practice_ids = cohort.practice_ids
    rng = _stream(seed, "missingness")
    for var, rate_spec in missing_rates.items():
        if var not in IMPUTABLE_FIELDS:
            raise ConfigError(f"variable {var!r} is not imputable")
        if isinstance(rate_spec, (tuple, list)):
            alpha, beta = rate_spec
            if alpha <= 0 or beta <= 0:
                raise ConfigError("Beta hyper-parameters must be > 0")
            rates = {pid: rng.beta(alpha, beta) for pid in practice_ids}
        else:
            rate = float(rate_spec)
            if not (0 <= rate <= 1):
                raise ConfigError(f"missing rate for {var!r} outside [0, 1]")
            rates = {pid: rate for pid in practice_ids}
        for pid, idx in cohort.practice_index.items():
            p = rates[pid]
            if p == 0:
                continue
            if mechanism == "MAR_age":
                age = frame["age"].to_numpy()[idx]
                if p >= 1:
                    probs = np.ones(len(idx))
                else:
                    odds = (p / (1 - p)) * np.exp(MAR_AGE_SLOPE * (age - 50.0))
                    probs = odds / (1 + odds)
            else:
                probs = np.full(len(idx), p)
            blank = rng.random(len(idx)) < probs
            col = frame.columns.get_loc(var)
            frame.iloc[idx[blank], col] = np.nan
    return Cohort(frame, validate=False)


def inject_misclassification(cohort: Cohort, flip_prob, seed=0) -> Cohort:
    """Flip each condition flag independently with probability flip_prob."""
    if not (0 <= flip_prob <= 0.5):
        raise ConfigError("flip_prob must lie in [0, 0.5]")
    frame = cohort.frame.copy()
    if flip_prob == 0:
        return Cohort(frame, validate=False)
    rng = _stream(seed, "flips")
    for flag in CONDITION_FLAGS:
        flips = rng.random(len(frame)) < flip_prob
        frame[flag] = frame[flag].to_numpy(dtype=bool) ^ flips
    return Cohort(frame, validate=False)
