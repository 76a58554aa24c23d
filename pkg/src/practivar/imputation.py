"""Multiple imputation of missing risk factors.

Monotone sequential-regression imputation: imputable variables are ordered
by ascending missingness and each is modeled conditionally on all
already-completed variables plus survival-appropriate auxiliaries (the
Nelson-Aalen cumulative hazard at exit, the event flag, age and sex).
Continuous targets use a posterior-draw Bayesian linear model; categorical
targets a ridge-regularized multinomial with category draws from the
predicted probabilities.  The m passes use independent, seed-derived RNG
streams, so results are deterministic per (seed, m).
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression

from .cohort import CATEGORICAL_FIELDS, Cohort, IMPUTABLE_FIELDS
from .errors import ContractError, FitError
from .validation import check_positive

RIDGE = 1e-3  # documented regularization strength for the conditional models


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous nondecreasing step function, 0 before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ContractError("jump times must be strictly ascending")
        if np.any(values < 0) or np.any(np.diff(values) < 0):
            raise ContractError("cumulative values must be nonnegative and nondecreasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.values])
        out = padded[idx]
        return float(out) if out.ndim == 0 else out


def nelson_aalen(times, events) -> StepFunction:
    """Nelson-Aalen cumulative hazard H(t) = sum_{t_j <= t} d_j / n_j."""
    times = check_positive(np.asarray(times, dtype=float), "times")
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ContractError("empty input")
    if times.shape != events.shape:
        raise ContractError("times and events must have equal length")
    order = np.argsort(times, kind="stable")
    t, e = times[order], events[order]
    event_times, d = np.unique(t[e], return_counts=True)
    if event_times.size == 0:
        return StepFunction(np.array([]), np.array([]))
    n_at_risk = len(t) - np.searchsorted(t, event_times, side="left")
    return StepFunction(event_times, np.cumsum(d / n_at_risk))


@dataclass
class CompletedCohorts:
    cohorts: list
    m: int
    seed: int
    config: dict

    def __iter__(self):
        return iter(self.cohorts)

    def __len__(self):
        return len(self.cohorts)


def impute(cohort: Cohort, m: int = 10, seed: int = 0,
           variables=IMPUTABLE_FIELDS) -> CompletedCohorts:
    """Produce m completed cohorts; observed cells are never modified."""
    frame = cohort.frame
    miss_frac = {v: float(frame[v].isna().mean()) for v in variables}
    fully_missing = [v for v, f in miss_frac.items() if f >= 1.0]
    if fully_missing:
        raise FitError(f"variable {fully_missing[0]!r} is 100% missing; "
                       "no donor information")
    targets = sorted((v for v in variables if miss_frac[v] > 0), key=lambda v: miss_frac[v])

    aux = _auxiliary_design(frame)
    root = np.random.SeedSequence((int(seed), 0xC0DE))
    children = root.spawn(m)
    completed = []
    for k in range(m):
        if not targets:
            completed.append(Cohort(frame.copy(), validate=False))
            continue
        rng = np.random.default_rng(children[k])
        work = frame.copy()
        done = []
        for var in targets:
            _impute_one(work, var, aux, done, rng)
            done.append(var)
        completed.append(Cohort(work, validate=False))
    config = {"m": m, "seed": seed, "ridge": RIDGE,
              "order": targets, "auxiliaries": ["nelson_aalen", "event", "age", "sex"]}
    return CompletedCohorts(cohorts=completed, m=m, seed=seed, config=config)


def _auxiliary_design(frame):
    """Always-observed predictors: NA cumulative hazard, event, age, sex."""
    na = nelson_aalen(frame["follow_up_years"].to_numpy(), frame["event"].to_numpy())
    return np.column_stack([
        na(frame["follow_up_years"].to_numpy()),
        frame["event"].to_numpy(dtype=float),
        frame["age"].to_numpy(dtype=float),
        (frame["sex"] == "male").to_numpy(dtype=float),
    ])


def _design(work, aux, done):
    cols = [aux]
    for var in done:
        vals = work[var].to_numpy(dtype=float)
        if var in CATEGORICAL_FIELDS:
            levels = np.unique(vals)
            cols.append(np.column_stack([(vals == lv).astype(float) for lv in levels[1:]]))
        else:
            cols.append(vals.reshape(-1, 1))
    x = np.column_stack(cols)
    return (x - x.mean(axis=0)) / np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)


def _impute_one(work, var, aux, done, rng):
    x = _design(work, aux, done)
    obs = ~work[var].isna().to_numpy()
    if var in CATEGORICAL_FIELDS:
        _impute_categorical(work, var, x, obs, rng)
    else:
        _impute_continuous(work, var, x, obs, rng)


def _impute_continuous(work, var, x, obs, rng):
    x1 = np.column_stack([np.ones(len(x)), x])
    xo, yo = x1[obs], work.loc[obs, var].to_numpy(dtype=float)
    n, p = xo.shape
    gram = xo.T @ xo + RIDGE * np.eye(p)
    try:
        gram_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular design when imputing {var!r}") from exc
    beta_hat = gram_inv @ (xo.T @ yo)
    resid = yo - xo @ beta_hat
    dof = max(n - p, 1)
    sigma2 = float(resid @ resid) / rng.chisquare(dof)
    cov = sigma2 * 0.5 * (gram_inv + gram_inv.T)
    beta = rng.multivariate_normal(beta_hat, cov, method="eigh")
    miss = ~obs
    draws = x1[miss] @ beta + rng.normal(0.0, np.sqrt(sigma2), size=miss.sum())
    lo, hi = yo.min(), yo.max()
    work.loc[miss, var] = np.clip(draws, lo, hi)  # keep imputations in the observed range


def _impute_categorical(work, var, x, obs, rng):
    yo = work.loc[obs, var].to_numpy(dtype=float).astype(int)
    classes = np.unique(yo)
    miss = ~obs
    if classes.size == 1:
        work.loc[miss, var] = float(classes[0])
        return
    model = LogisticRegression(C=1.0 / RIDGE, max_iter=1000)
    try:
        model.fit(x[obs], yo)
    except ValueError as exc:
        raise FitError(f"singular design when imputing {var!r}") from exc
    proba = model.predict_proba(x[miss])
    cum = np.cumsum(proba, axis=1)
    u = rng.random(miss.sum())
    picks = (u[:, None] > cum).sum(axis=1)
    work.loc[miss, var] = model.classes_[picks].astype(float)


def pool(estimates) -> np.ndarray:
    """Element-wise mean across per-dataset estimate vectors."""
    arrays = [np.atleast_1d(np.asarray(e, dtype=float)) for e in estimates]
    if not arrays:
        raise ContractError("no estimates to pool")
    length = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != length:
            raise ContractError("estimate vectors must all have the same length")
    return np.mean(arrays, axis=0)


def write_completed(completed: CompletedCohorts, out_dir, stem="imputed"):
    """Write the m cohorts as CSV files plus an index manifest."""
    import json
    from pathlib import Path

    from .cohort import save_cohort

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, cohort in enumerate(completed, start=1):
        path = out_dir / f"{stem}_{k:02d}.csv"
        save_cohort(cohort, path)
        paths.append(path.name)
    index = {"m": completed.m, "seed": completed.seed,
             "config": completed.config, "files": paths}
    with open(out_dir / f"{stem}_index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    return paths
