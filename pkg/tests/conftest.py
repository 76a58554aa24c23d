import numpy as np
import pandas as pd
import pytest

from practivar import Cohort, GeneratorConfig, default_table, generate
from practivar.cohort import CONDITION_FLAGS, CSV_COLUMNS


def build_frame(n=12, n_practices=3, seed=0, event_frac=0.25):
    """Hand-rolled minimal valid cohort frame for edge-case tests."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        event = i < int(round(n * event_frac))
        row = {
            "patient_id": f"pt{i:04d}",
            "practice_id": f"pr{i % n_practices}",
            "sex": "female" if i % 2 == 0 else "male",
            "age": float(rng.uniform(30, 80)),
            "sbp": float(rng.uniform(100, 160)),
            "sbp_sd": float(rng.uniform(4, 15)),
            "bmi": float(rng.uniform(18, 40)),
            "chol_hdl_ratio": float(rng.uniform(2, 7)),
            "smoking": float(rng.integers(0, 5)),
            "ethnicity": float(rng.integers(1, 10)),
            "townsend": float(rng.integers(1, 6)),
            "follow_up_years": float(rng.uniform(0.5, 10.0)),
            "event": bool(event),
            "censor_reason": "cvd_event" if event else "study_end",
        }
        for flag in CONDITION_FLAGS:
            row[flag] = bool(rng.random() < 0.1)
        rows.append(row)
    return pd.DataFrame(rows)[list(CSV_COLUMNS)]


@pytest.fixture
def tiny_cohort():
    return Cohort(build_frame(n=24, n_practices=4, seed=3))


@pytest.fixture
def coef_table():
    return default_table()


@pytest.fixture(scope="session")
def synth_cohort():
    """Moderate synthetic cohort with real between-practice heterogeneity."""
    cfg = GeneratorConfig(n_practices=12, patients_per_practice=120.0,
                          intercept_sd=0.25, random_censor_rate=0.02, seed=11)
    cohort, truth = generate(cfg)
    return cohort, truth
