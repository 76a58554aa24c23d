import numpy as np
import pytest

from practivar import GeneratorConfig, generate, inject_misclassification, inject_missingness
from practivar.cohort import CONDITION_FLAGS, IMPUTABLE_FIELDS
from practivar.errors import ConfigError

from conftest import build_frame
from practivar import Cohort


def test_generate_deterministic_in_seed():
    cfg = GeneratorConfig(n_practices=5, patients_per_practice=50.0,
                          intercept_sd=0.2, seed=42)
    c1, t1 = generate(cfg)
    c2, t2 = generate(cfg)
    assert c1.frame.equals(c2.frame)
    assert np.array_equal(t1.b, t2.b)
    c3, _ = generate(GeneratorConfig(n_practices=5, patients_per_practice=50.0,
                                     intercept_sd=0.2, seed=43))
    assert not c1.frame.equals(c3.frame)


def test_generate_shapes_and_truth():
    cfg = GeneratorConfig(n_practices=7, patients_per_practice=60.0,
                          intercept_sd=0.3, slope_sd=0.1, seed=0)
    cohort, truth = generate(cfg)
    assert cohort.n_practices == 7
    assert list(truth.practice_ids) == cohort.practice_ids
    assert len(truth.b) == 7 and len(truth.u) == 7
    assert truth.b.std() > 0 and truth.u.std() > 0


def test_generate_zero_heterogeneity():
    cfg = GeneratorConfig(n_practices=4, patients_per_practice=40.0, seed=1)
    _, truth = generate(cfg)
    assert np.allclose(truth.b, 0) and np.allclose(truth.u, 0)


def test_follow_up_respects_horizon():
    cfg = GeneratorConfig(n_practices=4, patients_per_practice=80.0,
                          horizon=5.0, seed=2)
    cohort, _ = generate(cfg)
    fu = cohort.frame["follow_up_years"]
    assert (fu > 0).all() and (fu <= 5.0).all()
    at_end = cohort.frame["censor_reason"] == "study_end"
    assert np.allclose(fu[at_end], 5.0)


def test_higher_frailty_means_more_events():
    cfg = GeneratorConfig(n_practices=30, patients_per_practice=200.0,
                          intercept_sd=0.5, seed=3)
    cohort, truth = generate(cfg)
    rates = cohort.frame.groupby("practice_id")["event"].mean()
    rates = rates.reindex(truth.practice_ids).to_numpy()
    assert np.corrcoef(truth.b, rates)[0, 1] > 0.6


def test_patient_count_dispersion():
    cfg = GeneratorConfig(n_practices=15, patients_per_practice=100.0,
                          patient_count_dispersion=0.5, seed=4)
    cohort, _ = generate(cfg)
    sizes = cohort.frame["practice_id"].value_counts()
    assert sizes.std() > 10


def test_random_censoring():
    cfg = GeneratorConfig(n_practices=5, patients_per_practice=100.0,
                          random_censor_rate=0.2, seed=5)
    cohort, _ = generate(cfg)
    assert (cohort.frame["censor_reason"] == "deregistration").any()


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_practices=0).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(flip_prob=0.7).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(horizon=-1.0).validate()


def test_config_from_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("n_practices: 3\nnonsense_key: 1\n")
    with pytest.raises(ConfigError, match="nonsense_key"):
        GeneratorConfig.from_file(path)


def test_inject_missingness_mcar_rate():
    cohort = Cohort(build_frame(n=2000, n_practices=4, seed=6))
    out = inject_missingness(cohort, {"sbp": 0.3}, seed=0)
    frac = out.frame["sbp"].isna().mean()
    assert frac == pytest.approx(0.3, abs=0.03)
    # original untouched
    assert cohort.frame["sbp"].notna().all()


def test_inject_missingness_beta_rates_vary_by_practice():
    cohort = Cohort(build_frame(n=3000, n_practices=6, seed=7))
    out = inject_missingness(cohort, {"bmi": (2.0, 6.0)}, seed=1)
    per_practice = out.frame.groupby("practice_id")["bmi"].apply(lambda s: s.isna().mean())
    assert per_practice.std() > 0.02


def test_inject_missingness_mar_age():
    cohort = Cohort(build_frame(n=4000, n_practices=4, seed=8))
    out = inject_missingness(cohort, {"chol_hdl_ratio": 0.3},
                             mechanism="MAR_age", seed=2)
    frame = out.frame
    old = frame["age"] > frame["age"].median()
    assert (frame.loc[old, "chol_hdl_ratio"].isna().mean()
            > frame.loc[~old, "chol_hdl_ratio"].isna().mean())


def test_inject_missingness_never_touches_outcome():
    cohort = Cohort(build_frame(n=200, n_practices=3, seed=9))
    out = inject_missingness(cohort, {v: 0.5 for v in IMPUTABLE_FIELDS}, seed=3)
    assert out.frame["follow_up_years"].notna().all()
    assert out.frame["event"].notna().all()


def test_inject_missingness_rejects_unknown_variable():
    cohort = Cohort(build_frame(n=20, seed=10))
    with pytest.raises(ConfigError):
        inject_missingness(cohort, {"follow_up_years": 0.1})


def test_inject_misclassification_flip_rate():
    cohort = Cohort(build_frame(n=5000, n_practices=4, seed=11))
    out = inject_misclassification(cohort, 0.2, seed=4)
    flips = np.mean([
        (cohort.frame[f] != out.frame[f]).mean() for f in CONDITION_FLAGS])
    assert flips == pytest.approx(0.2, abs=0.02)
    with pytest.raises(ConfigError):
        inject_misclassification(cohort, 0.6)
