import math

import numpy as np
import pytest

from practivar import (default_table, linear_predictor, load_coefficients,
                       risk_from_lp, save_coefficients)
from practivar.errors import ContractError, SchemaError
from practivar.riskmodel import loads_coefficients


def _complete_row(sex="female"):
    row = {"sex": sex, "age": 55.0, "sbp": 130.0, "sbp_sd": 9.0, "bmi": 27.0,
           "chol_hdl_ratio": 4.2, "smoking": 2, "ethnicity": 1, "townsend": 3}
    from practivar.cohort import CONDITION_FLAGS
    for flag in CONDITION_FLAGS:
        row[flag] = False
    return row


def test_scalar_and_frame_paths_agree(coef_table, tiny_cohort):
    frame = tiny_cohort.frame
    vec = coef_table.linear_predictor(frame)
    for i in range(len(frame)):
        row = frame.iloc[i].to_dict()
        assert vec[i] == pytest.approx(
            coef_table.linear_predictor(row), abs=1e-12)


def test_lp_additivity(coef_table):
    """Adding a condition flag shifts the lp by exactly its coefficient."""
    base = _complete_row("male")
    with_af = dict(base, atrial_fibrillation=True)
    lp0 = coef_table.linear_predictor(base)
    lp1 = coef_table.linear_predictor(with_af)
    coef = coef_table.models["male"].categorical["atrial_fibrillation"]["1"]
    assert lp1 - lp0 == pytest.approx(coef, abs=1e-12)


def test_risk_monotone_in_lp(coef_table):
    lps = np.linspace(-2, 3, 50)
    risks = risk_from_lp(lps, coef_table, "female")
    assert np.all(np.diff(risks) > 0)
    assert np.all((risks > 0) & (risks < 1))


def test_missing_value_raises_named_error(coef_table):
    row = _complete_row()
    row["sbp"] = float("nan")
    with pytest.raises(ContractError, match="sbp"):
        coef_table.linear_predictor(row)


def test_serialize_round_trip_bit_for_bit(tmp_path, coef_table, tiny_cohort):
    path = tmp_path / "coefs.csv"
    save_coefficients(coef_table, path)
    loaded = load_coefficients(path)
    lp0 = coef_table.linear_predictor(tiny_cohort.frame)
    lp1 = loaded.linear_predictor(tiny_cohort.frame)
    assert np.array_equal(lp0, lp1)
    for sex in coef_table.sexes():
        assert loaded.baseline_survival(sex) == coef_table.baseline_survival(sex)


def test_unknown_transform_rejected():
    text = ("sex,kind,variable,transform,centering,level,coefficient\n"
            "female,baseline,,,,,0.98\n"
            "female,continuous,age,cube_root,47,,0.01\n")
    with pytest.raises(SchemaError, match="transform"):
        loads_coefficients(text)


def test_duplicate_continuous_term_rejected():
    text = ("sex,kind,variable,transform,centering,level,coefficient\n"
            "female,baseline,,,,,0.98\n"
            "female,continuous,age,identity,47,,0.01\n"
            "female,continuous,age,identity,47,,0.02\n")
    with pytest.raises(SchemaError):
        loads_coefficients(text)


def test_interaction_contributes(coef_table):
    base = _complete_row("female")
    base["type2_diabetes"] = True
    lp_55 = coef_table.linear_predictor(base)
    lp_65 = coef_table.linear_predictor(dict(base, age=65.0))
    no_t2d_55 = coef_table.linear_predictor(dict(base, type2_diabetes=False))
    no_t2d_65 = coef_table.linear_predictor(dict(base, type2_diabetes=False, age=65.0))
    # interaction makes the diabetes effect age-dependent
    assert (lp_65 - lp_55) != pytest.approx(no_t2d_65 - no_t2d_55, abs=1e-9)


def test_risk_from_lp_definition(coef_table):
    s0 = coef_table.baseline_survival("male")
    lp = 0.7
    assert risk_from_lp(lp, coef_table, "male") == pytest.approx(
        1 - s0 ** math.exp(lp), abs=1e-15)


def test_linear_predictor_function_matches_method(coef_table):
    row = _complete_row("male")
    assert linear_predictor(row, coef_table) == pytest.approx(
        coef_table.linear_predictor(row), abs=0)
