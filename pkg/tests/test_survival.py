import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from practivar import (Cohort, CoxPH, GeneratorConfig, RandomInterceptCox,
                       RandomSlopeCox, adjust_risk, bootstrap_risk_ci,
                       breslow_baseline, default_table, generate, predict_risk,
                       simulate_random_effect_draws)
from practivar.errors import BootstrapError, ContractError, FitError
from practivar.survival import _cox_ll, _cox_ll_grad_hess, _event_grid, _sort_survival

from conftest import build_frame


# ---------------------------------------------------------------------------
# Cox partial likelihood
# ---------------------------------------------------------------------------

def test_cox_closed_form_oracle():
    """Four subjects, one binary covariate, two events.

    The score 1 - z/(z+1) - z/(z+2) vanishes at z**2 = 2 for z = exp(beta),
    so beta = ln(2) / 2.
    """
    time = np.array([1.0, 2.0, 3.0, 4.0])
    event = np.array([True, True, False, False])
    x = np.array([[1.0], [0.0], [1.0], [0.0]])
    model = CoxPH().fit(x, time, event)
    expected = 0.5 * np.log(2.0)
    assert model.coef_[0] == pytest.approx(expected, abs=1e-8)


def test_cox_score_matches_finite_differences():
    rng = np.random.default_rng(0)
    n, p = 60, 3
    x = rng.normal(size=(n, p))
    time = rng.exponential(5, size=n)
    event = rng.random(n) < 0.5
    event[0] = True
    order, t, e = _sort_survival(time, event)
    xs = x[order]
    off = np.zeros(n)
    event_times, d, m = _event_grid(t, e)
    beta = rng.normal(scale=0.3, size=p)
    _, grad, _ = _cox_ll_grad_hess(beta, xs, off, t, e, event_times, d, m)
    eps = 1e-6
    for j in range(p):
        step = np.zeros(p)
        step[j] = eps
        fd = (_cox_ll(beta + step, xs, off, t, e, event_times, d, m)
              - _cox_ll(beta - step, xs, off, t, e, event_times, d, m)) / (2 * eps)
        assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_cox_offset_equivalence():
    """A known coefficient moved to the offset leaves the rest unchanged."""
    rng = np.random.default_rng(1)
    n = 200
    x = rng.normal(size=(n, 2))
    eta = 0.5 * x[:, 0] + 0.8 * x[:, 1]
    time = rng.exponential(np.exp(-eta) * 8)
    event = time < 10
    time = np.minimum(time, 10)
    full = CoxPH().fit(x, time, event)
    part = CoxPH().fit(x[:, :1], time, event, offset=full.coef_[1] * x[:, 1])
    assert part.coef_[0] == pytest.approx(full.coef_[0], abs=1e-4)


def test_cox_separation_detected():
    time = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    event = np.array([True, True, True, False, False, False])
    x = np.array([[1.0], [1.0], [1.0], [0.0], [0.0], [0.0]])
    with pytest.raises(FitError, match="monotone"):
        CoxPH().fit(x, time, event)


def test_cox_requires_events():
    with pytest.raises(ContractError):
        CoxPH().fit(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]),
                    np.array([False, False, False]))


def test_breslow_baseline_null_model_matches_nelson_aalen():
    from practivar import nelson_aalen
    rng = np.random.default_rng(2)
    time = rng.exponential(5, size=100)
    event = rng.random(100) < 0.6
    event[:2] = True
    H_breslow = breslow_baseline(time, event, np.zeros(100))
    H_na = nelson_aalen(time, event)
    grid = np.linspace(0, time.max(), 25)
    assert np.allclose(H_breslow(grid), H_na(grid), atol=1e-12)


# ---------------------------------------------------------------------------
# risk adjustment
# ---------------------------------------------------------------------------

def test_adjust_risk_oracle_table():
    # frozen from hand computation of 1 - 0.9**z at one decimal in percent
    expected = {0.6: 6.1, 0.7: 7.1, 0.9: 9.0, 1.0: 10.0, 1.1: 10.9,
                1.6: 15.5, 1.7: 16.4}
    for z, pct in expected.items():
        assert round(100 * adjust_risk(0.10, z), 1) == pct


def test_predict_adjust_identity():
    """predict_risk(lp, b, S0) equals adjust_risk of the b-free risk."""
    rng = np.random.default_rng(3)
    for _ in range(50):
        lp = rng.normal()
        b = rng.normal(scale=0.5)
        s0 = rng.uniform(0.5, 0.999)
        direct = predict_risk(lp, b, s0)
        adjusted = adjust_risk(predict_risk(lp, 0.0, s0), np.exp(b))
        assert direct == pytest.approx(adjusted, abs=1e-12)


@given(st.floats(0.0, 0.99), st.floats(0.01, 5.0), st.floats(0.01, 5.0))
@settings(max_examples=200, deadline=None)
def test_adjust_risk_monotone_in_frailty(base, z1, z2):
    lo, hi = sorted((z1, z2))
    assert adjust_risk(base, lo) <= adjust_risk(base, hi) + 1e-15
    assert 0 <= adjust_risk(base, z1) < 1


def test_adjust_risk_contracts():
    with pytest.raises(ContractError):
        adjust_risk(1.0, 1.0)
    with pytest.raises(ContractError):
        adjust_risk(0.5, 0.0)
    with pytest.raises(ContractError):
        predict_risk(0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# random-intercept model
# ---------------------------------------------------------------------------

def _grouped_data(n_practices=20, per=120, intercept_sd=0.3, slope_sd=0.0, seed=0):
    cfg = GeneratorConfig(n_practices=n_practices, patients_per_practice=float(per),
                          intercept_sd=intercept_sd, slope_sd=slope_sd, seed=seed)
    cohort, truth = generate(cfg)
    frame = cohort.frame
    lp = default_table().linear_predictor(frame)
    return (frame["follow_up_years"].to_numpy(), frame["event"].to_numpy(),
            lp, frame["practice_id"].to_numpy(), truth)


def test_random_intercept_recovers_heterogeneity():
    t, e, lp, g, truth = _grouped_data(n_practices=40, per=200, seed=4)
    model = RandomInterceptCox().fit(t, e, lp, g)
    realized = truth.b.std()
    assert model.sigma_b_ == pytest.approx(realized, rel=0.35)
    assert np.corrcoef(model.b_.to_numpy(), truth.b)[0, 1] > 0.7
    assert not model.boundary_


def test_random_intercept_null_hits_floor():
    t, e, lp, g, _ = _grouped_data(n_practices=20, per=150, intercept_sd=0.0, seed=5)
    model = RandomInterceptCox().fit(t, e, lp, g)
    assert model.sigma_b2_ < 0.005
    assert model.boundary_


def test_random_intercept_b_centered_and_ordered():
    """More events than expected pulls a practice's b upward."""
    t, e, lp, g, truth = _grouped_data(n_practices=10, per=150, seed=6)
    model = RandomInterceptCox().fit(t, e, lp, g)
    assert abs(model.b_.mean()) < 0.25
    top, bottom = truth.b.argmax(), truth.b.argmin()
    assert model.b_.iloc[top] > model.b_.iloc[bottom]


def test_random_intercept_variance_extremes():
    """At a tiny fixed variance the b collapse toward zero; at a large one
    they spread out; shrinkage is monotone in sigma^2."""
    from practivar.survival import _intercept_inner, _prepare_grouped
    t, e, lp, g, _ = _grouped_data(n_practices=8, per=100, seed=7)
    data = _prepare_grouped(t, e, lp, g)
    b_small, _, _ = _intercept_inner(data, 1e-6)
    b_large, _, _ = _intercept_inner(data, 4.0)
    assert np.abs(b_small).max() < 1e-3
    assert np.abs(b_large).std() > np.abs(b_small).std()


def test_random_intercept_requires_two_practices():
    t = np.array([1.0, 2.0, 3.0])
    e = np.array([True, False, True])
    with pytest.raises(ContractError, match="2 practices"):
        RandomInterceptCox().fit(t, e, np.zeros(3), np.array(["a", "a", "a"]))


def test_frailty_frame_columns():
    t, e, lp, g, _ = _grouped_data(n_practices=6, per=80, seed=8)
    model = RandomInterceptCox().fit(t, e, lp, g)
    frame = model.frailty_frame()
    assert list(frame.columns) == ["practice_id", "b", "exp_b", "shrinkage_se"]
    assert np.allclose(frame["exp_b"], np.exp(frame["b"]))
    assert (frame["shrinkage_se"] > 0).all()


# ---------------------------------------------------------------------------
# random-slope model
# ---------------------------------------------------------------------------

def test_random_slope_gamma_near_one_under_null():
    t, e, lp, g, _ = _grouped_data(n_practices=30, per=150, intercept_sd=0.2, seed=9)
    model = RandomSlopeCox().fit(t, e, lp, g)
    assert model.sigma_u2_ < 0.01
    assert model.gamma_ == pytest.approx(1.0, abs=0.15)


def test_random_slope_recovers_slope_variance():
    t, e, lp, g, truth = _grouped_data(n_practices=60, per=200, intercept_sd=0.2,
                                       slope_sd=np.sqrt(0.03), seed=10)
    model = RandomSlopeCox().fit(t, e, lp, g)
    assert model.sigma_u2_ == pytest.approx(0.03, rel=0.5)


def test_random_slope_subsampling_averages():
    t, e, lp, g, _ = _grouped_data(n_practices=20, per=100, intercept_sd=0.25, seed=11)
    model = RandomSlopeCox(subsample_frac=0.5, repeats=3, seed=1).fit(t, e, lp, g)
    assert len(model.subsample_estimates_) == 3
    assert model.sigma_b2_ == pytest.approx(
        model.subsample_estimates_["sigma_b2"].mean(), abs=1e-12)
    # deterministic in the seed
    again = RandomSlopeCox(subsample_frac=0.5, repeats=3, seed=1).fit(t, e, lp, g)
    assert again.sigma_u2_ == model.sigma_u2_


# ---------------------------------------------------------------------------
# Monte Carlo propagation and bootstrap
# ---------------------------------------------------------------------------

def test_simulate_effects_analytic_percentiles():
    summary = simulate_random_effect_draws(np.sqrt(0.03), 0.0, 0.10,
                                           n_draws=2_000_000, seed=0)
    lo = 1 - 0.9 ** np.exp(-1.959964 * np.sqrt(0.03))
    hi = 1 - 0.9 ** np.exp(+1.959964 * np.sqrt(0.03))
    assert summary.percentiles[2.5] == pytest.approx(lo, abs=5e-4)
    assert summary.percentiles[97.5] == pytest.approx(hi, abs=5e-4)
    assert summary.percentiles[50] == pytest.approx(0.10, abs=5e-4)


def test_simulate_effects_zero_variance_degenerate():
    summary = simulate_random_effect_draws(0.0, 0.0, 0.10, n_draws=1000, seed=0)
    for v in summary.percentiles.values():
        assert v == pytest.approx(0.10, abs=1e-12)


def test_bootstrap_ci_covers_point_estimate():
    frame = build_frame(n=120, n_practices=8, seed=12)
    cohort = Cohort(frame)
    stat = lambda c: c.frame["event"].mean()
    lo, hi = bootstrap_risk_ci(cohort, stat, n_boot=200, seed=0)
    assert lo <= stat(cohort) <= hi
    assert lo < hi


def test_bootstrap_deterministic_and_failure_policy():
    frame = build_frame(n=60, n_practices=6, seed=13)
    cohort = Cohort(frame)
    stat = lambda c: c.frame["age"].mean()
    a = bootstrap_risk_ci(cohort, stat, n_boot=100, seed=4)
    b = bootstrap_risk_ci(cohort, stat, n_boot=100, seed=4)
    assert a == b

    def flaky(c):
        raise ValueError("boom")

    with pytest.raises(BootstrapError):
        bootstrap_risk_ci(cohort, flaky, n_boot=50, seed=0)
