"""practivar: between-practice data-quality stability metrics and Cox
frailty models for multi-practice cohorts."""

__version__ = "0.1.0"

from .cohort import (Cohort, PatientRecord, apply_eligibility, load_cohort,
                     resolve_censoring, save_cohort)
from .imputation import CompletedCohorts, StepFunction, impute, nelson_aalen, pool
from .riskmodel import (CoefficientTable, default_table, linear_predictor,
                        load_coefficients, risk_from_lp, save_coefficients)
from .stability import (DiscreteDistribution, EmbeddingResult, StabilityReport,
                        compute_spo_gpd, embed_sources, estimate_distribution, jsd,
                        missingness_stability, multivariate_stability,
                        pairwise_distance, variable_stability)
from .survival import (CoxPH, RandomInterceptCox, RandomSlopeCox, adjust_risk,
                       bootstrap_risk_ci, breslow_baseline, predict_risk,
                       simulate_random_effect_draws)
from .synthgen import (FactorSpec, GeneratorConfig, GroundTruth, generate,
                       inject_misclassification, inject_missingness)
from .analysis import (QuintileAssignment, frailty_quintiles, pearson_corr_ci,
                       quintile_characteristics, risk_ranges_table,
                       stability_frailty_table)

__all__ = [name for name in dir() if not name.startswith("_")]
