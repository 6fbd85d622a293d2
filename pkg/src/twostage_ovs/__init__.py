"""Two-stage optimization via simulation with global and local kriging metamodels."""

from .algorithm import (AlgoConfig, RunRecord, TrueObjective, bootstrap_variance,
                        evaluate_true_objective, fit_global, gap_adjusted_saa, run_algorithm1,
                        sampling_distribution)
from .baselines import DlhGpsConfig, RandomSaaConfig, run_dlh_gps, run_random_saa
from .design import RngStream, categorical_sample, make_rng, maximin_lhd, sample_scenarios
from .errors import *  # noqa: F401,F403
from .experiment import ExperimentConfig, compute_rdeltaG, compute_rE, run_experiment
from .kriging import (Correlation, KrigingModel, SKModel, correlation_matrix, fit_kriging, fit_sk,
                      kriging_predict, kriging_sample_paths, sk_predict)
from .problem import BudgetMeter, TwoStageProblem, make_problem, metered_response
from .problems import (ExtendedSupplyChainProblem, LinearToyProblem, SupplyChainProblem,
                       brute_force_second_stage, simulate_supply_chain)
from .second_stage import (SiteState, estimate_gap, ei_argmax, expected_improvement,
                           solve_second_stage, stopping_satisfied)

__version__ = "0.1.0"
