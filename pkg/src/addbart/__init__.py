"""Additivity assessment with Bayesian additive regression trees."""

from ._accel import backend
from .additive_models import (AdditiveConfig, fit_treatment_bart, fit_treatment_bart_binary,
                              fit_two_bart, fit_two_bart_binary, treatment_posterior,
                              treatment_posterior_binary)
from .data import (BINARY, CONTINUOUS, CovariateSplit, CutpointGrid, DataError, Dataset,
                   FoldAssignment, build_cutpoints, load_csv, make_folds, write_csv)
from .model_comparison import (ComparisonReport, CpoVector, compare_additivity, compute_cpo,
                               compute_lpml, compute_ospe, cpo_from_loglik, psbf_verdict, r_ospe)
from .sampler_continuous import (AdditiveFit, BartConfig, ModelFit, default_lambda, fit_bart,
                                 load_fit, predict)
from .sampler_logit import LatentState, draw_lambda, draw_truncated_normal, fit_logit_bart
from .sim_design import (SCENARIOS, DesignSolution, DesignTargets, MomentSet, Scenario,
                         StudyPlan, estimate_moments, generate_dataset, get_scenario,
                         run_replication_study, solve_binary, solve_continuous)
from .trees import (DecisionTree, SufficientStats, TreePrior, draw_leaf_values, evaluate,
                    leaf_log_marginal, mh_step, sample_tree_from_prior, sum_evaluate)

__version__ = "0.1.0"
