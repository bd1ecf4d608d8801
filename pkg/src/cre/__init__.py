"""Causal rule ensembles: interpretable discovery and inference of heterogeneous treatment effects."""
__version__ = "0.1.0"

from .data import Condition, Dataset, Direction, Rule, RuleMatrix, build_rule_matrix, load_dataset, split_sample
from .inference import InferenceResult, confidence_intervals, estimate_beta, fit_inference, subgroup_effect, wald_test
from .pipeline import DiscoveryConfig, InferenceConfig, discover, estimate
from .propensity import PropensityModel, fit_logistic
from .pseudo import Method, PseudoOutcomes
from .selection import SelectionParams, lasso_path, stability_select
from .sensitivity import SensitivityConfig, extremize_fraction, sensitivity_intervals
from .simulation import DgpSpec, generate, run_discovery_experiment, run_estimation_experiment
from .trees import EnsembleParams, extract_rules, fit_gradient_boosting, fit_random_forest

__all__ = [
    "Condition", "Dataset", "Direction", "Rule", "RuleMatrix", "build_rule_matrix", "load_dataset", "split_sample",
    "InferenceResult", "confidence_intervals", "estimate_beta", "fit_inference", "subgroup_effect", "wald_test",
    "DiscoveryConfig", "InferenceConfig", "discover", "estimate", "PropensityModel", "fit_logistic",
    "Method", "PseudoOutcomes", "SelectionParams", "lasso_path", "stability_select",
    "SensitivityConfig", "extremize_fraction", "sensitivity_intervals",
    "DgpSpec", "generate", "run_discovery_experiment", "run_estimation_experiment",
    "EnsembleParams", "extract_rules", "fit_gradient_boosting", "fit_random_forest",
]
