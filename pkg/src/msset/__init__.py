"""Score test for small-study effects in multivariate meta-analysis."""

from .estimators import BeggTest, EggerTest, MSSET, SNDTransformer, check_dataset
from .heterogeneity import dl_tau2, smoothed_logor_variance, transform_snd_precision
from .io import batch_concordance, funnel_export, parse_dataset, parse_experiment_config, write_dataset
from .model import MetaDataset, ModelParams, OutcomeMeasurement, StudyRecord, generate_dataset, validate_dataset
from .score_test import MssetError, MssetResult, information_aa_block, msset_statistic, run_msset
from .selection import ExperimentConfig, ScenarioSpec, run_experiment
from .univariate import begg_test, bonferroni_combine, egger_test

__version__ = "0.1.0"

__all__ = [
    "BeggTest", "EggerTest", "MSSET", "SNDTransformer", "check_dataset",
    "dl_tau2", "smoothed_logor_variance", "transform_snd_precision",
    "batch_concordance", "funnel_export", "parse_dataset", "parse_experiment_config", "write_dataset",
    "MetaDataset", "ModelParams", "OutcomeMeasurement", "StudyRecord", "generate_dataset", "validate_dataset",
    "MssetError", "MssetResult", "information_aa_block", "msset_statistic", "run_msset",
    "ExperimentConfig", "ScenarioSpec", "run_experiment",
    "begg_test", "bonferroni_combine", "egger_test",
]
