"""Dataset generators, evaluation losses, experiment pipelines and the CLI."""

from .datasets import (
    DicyclePolicy,
    DicycleSplit,
    generate_dicycle_dataset,
    generate_hierarchy_dataset,
    generate_multilabel_dataset,
    planted_multilabel,
    random_taxonomy,
)
from .experiments import ExperimentConfig, run_experiment
from .losses import eval_policy_cosine, hierarchical_loss, ranking_loss, set_losses

__all__ = [
    "DicyclePolicy",
    "DicycleSplit",
    "ExperimentConfig",
    "eval_policy_cosine",
    "generate_dicycle_dataset",
    "generate_hierarchy_dataset",
    "generate_multilabel_dataset",
    "hierarchical_loss",
    "planted_multilabel",
    "random_taxonomy",
    "ranking_loss",
    "run_experiment",
    "set_losses",
]
