"""Policy learning directly from segment preferences with a contrastive objective.

Toy manipulation environments, oracle and vision-language teachers, a numpy
autodiff stack for the Gaussian policy, and evaluation utilities.
"""

from prefpolicy.data import EpisodeDataset, PreferenceDataset, PreferencePair, Segment, Trajectory, sample_pairs
from prefpolicy.envs import make_env, scripted_collect
from prefpolicy.evaluation import evaluate_policy, windowed_metric
from prefpolicy.neural import PolicyParams
from prefpolicy.teachers import TeacherConfig, label_pairs
from prefpolicy.training import CplConfig, train

__version__ = "0.1.0"

__all__ = [
    "CplConfig",
    "EpisodeDataset",
    "PolicyParams",
    "PreferenceDataset",
    "PreferencePair",
    "Segment",
    "TeacherConfig",
    "Trajectory",
    "evaluate_policy",
    "label_pairs",
    "make_env",
    "sample_pairs",
    "scripted_collect",
    "train",
    "windowed_metric",
]
