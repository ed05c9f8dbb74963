"""Diversity Control (DiCo) for multi-agent actor-critic learning."""

from .diversity import (
    DiversityEstimator,
    GaussianAction,
    max_snd_box,
    pairwise_distance,
    snd,
    snd_at_observation,
    soft_update,
    w2_gaussian_diag,
)
from .policy import ConstraintMode, DiCoPolicySet, effective_target

__version__ = "0.1.0"
