"""Trajectory records, synthetic behavior data, selection, merging and persistence."""

from .generation import (
    ConstantPolicy, NoisyPolicy, PacingPolicy, default_palette, derive_seed, generate_behavior_dataset,
    rollout_policy,
)
from .records import STATE_DIM, Step, Trajectory, TrainingSet, featurize
from .selection import SelectionWarning, check_nesting, merge, select_top, selection_thresholds
from .storage import export_csv, identity_mapping, import_external, load, load_mapping, save

__all__ = [
    "STATE_DIM", "Step", "Trajectory", "TrainingSet", "featurize",
    "ConstantPolicy", "PacingPolicy", "NoisyPolicy", "default_palette", "derive_seed",
    "generate_behavior_dataset", "rollout_policy",
    "select_top", "selection_thresholds", "merge", "check_nesting", "SelectionWarning",
    "save", "load", "export_csv", "import_external", "identity_mapping", "load_mapping",
]
