"""Permutation, rotation and rescaling symmetries of transformers, parameter matching and model fusion."""

__version__ = "0.1.0"

from .analysis import EquivalenceReport, LossCurve, equivalence_check, interpolate_losses, param_distance
from .fusion import FusionMethod, fuse, fuse_fisher, fuse_regmean, fuse_simple
from .matching import (
    MatchOptions,
    MatchReport,
    match_attention_head,
    match_ffn,
    match_model,
    match_rescaling,
    match_to_anchor,
)
from .model import (
    SyntheticDataset,
    TransformerConfig,
    TransformerModel,
    capture_activations,
    fd_gradient,
    forward,
    gen_synthetic,
    loss,
    random_model,
)
from .persistence import load_dataset, load_model, save_dataset, save_model, save_report
from .symmetry import SymmetryTransform, apply_model_symmetry, random_symmetry
