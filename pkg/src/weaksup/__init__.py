"""Weakly supervised multi-class classification via a semidefinite
relaxation of the soft-max loss with intercept, solved by a two-level
entropic proximal method with gap certificates, then rounded spectrally
and refined with constrained EM."""

from .inner import InnerConfig, InnerResult, OmegaState, solve_inner
from .kernel import KernelSpec, ReweightedGram, compute_gram, reweight
from .outer import ElliptopeState, OuterConfig, OuterResult, solve_outer, solve_path
from .problem import (Bag, LabelSpace, ReductionMap, WeakDataset,
                      ZConstraintSet, build_reduction, expand_reduced,
                      make_weights, validate_dataset)
from .rounding import Classifier, EMConfig, em_refine, predict, spectral_round
from .softmax_core import INFEASIBLE, g_closed, instance_loss

__all__ = [
    "Bag", "Classifier", "ElliptopeState", "EMConfig", "INFEASIBLE",
    "InnerConfig", "InnerResult", "KernelSpec", "LabelSpace", "OmegaState",
    "OuterConfig", "OuterResult", "ReductionMap", "ReweightedGram",
    "WeakDataset", "ZConstraintSet", "build_reduction", "compute_gram",
    "em_refine", "expand_reduced", "g_closed", "instance_loss",
    "make_weights", "predict", "reweight", "solve_inner", "solve_outer",
    "solve_path", "spectral_round", "validate_dataset",
]

__version__ = "0.1.0"
