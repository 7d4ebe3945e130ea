"""
classfool: class-targeted universal adversarial perturbations, explanation
perturbations and activation-driven refinement for a small numpy classifier.
"""

__version__ = "0.1.0"

from .analysis import DistanceTable, FoolingReport, HopTrace, distance_table, hop_trace, leakage, report
from .attack import (
    FoolConfig,
    MomentState,
    NormBound,
    Perturbation,
    filter_nonsource,
    fooling_ratio,
    perturb_and_clip,
    project,
    run_fool_attack,
    step1_attack,
    two_step_attack,
)
from .errors import (
    ClassfoolError,
    ConfigError,
    CountMismatchError,
    FormatError,
    HeaderError,
    InputError,
    MagicError,
    NumericError,
    TrainingError,
    TruncatedError,
    VersionError,
)
from .explain import ExplainConfig, GaussianSampler, InpaintSpec, gaussian_inputs, run_explain
from .nn import (
    Classifier,
    LabeledDataset,
    TrainConfig,
    cross_entropy,
    forward,
    input_gradient,
    input_gradients,
    predict,
    reference_architecture,
    train,
)
from .refine import otsu_threshold, refine_perturbation

__all__ = [name for name in dir() if not name.startswith("_")]
