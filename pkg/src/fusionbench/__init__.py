"""Multimodal fusion building blocks with a performance / complexity / robustness
evaluation harness, exercised on seeded synthetic datasets."""

from .encoders import EncoderSpec, build_encoder, encode, init_params
from .evalmetrics import (ComplexityReport, PerformanceReport, RobustnessCurve,
                          RobustnessScores, aggregate_complexity, aggregate_minmax,
                          compute_performance, effective_robustness, relative_robustness)
from .fusion import FUSION_TAGS, ScalabilityError, build_fusion
from .perturb import PerturbationSpec, build_noisy_grid
from .synthdata import (DatasetSplits, ModalitySpec, Task, make_interaction, make_redundant,
                        make_temporal)
from .training import (BlendWeights, MCTNBundle, MFMBundle, ModelBundle, TrainConfig, test,
                       train_gradblend, train_mctn, train_mfm, train_supervised)

__all__ = [
    "EncoderSpec", "build_encoder", "encode", "init_params",
    "ComplexityReport", "PerformanceReport", "RobustnessCurve", "RobustnessScores",
    "aggregate_complexity", "aggregate_minmax", "compute_performance",
    "effective_robustness", "relative_robustness",
    "FUSION_TAGS", "ScalabilityError", "build_fusion",
    "PerturbationSpec", "build_noisy_grid",
    "DatasetSplits", "ModalitySpec", "Task", "make_interaction", "make_redundant",
    "make_temporal",
    "BlendWeights", "MCTNBundle", "MFMBundle", "ModelBundle", "TrainConfig", "test",
    "train_gradblend", "train_mctn", "train_mfm", "train_supervised",
]
