# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

# Makes top-level imports work and documents public API
from .attacks import (
    AttackBudget,
    AttackPlan,
    AttackResult,
    PatchSpec,
    adaptive_loss,
    adaptive_patch_attack,
    adaptive_pgd_attack,
    apply_patch,
    margin_loss,
    patch_attack,
    pgd_attack,
    project_linf,
)
from .cka import SimilarityHeatmap, cka, gram, heatmap, hsic, redundancy_score
from .dataset import Dataset, DatasetSpec, DatasetStore, Preprocessor, generate
from .detector import (
    DetectorState,
    anomaly_score,
    calibrate,
    calibrate_threshold,
    compute_centroids,
    defended_predict,
    soft_reject_score,
)
from .errors import (
    EXIT_RUNTIME_ERROR,
    EXIT_SUCCESS,
    EXIT_USAGE_ERROR,
    CalibrationError,
    CheckpointError,
    ConfigError,
    DatasetError,
    DegenerateInputError,
    FuseGuardError,
    GradientError,
    ShapeError,
    TrainingDivergedError,
)
from .harness import AdvTrainConfig, SecurityCurve, adversarial_train, emit, evaluate_curve
from .model import Architecture, FusionNet, TrainConfig, forward, predict, project, train
from .tensor import Tape, Tensor

__all__ = [
    "AdvTrainConfig",
    "Architecture",
    "AttackBudget",
    "AttackPlan",
    "AttackResult",
    "CalibrationError",
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "DatasetError",
    "DatasetSpec",
    "DatasetStore",
    "DegenerateInputError",
    "DetectorState",
    "EXIT_RUNTIME_ERROR",
    "EXIT_SUCCESS",
    "EXIT_USAGE_ERROR",
    "FuseGuardError",
    "FusionNet",
    "GradientError",
    "PatchSpec",
    "Preprocessor",
    "SecurityCurve",
    "ShapeError",
    "SimilarityHeatmap",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "adaptive_loss",
    "adaptive_patch_attack",
    "adaptive_pgd_attack",
    "adversarial_train",
    "anomaly_score",
    "apply_patch",
    "calibrate",
    "calibrate_threshold",
    "cka",
    "compute_centroids",
    "defended_predict",
    "emit",
    "evaluate_curve",
    "forward",
    "generate",
    "gram",
    "heatmap",
    "hsic",
    "margin_loss",
    "patch_attack",
    "pgd_attack",
    "predict",
    "project",
    "project_linf",
    "redundancy_score",
    "soft_reject_score",
    "train",
]
