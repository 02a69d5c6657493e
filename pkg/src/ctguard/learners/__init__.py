from .tree import DecisionTree, DimensionMismatch, EmptyTrainingSet, LearnerError, fit_tree
from .forest import RandomForest, fit_forest
from .svm import (
    KernelKind,
    NonConvergence,
    SingleClassInput,
    SvmModel,
    fit_svm,
    kernel_matrix,
    resolve_gamma,
)
from .io import (
    ModelFormatError,
    deserialize_model,
    load_model,
    load_sidecar,
    save_model,
    serialize_model,
)

__all__ = [
    "DecisionTree",
    "DimensionMismatch",
    "EmptyTrainingSet",
    "KernelKind",
    "LearnerError",
    "ModelFormatError",
    "NonConvergence",
    "RandomForest",
    "SingleClassInput",
    "SvmModel",
    "deserialize_model",
    "fit_forest",
    "fit_svm",
    "fit_tree",
    "kernel_matrix",
    "load_model",
    "load_sidecar",
    "resolve_gamma",
    "save_model",
    "serialize_model",
]
