"""Latent-space attribute editing with Sinkhorn-divergence objectives."""

__version__ = "0.1.0"

from .attributes import AttributeModel, LatentAttributeClassifier, train_classifiers  # noqa: E402
from .bench import BenchmarkSpec, generate, misspecified_classifier  # noqa: E402
from .dataset import DataError, LatentDataset, load_lotd, save_lotd  # noqa: E402
from .editor import AffineEditor, edit, load_editor, save_editor  # noqa: E402
from .estimators import LatentEditor  # noqa: E402
from .evaluation import EvalReport, calibrate_d, ood_score, sweep  # noqa: E402
from .exact import exact_ot_assignment, exact_ot_permutation  # noqa: E402
from .sinkhorn import (  # noqa: E402
    SinkhornConfig,
    SinkhornResult,
    WeightedPointCloud,
    divergence_gradient,
    sinkhorn_divergence,
    sinkhorn_ot,
    squared_euclidean_cost,
)
from .trainer import TrainingConfig, lt_loss, lw_loss, train  # noqa: E402

__all__ = [
    "AffineEditor", "AttributeModel", "BenchmarkSpec", "DataError", "EvalReport",
    "LatentAttributeClassifier", "LatentDataset", "LatentEditor", "SinkhornConfig",
    "SinkhornResult", "TrainingConfig", "WeightedPointCloud", "calibrate_d",
    "divergence_gradient", "edit", "exact_ot_assignment", "exact_ot_permutation",
    "generate", "load_editor", "load_lotd", "lt_loss", "lw_loss", "misspecified_classifier",
    "ood_score", "save_editor", "save_lotd", "sinkhorn_divergence", "sinkhorn_ot",
    "squared_euclidean_cost", "sweep", "train", "train_classifiers",
]
