"""Object-centric auditory scene analysis toolkit.

Library + CLI covering a synthetic spatial-scene generator, a learnable
dynamic-window STFT front-end, an object-splitting multi-task model
(separation, dereverberation, event detection, localisation) with a
two-stage refinement pass, the training losses, and the evaluation metrics.
"""

from .autodiff import GradGraph, Tensor, finite_difference_check
from .config import RunConfig, build_config, load_config
from .frontend import DynamicStftConfig, WindowParams, dynamic_stft, inverse_stft
from .metrics import MetricsReport, seld_metrics, seld_score
from .model import AsaEstimate, AsaModel, CoiState, ModelConfig
from .objectives import LossWeights, TrainingTargets, joint_loss, sa_sdr, si_sdr
from .scenes import ArrayGeometry, SceneConfig, SpatialScene, synthesize_scene
from .training import Trainer, evaluate_model, model_from_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry", "AsaEstimate", "AsaModel", "CoiState", "DynamicStftConfig",
    "GradGraph", "LossWeights", "MetricsReport", "ModelConfig", "RunConfig",
    "SceneConfig", "SpatialScene", "Tensor", "Trainer", "TrainingTargets",
    "WindowParams", "build_config", "dynamic_stft", "evaluate_model",
    "finite_difference_check", "inverse_stft", "joint_loss", "load_config",
    "model_from_checkpoint", "sa_sdr", "seld_metrics", "seld_score", "si_sdr",
    "synthesize_scene", "__version__",
]
