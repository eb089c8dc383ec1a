"""Vertical federated learning with split models, a clean-label backdoor adversary and server-side defenses."""

__version__ = "0.3.1"

from .adversary import (Adversary, Coalition, SurrogateModel, infer_labels, optimize_poison, select_classes,  # noqa: E402
                        train_surrogate, vote_labels)
from .config import ExperimentConfig, load_config  # noqa: E402
from .data import (AuxiliarySet, Dataset, SplitPlan, generate_blobs, generate_grid_images, load_csv,  # noqa: E402
                   sample_auxiliary, vertical_split, write_csv)
from .defense import EmbeddingDefense, add_dp_noise, filter_class_anomalies, iforest_fit, iforest_score  # noqa: E402
from .errors import ConfigError, DataError, NumericalError, ProtocolError, ShapeError, VFLSimError  # noqa: E402
from .experiment import ExperimentReport, run_baseline, run_experiment, run_sweep  # noqa: E402
from .nn import DenseNet, backward, cross_entropy_with_grad, forward, input_saliency, sgd_step  # noqa: E402
from .protocol import (Participant, Server, concat_embeddings, evaluate_asr, evaluate_main_task,  # noqa: E402
                       run_training_round, screen_round)
from .sim_types import UNRECOGNIZED, AttackSchedule, ClassPair, DefenseConfig, LabelEstimates, Role  # noqa: E402
from .trigger import TriggerSpec, apply_trigger, plan_trigger_window, split_trigger  # noqa: E402

__all__ = [
    "Adversary", "AttackSchedule", "AuxiliarySet", "ClassPair", "Coalition", "ConfigError", "DataError",
    "Dataset", "DefenseConfig", "DenseNet", "EmbeddingDefense", "ExperimentConfig", "ExperimentReport",
    "LabelEstimates", "NumericalError", "Participant", "ProtocolError", "Role", "Server", "ShapeError",
    "SplitPlan", "SurrogateModel", "TriggerSpec", "UNRECOGNIZED", "VFLSimError",
    "add_dp_noise", "apply_trigger", "backward", "concat_embeddings", "cross_entropy_with_grad",
    "evaluate_asr", "evaluate_main_task", "filter_class_anomalies", "forward", "generate_blobs",
    "generate_grid_images", "iforest_fit", "iforest_score", "infer_labels", "input_saliency", "load_config",
    "load_csv", "optimize_poison", "plan_trigger_window", "run_baseline", "run_experiment", "run_sweep",
    "run_training_round", "sample_auxiliary", "screen_round", "select_classes", "sgd_step", "split_trigger",
    "train_surrogate", "vertical_split", "vote_labels", "write_csv",
]
