"""Contrastive alignment for semi-supervised domain adaptation.

A small training engine built on a self-contained float64 autodiff tape:
class-centroid alignment across domains, instance-level alignment between
augmented views, and a harness that sweeps the usual ablation axes over
synthetic domain-shift datasets.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check, stop_gradient  # noqa: E402
from .centroids import (  # noqa: E402
    CentroidBank,
    batch_centroids,
    ema_update,
    pseudo_labels_argmax,
    pseudo_labels_kmeans,
)
from .data import (  # noqa: E402
    AugmentationPolicy,
    DomainPair,
    MinibatchSampler,
    SSDASplit,
    augment,
    corrupt_target_labels,
    generate_blob_shift_domains,
    generate_two_moons_domains,
    make_ssda_split,
)
from .errors import (  # noqa: E402
    ConfigError,
    ContractError,
    DegenerateVectorError,
    DimensionError,
    DivergedRunError,
    EmptyAlignmentError,
    StrategyUnavailableError,
)
from .harness import (  # noqa: E402
    ExperimentConfig,
    RunReport,
    gradcheck_command,
    load_checkpoint,
    run_ablation_grid,
    run_experiment,
    save_checkpoint,
)
from .losses import (  # noqa: E402
    Hyperparams,
    instance_contrastive_loss,
    inter_domain_contrastive_loss,
    supervised_loss,
    total_loss,
)
from .model import Model, ModelConfig, evaluate, init_model, predict  # noqa: E402
from .trainer import TrainConfig, TrainHistory, train  # noqa: E402

__all__ = [
    "AugmentationPolicy",
    "CentroidBank",
    "ConfigError",
    "ContractError",
    "DegenerateVectorError",
    "DimensionError",
    "DivergedRunError",
    "DomainPair",
    "EmptyAlignmentError",
    "ExperimentConfig",
    "Hyperparams",
    "MinibatchSampler",
    "Model",
    "ModelConfig",
    "RunReport",
    "SSDASplit",
    "StrategyUnavailableError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "augment",
    "backward",
    "batch_centroids",
    "corrupt_target_labels",
    "ema_update",
    "evaluate",
    "generate_blob_shift_domains",
    "generate_two_moons_domains",
    "grad_check",
    "gradcheck_command",
    "init_model",
    "instance_contrastive_loss",
    "inter_domain_contrastive_loss",
    "load_checkpoint",
    "make_ssda_split",
    "predict",
    "pseudo_labels_argmax",
    "pseudo_labels_kmeans",
    "run_ablation_grid",
    "run_experiment",
    "save_checkpoint",
    "stop_gradient",
    "supervised_loss",
    "total_loss",
    "train",
]
